#pragma once

#include <string>

#include <json.hpp>

namespace deskvqa {

/// Stable pretty-printed form used for every persisted document. Invalid
/// UTF-8 in user text is replaced rather than rejected.
template <class Json>
std::string dump_document(const Json& doc) {
  return doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

template <class Json>
std::string dump_compact(const Json& doc) {
  return doc.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace deskvqa
