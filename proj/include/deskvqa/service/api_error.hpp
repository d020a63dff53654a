#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

#include "deskvqa/util/error.hpp"

namespace deskvqa::service {

/// Every code the API can return. The front-end maps these to inline errors.
namespace code {
inline constexpr std::string_view missing_part = "MISSING_PART";
inline constexpr std::string_view payload_too_large = "PAYLOAD_TOO_LARGE";
inline constexpr std::string_view validation_failed = "VALIDATION_FAILED";
inline constexpr std::string_view invalid_request = "INVALID_REQUEST";
inline constexpr std::string_view model_not_selected = "MODEL_NOT_SELECTED";
inline constexpr std::string_view dataset_not_found = "DATASET_NOT_FOUND";
inline constexpr std::string_view job_already_running = "JOB_ALREADY_RUNNING";
inline constexpr std::string_view job_not_found = "JOB_NOT_FOUND";
inline constexpr std::string_view sample_unavailable = "SAMPLE_UNAVAILABLE";
inline constexpr std::string_view model_not_ready = "MODEL_NOT_READY";
inline constexpr std::string_view image_invalid = "IMAGE_INVALID";
inline constexpr std::string_view empty_question = "EMPTY_QUESTION";
inline constexpr std::string_view invalid_csv = "INVALID_CSV";
inline constexpr std::string_view no_valid_entries = "NO_VALID_ENTRIES";
inline constexpr std::string_view extractor_unavailable = "EXTRACTOR_UNAVAILABLE";
inline constexpr std::string_view not_found = "NOT_FOUND";
inline constexpr std::string_view internal_error = "INTERNAL_ERROR";
}  // namespace code

struct ApiError : std::runtime_error {
  std::string code;
  int http_status;

  ApiError(int status, std::string_view c, const std::string& message)
      : std::runtime_error(message), code(c), http_status(status) {}
};

/// Body shared by every error response: the code plus an error-level banner
/// the front-end can show as is.
inline nlohmann::ordered_json error_body(std::string_view code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}},
          {"banner", {{"level", "error"}, {"messages", nlohmann::ordered_json::array({message})}}}};
}

}  // namespace deskvqa::service
