#pragma once

#include <memory>

#include "deskvqa/features/external_extractor.hpp"
#include "deskvqa/features/feature_store.hpp"
#include "deskvqa/features/grid_extractor.hpp"

namespace deskvqa::features {

inline std::unique_ptr<Extractor> make_extractor(const ExtractorSpec& spec) {
  spec.validate();
  if (spec.kind == ExtractorKind::external) return std::make_unique<ExternalExtractor>(spec);
  return std::make_unique<GridExtractor>(spec);
}

}  // namespace deskvqa::features
