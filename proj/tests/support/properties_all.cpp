#include "properties.hpp"

namespace props {

std::vector<Check> all_checks() {
  std::vector<Check> out;
  for (auto group : {numerics_checks(), clustering_checks(), attention_checks(), model_checks(), harness_checks()}) {
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

}  // namespace props
