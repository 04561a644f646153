#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "temporl/nets.hpp"
#include "temporl/tensor.hpp"

namespace temporl::net {

// Parameter checkpoint file: a magic line, a JSON header line carrying an
// arbitrary spec object plus tensor shapes, then length-prefixed binary
// records (name, rows, cols, row-major doubles). Round trips are bit-exact.
//
//   TEMPORL-PARAMS v1
//   {"spec":{...},"tensors":[{"name":...,"rows":...,"cols":...},...]}
//   <records>

inline constexpr const char* kParamsMagic = "TEMPORL-PARAMS v1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_params(const ParamSet& params, const nlohmann::json& spec, const std::string& path);

struct LoadedParams {
  nlohmann::json spec;
  std::vector<std::pair<std::string, diff::Tensor>> tensors;

  const diff::Tensor& find(const std::string& name) const;
};

LoadedParams load_params(const std::string& path);

// Copies loaded values into an existing ParamSet; shapes and names must match.
void restore_into(const LoadedParams& loaded, ParamSet& params);

}  // namespace temporl::net
