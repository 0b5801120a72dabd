#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "epng/rng.hpp"
#include "epng/tensor.hpp"

namespace epng {

struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Registry of named learnable tensors. Names are unique; creation order is
/// preserved (the optimizer walks it exactly once per parameter).
class ParameterStore {
 public:
  Tensor& create(const std::string& name, Shape shape, double fill = 0.0);
  Tensor& create_normal(const std::string& name, Shape shape, Rng& rng, double stddev);

  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;

  const std::vector<Parameter>& items() const { return params_; }
  std::vector<Parameter>& items() { return params_; }
  std::size_t total_elements() const;
  void zero_grads();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint file: magic "EPNG0001", then per parameter in lexicographic
// name order: u32 LE name length, name bytes, u32 LE rank, u32 LE extents,
// raw little-endian f64 values.
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);
std::vector<Parameter> load_checkpoint(const std::filesystem::path& path);

/// Copies loaded values into matching parameters. Any missing, unexpected or
/// shape-mismatched name raises mismatch_error with a full diff.
void load_checkpoint_into(ParameterStore& store, const std::filesystem::path& path);

}  // namespace epng
