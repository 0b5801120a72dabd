#include "epng/params.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "epng/errors.hpp"

namespace epng {

Tensor& ParameterStore::create(const std::string& name, Shape shape, double fill) {
  if (index_.count(name)) throw std::invalid_argument("parameter name already used: " + name);
  index_[name] = params_.size();
  params_.push_back({name, Tensor(std::move(shape), fill)});
  params_.back().tensor.track();
  return params_.back().tensor;
}

Tensor& ParameterStore::create_normal(const std::string& name, Shape shape, Rng& rng,
                                      double stddev) {
  Tensor& t = create(name, std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
  return t;
}

Tensor* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second].tensor;
}

const Tensor* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second].tensor;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

// ---- checkpoint I/O ------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'E', 'P', 'N', 'G', '0', '0', '0', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  std::vector<const Parameter*> sorted;
  sorted.reserve(store.items().size());
  for (const Parameter& p : store.items()) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(),
            [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
  for (const Parameter* p : sorted) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u32(out, static_cast<std::uint32_t>(p->tensor.rank()));
    for (int e : p->tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < p->tensor.size(); ++i) put_f64(out, p->tensor.at(i));
  }
  if (!out) throw io_error("short write on checkpoint: " + path.string());
}

std::vector<Parameter> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw io_error("bad checkpoint magic in " + path.string());
  }
  std::vector<Parameter> out;
  while (true) {
    const std::uint32_t name_len = get_u32(in);
    if (in.eof()) break;
    if (!in) throw io_error("truncated checkpoint: " + path.string());
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = get_u32(in);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(get_u32(in));
    std::vector<double> values(numel(shape));
    for (double& v : values) v = get_f64(in);
    if (!in) throw io_error("truncated checkpoint record '" + name + "' in " + path.string());
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void load_checkpoint_into(ParameterStore& store, const std::filesystem::path& path) {
  std::vector<Parameter> loaded = load_checkpoint(path);
  std::string missing, unexpected, shapes;
  std::unordered_map<std::string, const Parameter*> by_name;
  for (const Parameter& p : loaded) by_name[p.name] = &p;
  for (const Parameter& want : store.items()) {
    auto it = by_name.find(want.name);
    if (it == by_name.end()) {
      missing += "  " + want.name + " " + shape_str(want.tensor.shape()) + "\n";
    } else if (it->second->tensor.shape() != want.tensor.shape()) {
      shapes += "  " + want.name + ": model " + shape_str(want.tensor.shape()) + ", file " +
                shape_str(it->second->tensor.shape()) + "\n";
    }
  }
  for (const Parameter& got : loaded) {
    if (!store.find(got.name)) {
      unexpected += "  " + got.name + " " + shape_str(got.tensor.shape()) + "\n";
    }
  }
  if (!missing.empty() || !unexpected.empty() || !shapes.empty()) {
    std::string msg = "checkpoint does not match model architecture: " + path.string() + "\n";
    if (!missing.empty()) msg += "missing from file:\n" + missing;
    if (!unexpected.empty()) msg += "unexpected in file:\n" + unexpected;
    if (!shapes.empty()) msg += "shape mismatches:\n" + shapes;
    throw mismatch_error(msg);
  }
  for (Parameter& want : store.items()) {
    const Parameter* got = by_name.at(want.name);
    std::copy_n(got->tensor.data(), want.tensor.size(), want.tensor.data());
  }
}

}  // namespace epng
