#pragma once

// Plain-text parameter files:
//
//   fedstar-params 1
//   arch <input_dim> <num_classes> <n_hidden> <h_1> ... <h_n>
//   layer <out> <in>
//   <out lines of `in` weights>
//   <one line of `out` biases>
//   ...
//
// Values are written with 17 significant digits and round-trip exactly.

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <filesystem>

#include "fedstar/error.hpp"
#include "fedstar/nn.hpp"

namespace fedstar {

inline void write_params(std::ostream& os, const ModelParams& params) {
  const auto& arch = params.arch;
  os << "fedstar-params 1\n";
  os << "arch " << arch.input_dim << ' ' << arch.num_classes << ' ' << arch.hidden_dims.size();
  for (auto h : arch.hidden_dims) os << ' ' << h;
  os << '\n';
  os.precision(17);
  for (const auto& layer : params.layers) {
    os << "layer " << layer.out_dim() << ' ' << layer.in_dim() << '\n';
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
      auto row = layer.weight.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) os << (c ? " " : "") << row[c];
      os << '\n';
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) os << (i ? " " : "") << layer.bias[i];
    os << '\n';
  }
  if (!os) throw IoError("write_params: stream failure");
}

inline ModelParams read_params(std::istream& is) {
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "fedstar-params" || version != 1) {
    throw ParseError(1, "params: expected 'fedstar-params 1' header");
  }
  ModelParams params;
  std::size_t n_hidden = 0;
  if (!(is >> tag) || tag != "arch" ||
      !(is >> params.arch.input_dim >> params.arch.num_classes >> n_hidden)) {
    throw ParseError(2, "params: malformed arch line");
  }
  params.arch.hidden_dims.resize(n_hidden);
  for (auto& h : params.arch.hidden_dims) {
    if (!(is >> h)) throw ParseError(2, "params: malformed arch line");
  }
  params.arch.validate();
  for (auto [out, in] : params.arch.layer_shapes()) {
    std::size_t o = 0, i = 0;
    if (!(is >> tag >> o >> i) || tag != "layer" || o != out || i != in) {
      throw ParseError(0, "params: layer header does not match arch");
    }
    DenseLayer layer{Matrix(out, in), std::vector<double>(out)};
    for (auto& w : layer.weight.values()) {
      if (!(is >> w)) throw ParseError(0, "params: truncated weights");
    }
    for (auto& b : layer.bias) {
      if (!(is >> b)) throw ParseError(0, "params: truncated biases");
    }
    params.layers.push_back(std::move(layer));
  }
  validate_params(params);
  return params;
}

inline void save_params(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_params(os, params);
}

inline ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  return read_params(is);
}

}  // namespace fedstar
