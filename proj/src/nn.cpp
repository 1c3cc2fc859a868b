#include "cast/nn.hpp"

#include <cmath>

#include "cast/error.hpp"

namespace cast::nn {

void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 double gain) {
  Tensor w = Tensor::matrix(in, out);
  const double std = gain * std::sqrt(2.0 / static_cast<double>(in + out));
  for (double& v : w.values()) v = std * rng.normal();
  store.add(prefix + ".w", std::move(w));
  store.add(prefix + ".b", Tensor::matrix(1, out));
}

Var linear(Tape& tape, const ParamStore& store, const std::string& prefix, Var x) {
  return ad::add_rowvec(ad::matmul(x, tape.param(store, prefix + ".w")), tape.param(store, prefix + ".b"));
}

void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".gamma", Tensor::matrix(1, d, 1.0));
  store.add(prefix + ".beta", Tensor::matrix(1, d));
}

Var layer_norm(Tape& tape, const ParamStore& store, const std::string& prefix, Var x) {
  return ad::layer_norm(x, tape.param(store, prefix + ".gamma"), tape.param(store, prefix + ".beta"));
}

void init_msa(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng, double out_gain) {
  init_linear(store, prefix + ".qkv", d, 3 * d, rng);
  init_linear(store, prefix + ".proj", d, d, rng, out_gain);
}

Var msa(Tape& tape, const ParamStore& store, const std::string& prefix, Var x, std::size_t heads,
        std::vector<Tensor>* attention) {
  const std::size_t d = x.cols();
  require(heads > 0 && d % heads == 0, ErrorCode::ShapeMismatch,
          "msa: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var qkv = linear(tape, store, prefix + ".qkv", x);
  std::vector<Var> outs;
  outs.reserve(heads);
  if (attention) attention->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = ad::slice_cols(qkv, h * dh, (h + 1) * dh);
    Var k = ad::slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
    Var v = ad::slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
    Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    if (attention) attention->push_back(a.value());
    outs.push_back(ad::matmul(a, v));
  }
  Var merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return linear(tape, store, prefix + ".proj", merged);
}

void init_mlp(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t hidden, std::size_t d_out,
              Rng& rng, double out_gain) {
  init_linear(store, prefix + ".fc1", d, hidden, rng);
  init_linear(store, prefix + ".fc2", hidden, d_out, rng, out_gain);
}

Var mlp(Tape& tape, const ParamStore& store, const std::string& prefix, Var x) {
  return linear(tape, store, prefix + ".fc2", ad::gelu(linear(tape, store, prefix + ".fc1", x)));
}

}  // namespace cast::nn
