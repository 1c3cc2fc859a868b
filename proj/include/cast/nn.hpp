#pragma once

#include <string>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/rng.hpp"

// Parameterised layers. Each layer owns a name prefix inside a ParamStore;
// `init_*` registers the parameters and the functional form applies them.
namespace cast::nn {

/// y = x W + b with W [in x out], names prefix.w / prefix.b.
void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 double gain = 1.0);
Var linear(Tape& tape, const ParamStore& store, const std::string& prefix, Var x);

/// Affine terms prefix.gamma / prefix.beta. The TTA parameter filter keys on these names.
void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d);
Var layer_norm(Tape& tape, const ParamStore& store, const std::string& prefix, Var x);

/// Multi-head self-attention: fused qkv projection (prefix.qkv) and output
/// projection (prefix.proj).
void init_msa(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng, double out_gain = 1.0);
/// When `attention` is non-null it receives one [n x n] row-stochastic matrix per head.
Var msa(Tape& tape, const ParamStore& store, const std::string& prefix, Var x, std::size_t heads,
        std::vector<Tensor>* attention = nullptr);

/// Two-layer perceptron d -> hidden -> d_out with GELU (prefix.fc1, prefix.fc2).
void init_mlp(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t hidden, std::size_t d_out,
              Rng& rng, double out_gain = 1.0);
Var mlp(Tape& tape, const ParamStore& store, const std::string& prefix, Var x);

/// Regex matching exactly the layer-norm scale/bias parameter names.
inline constexpr const char* kNormParamPattern = R"((^|\.)(ln\w*|norm\w*)\.(gamma|beta)$)";

}  // namespace cast::nn
