#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

enum class Act { None, Elu, Gelu, Tanh, Sigmoid };

inline Tensor apply_act(Tape& tape, Act act, const Tensor& x) {
  switch (act) {
    case Act::None: return x;
    case Act::Elu: return tape.elu(x);
    case Act::Gelu: return tape.gelu(x);
    case Act::Tanh: return tape.tanh_(x);
    case Act::Sigmoid: return tape.sigmoid(x);
  }
  return x;
}

/// Ordered (name, tensor) parameter listing shared by optimizers and
/// checkpoints. Order is the registration order and must be stable.
struct NamedParams {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, const Tensor& t) { items.emplace_back(std::move(name), t); }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [name, t] : items) out.push_back(t);
    return out;
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& [name, t] : items) n += t.size();
    return n;
  }
};

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]

  static Linear init(int in, int out, Rng& rng, bool zero = false) {
    Linear l;
    l.w = zero ? Tensor::zeros({in, out}, true)
               : Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true);
    l.b = Tensor::zeros({out}, true);
    return l;
  }

  Tensor forward(Tape& tape, const Tensor& x) const {
    return tape.add_rowvec(tape.matmul(x, w), b);
  }

  void collect(NamedParams& p, const std::string& prefix) const {
    p.add(prefix + ".w", w);
    p.add(prefix + ".b", b);
  }
};

/// Fully connected stack: dims = {in, h1, ..., out}. The hidden
/// activation sits between layers, the output activation after the last.
struct Mlp {
  std::vector<Linear> layers;
  Act hidden_act = Act::Elu;
  Act out_act = Act::None;

  static Mlp init(const std::vector<int>& dims, Act hidden, Act out, Rng& rng,
                  bool zero_last = false) {
    Mlp m;
    m.hidden_act = hidden;
    m.out_act = out;
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      bool last = i + 2 == dims.size();
      m.layers.push_back(Linear::init(dims[i], dims[i + 1], rng, zero_last && last));
    }
    return m;
  }

  Tensor forward(Tape& tape, const Tensor& x) const {
    Tensor h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(tape, h);
      h = apply_act(tape, i + 1 == layers.size() ? out_act : hidden_act, h);
    }
    return h;
  }

  void collect(NamedParams& p, const std::string& prefix) const {
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(p, prefix + ".l" + std::to_string(i));
  }

  int in_dim() const { return layers.front().w.dim(0); }
  int out_dim() const { return layers.back().w.dim(1); }
};

}  // namespace wmlab
