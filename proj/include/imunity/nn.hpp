#pragma once

// Thin parameter-owning wrappers over the tensor ops, plus Adam. Weight init
// is He-uniform seeded from an explicit Rng; biases start at zero.

#include <string>
#include <utility>
#include <vector>

#include "imunity/rng.hpp"
#include "imunity/tensor_ops.hpp"

namespace imunity::nn {

using ad::Shape;
using ad::Tape;
using ad::TensorT;

template <typename S>
TensorT<S> he_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform(-limit, limit));
  return t;
}

template <typename S>
using NamedParams = std::vector<std::pair<std::string, TensorT<S>>>;

template <typename S>
struct Conv2d {
  TensorT<S> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride_, int pad_, Rng& rng)
      : weight(he_uniform<S>({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng)),
        bias(TensorT<S>::zeros({cout})),
        stride(stride_),
        pad(pad_) {}

  TensorT<S> operator()(Tape<S>* tape, const TensorT<S>& x) const {
    return ad::conv2d(tape, x, weight, bias, stride, pad);
  }
  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename S>
struct ConvTranspose2d {
  TensorT<S> weight, bias;
  int stride = 1, pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, int k, int stride_, int pad_, Rng& rng)
      : weight(he_uniform<S>({cin, cout, k, k}, static_cast<std::int64_t>(cin) * k * k, rng)),
        bias(TensorT<S>::zeros({cout})),
        stride(stride_),
        pad(pad_) {}

  TensorT<S> operator()(Tape<S>* tape, const TensorT<S>& x) const {
    return ad::conv2d_transposed(tape, x, weight, bias, stride, pad);
  }
  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename S>
struct Dense {
  TensorT<S> weight, bias;

  Dense() = default;
  Dense(int din, int dout, Rng& rng)
      : weight(he_uniform<S>({dout, din}, din, rng)), bias(TensorT<S>::zeros({dout})) {}

  TensorT<S> operator()(Tape<S>* tape, const TensorT<S>& x) const {
    return ad::dense(tape, x, weight, bias);
  }
  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename S>
struct InstanceNorm2d {
  TensorT<S> gain, shift;

  InstanceNorm2d() = default;
  explicit InstanceNorm2d(int channels)
      : gain(TensorT<S>::full({channels}, S(1))), shift(TensorT<S>::zeros({channels})) {}

  TensorT<S> operator()(Tape<S>* tape, const TensorT<S>& x) const {
    return ad::instance_norm2d(tape, x, gain, shift);
  }
  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".shift", shift);
  }
};

// Adam with bias correction. Moment buffers are keyed by parameter order,
// which must not change between steps.
template <typename S>
struct Adam {
  S lr = S(1e-4);
  S beta1 = S(0.9), beta2 = S(0.999), eps = S(1e-8);
  std::int64_t step_count = 0;
  std::vector<std::vector<S>> m, v;

  Adam() = default;
  explicit Adam(S lr_) : lr(lr_) {}

  void step(const std::vector<TensorT<S>*>& params) {
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m[p].assign(static_cast<std::size_t>(params[p]->size()), S(0));
        v[p].assign(static_cast<std::size_t>(params[p]->size()), S(0));
      }
    }
    if (m.size() != params.size()) throw Error("adam: parameter list changed size");
    ++step_count;
    const S bc1 = S(1) - std::pow(beta1, static_cast<S>(step_count));
    const S bc2 = S(1) - std::pow(beta2, static_cast<S>(step_count));
    for (std::size_t p = 0; p < params.size(); ++p) {
      TensorT<S>& t = *params[p];
      if (m[p].size() != static_cast<std::size_t>(t.size()))
        throw Error("adam: moment buffer does not match parameter shape");
      const S* g = t.grad();
      S* w = t.data();
      for (std::size_t i = 0; i < m[p].size(); ++i) {
        m[p][i] = beta1 * m[p][i] + (S(1) - beta1) * g[i];
        v[p][i] = beta2 * v[p][i] + (S(1) - beta2) * g[i] * g[i];
        const S mhat = m[p][i] / bc1;
        const S vhat = v[p][i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

template <typename S>
void zero_grads(const std::vector<TensorT<S>*>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename S>
void set_tracked(const std::vector<TensorT<S>*>& params, bool on) {
  for (auto* p : params) p->set_tracked(on);
}

}  // namespace imunity::nn
