#include "clustr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace clustr {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0 || kernel == 0) throw ParameterError("kernel and stride must be positive");
  if (input + 2 * padding < kernel) throw ShapeError("window larger than padded input");
  return (input + 2 * padding - kernel) / stride + 1;
}

namespace kernels {

template <typename T>
void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (!accumulate) out.fill(T{0});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const T* brow = pb + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      po[i * m + j] = accumulate ? po[i * m + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (!accumulate) out.fill(T{0});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = pa + p * n;
    const T* brow = pb + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* orow = po + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, MacCounter* counter) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  require(av.cols() == bv.rows(),
          "matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor<T> out({av.rows(), bv.cols()});
  kernels::gemm(av, bv, out, false);
  if (counter != nullptr) counter->multiplies += av.rows() * av.cols() * bv.cols();
  auto& tape = a.tape();
  return tape.record("matmul", std::move(out), {a, b}, [a, b, &tape](const Tensor<T>& g) {
    if (tape.requires_grad(a)) kernels::gemm_nt(g, tape.value(b), tape.grad_buffer(a), true);
    if (tape.requires_grad(b)) kernels::gemm_tn(tape.value(a), g, tape.grad_buffer(b), true);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b, MacCounter* counter) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  require(av.cols() == bv.cols(),
          "matmul_nt: inner dimensions differ, " + shape_string(av.shape()) + " x " + shape_string(bv.shape()) + "^T");
  Tensor<T> out({av.rows(), bv.rows()});
  kernels::gemm_nt(av, bv, out, false);
  if (counter != nullptr) counter->multiplies += av.rows() * av.cols() * bv.rows();
  auto& tape = a.tape();
  return tape.record("matmul_nt", std::move(out), {a, b}, [a, b, &tape](const Tensor<T>& g) {
    // out = a b^T: da = g b, db = g^T a
    if (tape.requires_grad(a)) kernels::gemm(g, tape.value(b), tape.grad_buffer(a), true);
    if (tape.requires_grad(b)) kernels::gemm_tn(g, tape.value(a), tape.grad_buffer(b), true);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  add_into(out, b.value());
  auto& tape = a.tape();
  return tape.record("add", std::move(out), {a, b}, [a, b, &tape](const Tensor<T>& g) {
    if (tape.requires_grad(a)) add_into(tape.grad_buffer(a), g);
    if (tape.requires_grad(b)) add_into(tape.grad_buffer(b), g);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto& tape = a.tape();
  return tape.record("mul", std::move(out), {a, b}, [a, b, &tape](const Tensor<T>& g) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (tape.requires_grad(a)) {
      auto& ga = tape.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b)) {
      auto& gb = tape.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  require_matrix(xv, "add_row_bias");
  require(bias.value().size() == xv.cols(), "add_row_bias: bias length " + std::to_string(bias.value().size()) +
                                                " vs " + std::to_string(xv.cols()) + " columns");
  Tensor<T> out = xv;
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  auto& tape = x.tape();
  return tape.record("add_row_bias", std::move(out), {x, bias}, [x, bias, &tape](const Tensor<T>& g) {
    if (tape.requires_grad(x)) add_into(tape.grad_buffer(x), g);
    if (tape.requires_grad(bias)) {
      auto& gb = tape.grad_buffer(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v *= factor;
  auto& tape = x.tape();
  return tape.record("scale", std::move(out), {x}, [x, factor, &tape](const Tensor<T>& g) {
    auto& gx = tape.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  require_matrix(xv, "softmax_rows");
  if (!xv.all_finite()) throw NumericError("softmax_rows: non-finite input");
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T total{0};
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (auto& v : o) v /= total;
  }
  auto& tape = x.tape();
  Tensor<T> probs = out;
  return tape.record("softmax_rows", std::move(out), {x}, [x, probs = std::move(probs), &tape](const Tensor<T>& g) {
    auto& gx = tape.grad_buffer(x);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      auto pr = probs.row(r);
      auto gr = g.row(r);
      T dot{0};
      for (std::size_t c = 0; c < pr.size(); ++c) dot += pr[c] * gr[c];
      auto gxr = gx.row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) gxr[c] += pr[c] * (gr[c] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const auto& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t n = xv.rows(), c = xv.cols();
  require(c >= 1, "layer_norm: zero channels");
  require(gain.value().size() == c && bias.value().size() == c, "layer_norm: gain/bias length mismatch");
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto in = xv.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= static_cast<T>(c);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(c);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    auto h = xhat.row(r);
    for (std::size_t k = 0; k < c; ++k) h[k] = (in[k] - mean) * inv_std[r];
  }
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto h = xhat.row(r);
    auto o = out.row(r);
    for (std::size_t k = 0; k < c; ++k) o[k] = h[k] * gv[k] + bv[k];
  }
  auto& tape = x.tape();
  return tape.record("layer_norm", std::move(out), {x, gain, bias},
                     [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), &tape](const Tensor<T>& g) {
                       const std::size_t rows = g.rows(), cols = g.cols();
                       if (tape.requires_grad(gain) || tape.requires_grad(bias)) {
                         const bool want_gain = tape.requires_grad(gain);
                         const bool want_bias = tape.requires_grad(bias);
                         for (std::size_t r = 0; r < rows; ++r) {
                           auto gr = g.row(r);
                           auto h = xhat.row(r);
                           for (std::size_t k = 0; k < cols; ++k) {
                             if (want_gain) tape.grad_buffer(gain)[k] += gr[k] * h[k];
                             if (want_bias) tape.grad_buffer(bias)[k] += gr[k];
                           }
                         }
                       }
                       if (!tape.requires_grad(x)) return;
                       const auto& gv = tape.value(gain);
                       auto& gx = tape.grad_buffer(x);
                       std::vector<T> dh(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         auto gr = g.row(r);
                         auto h = xhat.row(r);
                         T mean_dh{0}, mean_dh_h{0};
                         for (std::size_t k = 0; k < cols; ++k) {
                           dh[k] = gr[k] * gv[k];
                           mean_dh += dh[k];
                           mean_dh_h += dh[k] * h[k];
                         }
                         mean_dh /= static_cast<T>(cols);
                         mean_dh_h /= static_cast<T>(cols);
                         auto gxr = gx.row(r);
                         for (std::size_t k = 0; k < cols; ++k) {
                           gxr[k] += inv_std[r] * (dh[k] - mean_dh - h[k] * mean_dh_h);
                         }
                       }
                     });
}

namespace {

template <typename T>
constexpr T kGeluAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluBeta = static_cast<T>(0.044715);

}  // namespace

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) {
    const T u = kGeluAlpha<T> * (v + kGeluBeta<T> * v * v * v);
    v = T(0.5) * v * (T{1} + std::tanh(u));
  }
  auto& tape = x.tape();
  return tape.record("gelu", std::move(out), {x}, [x, &tape](const Tensor<T>& g) {
    const auto& xv = tape.value(x);
    auto& gx = tape.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T u = kGeluAlpha<T> * (v + kGeluBeta<T> * v * v * v);
      const T t = std::tanh(u);
      const T du = kGeluAlpha<T> * (T{1} + T{3} * kGeluBeta<T> * v * v);
      gx[i] += g[i] * (T(0.5) * (T{1} + t) + T(0.5) * v * (T{1} - t * t) * du);
    }
  });
}

namespace {

void check_labels(std::span<const std::size_t> labels, std::size_t n, std::size_t segments, const char* op) {
  if (labels.size() != n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  std::vector<bool> seen(segments, false);
  for (std::size_t l : labels) {
    if (l >= segments) throw ParameterError(std::string(op) + ": label " + std::to_string(l) + " out of range");
    seen[l] = true;
  }
  for (std::size_t j = 0; j < segments; ++j) {
    if (!seen[j]) throw ParameterError(std::string(op) + ": segment " + std::to_string(j) + " is empty");
  }
}

}  // namespace

template <typename T>
Var<T> segment_softmax(Var<T> scores, std::span<const std::size_t> labels, std::size_t segments) {
  const auto& sv = scores.value();
  check_labels(labels, sv.size(), segments, "segment_softmax");
  std::vector<T> mx(segments, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < sv.size(); ++i) mx[labels[i]] = std::max(mx[labels[i]], sv[i]);
  Tensor<T> out(sv.shape());
  std::vector<T> total(segments, T{0});
  for (std::size_t i = 0; i < sv.size(); ++i) {
    out[i] = std::exp(sv[i] - mx[labels[i]]);
    total[labels[i]] += out[i];
  }
  for (std::size_t i = 0; i < sv.size(); ++i) out[i] /= total[labels[i]];
  auto& tape = scores.tape();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Tensor<T> weights = out;
  return tape.record("segment_softmax", std::move(out), {scores},
                     [scores, lab = std::move(lab), weights = std::move(weights), segments, &tape](const Tensor<T>& g) {
                       std::vector<T> dot(segments, T{0});
                       for (std::size_t i = 0; i < g.size(); ++i) dot[lab[i]] += g[i] * weights[i];
                       auto& gs = tape.grad_buffer(scores);
                       for (std::size_t i = 0; i < g.size(); ++i) gs[i] += weights[i] * (g[i] - dot[lab[i]]);
                     });
}

template <typename T>
Var<T> segment_weighted_sum(Var<T> x, std::span<const std::size_t> labels, Var<T> weights, std::size_t segments) {
  const auto& xv = x.value();
  require_matrix(xv, "segment_weighted_sum");
  require(weights.value().size() == xv.rows(), "segment_weighted_sum: weights length does not match rows");
  check_labels(labels, xv.rows(), segments, "segment_weighted_sum");
  const auto& wv = weights.value();
  const std::size_t c = xv.cols();
  Tensor<T> out({segments, c});
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    auto src = xv.row(i);
    auto dst = out.row(labels[i]);
    for (std::size_t k = 0; k < c; ++k) dst[k] += wv[i] * src[k];
  }
  auto& tape = x.tape();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return tape.record("segment_weighted_sum", std::move(out), {x, weights},
                     [x, weights, lab = std::move(lab), &tape](const Tensor<T>& g) {
                       const auto& xv = tape.value(x);
                       const auto& wv = tape.value(weights);
                       const std::size_t c = xv.cols();
                       if (tape.requires_grad(x)) {
                         auto& gx = tape.grad_buffer(x);
                         for (std::size_t i = 0; i < lab.size(); ++i) {
                           auto gr = g.row(lab[i]);
                           auto dst = gx.row(i);
                           for (std::size_t k = 0; k < c; ++k) dst[k] += wv[i] * gr[k];
                         }
                       }
                       if (tape.requires_grad(weights)) {
                         auto& gw = tape.grad_buffer(weights);
                         for (std::size_t i = 0; i < lab.size(); ++i) {
                           auto gr = g.row(lab[i]);
                           auto src = xv.row(i);
                           T acc{0};
                           for (std::size_t k = 0; k < c; ++k) acc += gr[k] * src[k];
                           gw[i] += acc;
                         }
                       }
                     });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  require_matrix(xv, "slice_cols");
  require(begin <= end && end <= xv.cols(), "slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor<T> out({xv.rows(), w});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto src = xv.row(r);
    std::copy(src.begin() + begin, src.begin() + end, out.row(r).begin());
  }
  auto& tape = x.tape();
  return tape.record("slice_cols", std::move(out), {x}, [x, begin, w, &tape](const Tensor<T>& g) {
    auto& gx = tape.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row(r);
      auto dst = gx.row(r);
      for (std::size_t k = 0; k < w; ++k) dst[begin + k] += src[k];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().rows() == rows, "concat_cols: row counts differ");
    total += p.value().cols();
  }
  if (parts.size() == 1) return parts.front();
  Tensor<T> out({rows, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = pv.row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + offset);
    }
    offset += pv.cols();
  }
  auto& tape = parts.front().tape();
  return tape.record("concat_cols", std::move(out), parts, [parts, &tape](const Tensor<T>& g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t w = tape.value(p).cols();
      if (tape.requires_grad(p)) {
        auto& gp = tape.grad_buffer(p);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto src = g.row(r);
          auto dst = gp.row(r);
          for (std::size_t k = 0; k < w; ++k) dst[k] += src[offset + k];
        }
      }
      offset += w;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().cols() == cols, "concat_rows: column counts differ");
    total += p.value().rows();
  }
  if (parts.size() == 1) return parts.front();
  Tensor<T> out({total, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::copy(pv.storage().begin(), pv.storage().end(), out.storage().begin() + offset * cols);
    offset += pv.rows();
  }
  auto& tape = parts.front().tape();
  return tape.record("concat_rows", std::move(out), parts, [parts, cols, &tape](const Tensor<T>& g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = tape.value(p).size();
      if (tape.requires_grad(p)) {
        auto& gp = tape.grad_buffer(p);
        for (std::size_t k = 0; k < n; ++k) gp[k] += g[offset * cols + k];
      }
      offset += n / cols;
    }
  });
}

template <typename T>
Var<T> mean_rows(Var<T> x) {
  const auto& xv = x.value();
  require_matrix(xv, "mean_rows");
  require(xv.rows() >= 1, "mean_rows: no rows");
  Tensor<T> out({1, xv.cols()});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto src = xv.row(r);
    for (std::size_t k = 0; k < src.size(); ++k) out[k] += src[k];
  }
  const T inv = T{1} / static_cast<T>(xv.rows());
  for (auto& v : out.storage()) v *= inv;
  auto& tape = x.tape();
  return tape.record("mean_rows", std::move(out), {x}, [x, inv, &tape](const Tensor<T>& g) {
    auto& gx = tape.grad_buffer(x);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      auto dst = gx.row(r);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[k] * inv;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().storage()) total += v;
  auto& tape = x.tape();
  return tape.record("sum", Tensor<T>({1}, {total}), {x}, [x, &tape](const Tensor<T>& g) {
    auto& gx = tape.grad_buffer(x);
    for (auto& v : gx.storage()) v += g[0];
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  const auto& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  require(labels.size() == lv.rows(), "cross_entropy: one label per row required");
  Tensor<T> probs(lv.shape());
  T loss{0};
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] >= lv.cols()) throw ParameterError("cross_entropy: label out of range");
    auto in = lv.row(r);
    auto p = probs.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T total{0};
    for (std::size_t c = 0; c < in.size(); ++c) {
      p[c] = std::exp(in[c] - mx);
      total += p[c];
    }
    for (auto& v : p) v /= total;
    loss += std::log(total) + mx - in[labels[r]];
  }
  const T inv = T{1} / static_cast<T>(lv.rows());
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  auto& tape = logits.tape();
  return tape.record("cross_entropy", Tensor<T>({1}, {loss * inv}), {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab), inv, &tape](const Tensor<T>& g) {
                       auto& gl = tape.grad_buffer(logits);
                       for (std::size_t r = 0; r < probs.rows(); ++r) {
                         auto p = probs.row(r);
                         auto dst = gl.row(r);
                         for (std::size_t c = 0; c < p.size(); ++c) {
                           const T target = c == lab[r] ? T{1} : T{0};
                           dst[c] += g[0] * inv * (p[c] - target);
                         }
                       }
                     });
}

template <typename T>
Var<T> unfold_patches(Var<T> x, std::size_t height, std::size_t width, std::size_t kernel, std::size_t stride,
                      std::size_t padding) {
  const auto& xv = x.value();
  require_matrix(xv, "unfold_patches");
  require(xv.rows() == height * width, "unfold_patches: " + std::to_string(xv.rows()) + " tokens for a " +
                                           std::to_string(height) + "x" + std::to_string(width) + " grid");
  const std::size_t c = xv.cols();
  const std::size_t oh = conv_output_size(height, kernel, stride, padding);
  const std::size_t ow = conv_output_size(width, kernel, stride, padding);
  const std::size_t patch = kernel * kernel * c;
  // (output row, column offset) -> source token, or -1 for padding
  std::vector<std::ptrdiff_t> source(oh * ow * kernel * kernel, -1);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(height) ||
              ix >= static_cast<std::ptrdiff_t>(width)) {
            continue;
          }
          source[((oy * ow + ox) * kernel + ky) * kernel + kx] = iy * static_cast<std::ptrdiff_t>(width) + ix;
        }
      }
    }
  }
  const std::size_t taps = kernel * kernel;
  Tensor<T> out({oh * ow, patch});
  for (std::size_t o = 0; o < oh * ow; ++o) {
    auto dst = out.row(o);
    for (std::size_t t = 0; t < taps; ++t) {
      const auto s = source[o * taps + t];
      if (s < 0) continue;
      auto src = xv.row(static_cast<std::size_t>(s));
      std::copy(src.begin(), src.end(), dst.begin() + t * c);
    }
  }
  auto& tape = x.tape();
  return tape.record("unfold_patches", std::move(out), {x},
                     [x, source = std::move(source), taps, c, &tape](const Tensor<T>& g) {
                       auto& gx = tape.grad_buffer(x);
                       for (std::size_t o = 0; o < g.rows(); ++o) {
                         auto src = g.row(o);
                         for (std::size_t t = 0; t < taps; ++t) {
                           const auto s = source[o * taps + t];
                           if (s < 0) continue;
                           auto dst = gx.row(static_cast<std::size_t>(s));
                           for (std::size_t k = 0; k < c; ++k) dst[k] += src[t * c + k];
                         }
                       }
                     });
}

template <typename T>
Var<T> grid_pool(Var<T> x, std::size_t height, std::size_t width, std::size_t r, Var<T> weights) {
  const auto& xv = x.value();
  require_matrix(xv, "grid_pool");
  require(xv.rows() == height * width, "grid_pool: token count does not match grid");
  if (r == 0 || height % r != 0 || width % r != 0) {
    throw ParameterError("grid_pool: patch size " + std::to_string(r) + " does not divide " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  require(weights.value().size() == r * r, "grid_pool: expected r*r weights");
  const std::size_t c = xv.cols(), gh = height / r, gw = width / r;
  // token index -> (pooled row, patch position)
  std::vector<std::size_t> dest(height * width), pos(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t xx = 0; xx < width; ++xx) {
      dest[y * width + xx] = (y / r) * gw + xx / r;
      pos[y * width + xx] = (y % r) * r + xx % r;
    }
  }
  const auto& wv = weights.value();
  Tensor<T> out({gh * gw, c});
  for (std::size_t i = 0; i < dest.size(); ++i) {
    auto src = xv.row(i);
    auto dst = out.row(dest[i]);
    for (std::size_t k = 0; k < c; ++k) dst[k] += wv[pos[i]] * src[k];
  }
  auto& tape = x.tape();
  return tape.record("grid_pool", std::move(out), {x, weights},
                     [x, weights, dest = std::move(dest), pos = std::move(pos), c, &tape](const Tensor<T>& g) {
                       const auto& xv = tape.value(x);
                       const auto& wv = tape.value(weights);
                       if (tape.requires_grad(x)) {
                         auto& gx = tape.grad_buffer(x);
                         for (std::size_t i = 0; i < dest.size(); ++i) {
                           auto src = g.row(dest[i]);
                           auto dst = gx.row(i);
                           for (std::size_t k = 0; k < c; ++k) dst[k] += wv[pos[i]] * src[k];
                         }
                       }
                       if (tape.requires_grad(weights)) {
                         auto& gw = tape.grad_buffer(weights);
                         for (std::size_t i = 0; i < dest.size(); ++i) {
                           auto gr = g.row(dest[i]);
                           auto src = xv.row(i);
                           T acc{0};
                           for (std::size_t k = 0; k < c; ++k) acc += gr[k] * src[k];
                           gw[pos[i]] += acc;
                         }
                       }
                     });
}

#define CLUSTR_INSTANTIATE_OPS(T)                                                                              \
  template void kernels::gemm<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, bool);                       \
  template void kernels::gemm_nt<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, bool);                    \
  template void kernels::gemm_tn<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, bool);                    \
  template Var<T> matmul<T>(Var<T>, Var<T>, MacCounter*);                                                     \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>, MacCounter*);                                                  \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                     \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                     \
  template Var<T> add_row_bias<T>(Var<T>, Var<T>);                                                            \
  template Var<T> scale<T>(Var<T>, T);                                                                        \
  template Var<T> softmax_rows<T>(Var<T>);                                                                    \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                                   \
  template Var<T> gelu<T>(Var<T>);                                                                            \
  template Var<T> segment_softmax<T>(Var<T>, std::span<const std::size_t>, std::size_t);                      \
  template Var<T> segment_weighted_sum<T>(Var<T>, std::span<const std::size_t>, Var<T>, std::size_t);         \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                                            \
  template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                                                 \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                                 \
  template Var<T> mean_rows<T>(Var<T>);                                                                       \
  template Var<T> sum<T>(Var<T>);                                                                             \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const std::size_t>);                                     \
  template Var<T> unfold_patches<T>(Var<T>, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t); \
  template Var<T> grid_pool<T>(Var<T>, std::size_t, std::size_t, std::size_t, Var<T>);

CLUSTR_INSTANTIATE_OPS(float)
CLUSTR_INSTANTIATE_OPS(double)

}  // namespace clustr
