#include "duplex/numerics/tape.hpp"

#include <algorithm>
#include <cmath>

namespace duplex::num {

const Array& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Array value) {
  check_finite(value, "tape constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Param& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Array value) {
  check_finite(value, "tape leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Array value, std::vector<std::size_t> parents, Backward backward) {
  check_finite(value, "tape op output");
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [this](std::size_t p) { return nodes_[p].requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Array& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Array(n.value.shape());
  return n.grad;
}

const Array& Tape::grad_of(Var v) const { return nodes_[v.id()].grad; }

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw NumericError("backward: loss recorded on another tape");
  if (loss.value().size() != 1) {
    throw NumericError("backward: loss must be scalar, got " +
                       shape_string(loss.value().shape()));
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss.id())[0] = 1.0F;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw NumericError(std::string(op) + ": operands on different tapes");
  }
  return *a.tape();
}

void accumulate(Array& dst, const Array& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// dst += a^T * b
void accumulate_tn(Array& dst, const Array& a, const Array& b) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  std::vector<double> acc(k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const float* ar = a.data() + i * k;
    const float* br = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* row = acc.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * br[j];
    }
  }
  for (std::size_t i = 0; i < k * n; ++i) dst[i] += static_cast<float>(acc[i]);
}

constexpr float kGeluC = 0.7978845608028654F;  // sqrt(2/pi)

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), matmul_nt(g, t.value(ib)));
    if (t.requires_grad(ib)) accumulate_tn(t.grad(ib), t.value(ia), g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(matmul_nt(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    // C = A B^T: dA = G B, dB = G^T A
    if (t.requires_grad(ia)) accumulate(t.grad(ia), matmul(g, t.value(ib)));
    if (t.requires_grad(ib)) accumulate_tn(t.grad(ib), g, t.value(ia));
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Array out = a.value();
  accumulate(out, b.value());
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ib)) {
      Array& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id();
  const auto ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    if (t.requires_grad(ia)) {
      Array& ga = t.grad(ia);
      const Array& vb = t.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      Array& gb = t.grad(ib);
      const Array& va = t.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Var a, float s) {
  Tape& t = *a.tape();
  Array out = a.value();
  for (auto& v : out.values()) v *= s;
  const auto ia = a.id();
  return t.record(std::move(out), {ia}, [ia, s](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_row(Var a, Var bias) {
  Tape& t = same_tape(a, bias, "add_row");
  const std::size_t c = a.value().cols();
  if (bias.value().size() != c) {
    throw NumericError("add_row: bias " + shape_string(bias.value().shape()) +
                       " incompatible with " + shape_string(a.value().shape()));
  }
  Array out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < c; ++j) row[j] += bias.value()[j];
  }
  const auto ia = a.id();
  const auto ib = bias.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib, c](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ib)) {
      Array& gb = t.grad(ib);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t j = 0; j < c; ++j) gb[j] += row[j];
      }
    }
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.record(softmax_rows(a.value()), {ia}, [ia](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    const Array& y = t.value(s);
    Array& ga = t.grad(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      auto out = ga.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += static_cast<double>(yr[j]) * gr[j];
      for (std::size_t j = 0; j < yr.size(); ++j) {
        out[j] += static_cast<float>(yr[j] * (gr[j] - dot));
      }
    }
  });
}

Var exp(Var a) {
  Tape& t = *a.tape();
  Array out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  const auto ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    const Array& y = t.value(s);
    Array& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  Array out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  const auto ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    const Array& y = t.value(s);
    Array& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (1.0F - y[i] * y[i]);
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape();
  Array out = a.value();
  for (auto& v : out.values()) {
    const float x = v;
    v = 0.5F * x * (1.0F + std::tanh(kGeluC * (x + 0.044715F * x * x * x)));
  }
  const auto ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    const Array& x = t.value(ia);
    Array& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const float xi = x[i];
      const float th = std::tanh(kGeluC * (xi + 0.044715F * xi * xi * xi));
      const float d = 0.5F * (1.0F + th) +
                      0.5F * xi * (1.0F - th * th) * kGeluC * (1.0F + 3.0F * 0.044715F * xi * xi);
      ga[i] += g[i] * d;
    }
  });
}

Var layernorm_rows(Var x, Var gamma, Var beta, float eps) {
  Tape& t = same_tape(x, gamma, "layernorm_rows");
  same_tape(x, beta, "layernorm_rows");
  const Array& xv = x.value();
  const std::size_t c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw NumericError("layernorm_rows: affine parameters do not match " +
                       shape_string(xv.shape()));
  }
  Array xhat(xv.shape());
  std::vector<float> inv_std(xv.rows());
  Array out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = xv.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    auto xh = xhat.row(r);
    auto o = out.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = static_cast<float>((row[j] - mean) * is);
      o[j] = xh[j] * gamma.value()[j] + beta.value()[j];
    }
  }
  const auto ix = x.id();
  const auto ig = gamma.id();
  const auto ib = beta.id();
  return t.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), c](
                      Tape& t, std::size_t s) {
                    const Array& g = t.grad(s);
                    const Array& gam = t.value(ig);
                    if (t.requires_grad(ig) || t.requires_grad(ib)) {
                      Array* gg = t.requires_grad(ig) ? &t.grad(ig) : nullptr;
                      Array* gb = t.requires_grad(ib) ? &t.grad(ib) : nullptr;
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t j = 0; j < c; ++j) {
                          if (gg) (*gg)[j] += g(r, j) * xhat(r, j);
                          if (gb) (*gb)[j] += g(r, j);
                        }
                      }
                    }
                    if (!t.requires_grad(ix)) return;
                    Array& gx = t.grad(ix);
                    std::vector<double> dxh(c);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      double m1 = 0.0;
                      double m2 = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        dxh[j] = static_cast<double>(g(r, j)) * gam[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat(r, j);
                      }
                      m1 /= static_cast<double>(c);
                      m2 /= static_cast<double>(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        gx(r, j) += static_cast<float>(inv_std[r] *
                                                       (dxh[j] - m1 - xhat(r, j) * m2));
                      }
                    }
                  });
}

void rope_rotate_inplace(Array& x, std::span<const float> positions, std::size_t head_dim,
                         float base, bool inverse) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw NumericError("rope: head_dim must be even and positive, got " +
                       std::to_string(head_dim));
  }
  const std::size_t c = x.cols();
  if (c % head_dim != 0) {
    throw NumericError("rope: row width " + std::to_string(c) + " is not a multiple of head_dim " +
                       std::to_string(head_dim));
  }
  if (positions.size() != x.rows()) {
    throw NumericError("rope: " + std::to_string(positions.size()) + " positions for " +
                       std::to_string(x.rows()) + " rows");
  }
  const std::size_t half = head_dim / 2;
  std::vector<double> freq(half);
  for (std::size_t m = 0; m < half; ++m) {
    freq[m] = std::pow(static_cast<double>(base),
                       -2.0 * static_cast<double>(m) / static_cast<double>(head_dim));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t m = 0; m < half; ++m) {
      const double angle = static_cast<double>(positions[r]) * freq[m] * (inverse ? -1.0 : 1.0);
      const double cs = std::cos(angle);
      const double sn = std::sin(angle);
      for (std::size_t h = 0; h < c; h += head_dim) {
        const double a = row[h + 2 * m];
        const double b = row[h + 2 * m + 1];
        row[h + 2 * m] = static_cast<float>(a * cs - b * sn);
        row[h + 2 * m + 1] = static_cast<float>(a * sn + b * cs);
      }
    }
  }
}

Var rope_rows(Var x, std::span<const float> positions, std::size_t head_dim, float base) {
  Tape& t = *x.tape();
  Array out = x.value();
  rope_rotate_inplace(out, positions, head_dim, base, false);
  const auto ix = x.id();
  std::vector<float> pos(positions.begin(), positions.end());
  return t.record(std::move(out), {ix},
                  [ix, pos = std::move(pos), head_dim, base](Tape& t, std::size_t s) {
                    Array g = t.grad(s);
                    rope_rotate_inplace(g, pos, head_dim, base, true);
                    accumulate(t.grad(ix), g);
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape();
  const Array& v = a.value();
  if (begin >= end || end > v.cols()) {
    throw NumericError("slice_cols: range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") outside " + shape_string(v.shape()));
  }
  const std::size_t w = end - begin;
  Array out = Array::matrix(v.rows(), w);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    std::copy_n(v.data() + r * v.cols() + begin, w, out.data() + r * w);
  }
  const auto ia = a.id();
  return t.record(std::move(out), {ia}, [ia, begin, w](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    Array& ga = t.grad(ia);
    const std::size_t c = ga.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t j = 0; j < w; ++j) ga[r * c + begin + j] += g[r * w + j];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_cols: no operands");
  Tape& t = *parts[0].tape();
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    if (p.value().rows() != rows) {
      throw NumericError("concat_cols: row counts differ " + shape_string(p.value().shape()) +
                         " vs " + shape_string(parts[0].value().shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Array out = Array::matrix(rows, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().data() + r * w, w, out.data() + r * total + off);
    }
    off += w;
  }
  return t.record(std::move(out), ids, [ids, widths, total](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (t.requires_grad(ids[k])) {
        Array& gp = t.grad(ids[k]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
        }
      }
      off += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_rows: no operands");
  Tape& t = *parts[0].tape();
  const std::size_t cols = parts[0].value().cols();
  std::vector<std::size_t> ids;
  std::vector<float> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_rows");
    if (p.value().cols() != cols) {
      throw NumericError("concat_rows: column counts differ " +
                         shape_string(p.value().shape()) + " vs " +
                         shape_string(parts[0].value().shape()));
    }
    ids.push_back(p.id());
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
    rows += p.value().rows();
  }
  return t.record(Array({rows, cols}, std::move(data)), ids, [ids](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Array& gp = t.grad(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  Tape& t = *a.tape();
  const Array& v = a.value();
  const std::size_t c = v.cols();
  Array out = Array::matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= v.rows()) {
      throw NumericError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                         shape_string(v.shape()));
    }
    std::copy_n(v.data() + rows[i] * c, c, out.data() + i * c);
  }
  const auto ia = a.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx), c](Tape& t, std::size_t s) {
    const Array& g = t.grad(s);
    Array& ga = t.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
    }
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (float v : a.value().values()) s += v;
  const auto ia = a.id();
  return t.record(Array::scalar(static_cast<float>(s)), {ia}, [ia](Tape& t, std::size_t self) {
    const float g = t.grad(self)[0];
    Array& ga = t.grad(ia);
    for (auto& v : ga.values()) v += g;
  });
}

Var mean_all(Var a) {
  const auto n = static_cast<float>(a.value().size());
  return scale(sum_all(a), 1.0F / n);
}

Var masked_mse(Var pred, const Array& target, std::span<const float> row_weights) {
  Tape& t = *pred.tape();
  const Array& p = pred.value();
  require_same_shape(p, target, "masked_mse");
  if (row_weights.size() != p.rows()) {
    throw NumericError("masked_mse: " + std::to_string(row_weights.size()) + " weights for " +
                       std::to_string(p.rows()) + " rows");
  }
  double wsum = 0.0;
  for (float w : row_weights) wsum += w;
  if (wsum <= 0.0) throw NumericError("masked_mse: every row is masked");
  const std::size_t c = p.cols();
  const double denom = wsum * static_cast<double>(c);
  double acc = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (row_weights[r] == 0.0F) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(p(r, j)) - target(r, j);
      s += d * d;
    }
    acc += row_weights[r] * s;
  }
  const auto ip = pred.id();
  std::vector<float> w(row_weights.begin(), row_weights.end());
  return t.record(Array::scalar(static_cast<float>(acc / denom)), {ip},
                  [ip, target, w = std::move(w), denom, c](Tape& t, std::size_t s) {
                    const double g = t.grad(s)[0];
                    const Array& pv = t.value(ip);
                    Array& gp = t.grad(ip);
                    for (std::size_t r = 0; r < pv.rows(); ++r) {
                      if (w[r] == 0.0F) continue;
                      const double k = 2.0 * w[r] * g / denom;
                      for (std::size_t j = 0; j < c; ++j) {
                        gp(r, j) += static_cast<float>(k * (pv(r, j) - target(r, j)));
                      }
                    }
                  });
}

}  // namespace duplex::num
