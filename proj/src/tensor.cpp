#include "epng/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epng {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (int e : shape_) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (values.size() != numel(shape_)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

void Tensor::track() {
  if (!grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw std::invalid_argument("reshape: " + shape_str(shape_) + " to " + shape_str(new_shape));
  }
  Tensor out;
  out.shape_ = std::move(new_shape);
  out.data_ = data_;
  out.grad_ = grad_;
  return out;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- tape ----------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(Tensor& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root is not scalar");
  if (!root.tracked()) throw std::invalid_argument("backward: root is not on the tape");
  root.grad()[0] += 1.0;
  for (std::size_t i = steps_.size(); i-- > 0;) steps_[i]();
}

// ---- op helpers ------------------------------------------------------------

namespace {

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, int rank) {
  if (x.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(x.shape()));
  }
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (taping({&a, &b})) {
    out.track();
    Tensor av = a, bv = b, ov = out;
    Tape::active()->record([av, bv, ov]() mutable {
      const double* g = ov.grad();
      if (av.tracked()) {
        for (std::size_t i = 0; i < av.size(); ++i) av.grad()[i] += g[i];
      }
      if (bv.tracked()) {
        for (std::size_t i = 0; i < bv.size(); ++i) bv.grad()[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (taping({&a, &b})) {
    out.track();
    Tensor av = a, bv = b, ov = out;
    Tape::active()->record([av, bv, ov]() mutable {
      const double* g = ov.grad();
      if (av.tracked()) {
        for (std::size_t i = 0; i < av.size(); ++i) av.grad()[i] += g[i];
      }
      if (bv.tracked()) {
        for (std::size_t i = 0; i < bv.size(); ++i) bv.grad()[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (taping({&a, &b})) {
    out.track();
    Tensor av = a, bv = b, ov = out;
    Tape::active()->record([av, bv, ov]() mutable {
      const double* g = ov.grad();
      if (av.tracked()) {
        for (std::size_t i = 0; i < av.size(); ++i) av.grad()[i] += g[i] * bv.data()[i];
      }
      if (bv.tracked()) {
        for (std::size_t i = 0; i < bv.size(); ++i) bv.grad()[i] += g[i] * av.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * c;
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, c]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g[i] * c;
    });
  }
  return out;
}

// ---- matrix ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.extent(1) != b.extent(0)) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " · " +
                                shape_str(b.shape()));
  }
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    const double* arow = a.data() + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (taping({&a, &b})) {
    out.track();
    Tensor av = a, bv = b, ov = out;
    Tape::active()->record([av, bv, ov, m, k, n]() mutable {
      const double* g = ov.grad();
      if (av.tracked()) {
        for (int i = 0; i < m; ++i) {
          double* da = av.grad() + static_cast<std::size_t>(i) * k;
          const double* grow = g + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const double* brow = bv.data() + static_cast<std::size_t>(p) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            da[p] += s;
          }
        }
      }
      if (bv.tracked()) {
        for (int i = 0; i < m; ++i) {
          const double* arow = av.data() + static_cast<std::size_t>(i) * k;
          const double* grow = g + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const double ai = arow[p];
            if (ai == 0.0) continue;
            double* db = bv.grad() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) db[j] += ai * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const int m = x.extent(0), n = x.extent(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out.data()[static_cast<std::size_t>(j) * m + i] = x.data()[static_cast<std::size_t>(i) * n + j];
    }
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, m, n]() mutable {
      const double* g = ov.grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          xv.grad()[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
        }
      }
    });
  }
  return out;
}

// ---- unary -----------------------------------------------------------------

Tensor exp(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::exp(x.data()[i]);
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g[i] * ov.data()[i];
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::log(x.data()[i]);
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g[i] / xv.data()[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double y = ov.data()[i];
        xv.grad()[i] += g[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv.data()[i] > 0.0) xv.grad()[i] += g[i];
      }
    });
  }
  return out;
}

// ---- rows ------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.extent(x.rank() - 1) < 1) {
    throw std::invalid_argument("softmax_rows: empty last axis in " + shape_str(x.shape()));
  }
  const int cols = x.extent(x.rank() - 1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(cols);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * cols;
    double* yi = out.data() + r * cols;
    double mx = xi[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < cols; ++j) yi[j] *= inv;
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, rows, cols]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = ov.data() + r * cols;
        const double* g = ov.grad() + r * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += g[j] * y[j];
        double* dx = xv.grad() + r * cols;
        for (int j = 0; j < cols; ++j) dx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int c = x.extent(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.extent(0) != c || beta.rank() != 1 || beta.extent(0) != c) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " for channels " + std::to_string(c));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  Tensor out(x.shape());
  std::vector<double> inv_std(rows), mu(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xi[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xi[j] - m) * (xi[j] - m);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = inv;
    double* yi = out.data() + r * c;
    for (int j = 0; j < c; ++j) yi[j] = gamma.data()[j] * (xi[j] - m) * inv + beta.data()[j];
  }
  if (taping({&x, &gamma, &beta})) {
    out.track();
    Tensor xv = x, gv = gamma, bv = beta, ov = out;
    Tape::active()->record([xv, gv, bv, ov, rows, c, mu, inv_std]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = xv.data() + r * c;
        const double* g = ov.grad() + r * c;
        const double inv = inv_std[r];
        const double m = mu[r];
        // d/dxhat, then the two mean corrections of the standard formula.
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < c; ++j) {
          const double xhat = (xi[j] - m) * inv;
          const double dxhat = g[j] * gv.data()[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        if (xv.tracked()) {
          double* dx = xv.grad() + r * c;
          for (int j = 0; j < c; ++j) {
            const double xhat = (xi[j] - m) * inv;
            const double dxhat = g[j] * gv.data()[j];
            dx[j] += inv * (dxhat - sum_dxhat / c - xhat * sum_dxhat_xhat / c);
          }
        }
        if (gv.tracked()) {
          for (int j = 0; j < c; ++j) gv.grad()[j] += g[j] * (xi[j] - m) * inv;
        }
        if (bv.tracked()) {
          for (int j = 0; j < c; ++j) bv.grad()[j] += g[j];
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("l2_normalize_rows: rank-0 input");
  const int c = x.extent(x.rank() - 1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  Tensor out(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * c;
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += xi[j] * xi[j];
    const double nrm = std::max(std::sqrt(s), eps);
    norms[r] = nrm;
    double* yi = out.data() + r * c;
    for (int j = 0; j < c; ++j) yi[j] = xi[j] / nrm;
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, rows, c, norms, eps]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = ov.data() + r * c;
        const double* g = ov.grad() + r * c;
        double* dx = xv.grad() + r * c;
        const double nrm = norms[r];
        if (nrm <= eps) {
          for (int j = 0; j < c; ++j) dx[j] += g[j] / nrm;
          continue;
        }
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += y[j] * g[j];
        for (int j = 0; j < c; ++j) dx[j] += (g[j] - y[j] * dot) / nrm;
      }
    });
  }
  return out;
}

// ---- reductions --------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out({1}, std::vector<double>{s});
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov]() mutable {
      const double g = ov.grad()[0];
      for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out({1}, std::vector<double>{s * inv});
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, inv]() mutable {
      const double g = ov.grad()[0] * inv;
      for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g;
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank("add_rowvec", x, 2);
  require_rank("add_rowvec", v, 1);
  if (x.extent(1) != v.extent(0)) {
    throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(x.shape()) + " + " +
                                shape_str(v.shape()));
  }
  const int rows = x.extent(0), c = x.extent(1);
  Tensor out(x.shape());
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < c; ++j) {
      out.data()[static_cast<std::size_t>(r) * c + j] = x.data()[static_cast<std::size_t>(r) * c + j] + v.data()[j];
    }
  }
  if (taping({&x, &v})) {
    out.track();
    Tensor xv = x, vv = v, ov = out;
    Tape::active()->record([xv, vv, ov, rows, c]() mutable {
      const double* g = ov.grad();
      if (xv.tracked()) {
        for (std::size_t i = 0; i < xv.size(); ++i) xv.grad()[i] += g[i];
      }
      if (vv.tracked()) {
        for (int r = 0; r < rows; ++r) {
          for (int j = 0; j < c; ++j) vv.grad()[j] += g[static_cast<std::size_t>(r) * c + j];
        }
      }
    });
  }
  return out;
}

// ---- layout ----------------------------------------------------------------

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const int rank = parts[0].rank();
  Shape head(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank || !std::equal(head.begin(), head.end(), p.shape().begin())) {
      throw std::invalid_argument("concat_last: shape mismatch " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    total += p.extent(rank - 1);
  }
  Shape out_shape = head;
  out_shape.push_back(total);
  Tensor out(out_shape);
  const std::size_t rows = numel(head);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const int c = p.extent(rank - 1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data() + r * c, c, out.data() + r * total + offset);
    }
    offset += static_cast<std::size_t>(c);
  }
  bool track = false;
  for (const Tensor& p : parts) {
    if (p.tracked()) track = true;
  }
  if (Tape::active() && track) {
    out.track();
    std::vector<Tensor> pv(parts.begin(), parts.end());
    Tensor ov = out;
    Tape::active()->record([pv, ov, rows, total]() mutable {
      const double* g = ov.grad();
      std::size_t offset = 0;
      for (Tensor& p : pv) {
        const int c = p.shape().back();
        if (p.tracked()) {
          for (std::size_t r = 0; r < rows; ++r) {
            double* dp = p.grad() + r * c;
            const double* gr = g + r * total + offset;
            for (int j = 0; j < c; ++j) dp[j] += gr[j];
          }
        }
        offset += static_cast<std::size_t>(c);
      }
    });
  }
  return out;
}

Tensor slice_last(const Tensor& x, int start, int len) {
  if (x.rank() < 1) throw std::invalid_argument("slice_last: rank-0 input");
  const int c = x.extent(x.rank() - 1);
  if (start < 0 || len <= 0 || start + len > c) {
    throw std::invalid_argument("slice_last: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") of " + std::to_string(c));
  }
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data() + r * c + start, len, out.data() + r * len);
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, rows, c, start, len]() mutable {
      const double* g = ov.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double* dx = xv.grad() + r * c + start;
        const double* gr = g + r * len;
        for (int j = 0; j < len; ++j) dx[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor take_rows(const Tensor& x, const std::vector<int>& ids) {
  require_rank("take_rows", x, 2);
  const int rows = x.extent(0), c = x.extent(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw std::invalid_argument("take_rows: index " + std::to_string(id) + " out of " +
                                  std::to_string(rows));
    }
  }
  Tensor out({static_cast<int>(ids.size()), c});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(x.data() + static_cast<std::size_t>(ids[r]) * c, c, out.data() + r * c);
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, ids, c]() mutable {
      const double* g = ov.grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        double* dx = xv.grad() + static_cast<std::size_t>(ids[r]) * c;
        for (int j = 0; j < c; ++j) dx[j] += g[r * c + j];
      }
    });
  }
  return out;
}

Tensor table_lookup(const Tensor& table, const std::vector<int>& idx, Shape out_shape) {
  require_rank("table_lookup", table, 1);
  if (idx.size() != numel(out_shape)) {
    throw std::invalid_argument("table_lookup: " + std::to_string(idx.size()) +
                                " indices for shape " + shape_str(out_shape));
  }
  const int buckets = table.extent(0);
  for (int i : idx) {
    if (i < 0 || i >= buckets) {
      throw std::invalid_argument("table_lookup: index " + std::to_string(i) + " out of " +
                                  std::to_string(buckets));
    }
  }
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) out.data()[i] = table.data()[idx[i]];
  if (taping({&table})) {
    out.track();
    Tensor tv = table, ov = out;
    Tape::active()->record([tv, ov, idx]() mutable {
      const double* g = ov.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) tv.grad()[idx[i]] += g[i];
    });
  }
  return out;
}

// ---- spatial ---------------------------------------------------------------

Tensor upsample_nearest(const Tensor& x, int factor) {
  require_rank("upsample_nearest", x, 3);
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor " + std::to_string(factor));
  const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
  const int oh = h * factor, ow = w * factor;
  Tensor out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy) {
    const int iy = oy / factor;
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = ox / factor;
      std::copy_n(x.data() + (static_cast<std::size_t>(iy) * w + ix) * c, c,
                  out.data() + (static_cast<std::size_t>(oy) * ow + ox) * c);
    }
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, h, w, c, factor, oh, ow]() mutable {
      const double* g = ov.grad();
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy / factor;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox / factor;
          double* dx = xv.grad() + (static_cast<std::size_t>(iy) * w + ix) * c;
          const double* gr = g + (static_cast<std::size_t>(oy) * ow + ox) * c;
          for (int j = 0; j < c; ++j) dx[j] += gr[j];
        }
      }
    });
  }
  return out;
}

namespace {

// Half-pixel-centre source coordinates, clamped at the borders.
struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

LerpAxis lerp_axis(int in, int out, int factor) {
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w0.resize(out);
  ax.w1.resize(out);
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    double fl = std::floor(src);
    double t = src - fl;
    int lo = static_cast<int>(fl);
    int hi = lo + 1;
    lo = std::clamp(lo, 0, in - 1);
    hi = std::clamp(hi, 0, in - 1);
    ax.i0[o] = lo;
    ax.i1[o] = hi;
    ax.w0[o] = 1.0 - t;
    ax.w1[o] = t;
  }
  return ax;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int factor) {
  require_rank("upsample_bilinear", x, 3);
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor " + std::to_string(factor));
  const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
  const int oh = h * factor, ow = w * factor;
  const LerpAxis ay = lerp_axis(h, oh, factor);
  const LerpAxis axx = lerp_axis(w, ow, factor);
  Tensor out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* p00 = x.data() + (static_cast<std::size_t>(ay.i0[oy]) * w + axx.i0[ox]) * c;
      const double* p01 = x.data() + (static_cast<std::size_t>(ay.i0[oy]) * w + axx.i1[ox]) * c;
      const double* p10 = x.data() + (static_cast<std::size_t>(ay.i1[oy]) * w + axx.i0[ox]) * c;
      const double* p11 = x.data() + (static_cast<std::size_t>(ay.i1[oy]) * w + axx.i1[ox]) * c;
      const double w00 = ay.w0[oy] * axx.w0[ox], w01 = ay.w0[oy] * axx.w1[ox];
      const double w10 = ay.w1[oy] * axx.w0[ox], w11 = ay.w1[oy] * axx.w1[ox];
      double* op = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
      for (int j = 0; j < c; ++j) op[j] = w00 * p00[j] + w01 * p01[j] + w10 * p10[j] + w11 * p11[j];
    }
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, w, c, oh, ow, ay, axx]() mutable {
      const double* g = ov.grad();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double* p00 = xv.grad() + (static_cast<std::size_t>(ay.i0[oy]) * w + axx.i0[ox]) * c;
          double* p01 = xv.grad() + (static_cast<std::size_t>(ay.i0[oy]) * w + axx.i1[ox]) * c;
          double* p10 = xv.grad() + (static_cast<std::size_t>(ay.i1[oy]) * w + axx.i0[ox]) * c;
          double* p11 = xv.grad() + (static_cast<std::size_t>(ay.i1[oy]) * w + axx.i1[ox]) * c;
          const double w00 = ay.w0[oy] * axx.w0[ox], w01 = ay.w0[oy] * axx.w1[ox];
          const double w10 = ay.w1[oy] * axx.w0[ox], w11 = ay.w1[oy] * axx.w1[ox];
          const double* gr = g + (static_cast<std::size_t>(oy) * ow + ox) * c;
          for (int j = 0; j < c; ++j) {
            p00[j] += w00 * gr[j];
            p01[j] += w01 * gr[j];
            p10[j] += w10 * gr[j];
            p11[j] += w11 * gr[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor avgpool2(const Tensor& x) {
  require_rank("avgpool2", x, 3);
  const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("avgpool2: odd extents " + shape_str(x.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  Tensor out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* p00 = x.data() + (static_cast<std::size_t>(2 * oy) * w + 2 * ox) * c;
      const double* p01 = p00 + c;
      const double* p10 = x.data() + (static_cast<std::size_t>(2 * oy + 1) * w + 2 * ox) * c;
      const double* p11 = p10 + c;
      double* op = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
      for (int j = 0; j < c; ++j) op[j] = 0.25 * (p00[j] + p01[j] + p10[j] + p11[j]);
    }
  }
  if (taping({&x})) {
    out.track();
    Tensor xv = x, ov = out;
    Tape::active()->record([xv, ov, w, c, oh, ow]() mutable {
      const double* g = ov.grad();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double* p00 = xv.grad() + (static_cast<std::size_t>(2 * oy) * w + 2 * ox) * c;
          double* p01 = p00 + c;
          double* p10 = xv.grad() + (static_cast<std::size_t>(2 * oy + 1) * w + 2 * ox) * c;
          double* p11 = p10 + c;
          const double* gr = g + (static_cast<std::size_t>(oy) * ow + ox) * c;
          for (int j = 0; j < c; ++j) {
            const double gv = 0.25 * gr[j];
            p00[j] += gv;
            p01[j] += gv;
            p10[j] += gv;
            p11[j] += gv;
          }
        }
      }
    });
  }
  return out;
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  require_rank("conv3x3", x, 3);
  require_rank("conv3x3", w, 4);
  require_rank("conv3x3", bias, 1);
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv3x3: stride " + std::to_string(stride));
  }
  const int h = x.extent(0), ww = x.extent(1), cin = x.extent(2);
  const int cout = w.extent(0);
  if (w.extent(1) != 3 || w.extent(2) != 3 || w.extent(3) != cin || bias.extent(0) != cout) {
    throw std::invalid_argument("conv3x3: weights " + shape_str(w.shape()) + ", bias " +
                                shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  }
  const int oh = (h - 1) / stride + 1;
  const int ow = (ww - 1) / stride + 1;
  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* op = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
      for (int co = 0; co < cout; ++co) op[co] = bias.data()[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= ww) continue;
          const double* xp = x.data() + (static_cast<std::size_t>(iy) * ww + ix) * cin;
          for (int co = 0; co < cout; ++co) {
            const double* wp = w.data() + ((static_cast<std::size_t>(co) * 3 + ky) * 3 + kx) * cin;
            double acc = 0.0;
            for (int ci = 0; ci < cin; ++ci) acc += xp[ci] * wp[ci];
            op[co] += acc;
          }
        }
      }
    }
  }
  if (taping({&x, &w, &bias})) {
    out.track();
    Tensor xv = x, wv = w, bv = bias, ov = out;
    Tape::active()->record([xv, wv, bv, ov, h, ww, cin, cout, oh, ow, stride]() mutable {
      const double* g = ov.grad();
      if (bv.tracked()) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double* gr = g + (static_cast<std::size_t>(oy) * ow + ox) * cout;
            for (int co = 0; co < cout; ++co) bv.grad()[co] += gr[co];
          }
        }
      }
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double* gr = g + (static_cast<std::size_t>(oy) * ow + ox) * cout;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride + kx - 1;
              if (ix < 0 || ix >= ww) continue;
              const std::size_t xoff = (static_cast<std::size_t>(iy) * ww + ix) * cin;
              for (int co = 0; co < cout; ++co) {
                const double gv = gr[co];
                if (gv == 0.0) continue;
                const std::size_t woff = ((static_cast<std::size_t>(co) * 3 + ky) * 3 + kx) * cin;
                if (xv.tracked()) {
                  const double* wp = wv.data() + woff;
                  double* dx = xv.grad() + xoff;
                  for (int ci = 0; ci < cin; ++ci) dx[ci] += gv * wp[ci];
                }
                if (wv.tracked()) {
                  const double* xp = xv.data() + xoff;
                  double* dw = wv.grad() + woff;
                  for (int ci = 0; ci < cin; ++ci) dw[ci] += gv * xp[ci];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace epng
