#include "glotran/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace glotran::autodiff {

Var Tape::leaf(Matrix value, bool needs_grad) {
  nodes_.push_back({std::move(value), Matrix(), nullptr, needs_grad});
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::push(Matrix value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (auto p : parents) needs = needs || nodes_[p.id].needs_grad;
  nodes_.push_back({std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return {static_cast<int>(nodes_.size()) - 1};
}

Matrix Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (value(root).size() != 1) throw std::invalid_argument("backward root must be scalar");
  accumulate(root, Matrix::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

Var matmul(Tape& t, Var a, Var b) {
  return t.push(t.value(a) * t.value(b), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  return t.push(t.value(a) * t.value(b).transpose(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b));
    if (t.needs_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

Var add(Tape& t, Var a, Var b) {
  return t.push(t.value(a) + t.value(b), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a).rowwise() + t.value(row).row(0);
  return t.push(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.push(t.value(a) * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_const(Tape& t, Var a, const Matrix& c) {
  return t.push(t.value(a) + c, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = t.value(x);
  const auto d = xv.cols();
  Matrix xhat(xv.rows(), d);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * t.value(gain).row(0).array()).matrix();
  out.rowwise() += t.value(bias).row(0);
  return t.push(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat, inv_std](Tape& t, const Matrix& g) {
                  if (t.needs_grad(gain)) {
                    t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
                  }
                  if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
                  if (!t.needs_grad(x)) return;
                  const Matrix gh = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
                  const double d = static_cast<double>(gh.cols());
                  Matrix gx(gh.rows(), gh.cols());
                  for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                    const double m1 = gh.row(r).sum() / d;
                    const double m2 = gh.row(r).dot(xhat.row(r)) / d;
                    gx.row(r) =
                        (gh.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                  }
                  t.accumulate(x, gx);
                });
}

Var gelu(Tape& t, Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Matrix& xv = t.value(x);
  const Eigen::ArrayXXd u = kC * (xv.array() + kA * xv.array().cube());
  const Eigen::ArrayXXd th = u.tanh();
  Matrix out = (0.5 * xv.array() * (1.0 + th)).matrix();
  Matrix deriv = (0.5 * (1.0 + th) + 0.5 * xv.array() * (1.0 - th.square()) * kC *
                                         (1.0 + 3.0 * kA * xv.array().square()))
                     .matrix();
  return t.push(std::move(out), {x}, [x, deriv](Tape& t, const Matrix& g) {
    t.accumulate(x, (g.array() * deriv.array()).matrix());
  });
}

Var softmax_rows(Tape& t, Var x, bool causal, int offset) {
  const Matrix& xv = t.value(x);
  Matrix p = Matrix::Zero(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(xv.cols(), i + offset + 1) : xv.cols();
    if (limit <= 0) continue;
    const double mx = xv.row(i).head(limit).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < limit; ++j) {
      p(i, j) = std::exp(xv(i, j) - mx);
      sum += p(i, j);
    }
    p.row(i).head(limit) /= sum;
  }
  Matrix pv = p;
  return t.push(std::move(p), {x}, [x, pv](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = (g.array() * pv.array()).rowwise().sum();
    t.accumulate(x, (pv.array() * (g.array().colwise() - dot.array())).matrix());
  });
}

Var cols(Tape& t, Var a, int start, int count) {
  Matrix out = t.value(a).middleCols(start, count);
  return t.push(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

Var rows(Tape& t, Var a, int start, int count) {
  Matrix out = t.value(a).middleRows(start, count);
  return t.push(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

Var hconcat(Tape& t, const std::vector<Var>& parts) {
  Eigen::Index total = 0;
  for (auto p : parts) total += t.value(p).cols();
  Matrix out(t.value(parts.front()).rows(), total);
  Eigen::Index at = 0;
  for (auto p : parts) {
    out.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  return t.push(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (auto p : parts) {
      const auto c = t.value(p).cols();
      t.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var vconcat(Tape& t, const std::vector<Var>& parts) {
  Eigen::Index total = 0;
  for (auto p : parts) total += t.value(p).rows();
  Matrix out(total, t.value(parts.front()).cols());
  Eigen::Index at = 0;
  for (auto p : parts) {
    out.middleRows(at, t.value(p).rows()) = t.value(p);
    at += t.value(p).rows();
  }
  return t.push(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (auto p : parts) {
      const auto r = t.value(p).rows();
      t.accumulate(p, g.middleRows(at, r));
      at += r;
    }
  });
}

Var gather_rows(Tape& t, Var table, const std::vector<int>& indices) {
  const Matrix& tv = t.value(table);
  Matrix out(static_cast<Eigen::Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.rows()) throw std::out_of_range("gather_rows index");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(indices[i]);
  }
  return t.push(std::move(out), {table}, [table, indices](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(table).rows(), t.value(table).cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      full.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
    }
    t.accumulate(table, full);
  });
}

Var gather_table(Tape& t, Var table, const Eigen::MatrixXi& src, const Eigen::MatrixXi& bucket) {
  const Matrix& tv = t.value(table);
  Matrix out(src.rows(), src.cols());
  for (Eigen::Index i = 0; i < src.rows(); ++i) {
    for (Eigen::Index j = 0; j < src.cols(); ++j) out(i, j) = tv(src(i, j), bucket(i, j));
  }
  return t.push(std::move(out), {table}, [table, src, bucket](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(table).rows(), t.value(table).cols());
    for (Eigen::Index i = 0; i < src.rows(); ++i) {
      for (Eigen::Index j = 0; j < src.cols(); ++j) full(src(i, j), bucket(i, j)) += g(i, j);
    }
    t.accumulate(table, full);
  });
}

Var cross_entropy_sum(Tape& t, Var logits, const std::vector<int>& targets,
                      const std::vector<bool>& mask) {
  const Matrix& lv = t.value(logits);
  Matrix probs = Matrix::Zero(lv.rows(), lv.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const double mx = lv.row(r).maxCoeff();
    const double lse = mx + std::log((lv.row(r).array() - mx).exp().sum());
    total += lse - lv(r, targets[static_cast<std::size_t>(r)]);
    probs.row(r) = (lv.row(r).array() - lse).exp();
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), {logits}, [logits, probs, targets, mask](Tape& t, const Matrix& g) {
    Matrix gl = probs;
    for (Eigen::Index r = 0; r < gl.rows(); ++r) {
      if (mask[static_cast<std::size_t>(r)]) gl(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
    }
    t.accumulate(logits, gl * g(0, 0));
  });
}

}  // namespace glotran::autodiff
