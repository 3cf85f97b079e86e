#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

// Minimal reverse-mode tape over dense double matrices.
namespace glotran::autodiff {

using Matrix = Eigen::MatrixXd;

struct Var {
  int id = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var leaf(Matrix value, bool needs_grad = true);
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var push(Matrix value, const std::vector<Var>& parents, Backward backward);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  /// Zero matrix of the right shape if nothing reached `v`.
  Matrix grad(Var v) const;
  void accumulate(Var v, const Matrix& g);

  /// Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

Var matmul(Tape& t, Var a, Var b);
/// a * b^T
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// Adds a 1 x c row to every row of a.
Var add_row(Tape& t, Var a, Var row);
Var scale(Tape& t, Var a, double s);
/// Adds a constant matrix (no gradient flows into it).
Var add_const(Tape& t, Var a, const Matrix& c);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
/// tanh approximation
Var gelu(Tape& t, Var x);
/// Row softmax; with `causal`, entry (i, j) is excluded when j > i + offset.
Var softmax_rows(Tape& t, Var x, bool causal = false, int offset = 0);
Var cols(Tape& t, Var a, int start, int count);
Var rows(Tape& t, Var a, int start, int count);
Var hconcat(Tape& t, const std::vector<Var>& parts);
Var vconcat(Tape& t, const std::vector<Var>& parts);
/// Row `indices[i]` of `table` for each i.
Var gather_rows(Tape& t, Var table, const std::vector<int>& indices);
/// out(i, j) = table(src(i, j), bucket(i, j))
Var gather_table(Tape& t, Var table, const Eigen::MatrixXi& src, const Eigen::MatrixXi& bucket);
/// Sum over rows with mask of -log softmax(logits)(row, target); 1x1.
Var cross_entropy_sum(Tape& t, Var logits, const std::vector<int>& targets,
                      const std::vector<bool>& mask);

}  // namespace glotran::autodiff
