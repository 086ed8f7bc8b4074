#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mlvae/core.hpp"
#include "mlvae/rng.hpp"

namespace mlvae {

enum class Act { Identity, Tanh, Sigmoid };

// Named view of one parameter tensor and its gradient accumulator. Views are
// invalidated by moving or copying the owning net, so consumers re-fetch the
// list rather than caching it.
struct TensorRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;
};

struct Dense {
  Matrix w;  // in x out
  Eigen::RowVectorXd b;
  Act act = Act::Identity;
  Matrix gw;
  Eigen::RowVectorXd gb;
  // caches written by forward, consumed by backward
  Matrix x, y;
};

// Row-batched multilayer perceptron: each input row is one frame. Forward
// caches activations; a backward must follow its own forward.
class Mlp {
 public:
  Mlp() = default;
  static Mlp make(const std::vector<int>& dims, Act hidden_act, Act out_act,
                  Rng& rng);

  const Matrix& forward(const Matrix& x);
  // Accumulates parameter gradients from d(loss)/d(output).
  void backward(const Matrix& dy);
  // Same, but also returns d(loss)/d(input).
  Matrix backward_to_input(const Matrix& dy);

  void zero_grad();
  int in_dim() const { return layers.empty() ? 0 : (int)layers.front().w.rows(); }
  int out_dim() const { return layers.empty() ? 0 : (int)layers.back().w.cols(); }
  long param_count() const;
  std::vector<TensorRef> tensors(const std::string& prefix);

  std::vector<Dense> layers;

 private:
  Matrix backward_impl(const Matrix& dy, bool want_input_grad);
};

// First-order optimizer with bias-corrected moments and a global
// gradient-norm clip applied per step over the whole parameter group.
class Adam {
 public:
  Adam() = default;
  Adam(double lr, double clip) : lr_(lr), clip_(clip) {}

  void init(const std::vector<TensorRef>& params);
  void step(const std::vector<TensorRef>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps = 0;
  std::vector<Vector> m, v;

 private:
  double lr_ = 1e-3;
  double clip_ = 5.0;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
};

// Stacks each frame with its +-w neighbors (zero-padded at the edges) into a
// single row: T x D becomes T x D*(2w+1).
Matrix context_embed(const Matrix& x, int w);

// Rounds every parameter and optimizer moment through 32-bit floats, making
// the in-memory state exactly representable in checkpoints.
void quantize_f32(const std::vector<TensorRef>& params);
void quantize_f32(Vector& v);

}  // namespace mlvae
