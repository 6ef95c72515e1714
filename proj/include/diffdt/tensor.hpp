#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices. Everything is
// 2-D (scalars are 1x1); values are double precision so gradient checks can
// hit tight tolerances.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "diffdt/common.hpp"

namespace diffdt {

struct TensorNode;
using Tensor = std::shared_ptr<TensorNode>;

struct TensorNode {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(TensorNode&)> backward_fn;  // accumulates into parents

  std::size_t numel() const { return value.size(); }
  double& at(int r, int c) { return value[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return value[static_cast<std::size_t>(r) * cols + c]; }
  double& gat(int r, int c) { return grad[static_cast<std::size_t>(r) * cols + c]; }
  double scalar() const;
};

Tensor tensor(int rows, int cols, bool requires_grad = false);
Tensor tensor(int rows, int cols, const std::vector<double>& data, bool requires_grad = false);
Tensor scalar_tensor(double v);
// Gaussian init, scale * N(0,1).
Tensor randn(int rows, int cols, Rng& rng, double scale, bool requires_grad = true);

// Elementwise / broadcast.
Tensor add(const Tensor& a, const Tensor& b);               // same shape
Tensor add_rows(const Tensor& m, const Tensor& row);        // [m,n] + [1,n]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);               // elementwise
Tensor mul_rows(const Tensor& m, const Tensor& row);        // [m,n] * [1,n]
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);         // a * b^T
Tensor transpose(const Tensor& a);

// Shape ops.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor reshape(const Tensor& a, int rows, int cols);

// Normalization / softmax.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Softmax over columns j <= i only; entries above the diagonal are exactly 0.
Tensor causal_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);

// Lookup / reductions / losses.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices);
Tensor gather_cols(const Tensor& a, const std::vector<int>& col_per_row);  // [m,1]
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mse_loss(const Tensor& a, const Tensor& b);
// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets);

// Stop-gradient primitives.
Tensor detach(const Tensor& a);
// Forward takes values from `post`, backward routes the full gradient to `pre`.
Tensor straight_through(const Tensor& pre, const Tensor& post);

// Assembles a lower-triangular matrix from a packed row of length N(N+1)/2
// (row-major lower triangle), applying softplus to diagonal entries.
Tensor cholesky_assemble(const Tensor& packed, int n);

// Backward pass from a scalar loss; fills .grad on every requires_grad leaf.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Parameters and optimization.

class ParamStore {
 public:
  Tensor create(const std::string& name, int rows, int cols, Rng& rng, double scale);
  Tensor create_zero(const std::string& name, int rows, int cols);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  void zero_grad();

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update using the gradients accumulated on the store's
  // tensors; throws TrainError naming the parameter on NaN gradients.
  void step(ParamStore& store);
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
  std::int64_t t_ = 0;
};

// Checkpoints: magic "DDCK", version, vocabulary hash string, then named
// float32 little-endian arrays with shapes.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& vocab_hash);
// Loads into an existing store (shapes must match) and returns the vocab hash.
std::string load_checkpoint(const std::string& path, ParamStore& store);
// Creates tensors while loading into an empty store.
std::string load_checkpoint_into_new(const std::string& path, ParamStore& store);

}  // namespace diffdt
