#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
// Double precision on the tape; float32 only at the storage boundary.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hgen/rng.hpp"
#include "hgen/tensor.hpp"

namespace hgen::ad {

struct Arr {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Arr() = default;
    explicit Arr(std::vector<int64_t> s, double fill = 0.0);
    Arr(std::vector<int64_t> s, std::vector<double> d);

    int64_t numel() const;
    double& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return v[static_cast<size_t>(i)]; }

    static Arr from_tensor(const Tensor& t);
    Tensor to_tensor() const;
};

class Node;
using Var = std::shared_ptr<Node>;

class Node {
  public:
    Arr val;
    Arr grad;  // allocated on demand, same shape as val
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void()> backprop;  // reads this->grad, accumulates into parents

    void ensure_grad();
    void accumulate(const Arr& g);
};

Var leaf(Arr value, bool requires_grad = false);
Var constant(Arr value);
Var scalar(double value);

// Runs reverse sweep from a scalar root; seeds d(root)/d(root)=1.
void backward(const Var& root);

// When false, ops still compute values but record no graph (inference mode).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
};
bool grad_enabled();

// ---- elementwise / broadcast ----
// b may broadcast against a: trailing-aligned, each dim equal or 1 on b's side.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scaled(const Var& a, const Var& b, double s);  // a + s*b
Var relu(const Var& a);
Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double)>& dfdx);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);      // {N,K} x {K,M}
Var bmm(const Var& a, const Var& b);         // {B,N,K} x {B,K,M}
Var transpose_last2(const Var& a);           // {...,N,M} -> {...,M,N}
// x folded to rows over last dim: {...,In} x {In,Out} + bias{Out}
Var linear(const Var& x, const Var& w, const Var& b);

// ---- shaping ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int64_t start, int64_t len);

// ---- reductions / norms ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mse(const Var& a, const Var& b);
Var softmax_last(const Var& a);
Var layer_norm_last(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- lookup ----
Var embedding(const Var& table, const std::vector<int64_t>& indices);  // {N,D}

// ---- convolution (NCHW) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x(const Var& x);
Var mean_hw(const Var& x);  // {B,C,H,W} -> {B,C}

// ---- rotations ----
// Axis-angle {J,3} -> rotation matrices {J,3,3}; Rodrigues with series
// branches smooth through the zero-angle point.
Var rodrigues(const Var& aa);

// ---- parameters / optimizer ----
struct ParamBundle {
    std::map<std::string, Var> params;

    Var add(const std::string& name, Arr init);
    Var get(const std::string& name) const;
    void zero_grad();
    int64_t total_size() const;

    void append_to(TensorStore& store, const std::string& prefix) const;
    void load_from(const TensorStore& store, const std::string& prefix);
};

struct AdamHyper {
    double lr = 1e-4;   // constant default across shipped configs
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamState {
  public:
    // Bias-corrected moments; weight decay applied decoupled from the gradient.
    void step(ParamBundle& params, const AdamHyper& hyper);
    int64_t step_count() const { return t_; }

  private:
    std::map<std::string, std::pair<Arr, Arr>> moments_;  // (m, v)
    int64_t t_ = 0;
};

// ---- initialization ----
Arr init_uniform_fanin(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);
Arr init_gaussian(std::vector<int64_t> shape, double std_dev, Rng& rng);

// ---- gradient checking ----
struct GradCheckEntry {
    std::string param;
    int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass = false;
};

// loss_fn(params, grads_out): returns the scalar loss; when grads_out is
// true it must also leave analytic gradients on the param Vars.
using LossFn = std::function<double(ParamBundle&, bool grads_out)>;

GradCheckReport grad_check(const LossFn& loss_fn, ParamBundle& params,
                           double epsilon = 1e-4, double rel_tol = 1e-3,
                           int64_t max_checks_per_param = 16,
                           uint64_t subsample_seed = 0);

}  // namespace hgen::ad
