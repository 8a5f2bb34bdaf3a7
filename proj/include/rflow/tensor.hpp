#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace rflow {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major f64 tensor. Data is shared between shallow copies; a
// non-null grad buffer marks a leaf that collects gradients across backward
// passes until zero_grad(). `node` links the tensor to the active tape.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;
    int node = -1;

    Tensor() = default;

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape s, std::vector<double> values);

    int64_t size() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }
    double& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

    // Scalar extraction; throws unless the tensor holds exactly one value.
    double value() const;

    bool requires_grad() const { return grad != nullptr; }
    void enable_grad();
    void zero_grad();
    Tensor detached() const;
};

// Reverse-mode tape. Nodes are recorded in creation order, so parents always
// precede children; backward walks the list once in reverse. Gradients for
// intermediate nodes live in tape-owned buffers, leaf gradients are added
// into the tensors' own grad buffers.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

    int record(int64_t out_numel, BackwardFn fn);
    // Node id for an op input: the recorded node, a fresh leaf node for a
    // requires-grad tensor, or -1 for a constant.
    int input_node(const Tensor& t);

    std::vector<double>& grad_buf(int id, int64_t numel);
    bool touched(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

    void backward(const Tensor& loss);
    size_t size() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        BackwardFn backward;
        int64_t numel;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

Tape* active_tape();

// RAII scope installing a fresh tape as the active one.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

// Runs backward on the active tape and clears it.
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------
// Every op computes eagerly and, when a tape is active and an input is
// tracked, records its vector-Jacobian product.

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [m,k]x[n,k]^T -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowwise(const Tensor& x, const Tensor& v);  // [m,n] + [n]
Tensor mul_rowwise(const Tensor& x, const Tensor& v);  // [m,n] * [n]
Tensor softmax(const Tensor& x);                       // last axis
Tensor layer_norm(const Tensor& x, double eps = 1e-6); // last axis, no affine
Tensor gelu(const Tensor& x);                          // tanh approximation
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean_over_axis(const Tensor& x, int axis);      // 2-D only
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 2-D, axis 0|1
Tensor slice(const Tensor& x, int axis, int from, int to);  // 2-D, axis 0|1
Tensor gather_rows(const Tensor& x, const std::vector<int>& ids);
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
}
// Rotates consecutive (even, odd) feature pairs by per-position angles given
// as cos/sin tables of shape [m, n/2]; the same tables apply to every head.
Tensor rope_rotate(const Tensor& x, const Tensor& cos_t, const Tensor& sin_t);

// Toggles NaN/Inf detection on op outputs (on by default in debug builds).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace rflow
