#include "rflow/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace rflow {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape s) {
    Tensor t;
    int64_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(Shape s, std::vector<double> values) {
    if (shape_numel(s) != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("value count does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

double Tensor::value() const {
    if (size() != 1) throw std::runtime_error("value() requires a scalar tensor, got " + shape_str(shape));
    return (*data)[0];
}

void Tensor::enable_grad() {
    if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
}

// ---- tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif
}  // namespace

Tape* active_tape() { return g_active_tape; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

int Tape::record(int64_t out_numel, BackwardFn fn) {
    nodes_.push_back(Node{std::move(fn), out_numel});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input_node(const Tensor& t) {
    if (t.node >= 0) return t.node;
    if (!t.requires_grad()) return -1;
    auto sink = t.grad;
    return record(t.size(), [sink](Tape&, const std::vector<double>& g) {
        for (size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    });
}

std::vector<double>& Tape::grad_buf(int id, int64_t numel) {
    auto& buf = grads_[static_cast<size_t>(id)];
    if (buf.empty()) buf.assign(static_cast<size_t>(numel), 0.0);
    return buf;
}

void Tape::backward(const Tensor& loss) {
    if (loss.node < 0) throw std::runtime_error("backward: loss is detached from the tape");
    if (loss.size() != 1) throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape));
    grad_buf(loss.node, 1)[0] += 1.0;
    for (int i = loss.node; i >= 0; --i) {
        auto& g = grads_[static_cast<size_t>(i)];
        if (g.empty()) continue;  // node does not influence the loss
        nodes_[static_cast<size_t>(i)].backward(*this, g);
        g.clear();
        g.shrink_to_fit();
    }
    clear();
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
}

void backward(const Tensor& loss) {
    if (!g_active_tape) throw std::runtime_error("backward: no active tape");
    g_active_tape->backward(loss);
}

// ---- kernels ---------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]. ikj order keeps the inner loop contiguous.
void mm(double* C, const double* A, const double* B, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* Crow = C + static_cast<int64_t>(i) * n;
        const double* Arow = A + static_cast<int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double a = Arow[kk];
            const double* Brow = B + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) Crow[j] += a * Brow[j];
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n], written as a sum of outer products.
void mm_at(double* C, const double* A, const double* B, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Arow = A + static_cast<int64_t>(i) * k;
        const double* Brow = B + static_cast<int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double a = Arow[kk];
            double* Crow = C + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) Crow[j] += a * Brow[j];
        }
    }
}

thread_local std::vector<double> g_scratch;

// C[m,n] += A[m,k] * B[n,k]^T. B is transposed into scratch once so the
// accumulation stays in the vectorizable ikj form.
void mm_bt(double* C, const double* A, const double* B, int m, int k, int n) {
    g_scratch.assign(static_cast<size_t>(k) * n, 0.0);
    for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk) g_scratch[static_cast<size_t>(kk) * n + j] = B[static_cast<int64_t>(j) * k + kk];
    mm(C, A, g_scratch.data(), m, k, n);
}

void check_finite(const Tensor& t, const char* op) {
    if (!g_finite_checks) return;
    for (double v : *t.data) {
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

struct Rows {
    int m, n;
};

// Views any tensor as [rows, last-axis] for row-wise ops.
Rows as_rows(const Tensor& x) {
    if (x.rank() == 0 || x.size() == 0) throw std::invalid_argument("empty tensor");
    int n = x.shape.back();
    return Rows{static_cast<int>(x.size() / n), n};
}

}  // namespace

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mm(out.ptr(), a.ptr(), b.ptr(), m, k, n);
    check_finite(out, "matmul");
    if (Tape* tp = active_tape()) {
        int pa = tp->input_node(a), pb = tp->input_node(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                if (pa >= 0) mm_bt(t.grad_buf(pa, int64_t(m) * k).data(), g.data(), bd->data(), m, n, k);
                if (pb >= 0) mm_at(t.grad_buf(pb, int64_t(k) * n).data(), ad->data(), g.data(), m, k, n);
            });
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    mm_bt(out.ptr(), a.ptr(), b.ptr(), m, k, n);
    check_finite(out, "matmul_nt");
    if (Tape* tp = active_tape()) {
        int pa = tp->input_node(a), pb = tp->input_node(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                if (pa >= 0) mm(t.grad_buf(pa, int64_t(m) * k).data(), g.data(), bd->data(), m, n, k);
                if (pb >= 0) mm_at(t.grad_buf(pb, int64_t(n) * k).data(), g.data(), ad->data(), m, n, k);
            });
        }
    }
    return out;
}

namespace {

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
    check_finite(out, name);
    if (Tape* tp = active_tape()) {
        int pa = tp->input_node(a), pb = tp->input_node(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tp->record(n, [=](Tape& t, const std::vector<double>& g) {
                if (pa >= 0) {
                    auto& ga = t.grad_buf(pa, n);
                    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bwd((*ad)[i], (*bd)[i], 0);
                }
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb, n);
                    for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * bwd((*ad)[i], (*bd)[i], 1);
                }
            });
        }
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double, int) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double, int side) { return side == 0 ? 1.0 : -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double x, double y, int side) { return side == 0 ? y : x; });
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
    check_finite(out, "scale");
    if (Tape* tp = active_tape()) {
        int pa = tp->input_node(a);
        if (pa >= 0) {
            out.node = tp->record(n, [=](Tape& t, const std::vector<double>& g) {
                auto& ga = t.grad_buf(pa, n);
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
            });
        }
    }
    return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
    auto r = as_rows(x);
    if (v.size() != r.n) throw std::invalid_argument("add_rowwise: vector length mismatch");
    Tensor out = Tensor::zeros(x.shape);
    for (int i = 0; i < r.m; ++i)
        for (int j = 0; j < r.n; ++j) (*out.data)[int64_t(i) * r.n + j] = (*x.data)[int64_t(i) * r.n + j] + (*v.data)[j];
    check_finite(out, "add_rowwise");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x), pv = tp->input_node(v);
        if (px >= 0 || pv >= 0) {
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                if (px >= 0) {
                    auto& gx = t.grad_buf(px, int64_t(r.m) * r.n);
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (pv >= 0) {
                    auto& gv = t.grad_buf(pv, r.n);
                    for (int i = 0; i < r.m; ++i)
                        for (int j = 0; j < r.n; ++j) gv[j] += g[int64_t(i) * r.n + j];
                }
            });
        }
    }
    return out;
}

Tensor mul_rowwise(const Tensor& x, const Tensor& v) {
    auto r = as_rows(x);
    if (v.size() != r.n) throw std::invalid_argument("mul_rowwise: vector length mismatch");
    Tensor out = Tensor::zeros(x.shape);
    for (int i = 0; i < r.m; ++i)
        for (int j = 0; j < r.n; ++j) (*out.data)[int64_t(i) * r.n + j] = (*x.data)[int64_t(i) * r.n + j] * (*v.data)[j];
    check_finite(out, "mul_rowwise");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x), pv = tp->input_node(v);
        if (px >= 0 || pv >= 0) {
            auto xd = x.data, vd = v.data;
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                if (px >= 0) {
                    auto& gx = t.grad_buf(px, int64_t(r.m) * r.n);
                    for (int i = 0; i < r.m; ++i)
                        for (int j = 0; j < r.n; ++j) gx[int64_t(i) * r.n + j] += g[int64_t(i) * r.n + j] * (*vd)[j];
                }
                if (pv >= 0) {
                    auto& gv = t.grad_buf(pv, r.n);
                    for (int i = 0; i < r.m; ++i)
                        for (int j = 0; j < r.n; ++j) gv[j] += g[int64_t(i) * r.n + j] * (*xd)[int64_t(i) * r.n + j];
                }
            });
        }
    }
    return out;
}

Tensor softmax(const Tensor& x) {
    auto r = as_rows(x);
    Tensor out = Tensor::zeros(x.shape);
    for (int i = 0; i < r.m; ++i) {
        const double* row = x.ptr() + int64_t(i) * r.n;
        double* orow = out.ptr() + int64_t(i) * r.n;
        double mx = row[0];
        for (int j = 1; j < r.n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < r.n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (int j = 0; j < r.n; ++j) orow[j] /= s;
    }
    check_finite(out, "softmax");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            auto yd = out.data;
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(r.m) * r.n);
                for (int i = 0; i < r.m; ++i) {
                    const double* y = yd->data() + int64_t(i) * r.n;
                    const double* gr = g.data() + int64_t(i) * r.n;
                    double dot = 0.0;
                    for (int j = 0; j < r.n; ++j) dot += gr[j] * y[j];
                    double* gxr = gx.data() + int64_t(i) * r.n;
                    for (int j = 0; j < r.n; ++j) gxr[j] += y[j] * (gr[j] - dot);
                }
            });
        }
    }
    return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
    auto r = as_rows(x);
    Tensor out = Tensor::zeros(x.shape);
    std::vector<double> inv(static_cast<size_t>(r.m));
    for (int i = 0; i < r.m; ++i) {
        const double* row = x.ptr() + int64_t(i) * r.n;
        double mu = 0.0;
        for (int j = 0; j < r.n; ++j) mu += row[j];
        mu /= r.n;
        double var = 0.0;
        for (int j = 0; j < r.n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= r.n;
        inv[static_cast<size_t>(i)] = 1.0 / std::sqrt(var + eps);
        double* orow = out.ptr() + int64_t(i) * r.n;
        for (int j = 0; j < r.n; ++j) orow[j] = (row[j] - mu) * inv[static_cast<size_t>(i)];
    }
    check_finite(out, "layer_norm");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            auto yd = out.data;
            out.node = tp->record(out.size(), [=, inv = std::move(inv)](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(r.m) * r.n);
                for (int i = 0; i < r.m; ++i) {
                    const double* y = yd->data() + int64_t(i) * r.n;
                    const double* gr = g.data() + int64_t(i) * r.n;
                    double g_mean = 0.0, gy_mean = 0.0;
                    for (int j = 0; j < r.n; ++j) {
                        g_mean += gr[j];
                        gy_mean += gr[j] * y[j];
                    }
                    g_mean /= r.n;
                    gy_mean /= r.n;
                    double* gxr = gx.data() + int64_t(i) * r.n;
                    const double iv = inv[static_cast<size_t>(i)];
                    for (int j = 0; j < r.n; ++j) gxr[j] += iv * (gr[j] - g_mean - y[j] * gy_mean);
                }
            });
        }
    }
    return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) {
        double v = (*x.data)[i];
        (*out.data)[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    check_finite(out, "gelu");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            auto xd = x.data;
            out.node = tp->record(n, [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, n);
                for (int64_t i = 0; i < n; ++i) {
                    double v = (*xd)[i];
                    double u = kGeluC * (v + kGeluA * v * v * v);
                    double th = std::tanh(u);
                    double sech2 = 1.0 - th * th;
                    double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                    gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du);
                }
            });
        }
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    const int64_t n = a.size();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = (*a.data)[i] - (*b.data)[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    check_finite(out, "mse");
    if (Tape* tp = active_tape()) {
        int pa = tp->input_node(a), pb = tp->input_node(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tp->record(1, [=](Tape& t, const std::vector<double>& g) {
                const double c = 2.0 * g[0] / static_cast<double>(n);
                if (pa >= 0) {
                    auto& ga = t.grad_buf(pa, n);
                    for (int64_t i = 0; i < n; ++i) ga[i] += c * ((*ad)[i] - (*bd)[i]);
                }
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb, n);
                    for (int64_t i = 0; i < n; ++i) gb[i] -= c * ((*ad)[i] - (*bd)[i]);
                }
            });
        }
    }
    return out;
}

Tensor sum(const Tensor& x) {
    const int64_t n = x.size();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += (*x.data)[i];
    Tensor out = Tensor::scalar(acc);
    check_finite(out, "sum");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            out.node = tp->record(1, [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, n);
                for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
            });
        }
    }
    return out;
}

Tensor mean_over_axis(const Tensor& x, int axis) {
    if (x.rank() != 2 || (axis != 0 && axis != 1)) throw std::invalid_argument("mean_over_axis: need 2-D tensor, axis 0 or 1");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({axis == 0 ? n : m});
    if (axis == 0) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) (*out.data)[j] += (*x.data)[int64_t(i) * n + j];
        for (int j = 0; j < n; ++j) (*out.data)[j] /= m;
    } else {
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) (*out.data)[i] += (*x.data)[int64_t(i) * n + j];
            (*out.data)[i] /= n;
        }
    }
    check_finite(out, "mean_over_axis");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(m) * n);
                if (axis == 0) {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) gx[int64_t(i) * n + j] += g[j] / m;
                } else {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) gx[int64_t(i) * n + j] += g[i] / n;
                }
            });
        }
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    for (const auto& p : parts)
        if (p.rank() != 2) throw std::invalid_argument("concat: 2-D tensors only");
    int m = 0, n = 0;
    if (axis == 0) {
        n = parts[0].dim(1);
        for (const auto& p : parts) {
            if (p.dim(1) != n) throw std::invalid_argument("concat: column mismatch");
            m += p.dim(0);
        }
    } else {
        m = parts[0].dim(0);
        for (const auto& p : parts) {
            if (p.dim(0) != m) throw std::invalid_argument("concat: row mismatch");
            n += p.dim(1);
        }
    }
    Tensor out = Tensor::zeros({m, n});
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        if (axis == 0) {
            std::memcpy(out.ptr() + int64_t(off) * n, p.ptr(), sizeof(double) * static_cast<size_t>(p.size()));
            off += p.dim(0);
        } else {
            for (int i = 0; i < m; ++i)
                std::memcpy(out.ptr() + int64_t(i) * n + off, p.ptr() + int64_t(i) * p.dim(1),
                            sizeof(double) * static_cast<size_t>(p.dim(1)));
            off += p.dim(1);
        }
    }
    if (Tape* tp = active_tape()) {
        std::vector<int> pids(parts.size());
        bool any = false;
        for (size_t i = 0; i < parts.size(); ++i) {
            pids[i] = tp->input_node(parts[i]);
            any = any || pids[i] >= 0;
        }
        if (any) {
            std::vector<Shape> shapes;
            for (const auto& p : parts) shapes.push_back(p.shape);
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                for (size_t pi = 0; pi < pids.size(); ++pi) {
                    if (pids[pi] < 0) continue;
                    const int pm = shapes[pi][0], pn = shapes[pi][1];
                    auto& gp = t.grad_buf(pids[pi], int64_t(pm) * pn);
                    if (axis == 0) {
                        for (int64_t i = 0; i < int64_t(pm) * pn; ++i) gp[i] += g[int64_t(offsets[pi]) * n + i];
                    } else {
                        for (int i = 0; i < m; ++i)
                            for (int j = 0; j < pn; ++j) gp[int64_t(i) * pn + j] += g[int64_t(i) * n + offsets[pi] + j];
                    }
                }
            });
        }
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int from, int to) {
    if (x.rank() != 2 || (axis != 0 && axis != 1)) throw std::invalid_argument("slice: 2-D tensors, axis 0 or 1");
    const int m = x.dim(0), n = x.dim(1);
    const int bound = axis == 0 ? m : n;
    if (from < 0 || to > bound || from >= to) throw std::invalid_argument("slice: bad range");
    const int sm = axis == 0 ? to - from : m;
    const int sn = axis == 0 ? n : to - from;
    Tensor out = Tensor::zeros({sm, sn});
    if (axis == 0) {
        std::memcpy(out.ptr(), x.ptr() + int64_t(from) * n, sizeof(double) * static_cast<size_t>(out.size()));
    } else {
        for (int i = 0; i < m; ++i)
            std::memcpy(out.ptr() + int64_t(i) * sn, x.ptr() + int64_t(i) * n + from, sizeof(double) * static_cast<size_t>(sn));
    }
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(m) * n);
                if (axis == 0) {
                    for (int64_t i = 0; i < int64_t(sm) * sn; ++i) gx[int64_t(from) * n + i] += g[i];
                } else {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < sn; ++j) gx[int64_t(i) * n + from + j] += g[int64_t(i) * sn + j];
                }
            });
        }
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& ids) {
    if (x.rank() != 2) throw std::invalid_argument("gather_rows: 2-D tensor required");
    const int m = x.dim(0), n = x.dim(1);
    for (int id : ids)
        if (id < 0 || id >= m) throw std::out_of_range("gather_rows: row index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), n});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.ptr() + i * static_cast<size_t>(n), x.ptr() + int64_t(ids[i]) * n, sizeof(double) * static_cast<size_t>(n));
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(m) * n);
                for (size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < n; ++j) gx[int64_t(ids[i]) * n + j] += g[i * static_cast<size_t>(n) + j];
            });
        }
    }
    return out;
}

Tensor rope_rotate(const Tensor& x, const Tensor& cos_t, const Tensor& sin_t) {
    auto r = as_rows(x);
    if (r.n % 2 != 0) throw std::invalid_argument("rope_rotate: feature dim must be even");
    const int half = cos_t.shape.back();
    if (cos_t.shape != sin_t.shape || cos_t.dim(0) != r.m || (r.n / 2) % half != 0)
        throw std::invalid_argument("rope_rotate: table shape mismatch");
    Tensor out = Tensor::zeros(x.shape);
    auto rotate = [&](const double* in, double* o, const double* cs, const double* sn, double sign) {
        for (int i = 0; i < r.m; ++i) {
            const double* row = in + int64_t(i) * r.n;
            double* orow = o + int64_t(i) * r.n;
            const double* c = cs + int64_t(i) * half;
            const double* s = sn + int64_t(i) * half;
            for (int p = 0; p < r.n / 2; ++p) {
                const double cv = c[p % half], sv = sign * s[p % half];
                const double a = row[2 * p], b = row[2 * p + 1];
                orow[2 * p] = a * cv - b * sv;
                orow[2 * p + 1] = a * sv + b * cv;
            }
        }
    };
    rotate(x.ptr(), out.ptr(), cos_t.ptr(), sin_t.ptr(), 1.0);
    check_finite(out, "rope_rotate");
    if (Tape* tp = active_tape()) {
        int px = tp->input_node(x);
        if (px >= 0) {
            auto cd = cos_t.data, sd = sin_t.data;
            out.node = tp->record(out.size(), [=](Tape& t, const std::vector<double>& g) {
                auto& gx = t.grad_buf(px, int64_t(r.m) * r.n);
                // adjoint of a rotation is the inverse rotation
                std::vector<double> tmp(g.size());
                auto rot = [&](const double* in, double* o) {
                    for (int i = 0; i < r.m; ++i) {
                        const double* row = in + int64_t(i) * r.n;
                        double* orow = o + int64_t(i) * r.n;
                        const double* c = cd->data() + int64_t(i) * half;
                        const double* s = sd->data() + int64_t(i) * half;
                        for (int p = 0; p < r.n / 2; ++p) {
                            const double cv = c[p % half], sv = -s[p % half];
                            const double a = row[2 * p], b = row[2 * p + 1];
                            orow[2 * p] = a * cv - b * sv;
                            orow[2 * p + 1] = a * sv + b * cv;
                        }
                    }
                };
                rot(g.data(), tmp.data());
                for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
            });
        }
    }
    return out;
}

}  // namespace rflow
