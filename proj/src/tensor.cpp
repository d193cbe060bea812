#include "fnetar/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace fnetar {

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite value in result (overflow or NaN)");
        }
    }
}

/// Records `out` onto the active tape when any input is tracked.
void record_op(const Tensor& out, std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
    Tape* tape = Tape::active();
    if (!tape) return;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool any = false;
    for (const Tensor* in : inputs) {
        int id = tape->track(*in);
        ids.push_back(id);
        any = any || id >= 0;
    }
    if (!any) return;
    tape->record(out, std::move(ids), std::move(fn));
}

void accumulate(std::vector<double>* dst, const std::vector<double>& src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// C [m x n] += A [m x k] . B [k x n]
void mm_accumulate(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = a + static_cast<std::size_t>(i) * k;
        double* c_row = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double coef = a_row[p];
            const double* b_row = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) c_row[j] += coef * b_row[j];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(shape_product(shape_), 0.0)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_product(shape_) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (double& x : *t.data_) x = rng.normal(mean, stddev);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw RankError("item() requires a one-element tensor, got shape " + shape_str());
    return (*data_)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
        if (!grad_) grad_ = std::make_shared<std::vector<double>>(numel(), 0.0);
    } else {
        grad_.reset();
    }
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
}

std::vector<double>& Tensor::mutable_grad() {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    if (requires_grad_) {
        t.requires_grad_ = true;
        t.grad_ = std::make_shared<std::vector<double>>(*grad_);
    }
    return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

int Tape::track(const Tensor& t) {
    if (t.tape_id() == id_ && t.node() >= 0) return t.node();
    if (!t.requires_grad()) return -1;
    Node leaf;
    leaf.size = t.numel();
    leaf.leaf_grad = t.grad_ptr();
    nodes_.push_back(std::move(leaf));
    int id = static_cast<int>(nodes_.size()) - 1;
    t.bind_node(id, id_);
    return id;
}

int Tape::record(const Tensor& out, std::vector<int> inputs, BackwardFn fn) {
    Node node;
    node.inputs = std::move(inputs);
    node.size = out.numel();
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    int id = static_cast<int>(nodes_.size()) - 1;
    out.bind_node(id, id_);
    return id;
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw Error("backward already ran on this tape; record a fresh forward pass first");
    if (loss.numel() != 1) throw RankError("backward requires a scalar loss, got shape " + loss.shape_str());
    if (loss.tape_id() != id_ || loss.node() < 0) throw Error("loss is not recorded on this tape");

    std::vector<std::vector<double>> adjoint(nodes_.size());
    adjoint[static_cast<std::size_t>(loss.node())] = {1.0};

    for (int i = loss.node(); i >= 0; --i) {
        auto& adj = adjoint[static_cast<std::size_t>(i)];
        if (adj.empty()) continue;
        Node& node = nodes_[static_cast<std::size_t>(i)];
        if (node.leaf_grad) {
            auto& grad = *node.leaf_grad;
            for (std::size_t j = 0; j < adj.size(); ++j) grad[j] += adj[j];
        } else if (node.backward) {
            std::vector<std::vector<double>*> in_adj;
            in_adj.reserve(node.inputs.size());
            for (int input : node.inputs) {
                if (input < 0) {
                    in_adj.push_back(nullptr);
                } else {
                    auto& buf = adjoint[static_cast<std::size_t>(input)];
                    if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(input)].size, 0.0);
                    in_adj.push_back(&buf);
                }
            }
            node.backward(adj, in_adj);
        }
        adj = {};  // release as we go; peak memory stays bounded
    }
    consumed_ = true;
}

std::vector<std::vector<int>> Tape::structure() const {
    std::vector<std::vector<int>> out;
    out.reserve(nodes_.size());
    for (const Node& n : nodes_) out.push_back(n.inputs);
    return out;
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw Error("backward called with no active tape");
    tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() + " and " + b.shape_str());
    }
    const int m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) {
        throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    }

    Tensor out({m, n});
    mm_accumulate(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    check_finite(out.data(), "matmul");

    auto a_data = a.data_ptr();
    auto b_data = b.data_ptr();
    record_op(out, {&a, &b},
              [a_data, b_data, m, k, n](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                  if (in[0]) {
                      // dA = G . B^T : every dA[i][p] is a row-row dot product
                      auto& da = *in[0];
                      const double* bd = b_data->data();
                      for (int i = 0; i < m; ++i) {
                          const double* g_row = g.data() + static_cast<std::size_t>(i) * n;
                          for (int p = 0; p < k; ++p) {
                              const double* b_row = bd + static_cast<std::size_t>(p) * n;
                              double s = 0.0;
                              for (int j = 0; j < n; ++j) s += g_row[j] * b_row[j];
                              da[static_cast<std::size_t>(i) * k + p] += s;
                          }
                      }
                  }
                  if (in[1]) {
                      // dB = A^T . G
                      auto& db = *in[1];
                      const double* ad = a_data->data();
                      for (int i = 0; i < m; ++i) {
                          const double* g_row = g.data() + static_cast<std::size_t>(i) * n;
                          const double* a_row = ad + static_cast<std::size_t>(i) * k;
                          for (int p = 0; p < k; ++p) {
                              const double coef = a_row[p];
                              double* db_row = db.data() + static_cast<std::size_t>(p) * n;
                              for (int j = 0; j < n; ++j) db_row[j] += coef * g_row[j];
                          }
                      }
                  }
              });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        auto& o = out.mutable_data();
        const auto& ad = a.data();
        const auto& bd = b.data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
        check_finite(o, "add");
        record_op(out, {&a, &b},
                  [](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                      accumulate(in[0], g);
                      accumulate(in[1], g);
                  });
        return out;
    }
    // bias-row broadcast: [m x n] + [n]
    if (a.rank() == 2 && b.rank() == 1 && a.extent(1) == b.extent(0)) {
        const int m = a.extent(0), n = a.extent(1);
        Tensor out({m, n});
        auto& o = out.mutable_data();
        const auto& ad = a.data();
        const auto& bd = b.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                o[static_cast<std::size_t>(i) * n + j] = ad[static_cast<std::size_t>(i) * n + j] + bd[static_cast<std::size_t>(j)];
        check_finite(o, "add");
        record_op(out, {&a, &b},
                  [m, n](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                      accumulate(in[0], g);
                      if (in[1]) {
                          auto& db = *in[1];
                          for (int i = 0; i < m; ++i)
                              for (int j = 0; j < n; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
                      }
                  });
        return out;
    }
    throw ShapeError("add shapes incompatible: " + a.shape_str() + " vs " + b.shape_str());
}

Tensor multiply(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("multiply shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out(a.shape());
    auto& o = out.mutable_data();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
    check_finite(o, "multiply");

    auto a_data = a.data_ptr();
    auto b_data = b.data_ptr();
    record_op(out, {&a, &b},
              [a_data, b_data](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                  if (in[0])
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * (*b_data)[i];
                  if (in[1])
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * (*a_data)[i];
              });
    return out;
}

Tensor multiply(const Tensor& a, double c) {
    Tensor out(a.shape());
    auto& o = out.mutable_data();
    const auto& ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * c;
    check_finite(o, "multiply");
    record_op(out, {&a}, [c](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * c;
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    auto& o = out.mutable_data();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > 0.0 ? xd[i] : 0.0;

    auto x_data = x.data_ptr();
    record_op(out, {&x}, [x_data](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*x_data)[i] > 0.0) (*in[0])[i] += g[i];
    });
    return out;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out({1}, {total});
    check_finite(out.data(), "sum");
    std::size_t n = x.numel();
    record_op(out, {&x}, [n](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (std::size_t i = 0; i < n; ++i) (*in[0])[i] += g[0];
    });
    return out;
}

namespace {

struct AxisGroups {
    int groups;  // number of independent softmax groups
    int len;     // entries per group
    std::size_t stride;
    std::size_t group_step;  // offset between consecutive group bases
};

AxisGroups axis_groups(const Tensor& x, int axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw RankError("axis " + std::to_string(axis) + " invalid for rank-1 tensor");
        return {1, x.extent(0), 1, 0};
    }
    if (x.rank() == 2) {
        const int m = x.extent(0), n = x.extent(1);
        if (axis == 1) return {m, n, 1, static_cast<std::size_t>(n)};
        if (axis == 0) return {n, m, static_cast<std::size_t>(n), 1};
        throw RankError("axis " + std::to_string(axis) + " invalid for rank-2 tensor");
    }
    throw RankError("softmax supports rank 1 or 2, got " + x.shape_str());
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const AxisGroups ag = axis_groups(x, axis);
    Tensor out(x.shape());
    auto& o = out.mutable_data();
    const auto& xd = x.data();

    for (int g = 0; g < ag.groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * ag.group_step;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < ag.len; ++i) mx = std::max(mx, xd[base + static_cast<std::size_t>(i) * ag.stride]);
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw DegenerateError("softmax group " + std::to_string(g) + " is entirely -inf");
        }
        if (std::isnan(mx) || mx == std::numeric_limits<double>::infinity()) {
            throw NumericError("softmax: non-finite input");
        }
        double total = 0.0;
        for (int i = 0; i < ag.len; ++i) {
            const std::size_t idx = base + static_cast<std::size_t>(i) * ag.stride;
            const double e = std::exp(xd[idx] - mx);  // exp(-inf - mx) == exactly 0
            o[idx] = e;
            total += e;
        }
        const double inv = 1.0 / total;
        for (int i = 0; i < ag.len; ++i) o[base + static_cast<std::size_t>(i) * ag.stride] *= inv;
    }

    auto out_data = out.data_ptr();
    record_op(out, {&x}, [out_data, ag](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (!in[0]) return;
        auto& dx = *in[0];
        const auto& y = *out_data;
        for (int grp = 0; grp < ag.groups; ++grp) {
            const std::size_t base = static_cast<std::size_t>(grp) * ag.group_step;
            double dot = 0.0;
            for (int i = 0; i < ag.len; ++i) {
                const std::size_t idx = base + static_cast<std::size_t>(i) * ag.stride;
                dot += g[idx] * y[idx];
            }
            for (int i = 0; i < ag.len; ++i) {
                const std::size_t idx = base + static_cast<std::size_t>(i) * ag.stride;
                dx[idx] += (g[idx] - dot) * y[idx];
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.rank() != 1 && x.rank() != 2) throw RankError("layer_norm supports rank 1 or 2, got " + x.shape_str());
    const int n = x.extent(x.rank() - 1);
    const int rows = x.rank() == 2 ? x.extent(0) : 1;
    if (gain.rank() != 1 || gain.extent(0) != n || bias.rank() != 1 || bias.extent(0) != n) {
        throw ShapeError("layer_norm gain/bias must be rank-1 of length " + std::to_string(n) + ", got " +
                         gain.shape_str() + " and " + bias.shape_str());
    }

    Tensor out(x.shape());
    auto& o = out.mutable_data();
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();

    // xhat and 1/s are reused by the backward rule.
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_s = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));

    for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xd[base + j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xd[base + j] - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        (*inv_s)[static_cast<std::size_t>(r)] = inv;
        for (int j = 0; j < n; ++j) {
            const double xh = (xd[base + j] - mean) * inv;
            (*xhat)[base + j] = xh;
            o[base + j] = xh * gd[static_cast<std::size_t>(j)] + bd[static_cast<std::size_t>(j)];
        }
    }
    check_finite(o, "layer_norm");

    auto gain_data = gain.data_ptr();
    record_op(out, {&x, &gain, &bias},
              [xhat, inv_s, gain_data, rows, n](const std::vector<double>& g,
                                                const std::vector<std::vector<double>*>& in) {
                  for (int r = 0; r < rows; ++r) {
                      const std::size_t base = static_cast<std::size_t>(r) * n;
                      if (in[0]) {
                          double m1 = 0.0, m2 = 0.0;
                          for (int j = 0; j < n; ++j) {
                              const double dxh = g[base + j] * (*gain_data)[static_cast<std::size_t>(j)];
                              m1 += dxh;
                              m2 += dxh * (*xhat)[base + j];
                          }
                          m1 /= n;
                          m2 /= n;
                          const double inv = (*inv_s)[static_cast<std::size_t>(r)];
                          for (int j = 0; j < n; ++j) {
                              const double dxh = g[base + j] * (*gain_data)[static_cast<std::size_t>(j)];
                              (*in[0])[base + j] += (dxh - m1 - (*xhat)[base + j] * m2) * inv;
                          }
                      }
                      if (in[1])
                          for (int j = 0; j < n; ++j)
                              (*in[1])[static_cast<std::size_t>(j)] += g[base + j] * (*xhat)[base + j];
                      if (in[2])
                          for (int j = 0; j < n; ++j) (*in[2])[static_cast<std::size_t>(j)] += g[base + j];
                  }
              });
    return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw RankError("cross_entropy_logits expects [t x v] logits, got " + logits.shape_str());
    const int t = logits.extent(0), v = logits.extent(1);
    if (static_cast<int>(targets.size()) != t) {
        throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(t) + " rows");
    }
    for (int i = 0; i < t; ++i) {
        if (targets[i] < 0 || targets[i] >= v) {
            throw IndexError("cross_entropy_logits: target " + std::to_string(targets[i]) + " at row " +
                             std::to_string(i) + " outside [0," + std::to_string(v) + ")");
        }
    }

    const auto& ld = logits.data();
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * v;
        double mx = ld[base];
        for (int j = 1; j < v; ++j) mx = std::max(mx, ld[base + j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(ld[base + j] - mx);
            (*probs)[base + j] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < v; ++j) (*probs)[base + j] *= inv;
        total += mx + std::log(z) - ld[base + static_cast<std::size_t>(targets[i])];
    }
    Tensor out({1}, {total / t});
    check_finite(out.data(), "cross_entropy_logits");

    record_op(out, {&logits},
              [probs, targets, t, v](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                  if (!in[0]) return;
                  const double scale = g[0] / t;
                  auto& dl = *in[0];
                  for (int i = 0; i < t; ++i) {
                      const std::size_t base = static_cast<std::size_t>(i) * v;
                      for (int j = 0; j < v; ++j) dl[base + j] += scale * (*probs)[base + j];
                      dl[base + static_cast<std::size_t>(targets[i])] -= scale;
                  }
              });
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    if (a.rank() != b.rank()) throw ShapeError("concat rank mismatch: " + a.shape_str() + " vs " + b.shape_str());
    if (a.rank() == 1) {
        if (axis != 0) throw RankError("concat axis " + std::to_string(axis) + " invalid for rank-1");
        std::vector<double> data;
        data.reserve(a.numel() + b.numel());
        data.insert(data.end(), a.data().begin(), a.data().end());
        data.insert(data.end(), b.data().begin(), b.data().end());
        Tensor out({a.extent(0) + b.extent(0)}, std::move(data));
        const std::size_t na = a.numel();
        record_op(out, {&a, &b}, [na](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
            if (in[0])
                for (std::size_t i = 0; i < na; ++i) (*in[0])[i] += g[i];
            if (in[1])
                for (std::size_t i = na; i < g.size(); ++i) (*in[1])[i - na] += g[i];
        });
        return out;
    }
    if (a.rank() != 2) throw RankError("concat supports rank 1 or 2, got " + a.shape_str());

    if (axis == 0) {
        if (a.extent(1) != b.extent(1)) {
            throw ShapeError("concat axis 0 column mismatch: " + a.shape_str() + " vs " + b.shape_str());
        }
        std::vector<double> data;
        data.reserve(a.numel() + b.numel());
        data.insert(data.end(), a.data().begin(), a.data().end());
        data.insert(data.end(), b.data().begin(), b.data().end());
        Tensor out({a.extent(0) + b.extent(0), a.extent(1)}, std::move(data));
        const std::size_t na = a.numel();
        record_op(out, {&a, &b}, [na](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
            if (in[0])
                for (std::size_t i = 0; i < na; ++i) (*in[0])[i] += g[i];
            if (in[1])
                for (std::size_t i = na; i < g.size(); ++i) (*in[1])[i - na] += g[i];
        });
        return out;
    }
    if (axis == 1) {
        if (a.extent(0) != b.extent(0)) {
            throw ShapeError("concat axis 1 row mismatch: " + a.shape_str() + " vs " + b.shape_str());
        }
        const int m = a.extent(0), na = a.extent(1), nb = b.extent(1);
        Tensor out({m, na + nb});
        auto& o = out.mutable_data();
        const auto& ad = a.data();
        const auto& bd = b.data();
        for (int i = 0; i < m; ++i) {
            std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(i) * na, na,
                        o.begin() + static_cast<std::ptrdiff_t>(i) * (na + nb));
            std::copy_n(bd.begin() + static_cast<std::ptrdiff_t>(i) * nb, nb,
                        o.begin() + static_cast<std::ptrdiff_t>(i) * (na + nb) + na);
        }
        record_op(out, {&a, &b},
                  [m, na, nb](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
                      for (int i = 0; i < m; ++i) {
                          const std::size_t base = static_cast<std::size_t>(i) * (na + nb);
                          if (in[0])
                              for (int j = 0; j < na; ++j) (*in[0])[static_cast<std::size_t>(i) * na + j] += g[base + j];
                          if (in[1])
                              for (int j = 0; j < nb; ++j)
                                  (*in[1])[static_cast<std::size_t>(i) * nb + j] += g[base + na + j];
                      }
                  });
        return out;
    }
    throw RankError("concat axis " + std::to_string(axis) + " invalid for rank-2");
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    if (x.rank() == 1) {
        if (axis != 0) throw RankError("slice axis " + std::to_string(axis) + " invalid for rank-1");
        if (start < 0 || len < 0 || start + len > x.extent(0)) {
            throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") outside extent " + std::to_string(x.extent(0)));
        }
        std::vector<double> data(x.data().begin() + start, x.data().begin() + start + len);
        Tensor out({len}, std::move(data));
        record_op(out, {&x}, [start](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
            if (in[0])
                for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[static_cast<std::size_t>(start) + i] += g[i];
        });
        return out;
    }
    if (x.rank() != 2) throw RankError("slice supports rank 1 or 2, got " + x.shape_str());
    const int m = x.extent(0), n = x.extent(1);
    if (axis != 0 && axis != 1) throw RankError("slice axis " + std::to_string(axis) + " invalid for rank-2");
    const int extent = axis == 0 ? m : n;
    if (start < 0 || len < 0 || start + len > extent) {
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside extent " +
                         std::to_string(extent));
    }

    if (axis == 0) {
        std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(start) * n,
                                 x.data().begin() + static_cast<std::ptrdiff_t>(start + len) * n);
        Tensor out({len, n}, std::move(data));
        const std::size_t offset = static_cast<std::size_t>(start) * n;
        record_op(out, {&x}, [offset](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
            if (in[0])
                for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[offset + i] += g[i];
        });
        return out;
    }
    Tensor out({m, len});
    auto& o = out.mutable_data();
    const auto& xd = x.data();
    for (int i = 0; i < m; ++i)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(i) * n + start, len,
                    o.begin() + static_cast<std::ptrdiff_t>(i) * len);
    record_op(out, {&x}, [m, n, start, len](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j)
                    (*in[0])[static_cast<std::size_t>(i) * n + start + j] += g[static_cast<std::size_t>(i) * len + j];
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw RankError("transpose expects rank-2, got " + x.shape_str());
    const int m = x.extent(0), n = x.extent(1);
    Tensor out({n, m});
    auto& o = out.mutable_data();
    const auto& xd = x.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(j) * m + i] = xd[static_cast<std::size_t>(i) * n + j];
    record_op(out, {&x}, [m, n](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    (*in[0])[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw RankError("embedding_lookup expects [v x d] table, got " + table.shape_str());
    const int v = table.extent(0), d = table.extent(1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " outside [0," + std::to_string(v) + ")");
        }
    }
    const int t = static_cast<int>(ids.size());
    Tensor out({t, d});
    auto& o = out.mutable_data();
    const auto& td = table.data();
    for (int i = 0; i < t; ++i)
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                    o.begin() + static_cast<std::ptrdiff_t>(i) * d);
    record_op(out, {&table}, [ids, d](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (!in[0]) return;
        auto& dt = *in[0];
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j)
                dt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * static_cast<std::size_t>(d) + j];
    });
    return out;
}

Tensor masked_fill(const Tensor& x, const Tensor& keep, double value) {
    if (x.shape() != keep.shape()) {
        throw ShapeError("masked_fill shapes differ: " + x.shape_str() + " vs " + keep.shape_str());
    }
    Tensor out(x.shape());
    auto& o = out.mutable_data();
    const auto& xd = x.data();
    const auto& kd = keep.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = kd[i] != 0.0 ? xd[i] : value;

    auto keep_data = keep.data_ptr();
    record_op(out, {&x}, [keep_data](const std::vector<double>& g, const std::vector<std::vector<double>*>& in) {
        if (in[0])
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*keep_data)[i] != 0.0) (*in[0])[i] += g[i];
    });
    return out;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = f(probe);
        if (loss.numel() != 1) throw RankError("finite_diff_check requires a scalar-valued function");
        tape.backward(loss);
    }
    const std::vector<double> analytic = probe.grad();

    double worst = 0.0;
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        Tensor plus = x.detach();
        plus.mutable_data()[i] += h;
        Tensor minus = x.detach();
        minus.mutable_data()[i] -= h;
        const double fd = (f(plus).item() - f(minus).item()) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("FNETAR_LOG");
        if (!env) return LogLevel::kError;
        const std::string s(env);
        if (s == "debug") return LogLevel::kDebug;
        if (s == "info") return LogLevel::kInfo;
        return LogLevel::kError;
    }();
    return level;
}

void log_line(LogLevel level, const std::string& msg) {
    static const char* names[] = {"error", "info", "debug"};
    if (static_cast<int>(level) <= static_cast<int>(log_level())) {
        std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(level)], msg.c_str());
    }
}

}  // namespace fnetar
