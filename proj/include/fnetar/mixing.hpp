#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fnetar/tensor.hpp"

namespace fnetar {

// ---------------------------------------------------------------------------
// Token-mixing operators. Every mixer is a realized l_seq x (l_mem + l_seq)
// matrix applied to [memory; segment]; attention is the input-dependent
// exception and carries no matrix.
// ---------------------------------------------------------------------------

enum class MixKind { kAttention, kFnet, kFnetar, kMask };

std::string mix_kind_name(MixKind kind);

struct MixingOperator {
    MixKind kind = MixKind::kAttention;
    int l_seq = 0;
    int l_mem = 0;
    bool self_exclusive = false;  // window ends one column earlier when set
    Tensor matrix;                // empty for kind == kAttention
};

/// Bias-free projection weights for multi-head attention, all [d x d].
struct AttentionParams {
    Tensor wq, wk, wv, wo;
    int n_heads = 1;

    int d_model() const { return wq.rank() == 2 ? wq.extent(0) : 0; }
    void validate() const;
};

// ---------------------------------------------------------------------------
// Operator construction
// ---------------------------------------------------------------------------

/// Square cosine mixing matrix: entry (i, j) = cos(2*pi*i*j/n) / sqrt(n).
MixingOperator build_fnet_matrix(int n);

/// Causal rectangular Fourier mixer. Take the N x N matrix of real parts of
/// w^(r*k) with N = l_seq and w = exp(2*pi*i/N), right-pad with an
/// l_seq x l_mem zero block, then shift row r right by (l_mem + r + 1 - N)
/// with zero fill, dropping coefficients pushed past column 0. Scaled by
/// 1/sqrt(N). Row r ends at column l_mem + r (one earlier when
/// self_exclusive), so entry (r, c) is exactly 0 whenever c > l_mem + r.
MixingOperator build_fnetar_matrix(int l_seq, int l_mem, bool self_exclusive = false);

/// 0/1 matrix; entry (r, c) is 1 iff c <= l_mem + r (strict when self_exclusive).
MixingOperator build_causal_mask(int l_seq, int l_mem, bool self_exclusive = false);

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention. Queries come from x; keys and
/// values from [mem; x]; scores are restricted by `mask` before the softmax;
/// the output is projected by wo. The caller adds the residual.
Tensor attention_forward(const Tensor& x, const Tensor& mem, const AttentionParams& params,
                         const MixingOperator& mask);

/// y = op.matrix . [mem; x], mixing across the sequence dimension only.
/// The caller adds the residual.
Tensor apply_mixing(const Tensor& x, const Tensor& mem, const MixingOperator& op);

/// FFT route for the square (l_mem = 0) cosine mixer: per feature column,
/// real part of the length-n transform scaled by 1/sqrt(n). Forward-only;
/// requires power-of-two l_seq.
Tensor apply_fnet_fft(const Tensor& x);

// ---------------------------------------------------------------------------
// FFT machinery
// ---------------------------------------------------------------------------

/// Paired real/imaginary buffers of equal length.
struct ComplexBuffer {
    std::vector<double> re;
    std::vector<double> im;

    ComplexBuffer() = default;
    explicit ComplexBuffer(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
    std::size_t size() const { return re.size(); }
};

/// O(n^2) reference transform: X_k = sum_j v_j * exp(-2*pi*i*j*k/n).
ComplexBuffer dft_naive(const ComplexBuffer& v);

/// Iterative radix-2 Cooley-Tukey transform; length must be a power of two.
ComplexBuffer fft_radix2(const ComplexBuffer& v);

// ---------------------------------------------------------------------------
// Causality verification
// ---------------------------------------------------------------------------

struct CausalityViolation {
    int probe;
    int perturbed_row;    // j
    int affected_row;     // i < j
    double delta;
};

struct CausalityReport {
    int probes = 0;
    long long checks = 0;
    std::vector<CausalityViolation> violations;
    bool ok() const { return violations.empty(); }
    std::string summary() const;
};

/// Perturbs input row j of `probes` random [l_seq x d] inputs and flags any
/// output row i < j that moves by >= tol. Violations are report content,
/// never an error.
CausalityReport verify_causality(const std::function<Tensor(const Tensor&)>& forward, int l_seq, int d_model,
                                 int probes, std::uint64_t seed = 1234, double tol = 1e-10);

/// CSV: one row per line, entries with 12 significant digits, no header.
std::string matrix_csv(const Tensor& matrix);

/// True when every entry above the causal boundary c <= l_mem + r is exactly 0.
bool matrix_is_causal(const MixingOperator& op);

}  // namespace fnetar
