"""Operation-level cost accounting shared by the runtime counter and the
closed-form model.

Convention: one multiply-accumulate = 1 FLOP for matmuls and convolutions;
elementwise/reduction ops (softmax, normalization, pooling, activations)
are counted per element with the constants below.  Keeping the per-op
formulas in one place lets the analytical model and the instrumented
forward pass agree exactly on toy configurations.
"""

from __future__ import annotations

# per-element costs of fused elementwise/reduction ops
SOFTMAX_FLOPS_PER_ELT = 5  # max, subtract, exp, sum, divide
LAYERNORM_FLOPS_PER_ELT = 7  # mean, variance (2), normalize (2), affine (2)
GELU_FLOPS_PER_ELT = 8  # tanh-free erf evaluation, amortized
MEANPOOL_FLOPS_PER_ELT = 1  # one accumulate per window element


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


def conv_macs(out_elems: int, kernel_prod: int, in_channels: int = 1) -> int:
    """Dense conv when in_channels > 1, depthwise when 1 (per output element
    the kernel only sees its own channel)."""
    return out_elems * kernel_prod * in_channels


def bias_flops(out_elems: int) -> int:
    return out_elems


def softmax_flops(elems: int) -> int:
    return SOFTMAX_FLOPS_PER_ELT * elems


def layernorm_flops(elems: int) -> int:
    return LAYERNORM_FLOPS_PER_ELT * elems


def gelu_flops(elems: int) -> int:
    return GELU_FLOPS_PER_ELT * elems


def add_flops(elems: int) -> int:
    return elems


def scale_flops(elems: int) -> int:
    return elems


def meanpool_flops(out_elems: int, kernel_prod: int) -> int:
    return MEANPOOL_FLOPS_PER_ELT * out_elems * kernel_prod + out_elems


def relpos_gather_flops(n_q: int, n_k: int, d_head: int) -> int:
    """Summing the three axis tables into one [n_q, n_k, d_head] block."""
    return 2 * n_q * n_k * d_head


def attention_score_macs(n_q: int, n_k: int, d_total: int) -> int:
    return n_q * n_k * d_total


def attention_apply_macs(n_q: int, n_k: int, d_total: int) -> int:
    return n_q * n_k * d_total


class FlopCounter:
    """Process-wide mutable FLOP counter used by the instrumented forward."""

    def __init__(self):
        self.total = 0
        self.enabled = False

    def add(self, n: int):
        if self.enabled:
            self.total += n

    def reset(self):
        self.total = 0

    def __enter__(self):
        self.reset()
        self.enabled = True
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


COUNTER = FlopCounter()
