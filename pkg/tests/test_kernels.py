"""Compiled vs pure-Python kernel backends."""

import os
import subprocess
import sys

import numpy as np
import pytest

from memvit import _kernels
from memvit._kernels import get_backend


def conv_oracle(x, w, b, stride, pad):
    """[DERIVED] naive per-channel convolution, written independently."""
    xp = np.pad(x, list(pad) + [(0, 0)])
    kt, kh, kw, c = w.shape
    st, sh, sw = stride
    t, h, wd, _ = xp.shape
    to, ho, wo = (t - kt) // st + 1, (h - kh) // sh + 1, (wd - kw) // sw + 1
    out = np.zeros((to, ho, wo, c))
    for ot in range(to):
        for oh in range(ho):
            for ow in range(wo):
                for ch in range(c):
                    acc = 0.0
                    for i in range(kt):
                        for j in range(kh):
                            for k in range(kw):
                                acc += (
                                    xp[ot * st + i, oh * sh + j, ow * sw + k, ch]
                                    * w[i, j, k, ch]
                                )
                    out[ot, oh, ow, ch] = acc + b[ch]
    return out


CASES = [
    # (extents, channels, kernel, stride, pad)
    ((4, 6, 6), 3, (3, 3, 3), (1, 2, 2), ((1, 1), (1, 1), (1, 1))),
    ((4, 4, 4), 2, (2, 2, 2), (2, 2, 2), ((0, 0), (0, 0), (0, 0))),
    ((5, 5, 5), 4, (3, 3, 3), (2, 1, 1), ((2, 0), (1, 1), (1, 1))),  # causal pad
    ((2, 3, 3), 1, (1, 1, 1), (1, 1, 1), ((0, 0), (0, 0), (0, 0))),
]


def _case(seed, extents, c, kernel):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((*extents, c))
    w = rng.standard_normal((*kernel, c))
    b = rng.standard_normal(c)
    return x, w, b


class TestForward:
    @pytest.mark.parametrize("extents,c,kernel,stride,pad", CASES)
    def test_python_matches_oracle(self, extents, c, kernel, stride, pad):
        x, w, b = _case(0, extents, c, kernel)
        got = get_backend("python").depthwise_conv3d_fwd(x, w, b, stride, pad)
        assert np.allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("extents,c,kernel,stride,pad", CASES)
    def test_backends_bit_identical(self, extents, c, kernel, stride, pad):
        try:
            compiled = get_backend("compiled")
        except RuntimeError:
            pytest.skip("compiled backend not built")
        x, w, b = _case(1, extents, c, kernel)
        y_py = get_backend("python").depthwise_conv3d_fwd(x, w, b, stride, pad)
        y_c = compiled.depthwise_conv3d_fwd(x, w, b, stride, pad)
        assert np.array_equal(y_py, y_c)


class TestBackward:
    @pytest.mark.parametrize("extents,c,kernel,stride,pad", CASES)
    def test_gradients_match_finite_differences(self, extents, c, kernel, stride, pad):
        x, w, b = _case(2, extents, c, kernel)
        fwd = _kernels.depthwise_conv3d_fwd
        bwd = _kernels.depthwise_conv3d_bwd
        g = np.random.default_rng(3).standard_normal(
            fwd(x, w, b, stride, pad).shape
        )
        gx, gw, gb = bwd(g, x, w, stride, pad, need_input_grad=True)
        eps = 1e-6

        def loss(xx, ww, bb):
            return float((fwd(xx, ww, bb, stride, pad) * g).sum())

        for arr, grad in ((x, gx), (w, gw), (b, gb)):
            flat = arr.reshape(-1)
            idx = np.random.default_rng(4).choice(flat.size, size=min(6, flat.size),
                                                  replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss(x, w, b)
                flat[i] = orig - eps
                lo = loss(x, w, b)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                assert abs(grad.reshape(-1)[i] - fd) < 1e-5

    def test_backends_agree(self):
        try:
            compiled = get_backend("compiled")
        except RuntimeError:
            pytest.skip("compiled backend not built")
        extents, c, kernel, stride, pad = CASES[0]
        x, w, b = _case(5, extents, c, kernel)
        g = np.random.default_rng(6).standard_normal(
            compiled.depthwise_conv3d_fwd(x, w, b, stride, pad).shape
        )
        py = get_backend("python").depthwise_conv3d_bwd(g, x, w, stride, pad,
                                                        need_input_grad=True)
        cy = compiled.depthwise_conv3d_bwd(g, x, w, stride, pad, need_input_grad=True)
        for a, b2 in zip(py, cy):
            assert np.allclose(a, b2, atol=1e-10)


class TestDispatch:
    def test_backend_name_valid(self):
        assert _kernels.backend_name in ("python", "compiled", "cython")

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            get_backend("gpu")

    def test_force_python_env(self):
        env = dict(os.environ, MEMVIT_FORCE_PYTHON="1")
        out = subprocess.run(
            [sys.executable, "-c",
             "from memvit._kernels import backend_name; print(backend_name)"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "python"
