"""Backend equivalence: the compiled kernels must reproduce the NumPy
fallback bit for bit, including accumulation order and pooling ties."""

import numpy as np
import pytest

from stepmetric import kernels
from stepmetric.kernels import _numpy as knp

compiled = pytest.importorskip("stepmetric.kernels._core")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(1, 2, 2, 1), (3, 8, 8, 5), (2, 16, 16, 3), (4, 6, 10, 8)])
class TestBackendParity:
    def test_im2col(self, dtype, shape):
        rng = np.random.default_rng(sum(shape))
        x = rng.standard_normal(shape).astype(dtype)
        assert np.array_equal(compiled.im2col3x3(x), knp.im2col3x3(x))

    def test_col2im(self, dtype, shape):
        rng = np.random.default_rng(1)
        b, h, w, c = shape
        g = rng.standard_normal((b, h, w, 9, c)).astype(dtype)
        assert np.array_equal(compiled.col2im3x3(g), knp.col2im3x3(g))

    def test_maxpool_and_backward(self, dtype, shape):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(shape).astype(dtype)
        p1, i1 = compiled.maxpool2x2(x)
        p2, i2 = knp.maxpool2x2(x)
        assert np.array_equal(p1, p2)
        assert np.array_equal(i1, i2)
        gy = rng.standard_normal(p1.shape).astype(dtype)
        assert np.array_equal(
            compiled.maxpool2x2_backward(gy, i1), knp.maxpool2x2_backward(gy, i2)
        )


class TestKernelSemantics:
    def test_im2col_center_is_input(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 5, 6, 4)).astype(np.float64)
        cols = kernels.im2col3x3(x)
        assert np.array_equal(cols[:, :, :, 4, :], x)

    def test_im2col_zero_padding_at_borders(self):
        x = np.ones((1, 4, 4, 2), dtype=np.float32)
        cols = kernels.im2col3x3(x)
        # top-left pixel's upper-left neighbor is outside the image, and
        # the whole "row above" offset is zero for the first row
        assert np.all(cols[0, 0, 0, 0, :] == 0)
        assert np.all(cols[0, 0, :, 1, :] == 0)

    def test_col2im_is_adjoint_of_im2col(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 8, 8, 4))
        g = rng.standard_normal((3, 8, 8, 9, 4))
        lhs = float(np.sum(kernels.im2col3x3(x) * g))
        rhs = float(np.sum(x * kernels.col2im3x3(g)))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_maxpool_first_max_wins_on_ties(self):
        x = np.zeros((1, 2, 2, 1), dtype=np.float32)
        _, idx = kernels.maxpool2x2(x)
        assert idx[0, 0, 0, 0] == 0
        x[0, 0, 1, 0] = 5.0
        x[0, 1, 0, 0] = 5.0
        _, idx = kernels.maxpool2x2(x)
        assert idx[0, 0, 0, 0] == 1  # row-major order: (0,1) before (1,0)

    def test_maxpool_backward_routes_to_argmax(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        p, idx = kernels.maxpool2x2(x)
        dy = np.ones_like(p)
        dx = kernels.maxpool2x2_backward(dy, idx)
        expected = np.zeros_like(x)
        expected[0, 1, 1, 0] = expected[0, 1, 3, 0] = expected[0, 3, 1, 0] = expected[0, 3, 3, 0] = 1
        assert np.array_equal(dx, expected)

    def test_backend_reports_identity(self):
        assert kernels.BACKEND in ("compiled", "numpy")
        assert kernels.HAVE_COMPILED
