import numpy as np
import pytest

from uridet import kernels


def reference_conv2d(x, w, b, stride, pad):
    """Oracle: direct quadruple-loop cross-correlation."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                y[co, i, j] = np.sum(patch * w[co]) + b[co]
    return y


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    old = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


class TestConv2d:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_forward_matches_reference(self, backend, stride, pad):
        rng = np.random.default_rng(31)
        x = rng.normal(size=(3, 9, 11))
        w = rng.normal(size=(5, 3, 3, 3))
        b = rng.normal(size=5)
        got = kernels.conv2d_forward(x, w, b, stride, pad)
        np.testing.assert_allclose(got, reference_conv2d(x, w, b, stride, pad), atol=1e-12)

    def test_backward_matches_finite_differences(self, backend):
        rng = np.random.default_rng(32)
        x = rng.normal(size=(2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        dy = rng.normal(size=kernels.conv2d_forward(x, w, b, 1, 1).shape)

        dx, dw, db = kernels.conv2d_backward(x, w, dy, 1, 1)
        h = 1e-6

        def loss(xv, wv, bv):
            return np.sum(kernels.conv2d_forward(xv, wv, bv, 1, 1) * dy)

        for arr, grad in ((x, dx), (w, dw), (b, db)):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + h
                up = loss(x, w, b)
                arr[i] = orig - h
                dn = loss(x, w, b)
                arr[i] = orig
                num = (up - dn) / (2 * h)
                assert abs(num - grad[i]) <= 1e-4 * max(1.0, abs(num))
                it.iternext()

    def test_backends_agree(self):
        rng = np.random.default_rng(33)
        x = rng.normal(size=(4, 12, 10))
        w = rng.normal(size=(6, 4, 3, 3))
        b = rng.normal(size=6)
        dy = rng.normal(size=(6, 12, 10))
        out = {}
        for name in ("numba", "numpy"):
            kernels.set_backend(name)
            y = kernels.conv2d_forward(x, w, b, 1, 1)
            out[name] = (y, *kernels.conv2d_backward(x, w, dy, 1, 1))
        kernels.set_backend("numba")
        for a, b_ in zip(out["numba"], out["numpy"]):
            np.testing.assert_allclose(a, b_, atol=1e-10)


class TestMaxPool:
    def test_forward_known(self, backend):
        x = np.arange(16.0).reshape(1, 4, 4)
        y, arg = kernels.maxpool2d_forward(x, 2, 2)
        np.testing.assert_allclose(y[0], [[5, 7], [13, 15]])
        assert arg[0, 0, 0] == 5

    def test_backward_scatters_to_argmax(self, backend):
        rng = np.random.default_rng(34)
        x = rng.normal(size=(3, 6, 8))
        y, arg = kernels.maxpool2d_forward(x, 2, 2)
        dy = rng.normal(size=y.shape)
        dx = kernels.maxpool2d_backward(arg, dy, 6, 8)
        assert dx.shape == x.shape
        np.testing.assert_allclose(dx.sum(), dy.sum())
        # gradient lands only where the max was
        flat = dx.reshape(3, -1)
        for ci in range(3):
            nz = np.flatnonzero(flat[ci])
            assert set(nz) <= set(arg[ci].ravel())

    def test_backends_agree(self):
        rng = np.random.default_rng(35)
        x = rng.normal(size=(2, 10, 10))
        out = {}
        for name in ("numba", "numpy"):
            kernels.set_backend(name)
            out[name] = kernels.maxpool2d_forward(x, 2, 2)
        kernels.set_backend("numba")
        np.testing.assert_allclose(out["numba"][0], out["numpy"][0])
        np.testing.assert_array_equal(out["numba"][1], out["numpy"][1])


class TestRoiMaxPool:
    def test_constant_features_give_constant_output(self, backend):
        feat = np.full((4, 8, 8), 3.25)
        y, _ = kernels.roi_max_pool_forward(feat, (1.0, 1.0, 6.0, 7.0), 2, 2)
        np.testing.assert_allclose(y, 3.25)

    def test_single_cell_roi_broadcasts(self, backend):
        rng = np.random.default_rng(36)
        feat = rng.normal(size=(2, 6, 6))
        y, _ = kernels.roi_max_pool_forward(feat, (2.0, 3.0, 3.0, 4.0), 2, 2)
        for ci in range(2):
            np.testing.assert_allclose(y[ci], feat[ci, 3, 2])

    def test_matches_hand_enumerated_bins(self, backend):
        rng = np.random.default_rng(37)
        feat = rng.normal(size=(1, 6, 6))
        roi = (0.0, 0.0, 6.0, 6.0)
        y, _ = kernels.roi_max_pool_forward(feat, roi, 2, 2)
        np.testing.assert_allclose(y[0, 0, 0], feat[0, :3, :3].max())
        np.testing.assert_allclose(y[0, 0, 1], feat[0, :3, 3:].max())
        np.testing.assert_allclose(y[0, 1, 0], feat[0, 3:, :3].max())
        np.testing.assert_allclose(y[0, 1, 1], feat[0, 3:, 3:].max())

    def test_fractional_roi_floor_ceil_rule(self, backend):
        rng = np.random.default_rng(38)
        feat = rng.normal(size=(1, 6, 6))
        # roi x in [1.2, 4.8), pool 2: bins [1.2, 3.0) -> cells 1..3, [3.0, 4.8) -> 3..5
        y, _ = kernels.roi_max_pool_forward(feat, (1.2, 0.0, 4.8, 6.0), 1, 2)
        np.testing.assert_allclose(y[0, 0, 0], feat[0, :, 1:3].max())
        np.testing.assert_allclose(y[0, 0, 1], feat[0, :, 3:5].max())

    def test_outside_roi_rejected(self, backend):
        feat = np.zeros((1, 4, 4))
        with pytest.raises(ValueError):
            kernels.roi_max_pool_forward(feat, (5.0, 0.0, 7.0, 2.0), 2, 2)

    def test_backends_agree(self):
        rng = np.random.default_rng(39)
        feat = rng.normal(size=(3, 9, 9))
        roi = (0.7, 1.3, 7.9, 8.2)
        out = {}
        for name in ("numba", "numpy"):
            kernels.set_backend(name)
            out[name] = kernels.roi_max_pool_forward(feat, roi, 3, 3)
        kernels.set_backend("numba")
        np.testing.assert_allclose(out["numba"][0], out["numpy"][0])
        np.testing.assert_array_equal(out["numba"][1], out["numpy"][1])


class TestBackendSelection:
    def test_invalid_backend_rejected(self):
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")

    def test_get_set_round_trip(self):
        old = kernels.get_backend()
        kernels.set_backend("numpy")
        assert kernels.get_backend() == "numpy"
        kernels.set_backend(old)
