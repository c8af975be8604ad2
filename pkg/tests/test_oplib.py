import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvamp.errors import DimensionError, DomainError, UnsupportedShapeError
from dvamp.oplib import (
    WaveletTransform,
    check_adjoint,
    compose_measurement,
    fwht,
    geometric_singular_values,
    make_gaussian_operator,
    make_structured_operator,
    wavelet_forward,
    wavelet_inverse,
)


def hadamard(n):
    """Sylvester construction, independent of the fast transform."""
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def structured_dense(M, N, cond, seed):
    """Materialize [diag(s) | 0] P F D from its ingredients."""
    from dvamp.oplib import _STREAM_PERM, _STREAM_SIGNS, _stream
    signs = _stream(seed, _STREAM_SIGNS).choice(np.array([-1.0, 1.0]), size=N)
    perm = _stream(seed, _STREAM_PERM).permutation(N)
    P = np.eye(N)[perm]
    S = np.zeros((M, N))
    S[:, :M] = np.diag(geometric_singular_values(M, cond, N))
    return S @ P @ hadamard(N) @ np.diag(signs)


def check_svd(op, n_vec=20, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(n_vec):
        v = rng.standard_normal(op.cols)
        y = rng.standard_normal(op.rows)
        c = rng.standard_normal(op.rows)
        np.testing.assert_allclose(op.u(op.s * op.vt(v)), op.forward(v), atol=1e-10)
        np.testing.assert_allclose(op.u(op.ut(y)), y, atol=1e-10)
        np.testing.assert_allclose(op.vt(op.v(c)), c, atol=1e-10)
        # V V^T is an orthogonal projector
        p = op.v(op.vt(v))
        np.testing.assert_allclose(op.v(op.vt(p)), p, atol=1e-10)
        assert np.linalg.norm(p) <= np.linalg.norm(v) + 1e-10
    assert check_adjoint(op, n_vec) <= 1e-10
    assert np.all(np.diff(op.s) <= 0)


class TestFWHT:
    def test_two_point(self):
        np.testing.assert_allclose(fwht(np.array([1.0, 1.0])), [np.sqrt(2), 0.0])

    def test_impulse(self):
        np.testing.assert_allclose(fwht(np.array([1.0, 0, 0, 0])), [0.5] * 4)

    def test_self_inverse(self):
        x = np.random.default_rng(0).standard_normal(256)
        np.testing.assert_allclose(fwht(fwht(x)), x, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 8, 64])
    def test_matches_sylvester(self, n):
        x = np.random.default_rng(n).standard_normal(n)
        np.testing.assert_allclose(fwht(x), hadamard(n) @ x, atol=1e-12)

    def test_in_place(self):
        x = np.random.default_rng(3).standard_normal(32)
        want = fwht(x)
        out = fwht(x, out=x)
        assert out is x
        np.testing.assert_allclose(x, want)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(DimensionError):
            fwht(np.ones(6))


class TestGeometricSpectrum:
    def test_ratio(self):
        s = geometric_singular_values(3, 100, 6)
        np.testing.assert_allclose(s / s[0], [1, 0.1, 0.01], rtol=1e-12)

    def test_scale(self):
        s = geometric_singular_values(3, 100, 6)
        assert s[0] == pytest.approx(2.4372127, rel=1e-6)
        assert np.sum(s ** 2) == pytest.approx(6.0)

    def test_flat(self):
        np.testing.assert_allclose(geometric_singular_values(5, 1, 10), np.sqrt(2.0))

    def test_single(self):
        np.testing.assert_allclose(geometric_singular_values(1, 50, 4), [2.0])

    def test_rejects_cond_below_one(self):
        with pytest.raises(DomainError):
            geometric_singular_values(4, 0.5, 8)


class TestGaussianOperator:
    def test_adjoint(self):
        assert check_adjoint(make_gaussian_operator(32, 64, 7)) <= 1e-10

    def test_frobenius_scale(self):
        fro = [np.sum(make_gaussian_operator(32, 64, s).to_dense() ** 2) for s in range(100)]
        assert abs(np.mean(fro) - 64) / 64 < 0.25

    def test_deterministic(self):
        a = make_gaussian_operator(32, 64, 7).to_dense()
        b = make_gaussian_operator(32, 64, 7).to_dense()
        assert np.array_equal(a, b)

    def test_svd(self):
        check_svd(make_gaussian_operator(16, 32, 3))

    def test_rejects_wide_shape(self):
        with pytest.raises(UnsupportedShapeError):
            make_gaussian_operator(10, 5, 0)


class TestStructuredOperator:
    def test_square_flat_is_scaled_orthogonal(self):
        op = make_structured_operator(32, 32, 1.0, 5)
        c2 = op.s[0] ** 2
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = rng.standard_normal(32)
            np.testing.assert_allclose(op.adjoint(op.forward(v)), c2 * v, atol=1e-9)

    def test_condition_number(self):
        op = make_structured_operator(64, 256, 1e4, 1)
        assert op.s[0] / op.s[63] == pytest.approx(1e4, rel=1e-9)

    @pytest.mark.parametrize("M,N", [(8, 16), (16, 32)])
    @pytest.mark.parametrize("cond", [1.0, 100.0])
    def test_dense_oracle(self, M, N, cond):
        op = make_structured_operator(M, N, cond, 11)
        dense = structured_dense(M, N, cond, 11)
        np.testing.assert_allclose(op.to_dense(), dense, atol=1e-10)
        y = np.random.default_rng(2).standard_normal(M)
        np.testing.assert_allclose(op.adjoint(y), dense.T @ y, atol=1e-10)
        np.testing.assert_allclose(np.linalg.svd(dense, compute_uv=False), op.s, atol=1e-10)

    def test_svd(self):
        check_svd(make_structured_operator(64, 256, 1e3, 4))

    def test_rejects_non_power_of_two(self):
        with pytest.raises(DimensionError):
            make_structured_operator(4, 12, 1.0, 0)


class TestWavelet:
    def test_haar_kills_constants(self):
        wt = WaveletTransform(16, 2, "haar")
        c = wt.forward(np.full((16, 16), 7.0))
        assert np.all(c[wt.detail_mask()] == 0)

    @pytest.mark.parametrize("family", ["db2", "haar"])
    def test_parseval_and_round_trip(self, family):
        wt = WaveletTransform(32, family=family)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal((32, 32))
            c = wt.forward(x)
            assert abs(np.linalg.norm(c) - np.linalg.norm(x)) <= 1e-10
            np.testing.assert_allclose(wt.inverse(c), x.ravel(), atol=1e-10)

    def test_natural_image_round_trip(self):
        from dvamp.harness import load_images
        _, img = load_images()[0]
        v = wavelet_forward(img)
        assert np.max(np.abs(wavelet_inverse(v, 128) - img)) <= 1e-10

    def test_default_depth(self):
        assert WaveletTransform(128).levels == 4
        assert WaveletTransform(64).levels == 3

    def test_db2_annihilates_linear_ramps(self):
        # two vanishing moments; periodic wrap only touches the boundary
        wt = WaveletTransform(32, 1, "db2")
        ramp = np.tile(np.arange(32.0), (32, 1))
        c = wt.forward(ramp).reshape(32, 32)
        assert np.allclose(c[:16, 16:-1], 0.0, atol=1e-10)

    @pytest.mark.parametrize("side,levels", [(12, 1), (16, 3), (2, 1)])
    def test_rejects_bad_geometry(self, side, levels):
        with pytest.raises(DimensionError):
            WaveletTransform(side, levels)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([8, 16, 64]))
    def test_orthonormal_property(self, seed, side):
        x = np.random.default_rng(seed).standard_normal((side, side))
        wt = WaveletTransform(side)
        y = np.random.default_rng(seed + 1).standard_normal(side * side)
        # <W x, y> == <x, W^-1 y> for an orthogonal map
        assert wt.forward(x) @ y == pytest.approx(x.ravel() @ wt.inverse(y), abs=1e-9)


class TestCompose:
    def setup_method(self):
        self.phi = make_structured_operator(64, 256, 10.0, 2)
        self.psi = WaveletTransform(16)
        self.A = compose_measurement(self.phi, self.psi)

    def test_same_spectrum(self):
        assert self.A.s is self.phi.s

    def test_forward_definition(self):
        v = np.random.default_rng(0).standard_normal(256)
        np.testing.assert_allclose(self.A.forward(v), self.phi.forward(self.psi.inverse(v)),
                                   atol=1e-12)

    def test_svd_and_adjoint(self):
        check_svd(self.A)

    def test_rejects_mismatch(self):
        with pytest.raises(DimensionError):
            compose_measurement(self.phi, WaveletTransform(8))
