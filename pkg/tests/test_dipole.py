import numpy as np
import pytest

from qsmkit.dipole import (
    SPECTRUM_MAX,
    SPECTRUM_MIN,
    build_dipole,
    forward_field,
    naive_inverse,
)
from qsmkit.errors import InputError
from qsmkit.volume import RealVolume, VolumeMeta

METAS = {
    "iso": VolumeMeta((16, 16, 16), (1.0, 1.0, 1.0), (0, 0, 1)),
    "aniso": VolumeMeta((12, 10, 8), (0.8, 1.0, 2.0), (0, 0, 1)),
    "oblique": VolumeMeta((12, 12, 12), (1.0, 1.0, 1.0), (1.0, 2.0, 2.0)),
    "odd": VolumeMeta((9, 7, 11), (1.0, 1.3, 0.7), (0, 1, 1)),
}


def rand_volume(meta, seed=0):
    rng = np.random.default_rng(seed)
    return RealVolume(meta, rng.standard_normal(meta.dims))


@pytest.mark.parametrize("name", sorted(METAS))
class TestSpectrum:
    def test_bounds(self, name):
        spec = build_dipole(METAS[name]).spectrum
        assert spec.min() >= SPECTRUM_MIN and spec.max() <= SPECTRUM_MAX

    def test_dc_zero(self, name):
        assert build_dipole(METAS[name]).spectrum[0, 0, 0] == 0.0

    def test_even(self, name):
        spec = build_dipole(METAS[name]).spectrum
        idx = [(-np.arange(n)) % n for n in METAS[name].dims]
        mirrored = spec[np.ix_(*idx)]
        np.testing.assert_allclose(mirrored, spec, atol=1e-12)

    def test_matches_direct_formula(self, name):
        meta = METAS[name]
        spec = build_dipole(meta).spectrum
        rng = np.random.default_rng(3)
        b0 = np.array(meta.b0_dir)
        for _ in range(50):
            ijk = [int(rng.integers(n)) for n in meta.dims]
            if ijk == [0, 0, 0]:
                continue
            # Nyquist planes are symmetrized (+-1/2 alias), skip them here
            if any(n % 2 == 0 and i == n // 2 for i, n in zip(ijk, meta.dims)):
                continue
            k = np.array([np.fft.fftfreq(n, d=s)[i]
                          for i, n, s in zip(ijk, meta.dims, meta.voxel_size)])
            want = 1.0 / 3.0 - np.dot(k, b0) ** 2 / np.dot(k, k)
            assert abs(spec[tuple(ijk)] - want) < 1e-12


class TestSpecialDirections:
    def test_cone_zero_exact(self):
        # (j, j, j) index triples satisfy |k|^2 = 3 kz^2 exactly on an
        # isotropic grid with b0 = z, so the spectrum must be exactly 0 there
        meta = METAS["iso"]
        spec = build_dipole(meta).spectrum
        for j in (1, 2, 3, 5, 7):
            assert spec[j, j, j] == 0.0
            assert spec[-j % 16, -j % 16, -j % 16] == 0.0

    def test_parallel_and_perpendicular(self):
        spec = build_dipole(METAS["iso"]).spectrum
        assert spec[0, 0, 1] == pytest.approx(-2.0 / 3.0, abs=1e-15)
        assert spec[0, 0, 5] == pytest.approx(-2.0 / 3.0, abs=1e-15)
        assert spec[1, 0, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert spec[0, 3, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_pure_function(self):
        a = build_dipole(METAS["aniso"]).spectrum
        b = build_dipole(METAS["aniso"]).spectrum
        np.testing.assert_array_equal(a, b)


class TestForward:
    @pytest.mark.parametrize("name", sorted(METAS))
    def test_linearity(self, name):
        meta = METAS[name]
        kern = build_dipole(meta)
        x, y = rand_volume(meta, 0), rand_volume(meta, 1)
        a, b = 1.7, -0.4
        lhs = forward_field(RealVolume(meta, a * x.data + b * y.data), kern).data
        rhs = a * forward_field(x, kern).data + b * forward_field(y, kern).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10 * max(1.0, np.max(np.abs(rhs)))

    @pytest.mark.parametrize("name", sorted(METAS))
    def test_self_adjoint(self, name):
        meta = METAS[name]
        kern = build_dipole(meta)
        x, y = rand_volume(meta, 2), rand_volume(meta, 3)
        lhs = np.sum(forward_field(x, kern).data * y.data)
        rhs = np.sum(x.data * forward_field(y, kern).data)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_constant_chi_maps_to_zero(self):
        meta = METAS["iso"]
        out = forward_field(RealVolume(meta, np.full(meta.dims, 0.3)),
                            build_dipole(meta))
        assert np.max(np.abs(out.data)) < 1e-14

    def test_geometry_mismatch_rejected(self):
        with pytest.raises(InputError):
            forward_field(rand_volume(METAS["iso"]), build_dipole(METAS["aniso"]))

    def test_operator_norm_bounded(self):
        # |H x| <= (2/3) |x| in the spectral domain
        meta = METAS["odd"]
        kern = build_dipole(meta)
        for seed in range(3):
            x = rand_volume(meta, seed)
            assert (np.linalg.norm(forward_field(x, kern).data)
                    <= (2.0 / 3.0) * np.linalg.norm(x.data) * (1 + 1e-12))


def band_limited(meta, kern, threshold, seed=0):
    """Random chi whose spectrum is zeroed wherever |d| <= threshold."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(meta.dims)
    hat = np.fft.fftn(raw)
    hat[np.abs(kern.spectrum) <= threshold] = 0.0
    return RealVolume(meta, np.real(np.fft.ifftn(hat)))


class TestNaiveInverse:
    @pytest.mark.parametrize("name", ["iso", "aniso"])
    def test_band_limited_recovery(self, name):
        meta = METAS[name]
        kern = build_dipole(meta)
        chi = band_limited(meta, kern, 0.1, seed=4)
        b = forward_field(chi, kern)
        rec = naive_inverse(b, kern, eps=1e-6)
        err = np.linalg.norm(rec.data - chi.data) / np.linalg.norm(chi.data)
        assert err < 1e-8

    def test_eps_validation(self):
        meta = METAS["iso"]
        b = rand_volume(meta)
        with pytest.raises(InputError):
            naive_inverse(b, build_dipole(meta), eps=0.0)

    def test_noise_amplification(self):
        # near-cone bins amplify noise: noisy error dwarfs the clean error
        meta = METAS["iso"]
        kern = build_dipole(meta)
        chi = band_limited(meta, kern, 0.1, seed=5)
        b = forward_field(chi, kern)
        rng = np.random.default_rng(6)
        noisy = RealVolume(meta, b.data + 1e-3 * rng.standard_normal(meta.dims))
        err_clean = np.linalg.norm(naive_inverse(b, kern, eps=1e-9).data - chi.data)
        err_noisy = np.linalg.norm(naive_inverse(noisy, kern, eps=1e-9).data - chi.data)
        assert err_clean < 1e-10 * np.linalg.norm(chi.data)
        assert err_noisy > 1e6 * err_clean
