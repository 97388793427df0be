import numpy as np
import pytest
import torch

from danp.linalg import NumericalError
from danp.nn import (
    ParamStore,
    UNetConfig,
    conv1d,
    init_unet_params,
    make_grid,
    setconv_decode,
    setconv_encode,
    unet_apply,
    value_and_grad,
)

SMALL_CFG = UNetConfig(levels=2, channels=4, kernel_size=5,
                       in_channels=2, out_channels=3)


def small_unet(seed=0):
    rng = np.random.default_rng(seed)
    return ParamStore(init_unet_params(SMALL_CFG, rng))


class TestParamStore:
    def test_counts_and_names(self):
        store = small_unet()
        assert store.n_params == sum(t.numel() for _, t in store.items())
        assert store.names() == sorted(store.names())

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ParamStore({"w": np.array([1.0, np.nan])})


class TestConv1d:
    def test_valid_hand_computed(self):
        out = conv1d([1.0, 2.0, 3.0], [1.0, 1.0], mode="valid")
        np.testing.assert_allclose(out.numpy(), [3.0, 5.0])

    def test_identity_kernel(self):
        signal = np.linspace(-1, 1, 9)
        out = conv1d(signal, [1.0], mode="same")
        np.testing.assert_allclose(out.numpy(), signal)

    def test_zero_kernel(self):
        out = conv1d(np.ones(8), [0.0, 0.0, 0.0], mode="same")
        np.testing.assert_allclose(out.numpy(), np.zeros(8))

    def test_kernel_too_long(self):
        with pytest.raises(ValueError):
            conv1d([1.0, 2.0], [1.0, 1.0, 1.0], mode="valid")


class TestGrid:
    def test_divisible_and_uniform(self):
        grid = make_grid((-2, 2), points_per_unit=64, margin=0.5, multiple=64)
        assert len(grid) % 64 == 0
        spacing = np.diff(grid)
        np.testing.assert_allclose(spacing, spacing[0])

    def test_covers_range_with_margin(self):
        grid = make_grid((-2, 2), points_per_unit=16, margin=0.5, multiple=4)
        assert grid[0] <= -2.5 + 1e-9
        assert grid[-1] >= 2.5 - 1.0 / 16 - 1e-9


class TestUNet:
    def test_output_length_preserved(self):
        params = small_unet()
        x = np.random.default_rng(1).standard_normal((2, 16))
        out = unet_apply(params, SMALL_CFG, x)
        assert out.shape == (3, 16)

    def test_deterministic(self):
        params = small_unet()
        x = np.random.default_rng(2).standard_normal((1, 2, 16))
        a = unet_apply(params, SMALL_CFG, x)
        b = unet_apply(params, SMALL_CFG, x)
        assert torch.equal(a, b)

    def test_indivisible_grid_rejected(self):
        params = small_unet()
        with pytest.raises(ValueError):
            unet_apply(params, SMALL_CFG, np.zeros((2, 18)))

    def test_translation_covariance_interior(self):
        # shifting the input one node shifts interior outputs one node
        cfg = UNetConfig(levels=2, channels=4, in_channels=1, out_channels=1)
        params = ParamStore(init_unet_params(cfg, np.random.default_rng(3)))
        n = 64
        x = np.zeros((1, n))
        x[0, 20:28] = np.random.default_rng(4).standard_normal(8)
        shifted = np.roll(x, 4, axis=1)
        out = unet_apply(params, cfg, x).numpy()
        out_shifted = unet_apply(params, cfg, shifted).numpy()
        lo, hi = n // 4, 3 * n // 4
        np.testing.assert_allclose(out_shifted[0, lo + 4 : hi + 4],
                                   out[0, lo:hi], atol=1e-8)


class TestSetConv:
    GRID = make_grid((-1, 1), points_per_unit=8, margin=0.25, multiple=4)

    def test_empty_set_zero_density(self):
        out = setconv_encode([], [], self.GRID, 0.2)
        np.testing.assert_array_equal(out.numpy(), np.zeros((2, len(self.GRID))))

    def test_density_peaks_at_point(self):
        x0 = self.GRID[len(self.GRID) // 2]
        out = setconv_encode([x0], [1.0], self.GRID, 0.2)
        assert np.argmax(out.numpy()[0]) == len(self.GRID) // 2

    def test_translation_equivariance(self):
        delta = 0.37
        xs = np.array([-0.4, 0.1, 0.55])
        ys = np.array([1.0, -2.0, 0.5])
        a = setconv_encode(xs, ys, self.GRID, 0.2).numpy()
        b = setconv_encode(xs + delta, ys, np.asarray(self.GRID) + delta, 0.2).numpy()
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(5)
        xs = rng.uniform(-1, 1, 12)
        ys = rng.standard_normal(12)
        perm = rng.permutation(12)
        a = setconv_encode(xs, ys, self.GRID, 0.2).numpy()
        b = setconv_encode(xs[perm], ys[perm], self.GRID, 0.2).numpy()
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    def test_decode_one_hot_recovery(self):
        feats = np.zeros((3, len(self.GRID)))
        node = 7
        feats[1, node] = 2.5
        out = setconv_decode(feats, [self.GRID[node]], self.GRID, 0.2).numpy()
        assert out[0, 1] == pytest.approx(2.5)  # rbf weight 1 at zero distance
        assert out[0, 0] == 0.0

    def test_decode_zero_features(self):
        feats = np.zeros((2, len(self.GRID)))
        out = setconv_decode(feats, [0.1, -0.3], self.GRID, 0.2).numpy()
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_decode_linearity(self):
        rng = np.random.default_rng(6)
        f1 = rng.standard_normal((2, len(self.GRID)))
        f2 = rng.standard_normal((2, len(self.GRID)))
        qs = rng.uniform(-1, 1, 5)
        a = setconv_decode(f1, qs, self.GRID, 0.2).numpy()
        b = setconv_decode(f2, qs, self.GRID, 0.2).numpy()
        ab = setconv_decode(f1 + 3.0 * f2, qs, self.GRID, 0.2).numpy()
        np.testing.assert_allclose(ab, a + 3.0 * b, atol=1e-10)


def _fd_probe(objective, params, name, idx, h):
    base = {n: t.detach().clone() for n, t in params.items()}

    def value_at(v):
        arrays = {n: t.detach().clone() for n, t in base.items()}
        arrays[name].reshape(-1)[idx] = v
        with torch.no_grad():
            return float(objective(ParamStore(arrays)))

    orig = float(base[name].reshape(-1)[idx])
    f_plus, f_minus = value_at(orig + h), value_at(orig - h)
    central = (f_plus - f_minus) / (2.0 * h)
    f_mid = value_at(orig)
    fwd = (f_plus - f_mid) / h
    bwd = (f_mid - f_minus) / h
    # a ReLU kink inside [w-h, w+h] makes the one-sided slopes disagree and
    # invalidates the central-difference estimate at this probe
    kink = abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1.0)
    return central, kink


def probe_gradients(objective, params, n_probes, h, rng, min_magnitude=1e-3):
    """Compare autodiff against central differences on random parameter entries.

    Returns (max relative error, accepted probe count). Probes straddling a
    nonsmooth point are skipped, as are probes where both estimates sit below
    the central-difference truncation floor (|grad| < min_magnitude at step h,
    where the O(h^2) error can dominate the value itself).
    """
    _, grads = value_and_grad(objective, params)
    names = params.names()
    max_rel, accepted, attempts = 0.0, 0, 0
    while accepted < n_probes and attempts < 20 * n_probes:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(params[name].numel()))
        fd, kink = _fd_probe(objective, params, name, idx, h)
        g = float(grads[name].reshape(-1)[idx])
        if kink or max(abs(fd), abs(g)) < min_magnitude:
            continue
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-10)
        max_rel = max(max_rel, rel)
        accepted += 1
    return max_rel, accepted


class TestValueAndGrad:
    def test_square_analytic(self):
        params = ParamStore({"w": np.array(3.0)})
        val, grads = value_and_grad(lambda p: p["w"] ** 2, params)
        assert val == pytest.approx(9.0)
        assert float(grads["w"]) == pytest.approx(6.0)

    def test_constant_objective(self):
        params = ParamStore({"w": np.ones(4)})
        val, grads = value_and_grad(lambda p: torch.tensor(2.0), params)
        assert val == 2.0
        np.testing.assert_array_equal(grads["w"].numpy(), np.zeros(4))

    def test_non_finite_raises(self):
        params = ParamStore({"w": np.array(0.0)})
        with pytest.raises(NumericalError):
            value_and_grad(lambda p: torch.log(p["w"]), params)

    def test_unet_gradients_vs_finite_differences(self):
        params = small_unet(seed=7)
        target = torch.as_tensor(
            np.random.default_rng(8).standard_normal((3, 16)))
        x = np.random.default_rng(9).standard_normal((2, 16))

        def objective(p):
            out = unet_apply(p, SMALL_CFG, x)
            return torch.sum((out - target) ** 2)

        max_rel, accepted = probe_gradients(
            objective, params, n_probes=20, h=1e-3,
            rng=np.random.default_rng(10))
        assert accepted == 20
        assert max_rel < 1e-4
