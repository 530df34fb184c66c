import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from jscc import autodiff as ad
from jscc.autodiff import ParameterStore, Tensor
from jscc.channels import (
    BandwidthLimitedSpec,
    BandwidthPartition,
    GaussianChannelSpec,
    Marginalization,
    RelaxedBinarySpec,
    bandwidth_log_density,
    bandwidth_transmit,
    binary_snr,
    clamp_events,
    gaussian_capacity,
    gaussian_channel_log_density,
    gaussian_transmit,
    marginalize_bandwidth,
    noise_argument,
    point_bandwidth,
    relaxed_binary_density,
    relaxed_binary_transform,
    relaxed_binary_transmit,
    uniform_bandwidth,
)
from jscc.distributions import binary_concrete_log_density
from jscc.models import PriorModel


def toy_spec(probs, prior="standard", snr=1.0, mode="full_sum", n_samples=1, n=2, slots=2):
    part = BandwidthPartition.equal(n, slots)
    return BandwidthLimitedSpec(part, probs, GaussianChannelSpec(snr), PriorModel(prior, part, hidden=4, seed=3),
                                mode=mode, n_samples=n_samples)


# --- Gaussian channel


def test_zero_noise_passes_sample():
    y = np.array([[0.3, -1.0]])
    z = gaussian_transmit(y, np.array([[2.0, 1.0]]), GaussianChannelSpec(3.0), None, noise=np.zeros((1, 2)))
    assert np.array_equal(z.data, y)


def test_transmit_arithmetic():
    z = gaussian_transmit(np.array([2.0]), np.array([2.0]), GaussianChannelSpec(2.0), None, noise=np.array([1.0]))
    assert z.data[0] == 3.0


def test_negative_mean_uses_absolute_scale():
    z = gaussian_transmit(np.array([0.0]), np.array([-2.0]), GaussianChannelSpec(1.0), None, noise=np.array([1.0]))
    assert z.data[0] == 2.0


@pytest.mark.parametrize("s", [0.5, 1.0, 4.0])
def test_empirical_noise_std(s):
    n, mu = 100_000, -1.3
    y = np.full(n, 0.4)
    z = gaussian_transmit(y, np.full(n, mu), GaussianChannelSpec(s), np.random.default_rng(0))
    assert abs((z.data - y).std() / (abs(mu) / s) - 1.0) < 0.02


def test_snr_must_be_positive():
    with pytest.raises(ValueError):
        GaussianChannelSpec(0.0)


def test_channel_density_matches_scipy():
    from scipy.stats import norm

    y, mu, z = np.array([[0.2, 1.0]]), np.array([[-0.5, 2.0]]), np.array([[0.0, 3.5]])
    got = gaussian_channel_log_density(z, y, mu, GaussianChannelSpec(2.0)).item()
    want = norm.logpdf(z, y, np.abs(mu) / 2.0).sum()
    assert got == pytest.approx(want, rel=1e-13)


def test_transmit_gradient_through_encoder():
    store = ParameterStore(4)
    w, b = store.dense("enc", 3, 2)
    store["enc/b"].data += 0.3
    x = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    target = Tensor(np.random.default_rng(2).normal(size=(5, 2)))

    def loss():
        rng = np.random.default_rng(9)
        mu = ad.affine(x, w, b)
        y = mu + Tensor(0.3 * rng.standard_normal(mu.shape))
        return (gaussian_transmit(y, mu, GaussianChannelSpec(1.5), rng) - target).square().mean()

    assert ad.finite_difference_check(loss, store) < 1e-3


@pytest.mark.parametrize("s,bits", [(0.0, 0.0), (1.0, 0.5), (3.0, 1.0)])
def test_capacity_values(s, bits):
    assert abs(gaussian_capacity(s) - bits) <= 1e-12


def test_capacity_monotone_and_concave():
    c = np.array([gaussian_capacity(s) for s in np.linspace(0, 20, 401)])
    assert np.all(np.diff(c) > 0)
    assert np.all(np.diff(c, 2) < 0)


# --- partition and bandwidth distribution


def test_partition_equal_slots():
    p = BandwidthPartition.equal(20, 5)
    assert p.slots == [(0, 4), (4, 8), (8, 12), (12, 16), (16, 20)]
    assert p.slot_of(0) == 0 and p.slot_of(4) == 1 and p.slot_of(19) == 4


@pytest.mark.parametrize("bounds", [(0, 3, 3, 6), (1, 6), (0, 5)])
def test_partition_rejects_bad_boundaries(bounds):
    with pytest.raises(ValueError):
        BandwidthPartition(6, bounds)


def test_bandwidth_spec_validation():
    with pytest.raises(ValueError):
        toy_spec([0.5, 0.4, 0.0])
    with pytest.raises(ValueError):
        toy_spec([1 / 3] * 3, n_samples=0)


def test_default_bandwidth_distribution():
    assert np.array_equal(uniform_bandwidth(5), [0, 0.2, 0.2, 0.2, 0.2, 0.2])
    assert np.array_equal(point_bandwidth(5, 2), [0, 0, 1, 0, 0, 0])


# --- bandwidth-limited transmission


def test_full_bandwidth_has_no_prior_slots():
    spec = toy_spec(point_bandwidth(2, 2))
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 2))
    out = bandwidth_transmit(y, y, 2, spec, np.random.default_rng(1))
    ref = gaussian_transmit(y, y, spec.inner, np.random.default_rng(1))
    assert out.prior_filled == (False, False)
    assert np.array_equal(out.z.data, ref.data)


def test_bandwidth_out_of_range():
    spec = toy_spec(point_bandwidth(2, 1))
    with pytest.raises(ValueError):
        bandwidth_transmit(np.zeros((1, 2)), np.ones((1, 2)), 3, spec, np.random.default_rng(0))


@pytest.mark.parametrize("prior", ["standard", "autoregressive"])
def test_zero_bandwidth_independent_of_input(prior):
    n = 10_000
    spec = toy_spec(point_bandwidth(2, 0), prior=prior)
    rng = np.random.default_rng(5)
    y = rng.normal(size=(n, 2)) * 3.0
    out = bandwidth_transmit(y, y, 0, spec, rng)
    assert out.prior_filled == (True, True)
    for i in range(2):
        for j in range(2):
            assert abs(np.corrcoef(y[:, i], out.z.data[:, j])[0, 1]) < 3 / math.sqrt(n)


def test_two_slot_density_factorises():
    spec = toy_spec(point_bandwidth(2, 1), prior="autoregressive")
    rng = np.random.default_rng(2)
    y, mu = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    out = bandwidth_transmit(y, mu, 1, spec, rng, with_densities=True)
    z = out.z.data
    sig = np.abs(mu[:, 0]) / spec.inner.snr
    hand_channel = -0.5 * ((z[:, 0] - y[:, 0]) / sig) ** 2 - np.log(sig) - 0.5 * math.log(2 * math.pi)
    d = spec.prior.slot_distribution(Tensor(np.c_[z[:, 0], np.zeros(4)]), 1)
    m, s = d.mean.data[:, 0], d.std[:, 0]
    hand_prior = -0.5 * ((z[:, 1] - m) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi)
    assert np.allclose(out.slot_log_densities[0].data, hand_channel, rtol=0, atol=1e-12)
    assert np.allclose(out.slot_log_densities[1].data, hand_prior, rtol=0, atol=1e-12)
    assert np.allclose(bandwidth_log_density(z, y, mu, spec), hand_channel + hand_prior, atol=1e-12)


def test_channel_conditional_normalised():
    spec = toy_spec(uniform_bandwidth(2, include_zero=True), prior="autoregressive")
    y, mu = np.array([[0.4, -0.7]]), np.array([[0.9, 1.2]])
    g = np.linspace(-9, 9, 901)
    zz = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    dens = np.exp(bandwidth_log_density(zz, np.repeat(y, len(zz), 0), np.repeat(mu, len(zz), 0), spec))
    total = integrate.trapezoid(integrate.trapezoid(dens.reshape(len(g), len(g)), g, axis=1), g)
    assert abs(total - 1.0) < 1e-4


def test_full_sum_matches_enumeration():
    probs = [0.2, 0.5, 0.3]
    spec = toy_spec(probs, prior="autoregressive")
    y = np.random.default_rng(0).normal(size=(6, 2))

    def f(out):
        return (out.z.square().sum(axis=1) * (1.0 + out.bandwidth)).mean()

    got = marginalize_bandwidth(y, y, spec, f, np.random.default_rng(11)).item()
    rng = np.random.default_rng(11)
    hand = sum(p * f(bandwidth_transmit(y, y, b, spec, rng)).item() for b, p in enumerate(probs))
    assert abs(got - hand) <= 1e-12


def test_full_sum_deterministic_integrand_weighted_mean():
    spec = toy_spec(uniform_bandwidth(2, include_zero=True))
    f = lambda out: Tensor(float(out.bandwidth ** 2 + 1))  # noqa: E731
    got = marginalize_bandwidth(np.zeros((1, 2)), np.ones((1, 2)), spec, f, np.random.default_rng(0)).item()
    assert abs(got - (1 + 2 + 5) / 3) <= 1e-12


@pytest.mark.parametrize("mode", ["full_sum", "monte_carlo"])
def test_degenerate_bandwidth_distribution(mode):
    spec = toy_spec(point_bandwidth(2, 1), mode=mode, n_samples=4)
    f = lambda out: Tensor(float(out.bandwidth) + 0.5)  # noqa: E731
    assert marginalize_bandwidth(np.zeros((1, 2)), np.ones((1, 2)), spec, f, np.random.default_rng(0)).item() == 1.5


def test_monte_carlo_converges_to_full_sum():
    probs = [0.1, 0.3, 0.6]
    k = 10_000
    y = np.array([[0.8, -1.5]])
    f = lambda out: out.z.square().sum()  # noqa: E731
    # exact: sent slot has E z^2 = y^2 + mu^2 / s^2; prior slot has E z^2 = 1
    per_slot_sent = 2 * y[0] ** 2
    exact = sum(p * (per_slot_sent[:b].sum() + (2 - b)) for b, p in enumerate(probs))
    spec = toy_spec(probs, mode="monte_carlo", n_samples=k)
    est, terms = marginalize_bandwidth(y, y, spec, f, np.random.default_rng(3), return_terms=True)
    vals = np.array([v.item() for _, _, v in terms])
    se = vals.std(ddof=1) / math.sqrt(k)
    assert abs(est.item() - exact) < 3 * se
    full = toy_spec(probs)
    full_vals = [marginalize_bandwidth(y, y, full, f, np.random.default_rng(i)).item() for i in range(2000)]
    assert abs(np.mean(full_vals) - exact) < 3 * np.std(full_vals, ddof=1) / math.sqrt(2000)


def test_bandwidth_path_gradcheck():
    spec = toy_spec(uniform_bandwidth(2, include_zero=True), prior="autoregressive")
    store = ParameterStore(1)
    w, b = store.dense("enc", 3, 2)
    store["enc/b"].data += 0.5
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    params = ParameterStore.merged({"e": store, "p": spec.prior.store})

    def loss():
        rng = np.random.default_rng(4)
        mu = ad.affine(x, w, b)
        return marginalize_bandwidth(mu, mu, spec, lambda out: (out.z - 1.0).square().mean(), rng)

    assert ad.finite_difference_check(loss, params) < 1e-3


# --- relaxed binary channel


@pytest.mark.parametrize("y,w,z", [(1.0, 1.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)])
def test_hard_truth_table(y, w, z):
    assert relaxed_binary_transform(np.array([y]), np.array([w])).data[0] == z


def test_bit_agreement_near_zero_temperature():
    n = 100_000
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, n).astype(float)
    spec = RelaxedBinarySpec(0.9, noise_temperature=0.01, input_temperature=0.01)
    z = relaxed_binary_transmit(bits, spec, rng).data
    agree = np.mean((z > 0.5) == (bits > 0.5))
    assert abs(agree - 0.9) < 0.01


def test_singular_input_is_clamped_and_counted():
    before = clamp_events["relaxed_binary_singular_input"]
    z = relaxed_binary_transform(np.array([0.5, 0.7]), np.array([0.6, 0.6]))
    assert np.all(np.isfinite(z.data))
    assert clamp_events["relaxed_binary_singular_input"] == before + 1


def test_noise_argument_inverts_transform():
    rng = np.random.default_rng(1)
    y, w = rng.uniform(0.01, 0.99, 50), rng.uniform(0.01, 0.99, 50)
    z = relaxed_binary_transform(y, w).data
    assert np.allclose(noise_argument(z, y), w, atol=1e-9)


def test_density_reduces_to_noise_density_for_hard_one():
    spec = RelaxedBinarySpec(0.8, noise_temperature=0.7)
    z = np.linspace(0.05, 0.95, 19)
    u = np.log(z) - np.log1p(-z)
    want = binary_concrete_log_density(u, math.log(0.8 / 0.2), 0.7).data
    assert np.allclose(relaxed_binary_density(z, np.ones_like(z), spec), want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_density_flip_symmetry(z, y):
    spec = RelaxedBinarySpec(0.7)
    try:
        a = relaxed_binary_density(np.array([z]), np.array([y]), spec)
    except ValueError:
        return
    b = relaxed_binary_density(np.array([1 - z]), np.array([1 - y]), spec)
    assert np.allclose(a, b, atol=1e-9)


def test_density_rejects_out_of_range_argument():
    with pytest.raises(ValueError):
        relaxed_binary_density(np.array([1.4]), np.array([0.9]), RelaxedBinarySpec(0.7))


def test_density_matches_sample_histogram():
    # noise temperature 1 keeps the z-density bounded, so quadrature is accurate
    spec = RelaxedBinarySpec(0.75, noise_temperature=1.0)
    y = 0.85
    n = 100_000
    z = np.sort(relaxed_binary_transmit(np.full(n, y), spec, np.random.default_rng(2)).data)
    half = 1.0 / (2.0 * abs(2 * y - 1))
    lo, hi = 0.5 - half, 0.5 + half
    pdf = lambda t: math.exp(relaxed_binary_density(np.array([t]), np.array([y]), spec, jacobian=True)[0])  # noqa: E731
    total, _ = integrate.quad(pdf, lo + 1e-12, hi - 1e-12)
    assert abs(total - 1.0) < 1e-6
    grid = np.linspace(lo + 1e-3, hi - 1e-3, 41)
    cdf = np.array([integrate.quad(pdf, lo + 1e-12, g)[0] for g in grid])
    ecdf = np.searchsorted(z, grid, side="right") / n
    assert np.max(np.abs(cdf - ecdf)) < 0.02


@pytest.mark.parametrize("p_y", [0.1, 0.5, 0.9])
def test_binary_snr_zero_at_half(p_y):
    assert binary_snr(0.5, p_y) == 0.0


def test_binary_snr_noiseless_printed_value():
    assert binary_snr(1.0, 0.5) == 0.0


def test_binary_snr_smooth_without_poles():
    g = np.linspace(0.01, 0.99, 99)
    vals = np.array([[binary_snr(p, q) for q in g] for p in g])
    assert np.all(np.isfinite(vals))
    assert np.max(np.abs(np.diff(vals, axis=0))) < 0.05
    assert np.max(np.abs(np.diff(vals, axis=1))) < 0.05


def test_relaxed_spec_validation():
    with pytest.raises(ValueError):
        RelaxedBinarySpec(1.0)
    with pytest.raises(ValueError):
        RelaxedBinarySpec(0.5, noise_temperature=0.0)
