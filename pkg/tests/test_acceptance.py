"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s``; the summary lines
are also collected at the end of any pytest run. Criteria 6-8 train many
models and take several minutes.
"""
import json
import math
import subprocess
import sys
import time
from collections import defaultdict

import numpy as np
import pytest
from scipy import integrate

from jscc import autodiff as ad
from jscc.autodiff import Tensor
from jscc.channels import (
    BandwidthLimitedSpec,
    BandwidthPartition,
    GaussianChannelSpec,
    RelaxedBinarySpec,
    bandwidth_transmit,
    binary_snr,
    gaussian_capacity,
    gaussian_transmit,
    marginalize_bandwidth,
    point_bandwidth,
    relaxed_binary_transform,
    relaxed_binary_transmit,
)
from jscc.config import ExperimentConfig
from jscc.distributions import BinaryConcrete, DiagonalGaussian, binary_concrete_log_density
from jscc.experiments import compare_joint_separate, gradcheck, majority_joint_wins, sweep_bandwidth
from jscc.mmd import mmd_statistic
from jscc.models import PriorModel
from jscc.objectives import rate_estimators

from conftest import ACCEPTANCE_LINES, TINY

# blobs 8x8 (the dataset default) with desk-scale widths
JOINT_SEPARATE = {
    "model": {"hidden": [64], "coder_hidden": [64]},
    "training": {"steps": 1000},
}
BANDWIDTH = {
    "dataset": {"side": 16},
    "model": {"hidden": [128], "alv_hidden": [64]},
    "training": {"steps": 1000},
}


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def majority(flags):
    return sum(flags) * 2 > len(flags)


# --- 1


def test_criterion_01_gradient_integrity():
    start = time.perf_counter()
    errs = gradcheck(ExperimentConfig())
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    report(1, worst < 1e-3 and elapsed < 60, f"max rel err {worst:.2e} over {len(errs)} losses, {elapsed:.1f}s")


# --- 2


def test_criterion_02_capacity():
    a, b = gaussian_capacity(1.0), gaussian_capacity(3.0)
    report(2, abs(a - 0.5) <= 1e-12 and abs(b - 1.0) <= 1e-12, f"C(1)={a!r} C(3)={b!r}")


# --- 3


def test_criterion_03_snr_realisation():
    n, mu = 100_000, 0.8
    ratios = {}
    for s in (0.5, 1.0, 4.0):
        y = np.full(n, -0.2)
        z = gaussian_transmit(y, np.full(n, mu), GaussianChannelSpec(s), np.random.default_rng(int(s * 10)))
        ratios[s] = (z.data - y).std() / (abs(mu) / s)
    ok = all(abs(r - 1) < 0.02 for r in ratios.values())
    report(3, ok, "std/(|mu|/s) " + " ".join(f"s={s:g}:{r:.4f}" for s, r in ratios.items()))


# --- 4


def test_criterion_04_binary_concrete():
    n = 100_000
    gaps = {}
    for alpha in (0.5, 1.0, 3.0):
        _, x = BinaryConcrete(Tensor(np.full(n, math.log(alpha))), 0.5).sample(np.random.default_rng(7))
        gaps[alpha] = abs(np.mean(x.data > 0.5) - alpha / (1 + alpha))
    norm_err, cov_err = 0.0, 0.0
    for alpha, temp in [(0.5, 0.5), (1.0, 1.0), (3.0, 2.0)]:
        la = math.log(alpha)
        total, _ = integrate.quad(lambda y: math.exp(binary_concrete_log_density(y, la, temp).item()),
                                  -np.inf, np.inf, epsabs=1e-13, limit=400)
        norm_err = max(norm_err, abs(total - 1))
        # y = (L + log a) / T with logistic L: g(y) = T * l(T y - log a), l(u) = e^-u / (1 + e^-u)^2
        grid = np.linspace(-12, 12, 481)
        u = temp * grid - la
        oracle = math.log(temp) - u - 2 * np.log1p(np.exp(-u))
        cov_err = max(cov_err, np.max(np.abs(binary_concrete_log_density(grid, la, temp).data - oracle)))
    ok = max(gaps.values()) < 0.01 and norm_err <= 1e-5 and cov_err <= 1e-10
    report(4, ok, f"max |P(X>.5)-a/(1+a)|={max(gaps.values()):.4f}, |int-1|={norm_err:.1e}, "
                  f"density vs oracle {cov_err:.1e}")


# --- 5


def test_criterion_05_bandwidth_marginalisation():
    part = BandwidthPartition.equal(2, 2)
    prior = PriorModel("autoregressive", part, hidden=4, seed=1)
    rng = np.random.default_rng(0)
    for _, p in prior.store.items():
        p.data = rng.normal(size=p.shape) * 0.5
    probs = [0.25, 0.35, 0.4]
    y = rng.normal(size=(5, 2))
    mu = y + 0.3

    def f(out):
        return ((out.z - 0.5).square().sum(axis=1) * (1.0 + out.bandwidth)).mean()

    spec = BandwidthLimitedSpec(part, probs, GaussianChannelSpec(1.0), prior)
    full = marginalize_bandwidth(y, mu, spec, f, np.random.default_rng(3)).item()
    # by hand: replay the same noise stream slot by slot for B = 0, 1, 2
    hand_rng = np.random.default_rng(3)
    hand = 0.0
    for b, p in enumerate(probs):
        z = np.zeros((5, 2))
        if b:
            z[:, :b] = y[:, :b] + np.abs(mu[:, :b]) * hand_rng.standard_normal((5, b))
        for t in range(b, 2):
            d = prior.slot_distribution(Tensor(np.c_[z[:, :t], np.zeros((5, 2 - t))]), t)
            z[:, t] = d.mean.data[:, 0] + d.std[:, 0] * hand_rng.standard_normal(5)
        hand += p * np.mean(np.sum((z - 0.5) ** 2, axis=1) * (1 + b))
    enum_err = abs(full - hand)

    k = 10_000
    mc_spec = BandwidthLimitedSpec(part, probs, GaussianChannelSpec(1.0), prior, mode="monte_carlo", n_samples=k)
    est, terms = marginalize_bandwidth(y, mu, mc_spec, f, np.random.default_rng(4), return_terms=True)
    vals = np.array([v.item() for _, _, v in terms])
    # reference: the full sum averaged over many noise draws
    ref = np.array([marginalize_bandwidth(y, mu, spec, f, np.random.default_rng(100 + i)).item() for i in range(3000)])
    se = math.hypot(vals.std(ddof=1) / math.sqrt(k), ref.std(ddof=1) / math.sqrt(len(ref)))
    mc_gap = abs(est.item() - ref.mean())

    n = 10_000
    zero = BandwidthLimitedSpec(part, point_bandwidth(2, 0), GaussianChannelSpec(1.0), prior)
    x = np.random.default_rng(5).normal(size=(n, 2)) * 2.0
    out = bandwidth_transmit(x, x, 0, zero, np.random.default_rng(6)).z.data
    corr = max(abs(np.corrcoef(x[:, i], out[:, j])[0, 1]) for i in range(2) for j in range(2))

    ok = enum_err <= 1e-12 and mc_gap < 3 * se and corr < 3 / math.sqrt(n)
    report(5, ok, f"full-sum vs enumeration {enum_err:.1e}; MC gap {mc_gap / se:.2f} se at k=1e4; "
                  f"B=0 max|corr| {corr:.4f} < {3 / math.sqrt(n):.4f}")


# --- 6


def test_criterion_06_joint_beats_separate():
    cfg = ExperimentConfig().replace(**JOINT_SEPARATE)
    start = time.perf_counter()
    best, _ = compare_joint_separate(cfg)
    elapsed = time.perf_counter() - start
    wins = majority_joint_wins(best, cfg.eval.snrs)
    ok = all(majority([True] * w + [False] * (n - w)) for w, n in wins.values()) and elapsed < 1800
    votes = " ".join(f"snr{s:g}:{w}/{n}" for s, (w, n) in wins.items())
    report(6, ok, f"joint<=separate votes {votes}; {elapsed / 60:.1f} min")


# --- 7 and 8 share one bandwidth sweep


@pytest.fixture(scope="module")
def bandwidth_rows():
    cfg = ExperimentConfig().replace(**BANDWIDTH)
    start = time.perf_counter()
    rows = sweep_bandwidth(cfg)
    table = defaultdict(dict)
    for r in rows:
        table[(r.mode, r.seed)][r.bandwidth] = r
    return cfg, table, time.perf_counter() - start


def _r2(d):
    b = np.arange(1, 6)
    fit = np.polyval(np.polyfit(b, d, 1), b)
    return 1 - np.sum((d - fit) ** 2) / np.sum((d - d.mean()) ** 2)


def test_criterion_07_bandwidth_sweep(bandwidth_rows):
    cfg, table, elapsed = bandwidth_rows
    seeds = cfg.eval.seeds
    checks, notes = {}, []
    curves = {}
    for prior in ("standard", "autoregressive"):
        mono, r2s = [], []
        for s in seeds:
            d = np.array([table[(prior, s)][b].distortion_l2 for b in range(6)])
            curves[(prior, s)] = d
            mono.append(bool(np.all(np.diff(d) <= 0.02 * d[0])))
            r2s.append(_r2(d[1:]))
        checks[f"{prior} non-increasing"] = majority(mono)
        checks[f"{prior} R2>=0.8"] = majority([r >= 0.8 for r in r2s])
        notes.append(f"{prior[:3]} R2 " + "/".join(f"{r:.2f}" for r in r2s))
    for b in (1, 2):
        flags = [curves[("autoregressive", s)][b] <= curves[("standard", s)][b] for s in seeds]
        checks[f"AR<=STD at B={b}"] = majority(flags)
        notes.append(f"AR<=STD B={b} {sum(flags)}/{len(flags)}")
    failed = [k for k, v in checks.items() if not v]
    detail = "; ".join(notes) + (f"; failed: {', '.join(failed)}" if failed else "") + f"; {elapsed / 60:.1f} min sweep"
    report(7, not failed, detail)


def naive_mmd(a, b, sigma):
    k = lambda u, v: math.exp(-sum((p - q) ** 2 for p, q in zip(u, v)) / (2 * sigma * sigma))  # noqa: E731
    m = len(a)
    aa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j)
    bb = sum(k(b[i], b[j]) for i in range(m) for j in range(m) if i != j)
    ab = sum(k(a[i], b[j]) for i in range(m) for j in range(m) if i != j)
    return (aa + bb - 2 * ab) / (m * (m - 1))


def test_criterion_08_alv_mmd(bandwidth_rows):
    cfg, table, _ = bandwidth_rows
    rng = np.random.default_rng(8)
    a, b = rng.random((50, 16)), rng.random((50, 16)) ** 1.5
    oracle_err = abs(mmd_statistic(a, b, 1.3) - naive_mmd(a.tolist(), b.tolist(), 1.3))
    checks, notes = {}, []
    for prior in ("standard", "autoregressive"):
        for bw in (1, 2):
            flags = [table[(prior + "+alv", s)][bw].mmd <= table[(prior, s)][bw].mmd for s in cfg.eval.seeds]
            checks[(prior, bw)] = majority(flags)
            notes.append(f"{prior[:3]} B={bw} {sum(flags)}/{len(flags)}")
    ok = all(checks.values()) and oracle_err <= 1e-12
    report(8, ok, "ALV<=plain MMD " + "; ".join(notes) + f"; oracle err {oracle_err:.1e}")


# --- 9


class _SymbolEncoder:
    def __init__(self, means, spread):
        self.means, self.spread = np.asarray(means), spread

    def __call__(self, x):
        idx = np.argmax(np.asarray(ad.as_tensor(x).data), axis=1)
        return DiagonalGaussian(Tensor(self.means[idx][:, None]), Tensor(np.full((len(idx), 1), math.log(self.spread))))


class _SymbolModel:
    """16 one-hot symbols, one Gaussian code each, softmax decoder over code distance."""

    def __init__(self, encoder, centres, width):
        self.encoder, self.centres, self.width, self.alv = encoder, np.asarray(centres), width, None
        self.prior = PriorModel("standard", BandwidthPartition.equal(1, 1))

    def nll(self, x, z):
        z = ad.as_tensor(z).data[:, :1]
        logits = -((z - self.centres[None, :]) ** 2) / (2 * self.width ** 2)
        log_p = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        return Tensor(-np.sum(np.asarray(ad.as_tensor(x).data) * log_p, axis=1))


def test_criterion_09_entropy_bound_and_zero_rates():
    k = 16
    probs = np.random.default_rng(0).dirichlet(np.ones(k))
    counts = np.round(probs * 50_000).astype(int)
    emp = counts / counts.sum()
    h = float(-np.sum(emp[emp > 0] * np.log(emp[emp > 0])))
    x = np.eye(k)[np.repeat(np.arange(k), counts)]
    centres = np.linspace(-2.5, 2.5, k)
    margins = []
    for width, spread in [(0.3, 0.1), (0.6, 0.3), (1.0, 0.05)]:
        model = _SymbolModel(_SymbolEncoder(centres, spread), centres, width)
        rep = rate_estimators(x, model, None, np.random.default_rng(1))
        q = model.encoder(x)
        y = q.sample(np.random.default_rng(1))
        per = model.nll(x, y).data + (q.log_prob(y) - model.prior.log_density(y)).data
        se = per.std(ddof=1) / math.sqrt(len(per))
        margins.append((rep.rate + rep.distortion - h) / se)
    bound_ok = all(m >= -3 for m in margins)

    pinned = _SymbolModel(lambda x: DiagonalGaussian.standard((len(x), 1)), centres, 0.5)
    r_zero = rate_estimators(x[:100], pinned, None, np.random.default_rng(2)).rate

    class MarginalChannel:
        def transmit(self, y, q, rng):
            z = pinned.prior.sample(len(y.data), rng)
            return z, pinned.prior.log_density(z)

    t_zero = rate_estimators(x[:100], pinned, MarginalChannel(), np.random.default_rng(3)).transmission
    ok = bound_ok and r_zero == 0.0 and t_zero == 0.0
    report(9, ok, f"H={h:.4f} nats, (R+D-H)/se = " + ", ".join(f"{m:.1f}" for m in margins)
                  + f"; pinned R={r_zero!r}; marginal-channel T={t_zero!r}")


# --- 10


def test_criterion_10_relaxed_binary():
    table = [(1.0, 1.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)]
    truth_ok = all(relaxed_binary_transform(np.array([y]), np.array([w])).data[0] == z for y, w, z in table)
    n = 100_000
    gaps = {}
    for p in (0.7, 0.9):
        rng = np.random.default_rng(int(p * 100))
        bits = rng.integers(0, 2, n).astype(float)
        z = relaxed_binary_transmit(bits, RelaxedBinarySpec(p, 1e-3, 1e-3), rng).data
        gaps[p] = abs(np.mean((z > 0.5) == (bits > 0.5)) - p)
    snrs = [binary_snr(0.5, p_y) for p_y in (0.1, 0.5, 0.9)]
    ok = truth_ok and max(gaps.values()) < 0.01 and all(s == 0.0 for s in snrs)
    report(10, ok, f"truth table {'exact' if truth_ok else 'WRONG'}; agreement gaps "
                   + " ".join(f"p={p}:{g:.4f}" for p, g in gaps.items()) + f"; binary_snr(0.5, .)={snrs}")


# --- 11


def test_criterion_11_determinism(tmp_path):
    from jscc.cli import SUBCOMMANDS

    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    mismatched, compared = [], 0
    for command in SUBCOMMANDS:
        snapshots = []
        for i in range(2):
            out = tmp_path / f"{command}-{i}"
            steps = [["train"]] if command == "eval" else []
            for argv in steps + [[command]]:
                proc = subprocess.run([sys.executable, "-m", "jscc", *argv, "--config", str(cfg_path), "--out", str(out)],
                                      capture_output=True, text=True)
                assert proc.returncode == 0, proc.stderr
            files = sorted(out.glob("*")) if out.exists() else []
            snapshots.append({p.name: p.read_bytes() for p in files if p.suffix in (".csv", ".pgm", ".ckpt")})
        compared += len(snapshots[0])
        if snapshots[0] != snapshots[1]:
            mismatched.append(command)
    report(11, not mismatched, f"{len(SUBCOMMANDS)} subcommands run twice, {compared} artifacts compared byte for byte"
                               + (f"; differing: {mismatched}" if mismatched else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
