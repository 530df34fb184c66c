"""Experiment harnesses behind the CLI subcommands.

Each harness takes an :class:`ExperimentConfig`, returns a list of
:class:`MetricsRecord` rows and writes its artifacts into the output
directory. Grid points get seeds ``root ^ index`` so they can run in any
order or in parallel without changing results.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .channels import GaussianChannelSpec, uniform_bandwidth
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import DatasetHandle, tile_grid, write_pgm
from .models import ModelBundle
from .objectives import alv_loss, joint_loss, source_vae_loss
from .training import (
    MetricsRecord,
    PipelineMode,
    TrainConfig,
    beta_sweep,
    build_channel,
    build_model,
    derive_seed,
    evaluate_pipeline,
    load_dataset,
    reconstruct,
    split_seed,
    train,
)

METRICS_HEADER = [
    "run_id", "seed", "mode", "snr", "bandwidth", "beta", "steps",
    "distortion_l2", "rate_bits", "transmission_bits", "mmd", "wall_seconds",
]
METRICS_VERSION = 1
TRACE_HEADER = [
    "step", "total", "distortion", "rate", "beta", "alv_kl", "posterior_kl", "prior_fit", "prior_fit_weight",
]

_EVAL_STREAM = 100


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else format(float(value), ".9g")
    return str(value)


def metrics_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / f"{name}_metrics_v{METRICS_VERSION}.csv"


def write_metrics_csv(path, rows: Sequence[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in METRICS_HEADER])
    return path


def read_metrics_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)


def write_trace_csv(path, trace: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([_fmt(row.get(k)) for k in TRACE_HEADER])
    return path


def _map(fn: Callable, tasks: list, workers: int) -> list:
    """Ordered map, optionally over a process pool. Results are merged by the caller."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _archive_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(dump_config(cfg) + "\n")


def _eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, _EVAL_STREAM))


def _timed(cfg: ExperimentConfig, fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    elapsed = time.perf_counter() - start if cfg.output.record_wall_time else 0.0
    return out, elapsed


def _run_id(name: str, **parts) -> str:
    bits = [name] + [f"{k}{_fmt(v)}" for k, v in parts.items() if v is not None]
    return "-".join(bits)


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck(cfg: ExperimentConfig) -> Dict[str, float]:
    """Finite-difference check of every training objective on a small model.

    Covers the source VAE loss, the joint loss through the Gaussian channel and
    through the bandwidth-limited channel (full sum), and the ALV loss. The
    prior-fit term scores the prior on stop-gradient codes, so it is not the
    derivative of a scalar with respect to the encoder; the bound losses are
    checked without it and the term itself is checked against the prior's
    own parameters.
    """
    eps, coords = cfg.eval.gradcheck_epsilon, cfg.eval.gradcheck_coords
    rng = np.random.default_rng(cfg.training.seed)
    x = rng.uniform(0.0, 1.0, size=(4, 16))
    base = dict(in_dim=16, latent_dim=4, slots=2, hidden=(8,), prior_hidden=6, v_dim=3,
                alv_hidden=(6,), snr=cfg.channel.snr, beta=0.5, seed=cfg.training.seed)
    cases = {
        "source_vae": TrainConfig(objective="source_vae", channel="none", **base),
        "joint_gaussian": TrainConfig(objective="joint", channel="gaussian", **base),
        "joint_bandwidth_full_sum": TrainConfig(objective="joint", channel="bandwidth", prior="autoregressive", **base),
        "alv_bandwidth": TrainConfig(objective="alv", channel="bandwidth", prior="autoregressive", alv=True, **base),
    }
    results = {}
    for name, tc in cases.items():
        model = build_model(tc)
        channel = build_channel(tc, model.prior)

        def loss_fn(model=model, channel=channel, tc=tc):
            r = np.random.default_rng(7)
            if tc.objective == "source_vae":
                return source_vae_loss(x, model, tc.beta, r).total
            loss = joint_loss if tc.objective == "joint" else alv_loss
            return loss(x, model, channel, tc.beta, r, prior_fit_weight=0.0).total

        results[name] = ad.finite_difference_check(
            loss_fn, model.parameters(), epsilon=eps, max_coords=coords, rng=np.random.default_rng(1))

        if tc.prior == "autoregressive":
            def fit_fn(model=model, channel=channel, tc=tc):
                loss = joint_loss if tc.objective == "joint" else alv_loss
                return loss(x, model, channel, tc.beta, np.random.default_rng(7)).prior_fit

            results[name + "_prior_fit"] = ad.finite_difference_check(
                fit_fn, model.prior.store, epsilon=eps, max_coords=coords, rng=np.random.default_rng(1))
    return results


# ---------------------------------------------------------------------------
# single runs


def train_and_save(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> Tuple[ModelBundle, List[MetricsRecord]]:
    out_dir = Path(out_dir or cfg.output_dir)
    _archive_config(cfg, out_dir)
    tr, ev = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim)
    (model, trace), wall = _timed(cfg, train, tc, tr)
    save_checkpoint(out_dir / "model.ckpt", model.parameters())
    write_trace_csv(out_dir / "train_trace_v1.csv", trace)
    rows = _evaluate_trained(cfg, tc, model, ev, "train")
    for r in rows:
        r.wall_seconds = wall
    write_metrics_csv(metrics_path(out_dir, "train"), rows)
    return model, rows


def _evaluate_trained(cfg, tc: TrainConfig, model: ModelBundle, ev: DatasetHandle, name: str) -> List[MetricsRecord]:
    if tc.objective == "source_vae":
        bandwidths = [None]
        channel_for = lambda b: None  # noqa: E731
    elif tc.channel == "bandwidth":
        bandwidths = cfg.eval.bandwidths if cfg.eval.bandwidths is not None else list(range(tc.slots + 1))
        channel_for = lambda b: build_channel(tc, model.prior, b)  # noqa: E731
    else:
        bandwidths = [None]
        channel_for = lambda b: build_channel(tc, model.prior)  # noqa: E731
    rows = []
    for b in bandwidths:
        rows.append(evaluate_pipeline(
            model, channel_for(b), ev, PipelineMode.JOINT, _eval_rng(tc.seed), bandwidth=b,
            run_id=_run_id(name, s=tc.seed, b=b), seed=tc.seed, beta=tc.beta, steps=tc.steps,
            mode_label=tc.objective,
        ))
    if tc.objective == "source_vae":
        rows[0].snr = float("nan")
    return rows


def load_model(cfg: ExperimentConfig, path) -> Tuple[TrainConfig, ModelBundle]:
    tr, _ = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim)
    model = build_model(tc)
    model.parameters().load(load_checkpoint(path))
    return tc, model


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint=None, out_dir=None) -> List[MetricsRecord]:
    out_dir = Path(out_dir or cfg.output_dir)
    tc, model = load_model(cfg, checkpoint or out_dir / "model.ckpt")
    _, ev = load_dataset(cfg)
    rows = _evaluate_trained(cfg, tc, model, ev, "eval")
    write_metrics_csv(metrics_path(out_dir, "eval"), rows)
    return rows


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class _Job:
    cfg: ExperimentConfig
    tc: TrainConfig
    name: str
    label: str
    bandwidths: Tuple[Optional[int], ...] = (None,)
    with_mmd: bool = False


def _run_job(job: _Job) -> List[MetricsRecord]:
    tr, ev = load_dataset(job.cfg)
    (model, _), wall = _timed(job.cfg, train, job.tc, tr)
    ref = ev.flat[: job.cfg.eval.mmd_samples] if job.with_mmd else None
    rows = []
    for b in job.bandwidths:
        channel = build_channel(job.tc, model.prior, b)
        rows.append(evaluate_pipeline(
            model, channel, ev, PipelineMode.JOINT, _eval_rng(job.tc.seed), bandwidth=b,
            mmd_reference=ref, run_id=_run_id(job.name, m=job.label, s=job.tc.seed, snr=job.tc.snr, b=b, beta=job.tc.beta),
            seed=job.tc.seed, beta=job.tc.beta, steps=job.tc.steps, mode_label=job.label,
        ))
        rows[-1].wall_seconds = wall
    return rows


def sweep_snr(cfg: ExperimentConfig) -> List[MetricsRecord]:
    """One joint model per (seed, SNR) at the configured beta."""
    tr, _ = load_dataset(cfg)
    jobs = []
    for seed in cfg.eval.seeds:
        for i, snr in enumerate(cfg.eval.snrs):
            tc = TrainConfig.from_experiment(cfg, tr.dim, channel="gaussian", snr=float(snr), seed=split_seed(seed, i))
            jobs.append(_Job(cfg, tc, "sweep-snr", tc.objective))
    return [r for rows in _map(_run_job, jobs, cfg.eval.workers) for r in rows]


def sweep_beta(cfg: ExperimentConfig) -> List[MetricsRecord]:
    """One model per (seed, beta) on the configured channel; bandwidth channels are scored at full bandwidth."""
    tr, _ = load_dataset(cfg)
    jobs = []
    for seed in cfg.eval.seeds:
        for i, beta in enumerate(cfg.objective.betas):
            tc = TrainConfig.from_experiment(cfg, tr.dim, beta=float(beta), seed=split_seed(seed, i))
            b = (tc.slots if cfg.channel.bandwidth is None else cfg.channel.bandwidth) if tc.channel == "bandwidth" else None
            jobs.append(_Job(cfg, tc, "sweep-beta", tc.objective, (b,)))
    return [r for rows in _map(_run_job, jobs, cfg.eval.workers) for r in rows]


def _variant(label: str) -> Tuple[str, bool]:
    prior, _, alv = label.partition("+")
    return prior, alv == "alv"


def sweep_bandwidth(cfg: ExperimentConfig) -> List[MetricsRecord]:
    """Train every model variant on the bandwidth-limited channel at SNR 1 and score B = 0..T.

    Rows carry the variant label (prior kind, optionally ``+alv``) in the
    ``mode`` column and MMD against held-out source images.
    """
    tr, _ = load_dataset(cfg)
    slots = cfg.model.slots
    bandwidths = tuple(cfg.eval.bandwidths) if cfg.eval.bandwidths is not None else tuple(range(slots + 1))
    jobs = []
    for seed in cfg.eval.seeds:
        for label in cfg.eval.variants:
            prior, alv = _variant(label)
            tc = TrainConfig.from_experiment(
                cfg, tr.dim, channel="bandwidth", snr=1.0, prior=prior, alv=alv,
                objective="alv" if alv else "joint", seed=seed,
                bandwidth_probs=cfg.channel.bandwidth_probs or list(uniform_bandwidth(slots)),
            )
            jobs.append(_Job(cfg, tc, "sweep-bandwidth", label, bandwidths, with_mmd=True))
    return [r for rows in _map(_run_job, jobs, cfg.eval.workers) for r in rows]


def _joint_sweep_job(args) -> List[MetricsRecord]:
    cfg, seed, snr_index, snr = args
    tr, ev = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim, objective="joint", channel="gaussian", alv=False,
                                     snr=float(snr), seed=split_seed(seed, snr_index))
    report = beta_sweep(tc, cfg.objective.betas, tr, ev, mode_label="joint")
    for r in report.rows:
        r.run_id = _run_id("compare", m="joint", s=r.seed, snr=snr, beta=r.beta)
    return report.rows


def _separate_source_job(args):
    cfg, seed, beta_index, beta = args
    tr, _ = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim, objective="source_vae", channel="none", alv=False,
                                     prior="standard", beta=float(beta), seed=split_seed(seed, beta_index))
    model, _ = train(tc, tr)
    return tc, model


def _separate_coder_job(args):
    cfg, seed, snr_index, snr = args
    tr, _ = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim, objective="channel_ae", channel="gaussian", snr=float(snr),
                                     seed=split_seed(seed, 1000 + snr_index))
    model, _ = train(tc)
    return model.coder


def compare_joint_separate(cfg: ExperimentConfig) -> Tuple[List[MetricsRecord], List[MetricsRecord]]:
    """Best-beta joint and separate systems at every SNR and seed.

    The separate system pairs a source VAE (one per beta, shared across SNRs)
    with a channel autoencoder trained on prior samples at each SNR. Both
    modes are scored on the same held-out split. Returns ``(best_rows, all_rows)``.
    """
    _, ev = load_dataset(cfg)
    seeds, snrs, betas = cfg.eval.seeds, cfg.eval.snrs, cfg.objective.betas
    workers = cfg.eval.workers
    joint = _map(_joint_sweep_job, [(cfg, s, i, snr) for s in seeds for i, snr in enumerate(snrs)], workers)
    sources = _map(_separate_source_job, [(cfg, s, i, b) for s in seeds for i, b in enumerate(betas)], workers)
    coders = _map(_separate_coder_job, [(cfg, s, i, snr) for s in seeds for i, snr in enumerate(snrs)], workers)

    best, everything = [], []
    for si, seed in enumerate(seeds):
        for i, snr in enumerate(snrs):
            j_rows = joint[si * len(snrs) + i]
            coder = coders[si * len(snrs) + i]
            s_rows = []
            for bi, beta in enumerate(betas):
                tc, model = sources[si * len(betas) + bi]
                s_rows.append(evaluate_pipeline(
                    model, GaussianChannelSpec(float(snr)), ev, PipelineMode.SEPARATE,
                    _eval_rng(tc.seed), coder=coder,
                    run_id=_run_id("compare", m="separate", s=tc.seed, snr=snr, beta=beta),
                    seed=tc.seed, beta=float(beta), steps=tc.steps, mode_label="separate",
                ))
            everything += j_rows + s_rows
            for rows in (j_rows, s_rows):
                b = min(rows, key=lambda r: r.distortion_l2)
                best.append(b)
    return best, everything


def majority_joint_wins(best_rows: Sequence[MetricsRecord], snrs: Sequence[float]) -> Dict[float, Tuple[int, int]]:
    """Per SNR: (seeds where joint <= separate, number of seeds).

    ``best_rows`` alternate joint, separate for each (seed, SNR) as emitted by
    :func:`compare_joint_separate`.
    """
    out = {float(snr): [0, 0] for snr in snrs}
    for j, s in zip(best_rows[0::2], best_rows[1::2]):
        if j.mode != "joint" or s.mode != "separate" or j.snr != s.snr:
            raise ValueError("best rows must alternate joint, separate at matching SNR")
        tally = out[float(j.snr)]
        tally[0] += j.distortion_l2 <= s.distortion_l2
        tally[1] += 1
    return {k: (w, n) for k, (w, n) in out.items()}


# ---------------------------------------------------------------------------
# samples and MMD


def sample_grid(cfg: ExperimentConfig, out_dir=None) -> Tuple[Path, np.ndarray]:
    """Reconstructions of a few held-out images at every bandwidth, as a PGM grid.

    Row 0 holds the sources; row ``b + 1`` the reconstructions at bandwidth ``b``.
    """
    out_dir = Path(out_dir or cfg.output_dir)
    _archive_config(cfg, out_dir)
    tr, ev = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim, channel="bandwidth")
    model, _ = train(tc, tr)
    k = min(cfg.eval.sample_count, len(ev))
    x = ev.flat[:k]
    side = ev.shape
    rows = [list(x.reshape(k, *side))]
    for b in range(tc.slots + 1):
        channel = build_channel(tc, model.prior, b)
        x_hat = reconstruct(model, channel, x, PipelineMode.JOINT, _eval_rng(tc.seed), bandwidth=b)
        rows.append(list(np.clip(x_hat, 0.0, 1.0).reshape(k, *side)))
    grid = tile_grid(rows)
    path = out_dir / "samples.pgm"
    write_pgm(path, grid)
    save_checkpoint(out_dir / "model.ckpt", model.parameters())
    return path, grid


def mmd_report(cfg: ExperimentConfig) -> List[MetricsRecord]:
    """MMD between reconstructions of the configured model and held-out sources."""
    tr, _ = load_dataset(cfg)
    tc = TrainConfig.from_experiment(cfg, tr.dim)
    if tc.objective == "source_vae":
        tc.channel = "none"
    bandwidths: Tuple[Optional[int], ...] = (None,)
    if tc.channel == "bandwidth":
        bandwidths = tuple(cfg.eval.bandwidths) if cfg.eval.bandwidths is not None else tuple(range(tc.slots + 1))
    return _run_job(_Job(cfg, tc, "mmd", tc.objective, bandwidths, with_mmd=True))
