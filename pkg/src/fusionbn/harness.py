"""Experiment orchestration: train on the source center, adapt and
evaluate every policy on every target, sweep protocol settings, and
extract activation-distribution diagnostics.

Outputs are CSV (one row per evaluated cell, columns fixed) plus a JSON
summary with means, stds, and increments over the vanilla baseline.
Evaluation reads labels; the adaptation path inside run_fusion_protocol
never does.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapt import (
    AdaptationPolicy,
    Fused,
    PerBatch,
    SourcePrior,
    SourceRunning,
    TargetRunning,
    make_accumulating_apply,
    AccumulationLog,
    policy_apply,
    policy_label,
    run_fusion_protocol,
)
from .checkpoint import atomic_write_text
from .errors import ConfigurationError, DivergenceError
from .layers import BatchNorm, Model, NetworkSpec, build_model, source_apply
from .metrics import balanced_accuracy, mean_dice
from .seeding import derive_seed
from .stainsim import CenterBundle
from .train import TrainRecipe, train

Array = np.ndarray

PAPER_BETA_GRID = (0.6, 0.7, 0.8, 0.9)
DIAGNOSTIC_BETA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def worker_count() -> int:
    env = os.environ.get("FUSION_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class PolicyRun:
    """One roster entry: a policy plus its protocol settings."""

    name: str
    policy: AdaptationPolicy
    steps: int = 20
    batch_size: int = 32
    stratified: bool = True


def default_roster(
    beta_grid: tuple = PAPER_BETA_GRID,
    steps: int = 20,
    batch_size: int = 32,
    include_unstratified: bool = True,
) -> list[PolicyRun]:
    roster = [
        PolicyRun("source-running", SourceRunning(), steps=0, batch_size=batch_size),
        PolicyRun("per-batch", PerBatch(), steps=0, batch_size=batch_size),
    ]
    if include_unstratified:
        roster.append(
            PolicyRun(
                "per-batch-unstratified",
                PerBatch(),
                steps=0,
                batch_size=batch_size,
                stratified=False,
            )
        )
    roster.append(
        PolicyRun("source-prior", SourcePrior(20), steps=0, batch_size=batch_size)
    )
    roster.append(
        PolicyRun("target-running", TargetRunning(), steps=steps, batch_size=batch_size)
    )
    for beta in beta_grid:
        roster.append(
            PolicyRun(
                f"fused(beta={beta:g})", Fused(beta), steps=steps, batch_size=batch_size
            )
        )
    return roster


@dataclass
class ExperimentConfig:
    source: str
    targets: tuple
    task: str
    network: NetworkSpec
    recipe: TrainRecipe
    roster: list
    repetitions: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.source in self.targets:
            raise ConfigurationError(
                f"source {self.source} cannot also be a target"
            )
        if self.repetitions < 1:
            raise ConfigurationError("need at least one repetition")


@dataclass
class ExperimentRecord:
    """Aggregated result of one (policy, target) cell across seeds."""

    source: str
    target: str
    policy_name: str
    beta: Optional[float]
    steps: int
    batch_size: int
    metric_name: str
    per_seed: list  # (seed, value)
    mean: float
    std: float
    increment_mean: float
    increment_std: float
    wall_clock: float
    failed: bool = False


def _evaluate_policy(model: Model, bundle_test, run: PolicyRun, seed: int, task: str) -> float:
    result = run_fusion_protocol(
        model,
        bundle_test,
        run.policy,
        steps=run.steps,
        batch_size=run.batch_size,
        seed=seed,
        stratified=run.stratified,
    )
    if task == "classification":
        pred = result.probabilities.argmax(axis=1)
        return balanced_accuracy(pred, bundle_test.labels)
    pred = (result.probabilities >= 0.5).astype(np.float32)
    return mean_dice(pred, bundle_test.masks)


def train_models(config: ExperimentConfig, benchmark: dict) -> list:
    """One trained model per repetition seed; a diverged run yields None."""
    source = benchmark[config.source]
    models = []
    for rep in range(config.repetitions):
        seed = derive_seed(config.seed, f"rep:{rep}")
        model = build_model(config.network, seed=seed)
        try:
            train(model, source.train, config.recipe, seed=seed)
            models.append((rep, seed, model))
        except DivergenceError:
            models.append((rep, seed, None))
    return models


def run_experiment(
    config: ExperimentConfig,
    benchmark: dict[str, CenterBundle],
    models: Optional[list] = None,
) -> list[ExperimentRecord]:
    """Train once per repetition seed, then evaluate every roster policy
    on every target with the same trained parameters. Cells may execute
    on a thread pool; records come back in deterministic order."""
    config.validate()
    if models is None:
        models = train_models(config, benchmark)

    metric_name = (
        "balanced_accuracy" if config.task == "classification" else "dice_score"
    )
    cells = [
        (target, run) for target in config.targets for run in config.roster
    ]

    def evaluate_cell(cell):
        target, run = cell
        t0 = time.perf_counter()
        per_seed = []
        failed = False
        for rep, seed, model in models:
            if model is None:
                per_seed.append((seed, float("nan")))
                failed = True
                continue
            value = _evaluate_policy(
                model, benchmark[target].test, run, seed=seed, task=config.task
            )
            per_seed.append((seed, value))
        return target, run, per_seed, failed, time.perf_counter() - t0

    workers = min(worker_count(), len(cells)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(evaluate_cell, cells))
    else:
        outcomes = [evaluate_cell(c) for c in cells]

    # increments are paired per seed against the vanilla baseline
    vanilla: dict[str, dict[int, float]] = {}
    for target, run, per_seed, failed, _ in outcomes:
        if isinstance(run.policy, SourceRunning):
            vanilla[target] = dict(per_seed)

    records = []
    for target, run, per_seed, failed, wall in outcomes:
        values = np.array([v for _, v in per_seed], dtype=np.float64)
        base = vanilla.get(target, {})
        incs = np.array(
            [v - base.get(s, np.nan) for s, v in per_seed], dtype=np.float64
        )
        records.append(
            ExperimentRecord(
                source=config.source,
                target=target,
                policy_name=run.name,
                beta=run.policy.beta if isinstance(run.policy, Fused) else None,
                steps=run.steps,
                batch_size=run.batch_size,
                metric_name=metric_name,
                per_seed=per_seed,
                mean=float(np.nanmean(values)),
                std=float(np.nanstd(values)),
                increment_mean=float(np.nanmean(incs)),
                increment_std=float(np.nanstd(incs)),
                wall_clock=wall,
                failed=failed,
            )
        )
    records.sort(key=lambda r: (r.target, r.policy_name, r.beta or -1.0))
    return records


def records_to_csv(records: list[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        [
            "source",
            "target",
            "policy",
            "beta",
            "steps",
            "batch_size",
            "seed",
            "metric_name",
            "value",
        ]
    )
    for r in records:
        for seed, value in r.per_seed:
            w.writerow(
                [
                    r.source,
                    r.target,
                    r.policy_name,
                    "" if r.beta is None else repr(float(r.beta)),
                    r.steps,
                    r.batch_size,
                    seed,
                    r.metric_name,
                    repr(float(value)),
                ]
            )
    return buf.getvalue()


def records_to_summary(records: list[ExperimentRecord]) -> dict:
    return {
        "records": [
            {
                "source": r.source,
                "target": r.target,
                "policy": r.policy_name,
                "beta": r.beta,
                "steps": r.steps,
                "batch_size": r.batch_size,
                "metric_name": r.metric_name,
                "mean": r.mean,
                "std": r.std,
                "increment_mean": r.increment_mean,
                "increment_std": r.increment_std,
                "wall_clock_s": r.wall_clock,
                "failed": r.failed,
            }
            for r in records
        ]
    }


def write_experiment_outputs(records, out_dir, stem: str = "experiment") -> None:
    from pathlib import Path

    out = Path(out_dir)
    atomic_write_text(out / f"{stem}.csv", records_to_csv(records))
    atomic_write_text(
        out / f"{stem}_summary.json",
        json.dumps(records_to_summary(records), indent=2, sort_keys=True) + "\n",
    )


# ---------------------------------------------------------------------------
# step-count / batch-size sweep


def sweep_steps_and_batch(
    config: ExperimentConfig,
    benchmark: dict,
    step_counts: tuple,
    batch_sizes: tuple,
    beta: float = 0.9,
    models: Optional[list] = None,
) -> list[dict]:
    """Mean target metric of the fused policy over a (steps x batch) grid.

    Supports the two protocol claims: more accumulation steps help, batch
    size barely matters once steps are fixed.
    """
    if any(s < 1 for s in step_counts):
        raise ConfigurationError("step counts must be >= 1")
    if any(b < 2 for b in batch_sizes):
        raise ConfigurationError(
            "batch size 1 is degenerate: batch statistics need at least two elements"
        )
    config.validate()
    if models is None:
        models = train_models(config, benchmark)

    grid = []
    for steps in step_counts:
        for batch_size in batch_sizes:
            values = []
            for rep, seed, model in models:
                if model is None:
                    continue
                per_target = []
                for target in config.targets:
                    run = PolicyRun(
                        "fused", Fused(beta), steps=steps, batch_size=batch_size
                    )
                    per_target.append(
                        _evaluate_policy(
                            model, benchmark[target].test, run, seed, config.task
                        )
                    )
                values.append(float(np.mean(per_target)))
            grid.append(
                {
                    "steps": steps,
                    "batch_size": batch_size,
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                }
            )
    return grid


def sweep_to_csv(grid: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["steps", "batch_size", "mean", "std"])
    for cell in grid:
        w.writerow(
            [cell["steps"], cell["batch_size"], repr(cell["mean"]), repr(cell["std"])]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# activation-distribution diagnostics


@dataclass
class ShiftDiagnostic:
    """Post-normalization moments of one BN layer under three regimes:
    source data + source stats, target data + source stats, and target
    data + the adaptation policy."""

    layer: int
    gamma: Array
    alpha: Array
    moments: dict  # regime -> (mean[C], var[C])
    histograms: dict = field(default_factory=dict)  # regime -> {channel: (edges, density)}


def _collect_bn_outputs(model: Model, images: Array, bn_apply, batch_size: int = 64):
    """Forward the whole set, capturing each BN layer's output moments
    (streaming mean/second-moment, float64) and raw samples for histograms."""
    states = model.bn_states()
    sums = [np.zeros(st.channels) for st in states]
    sqs = [np.zeros(st.channels) for st in states]
    counts = [0] * len(states)
    samples: list[list[Array]] = [[] for _ in states]

    def capture_apply(state, x):
        y = bn_apply(state, x)
        i = next(j for j, st in enumerate(states) if st is state)
        sums[i] += y.sum(axis=(0, 2, 3), dtype=np.float64)
        sqs[i] += np.square(y, dtype=np.float64).sum(axis=(0, 2, 3))
        counts[i] += y.shape[0] * y.shape[2] * y.shape[3]
        if len(samples[i]) < 4:
            samples[i].append(y[:, :, :: max(1, y.shape[2] // 8), :: max(1, y.shape[3] // 8)])
        return y

    for lo in range(0, images.shape[0], batch_size):
        model.forward_eval(images[lo : lo + batch_size], capture_apply)

    out = []
    for i in range(len(states)):
        mean = sums[i] / counts[i]
        var = sqs[i] / counts[i] - mean**2
        out.append((mean, np.maximum(var, 0.0), np.concatenate(samples[i], axis=0)))
    return out


def _accumulated_model(model: Model, images: Array, steps: int, batch_size: int, seed: int) -> Model:
    from .adapt import representative_batch_indices

    adapted = model.clone_for_adaptation()
    for st in adapted.bn_states():
        st.reset_target()
    stream = representative_batch_indices(
        None, images.shape[0], batch_size, derive_seed(seed, "accumulate"), cycle=True
    )
    log = AccumulationLog()
    apply = make_accumulating_apply(log)
    for _ in range(steps):
        idx = next(stream)
        adapted.forward_eval(images[idx], apply)
    return adapted


def diagnose_shift(
    model: Model,
    source_data,
    target_data,
    policy: AdaptationPolicy,
    steps: int = 64,
    batch_size: int = 32,
    seed: int = 0,
    hist_channels: int = 1,
    bins: int = 40,
) -> list[ShiftDiagnostic]:
    """Per-layer moment triples plus density histograms for the most
    shifted channel(s) of each layer."""
    regimes = {}
    regimes["source_data_source_stats"] = _collect_bn_outputs(
        model, source_data.images, source_apply
    )
    regimes["target_data_source_stats"] = _collect_bn_outputs(
        model, target_data.images, source_apply
    )
    adapted = model
    if isinstance(policy, (TargetRunning, Fused)):
        adapted = _accumulated_model(model, target_data.images, steps, batch_size, seed)
    regimes["target_data_adapted"] = _collect_bn_outputs(
        adapted, target_data.images, policy_apply(policy)
    )

    diagnostics = []
    states = model.bn_states()
    for layer_i, st in enumerate(states):
        moments = {k: (v[layer_i][0], v[layer_i][1]) for k, v in regimes.items()}
        shiftiness = np.abs(
            moments["target_data_source_stats"][0]
            - moments["source_data_source_stats"][0]
        )
        top = np.argsort(-shiftiness)[:hist_channels]
        histograms = {}
        for regime, collected in regimes.items():
            sample = collected[layer_i][2]
            histograms[regime] = {}
            for c in top:
                vals = sample[:, c].ravel()
                density, edges = np.histogram(vals, bins=bins, density=True)
                histograms[regime][int(c)] = (edges, density)
        diagnostics.append(
            ShiftDiagnostic(
                layer=layer_i,
                gamma=st.gamma.copy(),
                alpha=st.alpha.copy(),
                moments=moments,
                histograms=histograms,
            )
        )
    return diagnostics


def moment_deviation(diag: ShiftDiagnostic, regime: str) -> float:
    """Summed per-channel |mean - alpha| + |var - gamma^2| for one layer."""
    mean, var = diag.moments[regime]
    return float(
        np.abs(mean - diag.alpha).sum()
        + np.abs(var - diag.gamma.astype(np.float64) ** 2).sum()
    )


def moment_deviation_curve(
    model: Model,
    target_data,
    betas: tuple = DIAGNOSTIC_BETA_GRID,
    steps: int = 64,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Total post-normalization moment deviation d(beta), accumulated once
    and evaluated under the fused rule at each beta."""
    adapted = _accumulated_model(model, target_data.images, steps, batch_size, seed)
    states = adapted.bn_states()
    curve = []
    for beta in betas:
        collected = _collect_bn_outputs(
            adapted, target_data.images, policy_apply(Fused(beta))
        )
        total = 0.0
        for st, (mean, var, _) in zip(states, collected):
            total += float(np.abs(mean - st.alpha).sum())
            total += float(np.abs(var - st.gamma.astype(np.float64) ** 2).sum())
        curve.append(total)
    return curve


def diagnostics_to_csv(diagnostics: list[ShiftDiagnostic]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "channel", "regime", "mean", "var"])
    for d in diagnostics:
        for regime, (mean, var) in d.moments.items():
            for c in range(mean.shape[0]):
                w.writerow([d.layer, c, regime, repr(float(mean[c])), repr(float(var[c]))])
    return buf.getvalue()


def histograms_to_csv(diagnostics: list[ShiftDiagnostic]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "channel", "regime", "bin_left", "bin_right", "density"])
    for d in diagnostics:
        for regime, chans in d.histograms.items():
            for c, (edges, density) in chans.items():
                for i in range(density.shape[0]):
                    w.writerow(
                        [
                            d.layer,
                            c,
                            regime,
                            repr(float(edges[i])),
                            repr(float(edges[i + 1])),
                            repr(float(density[i])),
                        ]
                    )
    return buf.getvalue()
