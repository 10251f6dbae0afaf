"""Test-time normalization policies and the two-step adaptation protocol.

None of these operations ever receives label data: batches are streams of
image tensors, statistics are per-channel moments, and the protocol's
output is predictions plus an accumulation log. Labels may inform *batch
composition* (stratified sampling keeps each batch representative of the
test distribution, which per-batch normalization needs for classification)
but never the statistics themselves.

The fused rule combines the two normalized terms, not the statistics:

    out = gamma * (beta * (x - Mt)/sqrt(Vt + eps)
                   + (1 - beta) * (x - Ms)/sqrt(Vs + eps)) + alpha

so beta = 0 reduces exactly to source-statistics inference and beta = 1 to
target-running-statistics inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, StreamExhaustedError
from .layers import BatchNormState, BnApply, Model, affine, bn_forward_source, standardize
from .seeding import derive_rng, derive_seed

Array = np.ndarray


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class SourceRunning:
    """Vanilla inference: source running statistics."""


@dataclass(frozen=True)
class PerBatch:
    """Normalize every batch with its own moments (vanilla statistics
    adaptation); needs representative batches for classification."""


@dataclass(frozen=True)
class TargetRunning:
    """Normalize with target running statistics collected in step 1;
    the full-adaptation extreme (fused with beta = 1)."""


@dataclass(frozen=True)
class Fused:
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"weighting factor must be in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class SourcePrior:
    """Mix source statistics (pseudo-count n_prior) with the current
    batch's moments; the sample-based adaptation baseline."""

    n_prior: int = 20

    def __post_init__(self):
        if self.n_prior < 1:
            raise ContractError(f"prior pseudo-count must be >= 1, got {self.n_prior}")


AdaptationPolicy = SourceRunning | PerBatch | TargetRunning | Fused | SourcePrior

POLICY_NAMES = {
    "source-running": SourceRunning,
    "per-batch": PerBatch,
    "target-running": TargetRunning,
    "fused": Fused,
    "source-prior": SourcePrior,
}


def policy_from_name(name: str, beta: float = 0.9, n_prior: int = 20) -> AdaptationPolicy:
    key = name.strip().lower().replace("_", "-")
    if key not in POLICY_NAMES:
        raise ConfigurationError(
            f"unknown policy {name!r}; choose from {sorted(POLICY_NAMES)}"
        )
    if key == "fused":
        return Fused(beta)
    if key == "source-prior":
        return SourcePrior(n_prior)
    return POLICY_NAMES[key]()


def policy_label(policy: AdaptationPolicy) -> str:
    if isinstance(policy, Fused):
        return "fused"
    if isinstance(policy, SourcePrior):
        return "source-prior"
    for name, cls in POLICY_NAMES.items():
        if isinstance(policy, cls):
            return name
    raise ConfigurationError(f"unknown policy object {policy!r}")


# ---------------------------------------------------------------------------
# per-state forward rules


def bn_forward_perbatch(x: Array, state: BatchNormState) -> Array:
    """Normalize with THIS batch's moments; state is never written."""
    mean, var = T.channel_moments(x)
    z = standardize(x, mean, var, state.eps)
    return affine(z, state, np.asarray(x).dtype)


def bn_forward_target(x: Array, state: BatchNormState) -> Array:
    """Normalize with the accumulated target running statistics."""
    z = standardize(x, state.target_mean, state.target_var, state.eps)
    return affine(z, state, np.asarray(x).dtype)


def bn_forward_fused(x: Array, state: BatchNormState, beta: float) -> Array:
    """Weighted fusion of the target- and source-normalized terms."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"weighting factor must be in [0, 1], got {beta}")
    zt = standardize(x, state.target_mean, state.target_var, state.eps)
    zs = standardize(x, state.source_mean, state.source_var, state.eps)
    z = beta * zt + (1.0 - beta) * zs
    return affine(z, state, np.asarray(x).dtype)


def bn_forward_source_prior(
    x: Array,
    state: BatchNormState,
    n_prior: int,
    batch_moments: Optional[tuple[Array, Array]] = None,
) -> Array:
    """Normalize with source statistics treated as a prior of pseudo-count
    n_prior, mixed with the batch's moments weighted by the batch size."""
    if n_prior < 1:
        raise ContractError(f"prior pseudo-count must be >= 1, got {n_prior}")
    mean, var = batch_moments if batch_moments is not None else T.channel_moments(x)
    n = np.asarray(x).shape[0]
    mix_mean = (n_prior * state.source_mean + n * mean) / (n_prior + n)
    mix_var = (n_prior * state.source_var + n * var) / (n_prior + n)
    z = standardize(x, mix_mean, mix_var, state.eps)
    return affine(z, state, np.asarray(x).dtype)


def policy_apply(policy: AdaptationPolicy) -> BnApply:
    """Bind a policy to the (state, x) -> y callable the model consumes."""
    if isinstance(policy, SourceRunning):
        return bn_forward_source
    if isinstance(policy, PerBatch):
        return bn_forward_perbatch
    if isinstance(policy, TargetRunning):
        return bn_forward_target
    if isinstance(policy, Fused):
        beta = policy.beta
        return lambda state, x: bn_forward_fused(x, state, beta)
    if isinstance(policy, SourcePrior):
        n_prior = policy.n_prior
        return lambda state, x: bn_forward_source_prior(x, state, n_prior)
    raise ConfigurationError(f"unknown policy object {policy!r}")


# ---------------------------------------------------------------------------
# target-statistics accumulation


@dataclass
class AccumulationLog:
    """What step 1 did: how many batches were folded into the target
    running averages, under which sampler settings."""

    steps: int = 0
    batch_size: int = 0
    seed: int = 0
    snapshots: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def update_target_stats(state: BatchNormState, mean: Array, var: Array) -> None:
    m = state.momentum
    state.target_mean = (1.0 - m) * state.target_mean + m * mean
    state.target_var = (1.0 - m) * state.target_var + m * var
    state.target_steps += 1


def accumulate_target_stats(
    batches: Iterable[Array],
    state: BatchNormState,
    steps: int,
    record_snapshots: bool = False,
) -> AccumulationLog:
    """Fold `steps` batches into the target running statistics of one
    normalization state. Source statistics are untouched. A finite stream
    that ends early raises StreamExhaustedError naming the progress."""
    if steps < 0:
        raise ContractError(f"steps must be >= 0, got {steps}")
    log = AccumulationLog(steps=0)
    it = iter(batches)
    for k in range(steps):
        try:
            batch = next(it)
        except StopIteration:
            raise StreamExhaustedError(completed=k, requested=steps) from None
        mean, var = T.channel_moments(batch)
        update_target_stats(state, mean, var)
        log.steps += 1
        if record_snapshots:
            log.snapshots.append((state.target_mean.copy(), state.target_var.copy()))
    return log


# ---------------------------------------------------------------------------
# representative batch sampling


def _proportional_counts(class_counts: Array, batch_size: int) -> Array:
    """Largest-remainder allocation of batch slots to classes."""
    total = class_counts.sum()
    exact = batch_size * class_counts / total
    counts = np.floor(exact).astype(int)
    remainder = batch_size - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def representative_batch_indices(
    labels: Optional[Array],
    n: int,
    batch_size: int,
    seed: int,
    cycle: bool = False,
    num_classes: Optional[int] = None,
) -> Iterator[Array]:
    """Yield index batches whose class histogram tracks the dataset's.

    With labels, every batch's per-class counts deviate from proportional
    allocation by at most one sample (stratified sampling). Without labels
    (dense-prediction tasks, or label-free target data) batches are a
    seeded shuffle. One pass partitions the dataset; cycle=True reshuffles
    and continues indefinitely for accumulation streams.
    """
    if batch_size < 2:
        raise ConfigurationError(
            f"batch size {batch_size} is degenerate: statistics need at least two elements"
        )
    rng = derive_rng(seed, "sampler")

    if labels is None:
        def passes():
            while True:
                order = rng.permutation(n)
                batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
                if len(batches) > 1 and len(batches[-1]) == 1:
                    batches[-2] = np.concatenate([batches[-2], batches[-1]])
                    batches.pop()
                yield from batches
                if not cycle:
                    return

        yield from passes()
        return

    labels = np.asarray(labels)
    classes = np.arange(num_classes) if num_classes else np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    present = counts > 0
    classes, counts = classes[present], counts[present]
    if batch_size < len(classes):
        raise ConfigurationError(
            f"batch size {batch_size} below class count {len(classes)}: "
            "batches cannot represent the class distribution"
        )
    alloc = _proportional_counts(counts, batch_size)
    pools = {c: np.flatnonzero(labels == c) for c in classes}

    while True:
        queues = {c: list(rng.permutation(pools[c])) for c in classes}
        pass_batches: list[np.ndarray] = []
        while sum(len(q) for q in queues.values()) > 0:
            batch: list[int] = []
            for c, k in zip(classes, alloc):
                takes = min(k, len(queues[c]))
                batch.extend(queues[c][:takes])
                queues[c] = queues[c][takes:]
            if len(batch) < batch_size:  # tail: drain whatever is left
                for c in classes:
                    need = batch_size - len(batch)
                    if need <= 0:
                        break
                    takes = min(need, len(queues[c]))
                    batch.extend(queues[c][:takes])
                    queues[c] = queues[c][takes:]
            pass_batches.append(np.array(batch))
        if len(pass_batches) > 1 and len(pass_batches[-1]) == 1:
            # a single orphan cannot carry statistics; fold it into the
            # previous batch
            pass_batches[-2] = np.concatenate(pass_batches[-2:])
            pass_batches.pop()
        yield from pass_batches
        if not cycle:
            return


def representative_batches(dataset, batch_size: int, seed: int, cycle: bool = False):
    """Stream image batches from a CenterDataset (see stainsim); the
    classification variant is stratified, dense prediction and label-free
    datasets get plain shuffled batches."""
    labels = getattr(dataset, "labels", None)
    task = getattr(dataset, "task", "classification")
    use_labels = labels is not None and task == "classification"
    for idx in representative_batch_indices(
        labels if use_labels else None, dataset.images.shape[0], batch_size, seed, cycle
    ):
        yield dataset.images[idx]


# ---------------------------------------------------------------------------
# the two-step protocol


@dataclass
class ProtocolResult:
    """Predictions over the full target set plus per-run metadata."""

    probabilities: Array
    policy: AdaptationPolicy
    log: AccumulationLog
    states: list[BatchNormState]
    warnings: list = field(default_factory=list)


def _needs_accumulation(policy: AdaptationPolicy) -> bool:
    return isinstance(policy, (TargetRunning, Fused))


def make_accumulating_apply(log: AccumulationLog, snapshots: bool = False) -> BnApply:
    """Step-1 rule: per-batch normalization that also folds the batch
    moments into the target running averages of each visited state."""

    def apply(state: BatchNormState, x: Array) -> Array:
        mean, var = T.channel_moments(x)
        update_target_stats(state, mean, var)
        if snapshots:
            log.snapshots.append((state.target_mean.copy(), state.target_var.copy()))
        z = standardize(x, mean, var, state.eps)
        return affine(z, state, np.asarray(x).dtype)

    return apply


def run_fusion_protocol(
    model: Model,
    target_data,
    policy: AdaptationPolicy,
    steps: int = 20,
    batch_size: int = 32,
    seed: int = 0,
    stratified: bool = True,
    record_snapshots: bool = False,
) -> ProtocolResult:
    """Two-step adaptation: (1) stream `steps` representative batches in
    per-batch mode while accumulating target statistics at every BN layer,
    discarding those predictions; (2) run final inference over the whole
    target set under `policy` with the statistics frozen.

    Never reads labels. The input model is not mutated; adapted statistics
    live on a cloned set of states returned in the result.
    """
    if batch_size < 2:
        raise ConfigurationError(
            f"batch size {batch_size} is degenerate: statistics need at least two elements"
        )
    if _needs_accumulation(policy) and steps < 1:
        raise ContractError(
            f"policy {policy_label(policy)} needs at least one accumulation step"
        )

    adapted = model.clone_for_adaptation()
    for st in adapted.bn_states():
        st.reset_target()

    images = target_data.images
    n = images.shape[0]
    labels = getattr(target_data, "labels", None)
    task = getattr(target_data, "task", model.spec.task)
    strat_labels = labels if (stratified and task == "classification") else None

    log = AccumulationLog(steps=0, batch_size=batch_size, seed=seed)
    if _needs_accumulation(policy):
        stream = representative_batch_indices(
            strat_labels, n, batch_size, derive_seed(seed, "accumulate"), cycle=True
        )
        accumulate = make_accumulating_apply(log, snapshots=record_snapshots)
        for _ in range(steps):
            idx = next(stream)
            adapted.forward_eval(images[idx], accumulate)
            log.steps += 1

    warnings: list[str] = []
    if isinstance(policy, TargetRunning) or (isinstance(policy, Fused) and policy.beta > 0):
        if all(st.target_steps == 0 for st in adapted.bn_states()):
            warnings.append("target statistics still at initialization; no steps accumulated")

    apply = policy_apply(policy)
    probs: Optional[Array] = None
    if isinstance(policy, (PerBatch, SourcePrior)):
        # composition matters: draw representative batches, restore order
        for idx in representative_batch_indices(
            strat_labels, n, batch_size, derive_seed(seed, "inference"), cycle=False
        ):
            p = adapted.predict_proba(images[idx], apply)
            if probs is None:
                probs = np.zeros((n,) + p.shape[1:], dtype=p.dtype)
            probs[idx] = p
    else:
        # statistics are frozen; sequential fixed batches
        for lo in range(0, n, batch_size):
            p = adapted.predict_proba(images[lo : lo + batch_size], apply)
            if probs is None:
                probs = np.zeros((n,) + p.shape[1:], dtype=p.dtype)
            probs[lo : lo + batch_size] = p

    return ProtocolResult(
        probabilities=probs,
        policy=policy,
        log=log,
        states=adapted.bn_states(),
        warnings=warnings,
    )
