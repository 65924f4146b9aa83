"""Weight-space merging of models that share one architecture.

Everything operates on flat parameter vectors and task vectors (model minus
base). Methods: weighted averaging, task arithmetic, trim/elect-sign/merge
(TIES), select/calculate/erase (SCE) over layer blocks, and random
drop-and-rescale sparsification (DARE) composable with any of the others.

The stage definitions below are the contract; fixtures in the test suite
are hand-traced from them, not from external implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BaseMismatchError,
    LengthMismatchError,
    NonFiniteError,
    WeightsNotNormalizedError,
)
from .numerics import as_vector, require_finite

WEIGHT_SUM_TOL = 1e-9

MERGE_METHODS = ("average", "task-arithmetic", "ties", "sce")


@dataclass(frozen=True)
class TaskVector:
    """Elementwise difference between a tuned model and its base."""

    delta: np.ndarray
    base_id: str = "base"
    model_id: str = ""

    def __post_init__(self) -> None:
        delta = as_vector(self.delta)
        require_finite(delta, "task vector")
        object.__setattr__(self, "delta", delta)

    @staticmethod
    def from_params(
        base: np.ndarray, model: np.ndarray, base_id: str = "base", model_id: str = ""
    ) -> "TaskVector":
        base = as_vector(base)
        model = as_vector(model)
        if base.size != model.size:
            raise LengthMismatchError("base and model parameter lengths differ")
        return TaskVector(model - base, base_id, model_id)


@dataclass(frozen=True)
class MergeSpec:
    """Declarative merge recipe: method name plus every exposed knob.

    ``method`` is one of MERGE_METHODS, optionally prefixed ``dare+`` to
    sparsify task vectors first (e.g. ``dare+ties``). ``weights`` applies to
    averaging and defaults to uniform.
    """

    method: str = "average"
    weights: tuple[float, ...] | None = None
    scaling: float = 1.0
    trim_keep_fraction: float = 0.2
    select_fraction: float = 0.1
    drop_rate: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        inner = self.method.removeprefix("dare+")
        if inner not in MERGE_METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        if not 0.0 < self.trim_keep_fraction <= 1.0:
            raise ValueError("trim_keep_fraction must be in (0, 1]")
        if not 0.0 < self.select_fraction <= 1.0:
            raise ValueError("select_fraction must be in (0, 1]")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must be in [0, 1)")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            if not all(math.isfinite(w) for w in self.weights):
                raise ValueError("merge weights must be finite")


def merge_average(models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Convex combination of parameter vectors; weights must sum to 1."""
    if len(models) == 0:
        raise ValueError("need at least one model")
    if len(weights) != len(models):
        raise LengthMismatchError(f"{len(weights)} weights for {len(models)} models")
    vecs = [as_vector(m) for m in models]
    size = vecs[0].size
    if any(v.size != size for v in vecs):
        raise LengthMismatchError("model parameter lengths differ")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise WeightsNotNormalizedError(f"weights sum to {math.fsum(weights)!r}")
    out = np.zeros(size)
    for w, v in zip(weights, vecs):
        out += w * v
    return require_finite(out, "merged parameters")


def _check_task_vectors(base: np.ndarray, tvs: Sequence[TaskVector]) -> None:
    if len(tvs) == 0:
        raise ValueError("need at least one task vector")
    base_ids = {tv.base_id for tv in tvs}
    if len(base_ids) != 1:
        raise BaseMismatchError(f"task vectors span multiple bases: {sorted(base_ids)}")
    if any(tv.delta.size != base.size for tv in tvs):
        raise BaseMismatchError("task vector length does not match the base")


def task_arithmetic_merge(
    base: np.ndarray, tvs: Sequence[TaskVector], scaling: float = 1.0
) -> np.ndarray:
    """base + scaling * sum of task vectors."""
    base = as_vector(base)
    _check_task_vectors(base, tvs)
    total = np.zeros(base.size)
    for tv in tvs:
        total += tv.delta
    return require_finite(base + scaling * total, "merged parameters")


def _trim_mask(delta: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Boolean mask keeping the top ceil(keep_fraction * len) by |magnitude|.

    Ties at the threshold break by lower index, matching every other sort
    in fuselab, so the trim is deterministic.
    """
    keep = math.ceil(keep_fraction * delta.size)
    order = np.argsort(-np.abs(delta), kind="stable")
    mask = np.zeros(delta.size, dtype=bool)
    mask[order[:keep]] = True
    return mask


def ties_merge(
    base: np.ndarray,
    tvs: Sequence[TaskVector],
    trim_keep_fraction: float = 0.2,
    scaling: float = 1.0,
) -> np.ndarray:
    """Trim, elect sign, merge.

    1. Trim: per task vector, keep the top ceil(tau * len) entries by
       magnitude and zero the rest.
    2. Elect: per coordinate, the sign of the sum of trimmed values.
    3. Merge: the mean of trimmed values agreeing with the elected sign;
       coordinates where nothing survives merge to zero.
    """
    if not 0.0 < trim_keep_fraction <= 1.0:
        raise ValueError("trim_keep_fraction must be in (0, 1]")
    base = as_vector(base)
    _check_task_vectors(base, tvs)
    trimmed = np.stack([tv.delta * _trim_mask(tv.delta, trim_keep_fraction) for tv in tvs])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0.0) & (elected != 0.0)
    counts = agree.sum(axis=0)
    sums = (trimmed * agree).sum(axis=0)
    merged = np.divide(sums, counts, out=np.zeros(base.size), where=counts > 0)
    return require_finite(base + scaling * merged, "merged parameters")


def _variance_select_mask(stack: np.ndarray, select_fraction: float) -> np.ndarray:
    """Keep coordinates whose cross-model variance reaches the top-k threshold.

    The threshold is the k-th largest variance and the comparison is
    inclusive, so an all-equal-variance block (e.g. identical task vectors)
    keeps every coordinate rather than an arbitrary subset. Variance is
    computed on rows centered by the first row: shift-invariant in exact
    arithmetic, and exactly zero for identical rows (np.var alone leaves
    rounding noise that would break the tie).
    """
    var = np.var(stack - stack[0], axis=0)
    keep = math.ceil(select_fraction * var.size)
    threshold = np.sort(var)[::-1][keep - 1]
    return var >= threshold


def sce_merge(
    base: np.ndarray,
    tvs: Sequence[TaskVector],
    select_fraction: float = 0.1,
    scaling: float = 1.0,
    blocks: Sequence[slice] | None = None,
) -> np.ndarray:
    """Select, calculate, erase over coordinate blocks.

    1. Select: within each block keep the top select_fraction of
       coordinates by cross-model variance (inclusive at the threshold).
    2. Calculate: per-model block weight proportional to the squared
       magnitude of its selected delta (uniform when all are zero).
    3. Erase: per coordinate, drop deltas whose sign conflicts with the
       weight-majority sign (falling back to the sign of the plain sum on a
       weight tie); merge the survivors as the weighted sum.

    Blocks default to the whole vector; callers with a model shape table
    pass one slice per layer.
    """
    if not 0.0 < select_fraction <= 1.0:
        raise ValueError("select_fraction must be in (0, 1]")
    base = as_vector(base)
    _check_task_vectors(base, tvs)
    if blocks is None:
        blocks = [slice(0, base.size)]
    stack = np.stack([tv.delta for tv in tvs])
    n_models = stack.shape[0]
    merged = np.zeros(base.size)
    for block in blocks:
        sub = stack[:, block]
        masked = sub * _variance_select_mask(sub, select_fraction)
        energy = np.sum(masked * masked, axis=1)
        total = float(energy.sum())
        weights = energy / total if total > 0 else np.full(n_models, 1.0 / n_models)
        pos_weight = (weights[:, None] * (masked > 0)).sum(axis=0)
        neg_weight = (weights[:, None] * (masked < 0)).sum(axis=0)
        majority = np.sign(pos_weight - neg_weight)
        tie = majority == 0.0
        majority[tie] = np.sign(masked.sum(axis=0))[tie]
        survive = (np.sign(masked) == majority) & (masked != 0.0) & (majority != 0.0)
        merged[block] = (weights[:, None] * masked * survive).sum(axis=0)
    return require_finite(base + scaling * merged, "merged parameters")


def dare_sparsify(tv: TaskVector, drop_rate: float, seed: int) -> TaskVector:
    """Drop coordinates independently with probability drop_rate, rescale
    survivors by 1/(1 - drop_rate); unbiased in expectation, deterministic
    per seed."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must be in [0, 1)")
    if drop_rate == 0.0:
        return tv
    rng = np.random.default_rng(seed)
    keep = rng.random(tv.delta.size) >= drop_rate
    delta = np.where(keep, tv.delta / (1.0 - drop_rate), 0.0)
    return TaskVector(delta, tv.base_id, tv.model_id)


def apply_merge(
    base: np.ndarray,
    models: Sequence[np.ndarray],
    spec: MergeSpec,
    blocks: Sequence[slice] | None = None,
) -> np.ndarray:
    """Dispatch a MergeSpec over tuned models sharing ``base``."""
    base = as_vector(base)
    method = spec.method
    sparsified = method.startswith("dare+")
    tvs = [
        TaskVector.from_params(base, m, model_id=str(i)) for i, m in enumerate(models)
    ]
    if sparsified:
        tvs = [dare_sparsify(tv, spec.drop_rate, spec.seed + i) for i, tv in enumerate(tvs)]
        method = method.removeprefix("dare+")
    if method == "average":
        weights = spec.weights if spec.weights is not None else [1.0 / len(models)] * len(models)
        # raw vectors when no sparsification happened: base + (m - base)
        # round-trips only approximately in floats
        vecs = [base + tv.delta for tv in tvs] if sparsified else [as_vector(m) for m in models]
        merged = merge_average(vecs, weights)
    elif method == "task-arithmetic":
        merged = task_arithmetic_merge(base, tvs, spec.scaling)
    elif method == "ties":
        merged = ties_merge(base, tvs, spec.trim_keep_fraction, spec.scaling)
    elif method == "sce":
        merged = sce_merge(base, tvs, spec.select_fraction, spec.scaling, blocks)
    else:  # pragma: no cover - MergeSpec validation rejects this earlier
        raise ValueError(f"unknown merge method {spec.method!r}")
    if not np.all(np.isfinite(merged)):
        raise NonFiniteError("merge produced non-finite parameters")
    return merged
