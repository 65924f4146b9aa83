"""Distillation objectives with analytic gradients wrt pivot logits.

The cross-vocabulary machinery lives here: the closed-form 1-Wasserstein
distance on zero-padded sorted distributions, the sequence-level transport
loss on softmax probabilities, top-K selection with per-frame logits
standardization, the pairwise and unified fusion objectives, the
generalized weighted combination, entropic-regularized transport with an
embedding-derived cost matrix, and plain SFT cross-entropy.

All functions are pure, operate in float64, and return gradients only for
the pivot side; teachers are frozen by assumption. Per-sample losses sum
over timesteps; batch averaging is the caller's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

from .errors import (
    DimMismatchError,
    EmptySequenceError,
    LengthMismatchError,
    NegativeWeightError,
    NotADistributionError,
    TokenOutOfRangeError,
)
from .numerics import as_vector, log_softmax, moments, require_finite, softmax, sort_descending

# Below this population std a selected-logits frame is treated as degenerate:
# it standardizes to all zeros and contributes no loss or gradient.
STD_EPS = 1e-6

DISTRIBUTION_TOL = 1e-9


@dataclass(frozen=True)
class LogitFrame:
    """One timestep's raw logits over one model's own vocabulary."""

    values: np.ndarray
    model_id: str = ""
    timestep: int = 0

    def __post_init__(self) -> None:
        v = as_vector(self.values)
        require_finite(v, "logit frame")
        object.__setattr__(self, "values", v)


FrameLike = Union[LogitFrame, np.ndarray, Sequence[float]]


def frame_values(frame: FrameLike) -> np.ndarray:
    if isinstance(frame, LogitFrame):
        return frame.values
    return require_finite(as_vector(frame), "logit frame")


def truncate_to_min(n_pivot: int, n_source: int) -> list[tuple[int, int]]:
    """Default timestep alignment: pair the first min(T_o, T_s) steps.

    Mismatched tokenizers produce different response lengths for the same
    text; this is the minimal deterministic pairing, anchored at the start
    of the response region. Sequence losses accept any replacement.
    """
    return [(t, t) for t in range(min(n_pivot, n_source))]


AlignFn = Callable[[int, int], Sequence[tuple[int, int]]]


class SftLoss(NamedTuple):
    loss: float
    grads: list[np.ndarray]


def sft_loss(frames: Sequence[FrameLike], targets: Sequence[int]) -> SftLoss:
    """Summed cross-entropy over response timesteps.

    Gradient wrt each logit frame is softmax(z_t) - onehot(y_t).
    """
    if len(frames) != len(targets):
        raise LengthMismatchError(
            f"{len(frames)} logit frames vs {len(targets)} targets"
        )
    losses: list[float] = []
    grads: list[np.ndarray] = []
    for frame, target in zip(frames, targets):
        z = frame_values(frame)
        target = int(target)
        if not 0 <= target < z.size:
            raise TokenOutOfRangeError(f"target {target} outside vocabulary of {z.size}")
        logp = log_softmax(z)
        losses.append(-float(logp[target]))
        g = np.exp(logp)
        g[target] -= 1.0
        grads.append(g)
    return SftLoss(math.fsum(losses), grads)


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.size == 0:
        raise NotADistributionError(f"{name} is empty")
    if np.any(p < 0):
        raise NotADistributionError(f"{name} has negative mass")
    total = float(np.sum(p))
    if abs(total - 1.0) > DISTRIBUTION_TOL:
        raise NotADistributionError(f"{name} sums to {total!r}, not 1")


class W1Result(NamedTuple):
    value: float
    grad_p: np.ndarray


def w1_closed_form(
    p: Sequence[float] | np.ndarray,
    q: Sequence[float] | np.ndarray,
    validate: bool = True,
) -> W1Result:
    """1-Wasserstein distance between two discrete distributions.

    The shorter vector is zero-padded to the common support size, both are
    sorted descending, and the distance is the L1 gap between the sorted
    vectors: optimal transport simply pairs mass by rank. The gradient wrt p
    routes sign(sort(p)_i - sort(q)_i) back through p's sort permutation,
    with subgradient 0 at exact ties.

    ``validate=False`` skips the distribution checks; finite-difference
    probes need to evaluate the closed form just off the simplex.
    """
    p = as_vector(p)
    q = as_vector(q)
    require_finite(p, "p")
    require_finite(q, "q")
    if validate:
        _check_distribution(p, "p")
        _check_distribution(q, "q")
    size = max(p.size, q.size)
    p_pad = np.pad(p, (0, size - p.size))
    q_pad = np.pad(q, (0, size - q.size))
    sp = sort_descending(p_pad)
    sq = sort_descending(q_pad)
    diff = sp.values - sq.values
    value = float(np.sum(np.abs(diff)))
    grad_pad = np.zeros(size)
    grad_pad[sp.perm] = np.sign(diff)
    return W1Result(value, grad_pad[: p.size])


class SequenceLoss(NamedTuple):
    loss: float
    grads: list[np.ndarray]


def uld_sequence_loss(
    pivot_frames: Sequence[FrameLike],
    source_frames: Sequence[FrameLike],
    align: AlignFn = truncate_to_min,
) -> SequenceLoss:
    """Summed per-timestep 1-Wasserstein distance between softmax distributions.

    Logits on both sides are converted to probabilities; the distance is
    accumulated over aligned timesteps and the gradient chains back through
    the pivot softmax. One gradient frame is returned per pivot frame;
    unaligned trailing frames get zeros.
    """
    if len(pivot_frames) == 0 or len(source_frames) == 0:
        raise EmptySequenceError("both frame sequences must be nonempty")
    grads = [np.zeros(frame_values(f).size) for f in pivot_frames]
    terms: list[float] = []
    for t_o, t_s in align(len(pivot_frames), len(source_frames)):
        p = softmax(frame_values(pivot_frames[t_o]))
        q = softmax(frame_values(source_frames[t_s]))
        w1, grad_p = w1_closed_form(p, q)
        terms.append(w1)
        # d/dz of f(softmax(z)): p * (g - <g, p>)
        grads[t_o] = grads[t_o] + p * (grad_p - float(np.dot(grad_p, p)))
    return SequenceLoss(math.fsum(terms), grads)


class SelectedLogits(NamedTuple):
    """K largest logits, descending, with their token ids."""

    values: np.ndarray
    indices: np.ndarray


def topk_select(frame: FrameLike, k: int) -> SelectedLogits:
    """The K largest logits in descending order, ties broken by lower token id.

    K larger than the vocabulary clamps to the full sorted frame.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    z = frame_values(frame)
    result = sort_descending(z)
    k = min(k, z.size)
    return SelectedLogits(result.values[:k].copy(), result.perm[:k].copy())


class StandardizedLogits(NamedTuple):
    values: np.ndarray
    degenerate: bool
    sigma: float


def standardize(selected: SelectedLogits | FrameLike) -> StandardizedLogits:
    """Per-frame z-scoring of the selected logits.

    Mean and population std are taken over the K selected values only.
    Frames whose std falls below STD_EPS are flagged degenerate and map to
    all zeros instead of dividing by noise; they contribute no loss.
    """
    values = selected.values if isinstance(selected, SelectedLogits) else frame_values(selected)
    mean, std = moments(values)
    if std < STD_EPS:
        return StandardizedLogits(np.zeros_like(values), True, 0.0)
    return StandardizedLogits((values - mean) / std, False, std)


def _standardize_backward(standardized: StandardizedLogits, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient back through z-scoring (full Jacobian of (x-mu)/sigma)."""
    y = standardized.values
    k = y.size
    g_mean = float(np.sum(upstream)) / k
    gy_mean = float(np.dot(upstream, y)) / k
    return (upstream - g_mean - y * gy_mean) / standardized.sigma


class PairwiseLoss(NamedTuple):
    loss: float
    grads: list[np.ndarray]
    degenerate_frames: int


def pairwise_fusion_loss(
    pivot_frames: Sequence[FrameLike],
    source_frames: Sequence[FrameLike],
    k: int | None,
    standardize_frames: bool = True,
    align: AlignFn = truncate_to_min,
) -> PairwiseLoss:
    """Rank-paired L1 distance between standardized top-K logits.

    Per aligned timestep both frames are top-K selected independently, both
    are z-scored, and position i of the pivot's sorted top-K is compared to
    position i of the source's. The effective K is clamped to the smaller
    vocabulary so the rank pairing is total; ``k=None`` disables selection
    (full-rank comparison -- the ablation baseline), and
    ``standardize_frames=False`` compares raw sorted logits.

    Gradients flow through the standardization Jacobian and the selection
    mask back to the pivot logits. Frames degenerate on either side (std
    below STD_EPS) contribute zero loss and are tallied.
    """
    if len(pivot_frames) == 0 or len(source_frames) == 0:
        raise EmptySequenceError("both frame sequences must be nonempty")
    grads = [np.zeros(frame_values(f).size) for f in pivot_frames]
    terms: list[float] = []
    degenerate = 0
    for t_o, t_s in align(len(pivot_frames), len(source_frames)):
        z_o = frame_values(pivot_frames[t_o])
        z_s = frame_values(source_frames[t_s])
        k_eff = min(z_o.size, z_s.size) if k is None else min(k, z_o.size, z_s.size)
        sel_o = topk_select(z_o, k_eff)
        sel_s = topk_select(z_s, k_eff)
        if standardize_frames:
            st_o = standardize(sel_o)
            st_s = standardize(sel_s)
            if st_o.degenerate or st_s.degenerate:
                degenerate += 1
                continue
            diff = st_o.values - st_s.values
            terms.append(float(np.sum(np.abs(diff))))
            d_values = _standardize_backward(st_o, np.sign(diff))
        else:
            diff = sel_o.values - sel_s.values
            terms.append(float(np.sum(np.abs(diff))))
            d_values = np.sign(diff)
        frame_grad = np.zeros(z_o.size)
        frame_grad[sel_o.indices] = d_values
        grads[t_o] = grads[t_o] + frame_grad
    return PairwiseLoss(math.fsum(terms), grads, degenerate)


class FusionLoss(NamedTuple):
    loss: float
    grads: list[np.ndarray]
    sft_term: float
    fusion_term: float
    degenerate_frames: int


def _weighted_fusion(
    pivot_frames: Sequence[FrameLike],
    all_source_frames: Sequence[Sequence[FrameLike]],
    targets: Sequence[int],
    sft_weight: float,
    source_weights: Sequence[float],
    k: int | None,
    standardize_frames: bool,
    align: AlignFn,
) -> FusionLoss:
    sft = sft_loss(pivot_frames, targets)
    grads = [sft_weight * g for g in sft.grads]
    pair_losses: list[float] = []
    degenerate = 0
    for weight, source_frames in zip(source_weights, all_source_frames):
        pair = pairwise_fusion_loss(
            pivot_frames, source_frames, k, standardize_frames=standardize_frames, align=align
        )
        degenerate += pair.degenerate_frames
        pair_losses.append(pair.loss)
        for t, g in enumerate(pair.grads):
            grads[t] = grads[t] + weight * g
    loss = math.fsum([sft_weight * sft.loss] + [w * p for w, p in zip(source_weights, pair_losses)])
    return FusionLoss(loss, grads, sft.loss, math.fsum(pair_losses), degenerate)


def unified_fusion_loss(
    pivot_frames: Sequence[FrameLike],
    all_source_frames: Sequence[Sequence[FrameLike]],
    targets: Sequence[int],
    lam: float,
    k: int | None,
    standardize_frames: bool = True,
    align: AlignFn = truncate_to_min,
) -> FusionLoss:
    """lam * sum_s pairwise_s + (1 - lam) * sft, with matching gradients."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if len(all_source_frames) < 1:
        raise EmptySequenceError("unified fusion needs at least one source")
    return _weighted_fusion(
        pivot_frames,
        all_source_frames,
        targets,
        sft_weight=1.0 - lam,
        source_weights=[lam] * len(all_source_frames),
        k=k,
        standardize_frames=standardize_frames,
        align=align,
    )


def generalized_weighted_loss(
    pivot_frames: Sequence[FrameLike],
    all_source_frames: Sequence[Sequence[FrameLike]],
    targets: Sequence[int],
    sft_weight: float,
    source_weights: Sequence[float],
    k: int | None,
    standardize_frames: bool = True,
    align: AlignFn = truncate_to_min,
) -> FusionLoss:
    """sft_weight * sft + sum_s source_weights[s] * pairwise_s.

    The free-weight generalization of the unified objective; setting
    sft_weight = 1 - lam and every source weight to lam recovers
    unified_fusion_loss exactly.
    """
    if sft_weight < 0 or any(w < 0 for w in source_weights):
        raise NegativeWeightError("loss weights must be nonnegative")
    if len(source_weights) != len(all_source_frames):
        raise LengthMismatchError(
            f"{len(source_weights)} weights vs {len(all_source_frames)} sources"
        )
    return _weighted_fusion(
        pivot_frames,
        all_source_frames,
        targets,
        sft_weight=sft_weight,
        source_weights=list(source_weights),
        k=k,
        standardize_frames=standardize_frames,
        align=align,
    )


@dataclass(frozen=True)
class CostMatrix:
    """Nonnegative transport cost table, shape (V_o, V_s)."""

    entries: np.ndarray
    kind: str  # "uniform" or "embedding-distance"

    def __post_init__(self) -> None:
        entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if np.any(entries < 0) or not np.all(np.isfinite(entries)):
            raise ValueError("cost entries must be finite and nonnegative")
        if self.kind == "uniform" and not np.all(entries == 1.0):
            raise ValueError("uniform cost matrices must be identically 1")
        object.__setattr__(self, "entries", entries)


def uniform_cost_matrix(n_pivot: int, n_source: int) -> CostMatrix:
    return CostMatrix(np.ones((n_pivot, n_source)), "uniform")


def embedding_cost_matrix(
    emb_pivot: np.ndarray, emb_source: np.ndarray, metric: str = "euclidean"
) -> CostMatrix:
    """Token-to-token cost from embedding tables.

    ``euclidean`` is the pairwise L2 distance; ``cosine-distance`` is
    1 - cosine similarity clamped to [0, 2].
    """
    a = np.ascontiguousarray(emb_pivot, dtype=np.float64)
    b = np.ascontiguousarray(emb_source, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("embedding tables must be 2-D")
    if a.shape[1] != b.shape[1]:
        raise DimMismatchError(
            f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}"
        )
    if metric == "euclidean":
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
        entries = np.sqrt(np.maximum(sq, 0.0))
    elif metric == "cosine-distance":
        norms = np.linalg.norm(a, axis=1)[:, None] * np.linalg.norm(b, axis=1)[None, :]
        sim = (a @ b.T) / np.maximum(norms, 1e-12)
        entries = np.clip(1.0 - sim, 0.0, 2.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return CostMatrix(entries, "embedding-distance")


class SinkhornResult(NamedTuple):
    cost: float  # plain transport cost <plan, C>
    plan: np.ndarray
    converged: bool
    iterations: int
    marginal_error: float
    potential_p: np.ndarray
    potential_q: np.ndarray
    reg_cost: float  # cost + reg * sum plan*(log plan - 1); gradient wrt p is potential_p


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def sinkhorn_ot(
    p: Sequence[float] | np.ndarray,
    q: Sequence[float] | np.ndarray,
    cost: CostMatrix | np.ndarray,
    reg: float = 1e-2,
    max_iter: int = 1000,
    tol: float = 1e-8,
) -> SinkhornResult:
    """Entropic-regularized transport via log-domain Sinkhorn iterations.

    Stops when the summed L1 marginal violation drops below ``tol`` or after
    ``max_iter`` sweeps, whichever comes first; the result reports which via
    the ``converged`` flag and always carries the best iterate seen. The
    dual potential on the p side is the analytic gradient of the regularized
    cost wrt p (up to an additive constant).
    """
    p = as_vector(p)
    q = as_vector(q)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if reg <= 0:
        raise ValueError("reg must be positive")
    entries = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if entries.shape != (p.size, q.size):
        raise LengthMismatchError(
            f"cost matrix shape {entries.shape} does not match ({p.size}, {q.size})"
        )

    rows = np.flatnonzero(p > 0)
    cols = np.flatnonzero(q > 0)
    c_sub = entries[np.ix_(rows, cols)]
    log_p = np.log(p[rows])
    log_q = np.log(q[cols])

    f = np.zeros(rows.size)
    g = np.zeros(cols.size)
    best: tuple[float, np.ndarray, np.ndarray, np.ndarray] | None = None
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        f = reg * (log_p - _logsumexp((g[None, :] - c_sub) / reg, axis=1))
        g = reg * (log_q - _logsumexp((f[:, None] - c_sub) / reg, axis=0))
        plan_sub = np.exp((f[:, None] + g[None, :] - c_sub) / reg)
        err = float(
            np.sum(np.abs(plan_sub.sum(axis=1) - p[rows]))
            + np.sum(np.abs(plan_sub.sum(axis=0) - q[cols]))
        )
        if best is None or err < best[0]:
            best = (err, plan_sub, f.copy(), g.copy())
        if err < tol:
            converged = True
            break

    assert best is not None
    err, plan_sub, f, g = best
    plan = np.zeros((p.size, q.size))
    plan[np.ix_(rows, cols)] = plan_sub
    potential_p = np.zeros(p.size)
    potential_p[rows] = f
    potential_q = np.zeros(q.size)
    potential_q[cols] = g
    total_cost = float(np.sum(plan * entries))
    entropy_term = float(
        np.sum(np.where(plan_sub > 0, plan_sub * (np.log(np.where(plan_sub > 0, plan_sub, 1.0)) - 1.0), 0.0))
    )
    return SinkhornResult(
        total_cost, plan, converged, iterations, err, potential_p, potential_q,
        total_cost + reg * entropy_term,
    )


class OtSequenceLoss(NamedTuple):
    loss: float  # summed regularized transport costs (the differentiated objective)
    grads: list[np.ndarray]
    converged: bool
    transport_cost: float  # summed plain <plan, C> costs, for reporting


def ot_sequence_loss(
    pivot_frames: Sequence[FrameLike],
    source_frames: Sequence[FrameLike],
    cost: CostMatrix | np.ndarray,
    reg: float = 1e-2,
    max_iter: int = 1000,
    tol: float = 1e-8,
    align: AlignFn = truncate_to_min,
) -> OtSequenceLoss:
    """Transport loss with a semantic cost matrix, summed over timesteps.

    Operates on full softmax distributions (no top-K truncation). The loss
    is the entropic-regularized transport cost, whose exact gradient wrt the
    marginal p is the converged dual potential; it is chained through the
    pivot softmax. The plain transport cost is reported alongside (the two
    coincide as reg -> 0).
    """
    if len(pivot_frames) == 0 or len(source_frames) == 0:
        raise EmptySequenceError("both frame sequences must be nonempty")
    grads = [np.zeros(frame_values(f).size) for f in pivot_frames]
    terms: list[float] = []
    sharp_terms: list[float] = []
    all_converged = True
    for t_o, t_s in align(len(pivot_frames), len(source_frames)):
        p = softmax(frame_values(pivot_frames[t_o]))
        q = softmax(frame_values(source_frames[t_s]))
        result = sinkhorn_ot(p, q, cost, reg=reg, max_iter=max_iter, tol=tol)
        all_converged = all_converged and result.converged
        terms.append(result.reg_cost)
        sharp_terms.append(result.cost)
        grad_p = result.potential_p
        grads[t_o] = grads[t_o] + p * (grad_p - float(np.dot(grad_p, p)))
    return OtSequenceLoss(math.fsum(terms), grads, all_converged, math.fsum(sharp_terms))
