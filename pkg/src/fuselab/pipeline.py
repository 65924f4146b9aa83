"""Training loops: SFT, pairwise fusion (S trainings then a weight-space
merge), and unified fusion (one training against all sources).

Everything is a pure function of (inputs, seed): corpus shuffling uses a
dedicated generator per training run, the optimizer is functional, and
re-runs are bit-identical. The S pairwise trainings offset the shuffle seed
by the 0-based source index while sharing the model start point, so the
distillation loss is the only difference across runs -- and the single-source
pairwise run is bit-identical to unified fusion with the same seed.

Teachers are consumed through a TeacherCache by default (training never
re-runs source forward passes); live-teacher mode exists for
cache-validation tests and accepts ToyModel instances directly.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    EmptySequenceError,
    LengthMismatchError,
    MergeSpecMissingError,
    NonFiniteGradientError,
    StepOutOfRangeError,
)
from .losses import sft_loss, unified_fusion_loss
from .merging import MergeSpec, apply_merge
from .numerics import neumaier_sum
from .teachercache import CacheReader
from .toylab import (
    Corpus,
    ModelShapes,
    Sample,
    ToyModel,
    backward_from_logit_grad,
    evaluate,
    forward_logits,
    get_tokenizer,
    response_contexts,
    save_model,
)


@dataclass(frozen=True)
class OptimizerState:
    """Cautious-AdamW moment estimates; replaced, never mutated."""

    step: int
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @staticmethod
    def fresh(n_params: int, weight_decay: float = 0.0) -> "OptimizerState":
        return OptimizerState(0, np.zeros(n_params), np.zeros(n_params), weight_decay=weight_decay)


def cautious_adamw_step(
    params: np.ndarray, grad: np.ndarray, state: OptimizerState, lr_t: float
) -> tuple[np.ndarray, OptimizerState]:
    """One cautious-AdamW update.

    The standard AdamW direction u is computed, then masked to the
    coordinates where u agrees in sign with the current gradient; the masked
    update is rescaled by 1/(mean(mask)+1e-8) so that the step length is
    preserved on average. Decoupled weight decay applies before the masked
    step. A fully-agreeing mask reproduces plain AdamW to within the 1e-8
    damping of the rescale.
    """
    if params.size != grad.size or params.size != state.m.size:
        raise LengthMismatchError("parameter/gradient/state lengths differ")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("gradient contains NaN or inf")
    if lr_t < 0:
        raise ValueError("learning rate must be nonnegative")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    u = m_hat / (np.sqrt(v_hat) + state.eps)
    mask = (u * grad > 0).astype(np.float64)
    update = u * mask / (mask.mean() + 1e-8)
    new_params = params * (1.0 - lr_t * state.weight_decay) - lr_t * update
    return new_params, replace(state, step=step, m=m, v=v)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise StepOutOfRangeError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class FusionConfig:
    """Hyperparameters for one training run.

    Defaults are desk-scale: the schedule structure (5 epochs, early stop at
    the 4th, cosine annealing, lambda 0.5, K 10) follows the reference
    recipe; magnitudes are rescaled for toy models.
    """

    lam: float = 0.5
    topk: int = 10
    epochs: int = 5
    early_stop_epoch: int = 4
    batch_size: int = 32
    lr: float = 3e-3
    lr_min: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    merge: MergeSpec | None = None
    use_topk: bool = True
    standardize: bool = True
    per_token_average: bool = False
    source_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if not self.epochs >= self.early_stop_epoch >= 1:
            raise ValueError("need epochs >= early_stop_epoch >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LiveTeacher:
    """Runs the source model forward on demand (cache-validation mode)."""

    model: ToyModel
    model_id: str = ""

    def __post_init__(self) -> None:
        if not self.model_id:
            self.model_id = self.model.tokenizer_id
        self._tokenizer = get_tokenizer(self.model.tokenizer_id)

    def frames(self, sample: Sample) -> list[np.ndarray]:
        contexts, _ = response_contexts(self._tokenizer, sample, self.model.shapes.context)
        return [forward_logits(self.model, ctx) for ctx in contexts]


@dataclass
class CachedTeacher:
    """Reads pre-extracted source logits; never touches the source model."""

    reader: CacheReader

    @property
    def model_id(self) -> str:
        return self.reader.model_id

    def frames(self, sample: Sample) -> list[np.ndarray]:
        return self.reader.read(sample.sid).frames()


TeacherLike = Union[ToyModel, CacheReader, LiveTeacher, CachedTeacher]


def as_teacher(obj: TeacherLike) -> LiveTeacher | CachedTeacher:
    if isinstance(obj, (LiveTeacher, CachedTeacher)):
        return obj
    if isinstance(obj, ToyModel):
        return LiveTeacher(obj)
    if isinstance(obj, CacheReader):
        return CachedTeacher(obj)
    raise TypeError(f"cannot use {type(obj).__name__} as a teacher")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    sft_component: float
    fusion_component: float
    test_ppl: dict[str, float]
    wall_ms: float


@dataclass
class TrainResult:
    model: ToyModel
    history: list[EpochRecord]
    total_steps: int
    trajectory: list[np.ndarray] | None = None


@dataclass
class PairwiseResult:
    merged: ToyModel
    intermediates: list[ToyModel]
    histories: list[list[EpochRecord]]
    total_steps: int
    trajectories: list[list[np.ndarray]] | None = None


def _test_ppl_by_domain(model: ToyModel, corpus: Corpus) -> dict[str, float]:
    by_domain: dict[str, list[Sample]] = {}
    for sample in corpus.test:
        by_domain.setdefault(sample.domain, []).append(sample)
    return {
        domain: evaluate(model, samples)[1] for domain, samples in sorted(by_domain.items())
    }


def _run_training(
    model: ToyModel,
    corpus: Corpus,
    config: FusionConfig,
    teachers: Sequence[LiveTeacher | CachedTeacher],
    shuffle_seed: int,
    record_trajectory: bool = False,
    eval_each_epoch: bool = True,
) -> TrainResult:
    model = model.copy()
    tokenizer = get_tokenizer(model.tokenizer_id)
    train = corpus.train
    if len(train) == 0:
        raise EmptySequenceError("training corpus is empty")
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    state = OptimizerState.fresh(model.params.size, config.weight_decay)
    rng = np.random.default_rng(shuffle_seed)
    k = config.topk if config.use_topk else None
    trajectory: list[np.ndarray] | None = [] if record_trajectory else None
    history: list[EpochRecord] = []
    step = 0

    for epoch in range(1, config.early_stop_epoch + 1):
        tic = time.perf_counter()
        order = rng.permutation(len(train))
        sample_losses: list[float] = []
        sft_parts: list[float] = []
        fusion_parts: list[float] = []
        lr_t = config.lr
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            batch_grad = np.zeros_like(model.params)
            batch_losses: list[float] = []
            for idx in batch:
                sample = train[idx]
                contexts, targets = response_contexts(tokenizer, sample, model.shapes.context)
                frames = [forward_logits(model, ctx) for ctx in contexts]
                if teachers:
                    result = unified_fusion_loss(
                        frames,
                        [t.frames(sample) for t in teachers],
                        targets,
                        config.lam,
                        k,
                        standardize_frames=config.standardize,
                    )
                    loss_value, grads = result.loss, result.grads
                    sft_parts.append(result.sft_term)
                    fusion_parts.append(result.fusion_term)
                else:
                    plain = sft_loss(frames, targets)
                    loss_value, grads = plain.loss, plain.grads
                    sft_parts.append(plain.loss)
                    fusion_parts.append(0.0)
                scale = 1.0 / len(targets) if config.per_token_average else 1.0
                for ctx, g in zip(contexts, grads):
                    batch_grad += scale * backward_from_logit_grad(model, ctx, g)
                batch_losses.append(scale * loss_value)
            lr_t = cosine_lr(step, total_steps, config.lr, config.lr_min)
            new_params, state = cautious_adamw_step(
                model.params, batch_grad / len(batch), state, lr_t
            )
            model.params = new_params
            step += 1
            sample_losses.extend(batch_losses)
            if trajectory is not None:
                trajectory.append(new_params.copy())
        test_ppl = _test_ppl_by_domain(model, corpus) if eval_each_epoch and corpus.test else {}
        history.append(
            EpochRecord(
                epoch=epoch,
                step=step,
                lr=lr_t,
                train_loss=neumaier_sum(sample_losses) / len(sample_losses),
                sft_component=neumaier_sum(sft_parts) / len(sft_parts),
                fusion_component=neumaier_sum(fusion_parts) / len(fusion_parts),
                test_ppl=test_ppl,
                wall_ms=(time.perf_counter() - tic) * 1e3,
            )
        )
    return TrainResult(model, history, step, trajectory)


def train_sft(
    model: ToyModel,
    corpus: Corpus,
    config: FusionConfig,
    record_trajectory: bool = False,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Plain supervised fine-tuning baseline."""
    result = _run_training(
        model, corpus, config, teachers=[], shuffle_seed=config.seed,
        record_trajectory=record_trajectory,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(result.model, out / "model.iftm")
        write_metrics_csv(result.history, out / "metrics.csv")
    return result


def fuse_unified(
    pivot: ToyModel,
    teachers: Sequence[TeacherLike],
    corpus: Corpus,
    config: FusionConfig,
    record_trajectory: bool = False,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """One training against the summed per-source distillation losses."""
    if len(teachers) < 1:
        raise EmptySequenceError("unified fusion needs at least one source")
    adapted = [as_teacher(t) for t in teachers]
    result = _run_training(
        pivot, corpus, config, teachers=adapted, shuffle_seed=config.seed,
        record_trajectory=record_trajectory,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(result.model, out / "fused.iftm")
        write_metrics_csv(result.history, out / "metrics.csv")
    return result


def layer_blocks(shapes: ModelShapes) -> list[slice]:
    """One coordinate block per layer, for blockwise merge methods."""
    return list(shapes.layout().values())


def fuse_pairwise(
    pivot: ToyModel,
    teachers: Sequence[TeacherLike],
    corpus: Corpus,
    config: FusionConfig,
    record_trajectory: bool = False,
    out_dir: str | Path | None = None,
) -> PairwiseResult:
    """S independent trainings (one per source), then a weight-space merge.

    Every run starts from the same pivot parameters with a fresh optimizer;
    only the shuffle seed is offset by the source index.
    """
    if len(teachers) < 1:
        raise EmptySequenceError("pairwise fusion needs at least one source")
    if config.merge is None:
        raise MergeSpecMissingError("pairwise fusion requires config.merge")
    adapted = [as_teacher(t) for t in teachers]
    results = [
        _run_training(
            pivot, corpus, config, teachers=[teacher], shuffle_seed=config.seed + s,
            record_trajectory=record_trajectory,
        )
        for s, teacher in enumerate(adapted)
    ]
    merged_params = apply_merge(
        pivot.params,
        [r.model.params for r in results],
        config.merge,
        blocks=layer_blocks(pivot.shapes),
    )
    merged = ToyModel(merged_params, pivot.shapes, pivot.tokenizer_id)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, r in enumerate(results):
            name = adapted[s].model_id or str(s)
            save_model(r.model, out / f"pairwise-{s}-{name}.iftm")
            write_metrics_csv(r.history, out / f"metrics-{s}-{name}.csv")
        save_model(merged, out / "merged.iftm")
    return PairwiseResult(
        merged,
        [r.model for r in results],
        [r.history for r in results],
        sum(r.total_steps for r in results),
        [r.trajectory for r in results] if record_trajectory else None,
    )


def write_metrics_csv(history: Sequence[EpochRecord], path: str | Path) -> None:
    """Metrics history: epoch, step, lr, losses, per-domain test ppl, wall ms."""
    domains = sorted({d for rec in history for d in rec.test_ppl})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "step", "lr", "train_loss", "sft_component", "fusion_component"]
            + [f"test_ppl_{d}" for d in domains]
            + ["wall_ms"]
        )
        for rec in history:
            writer.writerow(
                [
                    rec.epoch,
                    rec.step,
                    f"{rec.lr:.10g}",
                    f"{rec.train_loss:.10g}",
                    f"{rec.sft_component:.10g}",
                    f"{rec.fusion_component:.10g}",
                ]
                + [f"{rec.test_ppl.get(d, float('nan')):.10g}" for d in domains]
                + [f"{rec.wall_ms:.3f}"]
            )
