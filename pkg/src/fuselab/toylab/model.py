"""Fixed-context MLP n-gram language model with hand-derived backprop.

Architecture: token embeddings -> concatenation of the ``context`` window
-> one tanh hidden layer -> linear projection to vocabulary logits. This is
the smallest model with a nontrivial shared representation whose gradients
can be written out by hand, which is the whole point: every loss in fuselab
is gradient-checked against finite differences through this model.

Parameters live in one flat float64 vector so weight-space merging can treat
models as plain vectors. Checkpoints are stored as little-endian float32
(see docs/formats.md for the IFTM layout).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import (
    BadContextLengthError,
    CorruptFileError,
    EmptyTestSetError,
    TokenOutOfRangeError,
)
from ..numerics import log_softmax
from .corpus import Sample
from .tokenizers import Tokenizer, get_tokenizer

CHECKPOINT_MAGIC = b"IFTM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelShapes:
    """Layer dimension table; fully determines the flat parameter layout."""

    vocab: int
    embed_dim: int = 16
    context: int = 8
    hidden: int = 64

    @property
    def param_count(self) -> int:
        v, d, c, h = self.vocab, self.embed_dim, self.context, self.hidden
        return v * d + (c * d) * h + h + h * v + v

    def layout(self) -> dict[str, slice]:
        """Named slices of the flat parameter vector, one per layer."""
        v, d, c, h = self.vocab, self.embed_dim, self.context, self.hidden
        sizes = {
            "embed": v * d,
            "w1": (c * d) * h,
            "b1": h,
            "w2": h * v,
            "b2": v,
        }
        out: dict[str, slice] = {}
        offset = 0
        for name, size in sizes.items():
            out[name] = slice(offset, offset + size)
            offset += size
        return out


@dataclass
class ToyModel:
    """Flat parameter vector plus its shape table and tokenizer binding."""

    params: np.ndarray
    shapes: ModelShapes
    tokenizer_id: str

    def __post_init__(self) -> None:
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.shapes.param_count,):
            raise ValueError(
                f"parameter vector has length {self.params.size}, "
                f"shapes require {self.shapes.param_count}"
            )

    def copy(self) -> "ToyModel":
        return ToyModel(self.params.copy(), self.shapes, self.tokenizer_id)

    def views(self) -> dict[str, np.ndarray]:
        """Reshaped views into the flat vector; mutating them mutates params."""
        s = self.shapes
        lay = s.layout()
        p = self.params
        return {
            "embed": p[lay["embed"]].reshape(s.vocab, s.embed_dim),
            "w1": p[lay["w1"]].reshape(s.context * s.embed_dim, s.hidden),
            "b1": p[lay["b1"]],
            "w2": p[lay["w2"]].reshape(s.hidden, s.vocab),
            "b2": p[lay["b2"]],
        }


def init_model(shapes: ModelShapes, tokenizer_id: str, seed: int) -> ToyModel:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params = np.zeros(shapes.param_count, dtype=np.float64)
    model = ToyModel(params, shapes, tokenizer_id)
    v = model.views()

    def fill(name: str, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        v[name][...] = rng.uniform(-bound, bound, size=v[name].shape)

    fill("embed", shapes.embed_dim)
    fill("w1", shapes.context * shapes.embed_dim)
    fill("w2", shapes.hidden)
    return model


def zero_model(shapes: ModelShapes, tokenizer_id: str) -> ToyModel:
    """All-zero parameters: the exactly-uniform baseline."""
    return ToyModel(np.zeros(shapes.param_count, dtype=np.float64), shapes, tokenizer_id)


def _check_context(model: ToyModel, context: np.ndarray) -> np.ndarray:
    context = np.asarray(context, dtype=np.intp)
    if context.shape != (model.shapes.context,):
        raise BadContextLengthError(
            f"context length {context.size} != model context {model.shapes.context}"
        )
    if np.any(context < 0) or np.any(context >= model.shapes.vocab):
        raise TokenOutOfRangeError("context token id outside vocabulary")
    return context


def forward_logits(model: ToyModel, context: np.ndarray) -> np.ndarray:
    """Logits over the model vocabulary for one context window."""
    context = _check_context(model, context)
    v = model.views()
    x = v["embed"][context].ravel()
    u = np.tanh(x @ v["w1"] + v["b1"])
    return u @ v["w2"] + v["b2"]


def backward_from_logit_grad(
    model: ToyModel, context: np.ndarray, dl_dlogits: np.ndarray
) -> np.ndarray:
    """Exact gradient of <dl_dlogits, forward_logits(model, context)> wrt params."""
    context = _check_context(model, context)
    g = np.asarray(dl_dlogits, dtype=np.float64)
    if g.shape != (model.shapes.vocab,):
        raise ValueError("dl_dlogits length must equal the vocabulary size")
    s = model.shapes
    v = model.views()

    x = v["embed"][context].ravel()
    u = np.tanh(x @ v["w1"] + v["b1"])

    grad = np.zeros_like(model.params)
    gm = ToyModel(grad, s, model.tokenizer_id).views()

    gm["b2"][...] = g
    gm["w2"][...] = np.outer(u, g)
    du = v["w2"] @ g
    dpre = du * (1.0 - u * u)
    gm["b1"][...] = dpre
    gm["w1"][...] = np.outer(x, dpre)
    dx = (v["w1"] @ dpre).reshape(s.context, s.embed_dim)
    # accumulate; a token may occur at several context positions
    np.add.at(gm["embed"], context, dx)
    return grad


def response_contexts(
    tokenizer: Tokenizer, sample: Sample, context_len: int
) -> tuple[list[np.ndarray], list[int]]:
    """Context windows and target ids for every response timestep.

    Instruction and response are tokenized separately so the regions stay
    contiguous and disjoint even under bigram merges; windows are left-padded
    with the tokenizer's pad id. Only response tokens are predicted --
    prompt tokens carry no loss.
    """
    instr = tokenizer.encode(sample.instruction)
    resp = tokenizer.encode(sample.response)
    pad = tokenizer.pad_id
    contexts: list[np.ndarray] = []
    for t in range(len(resp)):
        window = instr + resp[:t]
        window = window[-context_len:]
        if len(window) < context_len:
            window = [pad] * (context_len - len(window)) + window
        contexts.append(np.asarray(window, dtype=np.intp))
    return contexts, resp


def evaluate(
    model: ToyModel,
    samples: tuple[Sample, ...] | list[Sample],
    tokenizer: Tokenizer | None = None,
) -> tuple[float, float]:
    """Per-token accuracy and perplexity over response tokens only.

    Accuracy counts argmax-logit hits; perplexity is exp of the mean
    response-token cross-entropy. Samples may be scored concurrently; the
    reduction below is a plain order-independent mean.
    """
    if len(samples) == 0:
        raise EmptyTestSetError("evaluation needs at least one sample")
    tok = tokenizer if tokenizer is not None else get_tokenizer(model.tokenizer_id)
    hits = 0
    total = 0
    nll = 0.0
    for sample in samples:
        contexts, targets = response_contexts(tok, sample, model.shapes.context)
        for ctx, target in zip(contexts, targets):
            logits = forward_logits(model, ctx)
            logp = log_softmax(logits)
            nll -= logp[target]
            hits += int(np.argmax(logits) == target)
            total += 1
    accuracy = hits / total
    perplexity = math.exp(nll / total)
    return accuracy, perplexity


def _write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CorruptFileError("unexpected end of checkpoint file")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def save_model(model: ToyModel, path: str | Path) -> None:
    """Write an IFTM checkpoint (header, shape table, float32 LE params)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        _write_str(fh, model.tokenizer_id)
        s = model.shapes
        fh.write(struct.pack("<IIII", s.context, s.embed_dim, s.hidden, s.vocab))
        fh.write(struct.pack("<Q", s.param_count))
        fh.write(model.params.astype("<f4").tobytes())


def load_model(path: str | Path) -> ToyModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CorruptFileError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")
        tokenizer_id = _read_str(fh)
        context, embed_dim, hidden, vocab = struct.unpack("<IIII", _read_exact(fh, 16))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        shapes = ModelShapes(vocab=vocab, embed_dim=embed_dim, context=context, hidden=hidden)
        if count != shapes.param_count:
            raise CorruptFileError(f"{path}: parameter count does not match shape table")
        raw = _read_exact(fh, 4 * count)
        params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ToyModel(params, shapes, tokenizer_id)
