"""Offline extraction and storage of per-sample source-model logits.

Fusion training reads teacher logits from these files instead of re-running
source models. The IFTC container is little-endian, CRC-protected per
record, carries an index footer for O(1) lookup by sample id, and is
byte-identical when rewritten from the same inputs (see docs/formats.md).

Two payload modes exist: ``full`` stores every logit (toy vocabularies are
small); ``topk`` stores only the K largest values, their token ids, and the
log-sum-exp of the remaining tail, mirroring the compression one would need
at real scale. Reading a top-K record reconstructs a surrogate frame whose
selected logits are exact and whose tail mass is spread evenly.

Writes are single-writer; records are immutable afterwards, so any number
of readers may share a file.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CorruptFileError, SampleNotFoundError
from .toylab import Sample, ToyModel, forward_logits, get_tokenizer, response_contexts

CACHE_MAGIC = b"IFTC"
CACHE_TAIL_MAGIC = b"CTFI"
CACHE_VERSION = 1

MODE_FULL = 0
MODE_TOPK = 1
_MODE_NAMES = {"full": MODE_FULL, "topk": MODE_TOPK}


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class CacheSummary(NamedTuple):
    records: int
    bytes_written: int


@dataclass
class CacheRecord:
    """Per-timestep source logits for one sample."""

    sample_id: str
    model_id: str
    vocab: int
    mode: int
    values: np.ndarray  # full: (T, V) f32; topk: (T, K) f32
    indices: np.ndarray | None = None  # topk only: (T, K) u32
    tail_lse: np.ndarray | None = None  # topk only: (T,) f32

    @property
    def timesteps(self) -> int:
        return self.values.shape[0]

    def frames(self) -> list[np.ndarray]:
        """Float64 logit frames, one per response timestep.

        Top-K records yield surrogate frames: the stored logits are placed
        at their token ids and every unselected token gets an equal share of
        the stored tail mass, so top-K' selection with K' <= K is exact.
        """
        if self.mode == MODE_FULL:
            return [row.astype(np.float64) for row in self.values]
        assert self.indices is not None and self.tail_lse is not None
        out = []
        k = self.values.shape[1]
        n_tail = self.vocab - k
        for t in range(self.timesteps):
            if n_tail > 0:
                filler = float(self.tail_lse[t]) - math.log(n_tail)
                frame = np.full(self.vocab, filler)
            else:
                frame = np.zeros(self.vocab)
            frame[self.indices[t]] = self.values[t].astype(np.float64)
            out.append(frame)
        return out


class CacheWriter:
    """Streams records into an IFTC file; single writer, then immutable."""

    def __init__(self, path: str | Path, model_id: str, vocab: int, mode: str = "full", k: int = 0):
        if mode not in _MODE_NAMES:
            raise ValueError(f"unknown cache mode {mode!r}")
        if mode == "topk" and not 1 <= k:
            raise ValueError("topk mode requires k >= 1")
        self._mode = _MODE_NAMES[mode]
        self._k = min(k, vocab) if mode == "topk" else 0
        self._vocab = vocab
        self._fh = open(path, "wb")
        self._index: list[tuple[str, int]] = []
        self._seen: set[str] = set()
        self._fh.write(CACHE_MAGIC)
        self._fh.write(struct.pack("<HB", CACHE_VERSION, self._mode))
        self._fh.write(_pack_str(model_id))
        self._fh.write(struct.pack("<II", vocab, self._k))

    def add(self, sample_id: str, logits: np.ndarray) -> None:
        """Store one sample's (T, V) float logits (rounded to float32)."""
        if sample_id in self._seen:
            raise ValueError(f"duplicate sample id {sample_id!r}")
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != self._vocab:
            raise ValueError(f"expected (T, {self._vocab}) logits, got {logits.shape}")
        if logits.shape[0] < 1:
            raise ValueError("a record needs at least one timestep")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        if self._mode == MODE_FULL:
            payload = logits.astype("<f4").tobytes()
        else:
            rows_v, rows_i, rows_t = [], [], []
            for row in logits:
                order = np.argsort(-row, kind="stable")[: self._k]
                rows_v.append(row[order])
                rows_i.append(order)
                tail = np.delete(row, order)
                if tail.size:
                    m = float(np.max(tail))
                    rows_t.append(m + math.log(float(np.sum(np.exp(tail - m)))))
                else:
                    rows_t.append(-math.inf)
            payload = (
                np.asarray(rows_v).astype("<f4").tobytes()
                + np.asarray(rows_i).astype("<u4").tobytes()
                + np.asarray(rows_t).astype("<f4").tobytes()
            )
        offset = self._fh.tell()
        self._fh.write(_pack_str(sample_id))
        self._fh.write(struct.pack("<II", logits.shape[0], len(payload)))
        self._fh.write(payload)
        self._fh.write(struct.pack("<I", zlib.crc32(payload)))
        self._index.append((sample_id, offset))
        self._seen.add(sample_id)

    def close(self) -> CacheSummary:
        footer_offset = self._fh.tell()
        for sample_id, offset in self._index:
            self._fh.write(_pack_str(sample_id))
            self._fh.write(struct.pack("<Q", offset))
        self._fh.write(struct.pack("<QI", footer_offset, len(self._index)))
        self._fh.write(CACHE_TAIL_MAGIC)
        size = self._fh.tell()
        self._fh.close()
        return CacheSummary(len(self._index), size)

    def __enter__(self) -> "CacheWriter":
        return self

    def __exit__(self, *exc) -> None:
        if not self._fh.closed:
            self.close()


class CacheReader:
    """Random access into an IFTC file via its index footer."""

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._fh = open(path, "rb")
        try:
            self._parse()
        except CorruptFileError:
            self._fh.close()
            raise

    def _read_exact(self, n: int) -> bytes:
        raw = self._fh.read(n)
        if len(raw) != n:
            raise CorruptFileError(f"{self._path}: truncated cache file")
        return raw

    def _read_str(self) -> str:
        (n,) = struct.unpack("<H", self._read_exact(2))
        return self._read_exact(n).decode("utf-8")

    def _parse(self) -> None:
        if self._read_exact(4) != CACHE_MAGIC:
            raise CorruptFileError(f"{self._path}: bad cache magic")
        version, mode = struct.unpack("<HB", self._read_exact(3))
        if version != CACHE_VERSION:
            raise CorruptFileError(f"{self._path}: unsupported cache version {version}")
        if mode not in (MODE_FULL, MODE_TOPK):
            raise CorruptFileError(f"{self._path}: unknown cache mode {mode}")
        self.mode = mode
        self.model_id = self._read_str()
        self.vocab, self.k = struct.unpack("<II", self._read_exact(8))
        self._fh.seek(0, 2)
        end = self._fh.tell()
        if end < 16:
            raise CorruptFileError(f"{self._path}: file too short for a footer")
        self._fh.seek(end - 16)
        footer_offset, count = struct.unpack("<QI", self._read_exact(12))
        if self._read_exact(4) != CACHE_TAIL_MAGIC:
            raise CorruptFileError(f"{self._path}: bad cache tail magic")
        if footer_offset > end - 16:
            raise CorruptFileError(f"{self._path}: footer offset out of range")
        self._fh.seek(footer_offset)
        self._offsets: dict[str, int] = {}
        for _ in range(count):
            sid = self._read_str()
            (offset,) = struct.unpack("<Q", self._read_exact(8))
            self._offsets[sid] = offset

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(self._offsets)

    def __len__(self) -> int:
        return len(self._offsets)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._offsets

    def read(self, sample_id: str) -> CacheRecord:
        if sample_id not in self._offsets:
            raise SampleNotFoundError(f"{self._path}: no record for {sample_id!r}")
        self._fh.seek(self._offsets[sample_id])
        stored_sid = self._read_str()
        if stored_sid != sample_id:
            raise CorruptFileError(f"{self._path}: index points at {stored_sid!r}")
        timesteps, payload_len = struct.unpack("<II", self._read_exact(8))
        payload = self._read_exact(payload_len)
        (crc,) = struct.unpack("<I", self._read_exact(4))
        if zlib.crc32(payload) != crc:
            raise CorruptFileError(f"{self._path}: CRC mismatch for {sample_id!r}")
        if self.mode == MODE_FULL:
            values = np.frombuffer(payload, dtype="<f4").reshape(timesteps, self.vocab)
            return CacheRecord(sample_id, self.model_id, self.vocab, self.mode, values)
        k = self.k
        v_bytes = timesteps * k * 4
        values = np.frombuffer(payload[:v_bytes], dtype="<f4").reshape(timesteps, k)
        indices = np.frombuffer(payload[v_bytes : 2 * v_bytes], dtype="<u4").reshape(timesteps, k)
        tail = np.frombuffer(payload[2 * v_bytes :], dtype="<f4")
        return CacheRecord(sample_id, self.model_id, self.vocab, self.mode, values, indices, tail)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CacheReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def extract_cache(
    source: ToyModel,
    samples: Sequence[Sample],
    out_path: str | Path,
    model_id: str = "",
    mode: str = "full",
    k: int = 0,
) -> CacheSummary:
    """Run the source over every sample's response region and store logits.

    One record per sample, covering response timesteps only. Re-running
    with identical inputs produces byte-identical files.
    """
    tokenizer = get_tokenizer(source.tokenizer_id)
    writer = CacheWriter(
        out_path,
        model_id or source.tokenizer_id,
        source.shapes.vocab,
        mode=mode,
        k=k,
    )
    for sample in samples:
        contexts, _ = response_contexts(tokenizer, sample, source.shapes.context)
        logits = np.stack([forward_logits(source, ctx) for ctx in contexts])
        writer.add(sample.sid, logits)
    return writer.close()


def read_cache(path: str | Path, sample_id: str) -> CacheRecord:
    """One-shot record lookup; opens the file, seeks via the footer index."""
    with CacheReader(path) as reader:
        return reader.read(sample_id)
