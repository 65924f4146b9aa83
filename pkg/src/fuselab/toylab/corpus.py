"""Synthetic instruction-response corpora over three toy domains.

Tasks:

* ``math-mod``     -- "a+b%m=" answered by (a+b) mod m
* ``copy-reverse`` -- "payload|" answered by the reversed payload
* ``kv-lookup``    -- "k:vv;k:vv;k:vv?k=" answered by the queried value

Generation is deterministic in (task, n_samples, seed), instructions are
unique within a corpus, and each corpus is split 8:2 into train and test.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import UnknownTaskError

TASKS = ("math-mod", "copy-reverse", "kv-lookup")

_TASK_CODE = {task: i for i, task in enumerate(TASKS)}


@dataclass(frozen=True)
class Sample:
    """One instruction-response pair; regions are contiguous and disjoint."""

    sid: str
    domain: str
    instruction: str
    response: str


@dataclass(frozen=True)
class Corpus:
    task: str
    train: tuple[Sample, ...]
    test: tuple[Sample, ...]

    @property
    def all_samples(self) -> tuple[Sample, ...]:
        return self.train + self.test


def _sample_id(domain: str, instruction: str, response: str) -> str:
    digest = hashlib.sha1(
        f"{domain}\t{instruction}\t{response}".encode("utf-8")
    ).hexdigest()
    return f"{domain}:{digest[:12]}"


def make_sample(domain: str, instruction: str, response: str) -> Sample:
    return Sample(_sample_id(domain, instruction, response), domain, instruction, response)


def _gen_math_mod(rng: np.random.Generator) -> tuple[str, str]:
    a = int(rng.integers(0, 100))
    b = int(rng.integers(0, 100))
    m = int(rng.integers(2, 10))
    return f"{a}+{b}%{m}=", str((a + b) % m)


_PAYLOAD_CHARS = "0123456789abcdef"


def _gen_copy_reverse(rng: np.random.Generator) -> tuple[str, str]:
    length = int(rng.integers(3, 9))
    payload = "".join(rng.choice(list(_PAYLOAD_CHARS), size=length))
    return f"{payload}|", payload[::-1]


def _gen_kv_lookup(rng: np.random.Generator) -> tuple[str, str]:
    keys = rng.choice(list("abcdef"), size=3, replace=False)
    values = [f"{int(rng.integers(0, 100)):02d}" for _ in keys]
    query = int(rng.integers(0, 3))
    pairs = ";".join(f"{k}:{v}" for k, v in zip(keys, values))
    return f"{pairs}?{keys[query]}=", values[query]


_GENERATORS = {
    "math-mod": _gen_math_mod,
    "copy-reverse": _gen_copy_reverse,
    "kv-lookup": _gen_kv_lookup,
}


def gen_corpus(task: str, n_samples: int, seed: int) -> Corpus:
    """Generate a deterministic corpus and split it 8:2 into train/test."""
    if task not in _GENERATORS:
        raise UnknownTaskError(f"unknown task {task!r}; expected one of {TASKS}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TASK_CODE[task]]))
    gen = _GENERATORS[task]
    samples: list[Sample] = []
    seen: set[str] = set()
    while len(samples) < n_samples:
        instruction, response = gen(rng)
        if instruction in seen:
            continue
        seen.add(instruction)
        samples.append(make_sample(task, instruction, response))
    n_train = (n_samples * 8) // 10
    return Corpus(task, tuple(samples[:n_train]), tuple(samples[n_train:]))


def mixed_corpus(corpora: list[Corpus] | tuple[Corpus, ...]) -> Corpus:
    """Concatenate several single-domain corpora into one mixed corpus."""
    train: list[Sample] = []
    test: list[Sample] = []
    for c in corpora:
        train.extend(c.train)
        test.extend(c.test)
    return Corpus("mixed", tuple(train), tuple(test))


def save_samples(samples: tuple[Sample, ...] | list[Sample], path: str | Path) -> None:
    """Write line-delimited ``domain TAB instruction TAB response`` UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(f"{s.domain}\t{s.instruction}\t{s.response}\n")


def load_samples(path: str | Path) -> tuple[Sample, ...]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            samples.append(make_sample(*parts))
    return tuple(samples)
