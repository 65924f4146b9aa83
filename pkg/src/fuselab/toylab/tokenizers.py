"""Deliberately mismatched toy tokenizers.

All corpora are written over a fixed 24-character alphabet. Mismatch between
models is realized two ways:

* different symbol orderings and vocabulary sizes (pure label mismatch), and
* different merge granularity (character vs greedy bigram merges), which
  yields different sequence lengths for the same text and forces the
  timestep-alignment path in the sequence losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TokenizationError

# Every corpus string draws from these 24 symbols. '_' never occurs inside a
# sample; it is reserved for left-padding context windows.
PAD_CHAR = "_"
BASE_ALPHABET = "0123456789abcdef+%=?:;|" + PAD_CHAR

# Filler symbols used only to inflate a vocabulary beyond the base alphabet.
_FILLERS = "ghijklmnopqrstuv"


@dataclass(frozen=True)
class Tokenizer:
    """Symbol-table tokenizer with a maximum of ``arity`` characters per token.

    ``arity == 1`` is plain character lookup. ``arity == 2`` additionally owns
    a fixed set of two-character merge tokens applied greedily left to right;
    decode is the concatenation of token strings, so round trips are lossless
    by construction.
    """

    name: str
    vocab: tuple[str, ...]
    arity: int = 1
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _merges: frozenset[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError(f"tokenizer {self.name!r} has duplicate vocab symbols")
        if self.arity not in (1, 2):
            raise ValueError("arity must be 1 or 2")
        if PAD_CHAR not in self.vocab:
            raise ValueError(f"tokenizer {self.name!r} lacks the pad symbol {PAD_CHAR!r}")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.vocab)})
        object.__setattr__(
            self, "_merges", frozenset(s for s in self.vocab if len(s) == 2)
        )

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self._index[PAD_CHAR]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            if self.arity == 2 and text[i : i + 2] in self._merges:
                ids.append(self._index[text[i : i + 2]])
                i += 2
                continue
            ch = text[i]
            tok = self._index.get(ch)
            if tok is None:
                raise TokenizationError(
                    f"tokenizer {self.name!r} cannot encode {ch!r} in {text!r}"
                )
            ids.append(tok)
            i += 1
        return ids

    def decode(self, ids: list[int] | np.ndarray) -> str:
        try:
            return "".join(self.vocab[int(i)] for i in ids)
        except IndexError as exc:
            raise TokenizationError(f"token id out of range for {self.name!r}") from exc


def _char32() -> Tokenizer:
    # base alphabet in canonical order, padded with unused fillers to V=32
    return Tokenizer("char32", tuple(BASE_ALPHABET) + tuple(_FILLERS[:8]), arity=1)


def _shufchar24() -> Tokenizer:
    # same 24 symbols, order shuffled by a fixed permutation: label mismatch only
    perm = np.random.default_rng(7).permutation(len(BASE_ALPHABET))
    return Tokenizer("shufchar24", tuple(BASE_ALPHABET[i] for i in perm), arity=1)


def _bigram40() -> Tokenizer:
    # 24 single chars plus 16 fixed digit-pair merges; greedy longest match
    merges = tuple(a + b for a in "0123" for b in "0123")
    return Tokenizer("bigram40", tuple(BASE_ALPHABET) + merges, arity=2)


_BUILTIN = {t.name: t for t in (_char32(), _shufchar24(), _bigram40())}
_REGISTRY: dict[str, Tokenizer] = dict(_BUILTIN)


def get_tokenizer(name: str) -> Tokenizer:
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise KeyError(f"unknown tokenizer {name!r} (known: {known})") from None


def register_tokenizer(tok: Tokenizer) -> Tokenizer:
    """Register a custom tokenizer (used by tests and bespoke experiments)."""
    _REGISTRY[tok.name] = tok
    return tok


def builtin_tokenizers() -> tuple[str, ...]:
    return tuple(sorted(_BUILTIN))


def vocabularies_mismatch(a: Tokenizer, b: Tokenizer) -> bool:
    """True when the two tokenizers differ in size or symbol order.

    Fusion experiments require this; distilling between identical
    vocabularies would bypass the cross-vocabulary machinery entirely.
    """
    return a.vocab != b.vocab
