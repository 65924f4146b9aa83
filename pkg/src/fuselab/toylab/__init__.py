"""Toy laboratory: mismatched tokenizers, synthetic corpora, tiny models."""

from .corpus import TASKS, Corpus, Sample, gen_corpus, load_samples, make_sample, mixed_corpus, save_samples
from .model import (
    ModelShapes,
    ToyModel,
    backward_from_logit_grad,
    evaluate,
    forward_logits,
    init_model,
    load_model,
    response_contexts,
    save_model,
    zero_model,
)
from .tokenizers import (
    BASE_ALPHABET,
    PAD_CHAR,
    Tokenizer,
    builtin_tokenizers,
    get_tokenizer,
    register_tokenizer,
    vocabularies_mismatch,
)

__all__ = [
    "TASKS",
    "Corpus",
    "Sample",
    "gen_corpus",
    "load_samples",
    "make_sample",
    "mixed_corpus",
    "save_samples",
    "ModelShapes",
    "ToyModel",
    "backward_from_logit_grad",
    "evaluate",
    "forward_logits",
    "init_model",
    "load_model",
    "response_contexts",
    "save_model",
    "zero_model",
    "BASE_ALPHABET",
    "PAD_CHAR",
    "Tokenizer",
    "builtin_tokenizers",
    "get_tokenizer",
    "register_tokenizer",
    "vocabularies_mismatch",
]
