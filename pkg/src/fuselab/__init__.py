"""fuselab: a desk-scale laboratory for multi-teacher model fusion.

Tiny language models with deliberately mismatched vocabularies, every
distillation objective with hand-derived gradients, weight-space merging,
offline teacher caches, and training pipelines -- each component verified
against independent oracles in the test suite.
"""

__version__ = "0.1.0"

from . import losses, merging, numerics, pipeline, teachercache, toylab

__all__ = ["losses", "merging", "numerics", "pipeline", "teachercache", "toylab", "__version__"]
