"""Embedding-space data curation with desk-scale self-supervised training kernels."""

from .embeddings import EmbeddingSet, l2_normalize, read_emb, write_emb
from .errors import CurateError, PipelineError

__all__ = ["CurateError", "EmbeddingSet", "PipelineError", "l2_normalize", "read_emb", "write_emb"]
__version__ = "0.1.0"
