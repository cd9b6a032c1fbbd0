"""Pretrained word vectors and the fixed (non-trainable) fact embedding.

A fact embeds as the concatenation of the averaged word vectors of its
subject and of its object, giving a vector of length ``2 * dim`` that never
changes during training. The whole knowledge base is embedded once into a
dense matrix for batched cosine ranking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, LoadError
from .kb import Fact, KnowledgeBase
from .text import tokenize  # re-exported: tokenization is part of this module's API

__all__ = [
    "tokenize",
    "WordVectorTable",
    "load_vectors",
    "phrase_embedding",
    "fact_embedding",
    "FactMatrix",
]

logger = logging.getLogger(__name__)

Array = np.ndarray


class WordVectorTable:
    """token -> fixed dense vector, all of one dimension."""

    def __init__(self, dim: int, vectors: dict[str, Array] | None = None):
        self.dim = int(dim)
        self.vectors: dict[str, Array] = vectors or {}
        self.duplicate_count = 0
        self.oov_phrase_count = 0  # diagnostic: phrases that embedded to zero

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __getitem__(self, token: str) -> Array:
        return self.vectors[token]


def load_vectors(path: str | Path, dim: int) -> WordVectorTable:
    """Load ``token v1 ... v_dim`` rows; wrong arity is a load error.

    A repeated token overwrites the earlier row (last write wins) and is
    counted on the returned table.
    """
    path = Path(path)
    table = WordVectorTable(dim)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise LoadError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            token = parts[0]
            if token in table.vectors:
                table.duplicate_count += 1
                logger.warning("%s:%d: duplicate token %r, keeping the later row", path, lineno, token)
            try:
                vec = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-numeric vector component") from None
            table.vectors[token] = vec
    return table


def phrase_embedding(phrase: str, table: WordVectorTable) -> Array:
    """Mean vector of the phrase's in-vocabulary tokens.

    Out-of-vocabulary tokens are skipped; if every token is unknown the
    result is the zero vector and the table's OOV counter is bumped. A
    phrase with no tokens at all is degenerate.
    """
    tokens = tokenize(phrase)
    if not tokens:
        raise DegenerateInputError(f"phrase {phrase!r} has no tokens")
    known = [table.vectors[t] for t in tokens if t in table.vectors]
    if not known:
        table.oov_phrase_count += 1
        logger.warning("phrase %r is fully out of vocabulary", phrase)
        return np.zeros(table.dim)
    return np.mean(known, axis=0)


def fact_embedding(fact: Fact, table: WordVectorTable) -> Array:
    """Fixed fact vector: subject average concatenated with object average.

    The relation does not participate, so facts differing only in relation
    embed identically.
    """
    return np.concatenate([phrase_embedding(fact.subject, table), phrase_embedding(fact.obj, table)])


@dataclass
class FactMatrix:
    """Dense (num_facts x 2*dim) embedding of a whole knowledge base."""

    fact_ids: list[str]
    rows: Array
    norms: Array
    row_of: dict[str, int]

    @classmethod
    def from_rows(cls, fact_ids: list[str], rows: Array) -> "FactMatrix":
        # per-row scalar norms so ranked scores reproduce single-pair cosines
        # bitwise (the axis-wise reduction differs in the last ulp)
        norms = np.array([np.linalg.norm(r) for r in rows])
        return cls(fact_ids=list(fact_ids), rows=rows, norms=norms,
                   row_of={fid: i for i, fid in enumerate(fact_ids)})

    @classmethod
    def build(cls, kb: KnowledgeBase, table: WordVectorTable) -> "FactMatrix":
        facts = kb.facts()
        rows = np.zeros((len(facts), 2 * table.dim))
        for i, f in enumerate(facts):
            rows[i] = fact_embedding(f, table)
        return cls.from_rows([f.fact_id for f in facts], rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row(self, fact_id: str) -> Array:
        return self.rows[self.row_of[fact_id]]

    def gather(self, fact_ids) -> Array:
        """Rows for a sequence (or nested sequence) of fact ids."""
        idx = np.asarray(
            [[self.row_of[f] for f in row] for row in fact_ids]
            if fact_ids and isinstance(fact_ids[0], (list, tuple))
            else [self.row_of[f] for f in fact_ids],
            dtype=np.intp,
        )
        return self.rows[idx]
