"""Exact cosine-similarity retrieval over a frozen matrix of unit-norm image embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, IngestionError, NormalizationError

log = logging.getLogger(__name__)

DEFAULT_M = 8


@dataclass(frozen=True, eq=False)
class ImageIndex:
    ids: tuple
    matrix: np.ndarray
    frozen: bool = True

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def position(self, image_id) -> int:
        try:
            return self._positions[image_id]
        except KeyError:
            raise EvaluationError(f"image id {image_id!r} is not in the index") from None

    @property
    def _positions(self) -> dict:
        cached = self.__dict__.get("_pos")
        if cached is None:
            cached = {k: i for i, k in enumerate(self.ids)}
            object.__setattr__(self, "_pos", cached)
        return cached


@dataclass(frozen=True)
class RetrievalResult:
    entries: tuple  # ((image_id, score), ...)
    query_id: object = None

    @property
    def ids(self) -> list:
        return [e[0] for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e[1] for e in self.entries]


def build_index(embeddings: Iterable[tuple[object, Sequence[float]]]) -> ImageIndex:
    """Normalize each ``(id, vector)`` to unit length and freeze the result."""
    items = list(embeddings)
    if not items:
        raise IngestionError("cannot build an index from no embeddings")
    ids = tuple(i for i, _ in items)
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise IngestionError(f"duplicate image id {dup!r}")
    dims = {len(v) for _, v in items}
    if len(dims) != 1:
        raise IngestionError(f"embeddings have differing dimensions {sorted(dims)}")
    mat = np.array([np.asarray(v, dtype=np.float64) for _, v in items])
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise NormalizationError(f"zero vector for image id {ids[zero[0]]!r}")
    mat = mat / norms
    mat.flags.writeable = False
    return ImageIndex(ids=ids, matrix=mat, frozen=True)


def top_m_positions(scores: np.ndarray, m: int) -> np.ndarray:
    """Positions of the ``m`` largest scores, descending, ties by ascending position."""
    n = scores.shape[0]
    if m >= n:
        return np.lexsort((np.arange(n), -scores))
    part = np.argpartition(-scores, m - 1)[:m]
    threshold = scores[part].min()
    cand = np.flatnonzero(scores >= threshold)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:m]]


def _check_query(q: np.ndarray, index: ImageIndex) -> np.ndarray:
    if not index.frozen:
        raise ContractError("index must be frozen before querying")
    if q.shape[-1] != index.dim:
        raise ContractError(f"query dimension {q.shape[-1]} does not match index dimension {index.dim}")
    return q


def retrieve_top_m(query, index: ImageIndex, m: int = DEFAULT_M, query_id=None) -> RetrievalResult:
    """Exact top-``m`` images by cosine similarity; returns all images when ``m`` exceeds the index size."""
    if m < 1:
        raise ContractError("m must be a positive integer")
    q = np.asarray(getattr(query, "data", query), dtype=np.float64).reshape(-1)
    _check_query(q, index)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise NormalizationError("zero query vector")
    if m > index.size:
        log.warning("index holds %d images, fewer than m=%d; returning all", index.size, m)
    scores = index.matrix @ (q / norm)
    pos = top_m_positions(scores, m)
    return RetrievalResult(tuple((index.ids[i], float(scores[i])) for i in pos), query_id)


def retrieve_batch(queries: np.ndarray, index: ImageIndex, m: int = DEFAULT_M,
                   query_ids: Sequence | None = None) -> list[RetrievalResult]:
    q = np.asarray(queries, dtype=np.float64)
    _check_query(q, index)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("zero query vector")
    if m > index.size:
        log.warning("index holds %d images, fewer than m=%d; returning all", index.size, m)
    scores = (q / norms) @ index.matrix.T
    qids = query_ids if query_ids is not None else [None] * len(q)
    results = []
    for row, qid in zip(scores, qids):
        pos = top_m_positions(row, m)
        results.append(RetrievalResult(tuple((index.ids[i], float(row[i])) for i in pos), qid))
    return results


def recall_at_k(eval_pairs: Sequence[tuple[object, object]], index: ImageIndex, k: int) -> float:
    """Fraction of ``(query_vector, gold_id)`` pairs whose gold id is in the top ``k``."""
    if not eval_pairs:
        raise EvaluationError("no evaluation pairs")
    golds = [g for _, g in eval_pairs]
    for g in golds:
        index.position(g)
    queries = np.array([np.asarray(getattr(q, "data", q), dtype=np.float64).reshape(-1) for q, _ in eval_pairs])
    results = retrieve_batch(queries, index, k)
    hits = sum(1 for r, g in zip(results, golds) if g in r.ids)
    return hits / len(eval_pairs)


def format_tsv(results: Sequence[RetrievalResult]) -> str:
    """``query_id<TAB>rank<TAB>image_id<TAB>score`` lines; ranks start at 1."""
    lines = []
    for r in results:
        for rank, (image_id, score) in enumerate(r.entries, start=1):
            lines.append(f"{r.query_id}\t{rank}\t{image_id}\t{score!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tsv(text: str) -> dict:
    """Inverse of :func:`format_tsv`: query id -> [(image id, score), ...] in rank order."""
    out: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise IngestionError(f"line {n}: expected 4 tab-separated fields, got {len(parts)}")
        qid, rank, image_id, score = parts
        out.setdefault(qid, []).append((int(rank), image_id, float(score)))
    return {q: [(i, s) for _, i, s in sorted(rows)] for q, rows in out.items()}
