"""Gradient direction matrices and the gradient-diversity selection objective.

The central object is a dense matrix whose columns are per-sample loss
gradients normalized to unit Euclidean length.  Replay selection minimizes the
sum of pairwise cosine similarities over the chosen columns, either directly on
a discrete subset or through its quadratic form on fractional weights.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-9

_GSET_MAGIC = b"GSET"


class EmptyGradientSetError(ValueError):
    """All gradient columns had zero norm; nothing to select from."""


class UnknownSampleError(KeyError):
    """A sample id does not belong to the gradient set."""


@dataclass(frozen=True)
class GradientSet:
    """Unit-norm gradient columns with aligned sample ids.

    ``columns`` is dim x count; every column has unit Euclidean norm.
    ``dropped_ids`` records samples excluded for having a zero gradient.
    """

    columns: np.ndarray
    sample_ids: tuple[str, ...]
    dropped_ids: tuple[str, ...] = ()

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "dropped_ids", tuple(self.dropped_ids))
        if cols.ndim != 2 or cols.shape[0] < 1 or cols.shape[1] < 1:
            raise ValueError(f"need a d x n matrix with d, n >= 1, got shape {cols.shape}")
        if len(self.sample_ids) != cols.shape[1]:
            raise ValueError("sample_ids must align with columns")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample_ids must be unique")
        norms = np.linalg.norm(cols, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("every column must have unit Euclidean norm")

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def count(self) -> int:
        return self.columns.shape[1]

    def index_of(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise UnknownSampleError(sample_id) from None

    def to_bytes(self) -> bytes:
        """Flat binary blob: magic, u32 d, u32 n, column-major f64s, ids."""
        parts = [_GSET_MAGIC, struct.pack("<II", self.dim, self.count)]
        parts.append(np.asfortranarray(self.columns).tobytes(order="F"))
        for sid in self.sample_ids:
            raw = sid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GradientSet":
        if blob[:4] != _GSET_MAGIC:
            raise ValueError("bad magic, not a gradient-set blob")
        d, n = struct.unpack_from("<II", blob, 4)
        off = 12
        end = off + 8 * d * n
        cols = np.frombuffer(blob[off:end], dtype="<f8").reshape((d, n), order="F")
        off = end
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            ids.append(blob[off:off + ln].decode("utf-8"))
            off += ln
        return cls(cols.copy(), tuple(ids))


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric matrix of pairwise cosine similarities, diagonal optionally zeroed."""

    values: np.ndarray
    zero_diagonal: bool

    def __post_init__(self):
        q = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", q)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("Gram matrix must be square")
        if np.max(np.abs(q - q.T)) > 1e-9:
            raise ValueError("Gram matrix must be symmetric")
        diag = np.diag(q)
        if self.zero_diagonal:
            if np.any(diag != 0.0):
                raise ValueError("zero_diagonal set but diagonal is nonzero")
        elif np.any(np.abs(diag - 1.0) > 1e-9):
            raise ValueError("diagonal of a cosine Gram matrix must be 1")
        if np.any(np.abs(q) > 1.0 + 1e-9):
            raise ValueError("cosine similarities must lie in [-1, 1]")

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SelectionWeights:
    """Fractional selection vector on the capped simplex {x in [0,1]^n, sum = budget}."""

    values: np.ndarray
    budget: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1:
            raise ValueError("weights must be a vector")
        if not (1 <= self.budget <= v.size):
            raise ValueError(f"budget {self.budget} out of range for n={v.size}")
        if np.any(v < -1e-7) or np.any(v > 1.0 + 1e-7):
            raise ValueError("weights must lie in [0, 1]")
        if abs(float(v.sum()) - self.budget) > 1e-6:
            raise ValueError("weights must sum to the budget")


@dataclass(frozen=True)
class ReplaySelection:
    """The discrete replay buffer choice: a set of sample ids."""

    chosen: frozenset

    def __post_init__(self):
        object.__setattr__(self, "chosen", frozenset(self.chosen))

    def __len__(self) -> int:
        return len(self.chosen)


def normalize_columns(raw_gradients, ids) -> GradientSet:
    """Divide each column by its Euclidean norm; drop zero-norm columns.

    Zero loss gradients carry no diversity information, so the affected ids
    are recorded as dropped rather than perturbed.
    """
    raw = np.asarray(raw_gradients, dtype=np.float64)
    ids = tuple(ids)
    if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ValueError(f"need a d x n matrix with d, n >= 1, got shape {raw.shape}")
    if len(ids) != raw.shape[1]:
        raise ValueError("ids must align with columns")
    norms = np.linalg.norm(raw, axis=0)
    keep = norms > 0.0
    if not np.any(keep):
        raise EmptyGradientSetError("all gradient columns have zero norm")
    cols = raw[:, keep] / norms[keep]
    kept_ids = tuple(i for i, k in zip(ids, keep) if k)
    dropped = tuple(i for i, k in zip(ids, keep) if not k)
    return GradientSet(cols, kept_ids, dropped)


def gram(g: GradientSet, zero_diagonal: bool) -> GramMatrix:
    """Pairwise cosine similarity matrix, optionally with the diagonal zeroed."""
    q = g.columns.T @ g.columns
    q = 0.5 * (q + q.T)
    np.clip(q, -1.0, 1.0, out=q)
    if zero_diagonal:
        np.fill_diagonal(q, 0.0)
    else:
        np.fill_diagonal(q, 1.0)
    return GramMatrix(q, zero_diagonal)


def objective_discrete(g: GradientSet, chosen, include_diagonal: bool) -> float:
    """Sum of pairwise cosine similarities over the chosen set (both orders).

    With the diagonal included the i = j terms contribute exactly |chosen|.
    """
    if isinstance(chosen, ReplaySelection):
        chosen = chosen.chosen
    idx = np.array(sorted(g.index_of(c) for c in chosen), dtype=np.intp)
    sub = g.columns[:, idx]
    q = sub.T @ sub
    total = float(q.sum())
    if not include_diagonal:
        total -= float(np.trace(q))
    return total


def objective_relaxed(q: GramMatrix, x: SelectionWeights) -> float:
    """Quadratic form x^T Q x of the relaxed selection objective."""
    if q.size != x.values.size:
        raise ValueError("dimension mismatch between Gram matrix and weights")
    return float(x.values @ q.values @ x.values)


def round_top_n(x: SelectionWeights, ids) -> ReplaySelection:
    """Keep the ids of the N largest weights; ties broken by ascending index."""
    ids = tuple(ids)
    if len(ids) != x.values.size:
        raise ValueError("ids must align with weights")
    order = np.argsort(-x.values, kind="stable")
    top = order[: x.budget]
    return ReplaySelection(frozenset(ids[i] for i in top))
