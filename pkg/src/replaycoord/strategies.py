"""Uncoordinated replay-selection strategies.

Three random baselines (naive uniform, approximation of uniform, fixed
proportion), a greedy gradient-diversity heuristic, and the relaxation-based
selector in its convex (diagonal kept) and non-convex (diagonal zeroed)
variants.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .gradients import GradientSet, ReplaySelection, gram, round_top_n
from .qp import QpProblem, SolverOptions, solve

RANDOM_KINDS = ("naive_uniform", "approx_uniform", "fixed_proportion")
GRADIENT_KINDS = ("greedy_gss", "relaxed_convex", "relaxed_nonconvex")
KINDS = RANDOM_KINDS + GRADIENT_KINDS


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "fixed_proportion":
            if self.p is None or not (0.0 < self.p < 1.0):
                raise ValueError("fixed_proportion requires p in (0, 1)")
        elif self.p is not None:
            raise ValueError("p is only valid for fixed_proportion")


@dataclass(frozen=True)
class BufferUpdateInput:
    """One client's pool for a buffer update: this period's data plus the old buffer."""

    new_data_ids: tuple[str, ...]
    buffer_ids: tuple[str, ...]
    budget: int
    gradients: GradientSet | None = None

    def __post_init__(self):
        object.__setattr__(self, "new_data_ids", tuple(self.new_data_ids))
        object.__setattr__(self, "buffer_ids", tuple(self.buffer_ids))
        if set(self.new_data_ids) & set(self.buffer_ids):
            raise ValueError("new data ids and buffer ids must be disjoint")
        if self.budget < 1:
            raise ValueError("budget must be positive")

    @property
    def n_new(self) -> int:
        return len(self.new_data_ids)

    @property
    def n_old(self) -> int:
        return len(self.buffer_ids)

    @property
    def pool(self) -> tuple[str, ...]:
        return self.new_data_ids + self.buffer_ids


def derive_rng(seed: int, client_id: str = "", salt: int = 0) -> np.random.Generator:
    """Deterministic per-client random source: master seed xor a stable id hash."""
    digest = hashlib.blake2b(client_id.encode("utf-8"), digest_size=8).digest()
    mixed = (seed ^ int.from_bytes(digest, "little") ^ salt) & 0xFFFFFFFFFFFFFFFF
    return np.random.default_rng(mixed)


def _sample(ids, k: int, rng: np.random.Generator) -> list:
    if k >= len(ids):
        return list(ids)
    picked = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in picked]


def select_naive_uniform(inp: BufferUpdateInput, rng: np.random.Generator) -> ReplaySelection:
    """Uniform sample without replacement from the whole pool."""
    k = min(inp.budget, len(inp.pool))
    return ReplaySelection(frozenset(_sample(inp.pool, k, rng)))


def _split_counts(inp: BufferUpdateInput, k_new: int) -> tuple[int, int]:
    # Clamp to the pools, then spill any residual budget to the other pool.
    k_new = max(0, min(k_new, min(inp.budget, inp.n_new)))
    k_old = min(inp.budget - k_new, inp.n_old)
    k_new = min(k_new + (inp.budget - k_new - k_old), inp.n_new)
    return k_new, k_old


def select_approx_uniform(inp: BufferUpdateInput, rng: np.random.Generator) -> ReplaySelection:
    """Split the budget proportionally to pool sizes so the buffer approximates
    a uniform sample over all data seen so far."""
    total = inp.n_new + inp.n_old
    k_new = round(inp.budget * inp.n_new / total) if total else 0
    k_new, k_old = _split_counts(inp, k_new)
    chosen = _sample(inp.new_data_ids, k_new, rng) + _sample(inp.buffer_ids, k_old, rng)
    return ReplaySelection(frozenset(chosen))


def select_fixed_proportion(inp: BufferUpdateInput, p: float, rng: np.random.Generator) -> ReplaySelection:
    """Fixed fraction p of the budget from new data, the rest from the buffer."""
    if not (0.0 < p < 1.0):
        raise ValueError("p must lie in (0, 1)")
    k_new, k_old = _split_counts(inp, round(p * inp.budget))
    chosen = _sample(inp.new_data_ids, k_new, rng) + _sample(inp.buffer_ids, k_old, rng)
    return ReplaySelection(frozenset(chosen))


def select_greedy_gss(inp: BufferUpdateInput) -> ReplaySelection:
    """Forward-greedy minimization of the pairwise cosine-similarity objective.

    Seeds with the sample of smallest mean similarity to all others, then
    repeatedly adds the sample with the smallest similarity sum to the current
    selection.  Ties break on the lowest sample index.
    """
    g = inp.gradients
    if g is None:
        raise ValueError("greedy selection requires gradients")
    n = g.count
    k = min(inp.budget, n)
    q = gram(g, False).values
    if n == 1:
        return ReplaySelection(frozenset(g.sample_ids))
    mean_sim = (q.sum(axis=0) - 1.0) / (n - 1)
    picked = [int(np.argmin(mean_sim))]
    # sim_sum[j] = total similarity of candidate j to the current selection;
    # picked entries are masked to inf (inf + finite stays inf).
    sim_sum = q[picked[0]].copy()
    sim_sum[picked[0]] = np.inf
    while len(picked) < k:
        nxt = int(np.argmin(sim_sum))
        picked.append(nxt)
        sim_sum = sim_sum + q[nxt]
        sim_sum[nxt] = np.inf
    return ReplaySelection(frozenset(g.sample_ids[i] for i in picked))


def select_relaxed(inp: BufferUpdateInput, zero_diagonal: bool,
                   opts: SolverOptions | None = None) -> ReplaySelection:
    """Relaxation on the capped simplex, then keep the top-N weights."""
    g = inp.gradients
    if g is None:
        raise ValueError("relaxed selection requires gradients")
    if inp.budget >= g.count:
        return ReplaySelection(frozenset(g.sample_ids))
    q = gram(g, zero_diagonal)
    sol = solve(QpProblem(q, np.zeros(q.size), inp.budget), opts)
    return round_top_n(sol.x, g.sample_ids)


def select(spec: StrategySpec, inp: BufferUpdateInput, client_id: str = "",
           salt: int = 0, opts: SolverOptions | None = None) -> ReplaySelection:
    """Run the strategy described by ``spec`` on one client's pool."""
    if spec.kind in RANDOM_KINDS:
        rng = derive_rng(spec.seed, client_id, salt)
        if spec.kind == "naive_uniform":
            return select_naive_uniform(inp, rng)
        if spec.kind == "approx_uniform":
            return select_approx_uniform(inp, rng)
        return select_fixed_proportion(inp, spec.p, rng)
    if spec.kind == "greedy_gss":
        return select_greedy_gss(inp)
    return select_relaxed(inp, spec.kind == "relaxed_nonconvex", opts)
