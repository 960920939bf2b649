"""Selection-quality benchmark on synthetic Gaussian-mixture gradients.

Generates per-trial gradient instances, computes the exact best subset by
exhaustive enumeration, and compares each selection strategy's discrete
objective against that optimum (gaps and ratios).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .gradients import GradientSet, ReplaySelection, gram, normalize_columns, objective_discrete
from .strategies import BufferUpdateInput, StrategySpec, select

BRUTE_FORCE_GUARD = 10_000_000

_combo_cache: dict[tuple[int, int], np.ndarray] = {}


@dataclass(frozen=True)
class MixtureConfig:
    dim: int = 300
    n: int = 50
    budget: int = 5
    trials: int = 5000
    poisson_rate: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.budget <= self.n):
            raise ValueError("budget must satisfy 1 <= N <= n")
        if self.trials < 1:
            raise ValueError("trials must be positive")


def gen_mixture_gradients(cfg: MixtureConfig, trial_seed: int) -> GradientSet:
    """Draw one instance of n gradient vectors from a random Gaussian mixture.

    The number of centers is 1 + Poisson(rate); centers are standardized per
    dimension across centers, mixture weights are flat-Dirichlet, and the
    drawn vectors are standardized per dimension across samples before unit
    normalization.  Standardization of an axis is skipped when its standard
    deviation is zero (a single center, or degenerate draws).
    """
    rng = np.random.default_rng([cfg.seed, trial_seed])
    n_centers = 1 + rng.poisson(cfg.poisson_rate)
    centers = rng.standard_normal((n_centers, cfg.dim))
    centers -= centers.mean(axis=0)
    if n_centers >= 2:
        std = centers.std(axis=0)
        nonzero = std > 0
        centers[:, nonzero] /= std[nonzero]
    weights = rng.dirichlet(np.ones(n_centers))
    comp = rng.choice(n_centers, size=cfg.n, p=weights)
    g = centers[comp] + rng.standard_normal((cfg.n, cfg.dim))
    g -= g.mean(axis=0)
    std = g.std(axis=0)
    nonzero = std > 0
    g[:, nonzero] /= std[nonzero]
    ids = [f"s{i:03d}" for i in range(cfg.n)]
    return normalize_columns(g.T, ids)


def _combos(n: int, k: int) -> np.ndarray:
    key = (n, k)
    if key not in _combo_cache:
        arr = np.fromiter((i for c in combinations(range(n), k) for i in c),
                          dtype=np.intp, count=math.comb(n, k) * k)
        _combo_cache[key] = arr.reshape(-1, k)
    return _combo_cache[key]


@dataclass(frozen=True)
class BruteForceResult:
    selection: ReplaySelection
    objective: float
    subsets_evaluated: int


def brute_force_optimum(g: GradientSet, budget: int,
                        include_diagonal: bool = True) -> BruteForceResult:
    """Exhaustively minimize the discrete objective over all N-subsets.

    Ties resolve to the lexicographically first subset in index order.
    """
    n = g.count
    if budget > n:
        raise ValueError("budget exceeds sample count")
    total = math.comb(n, budget)
    if total > BRUTE_FORCE_GUARD:
        raise ValueError(f"C({n},{budget}) = {total} exceeds the enumeration guard")
    q = gram(g, zero_diagonal=False).values
    combos = _combos(n, budget)
    objs = np.zeros(total)
    if include_diagonal:
        objs += np.diag(q)[combos].sum(axis=1)
    for a in range(budget):
        for b in range(a + 1, budget):
            objs += 2.0 * q[combos[:, a], combos[:, b]]
    best = int(np.argmin(objs))
    chosen = frozenset(g.sample_ids[i] for i in combos[best])
    return BruteForceResult(ReplaySelection(chosen), float(objs[best]), total)


@dataclass
class BenchResult:
    config: MixtureConfig
    strategies: tuple[str, ...]
    optimum: np.ndarray = None
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def gaps(self, name: str) -> np.ndarray:
        return self.values[name] - self.optimum

    def ratios(self, name: str) -> np.ndarray:
        return self.values[name] / self.optimum

    def summary(self) -> dict:
        out = {"config": self.config.__dict__, "strategies": {}}
        for name in self.strategies:
            gaps, ratios = self.gaps(name), self.ratios(name)
            out["strategies"][name] = {
                "mean_gap": float(gaps.mean()),
                "median_gap": float(np.median(gaps)),
                "q90_gap": float(np.quantile(gaps, 0.9)),
                "mean_ratio": float(ratios.mean()),
                "median_ratio": float(np.median(ratios)),
            }
        return out


def _strategy_name(spec: StrategySpec) -> str:
    return spec.kind if spec.p is None else f"{spec.kind}(p={spec.p})"


def run_selection_benchmark(cfg: MixtureConfig, strategies: list[StrategySpec],
                            csv_path=None, solver_opts=None) -> BenchResult:
    """Run all strategies against the brute-force optimum on seeded trials.

    Objectives use the diagonal-kept discrete form so values are directly
    comparable across strategies and to the optimum.  ``solver_opts``
    overrides the relaxation solver settings for the relaxed strategies.
    """
    names = tuple(_strategy_name(s) for s in strategies)
    result = BenchResult(cfg, names)
    result.optimum = np.zeros(cfg.trials)
    for name in names:
        result.values[name] = np.zeros(cfg.trials)
    rows = []
    for trial in range(cfg.trials):
        g = gen_mixture_gradients(cfg, trial)
        best = brute_force_optimum(g, cfg.budget)
        result.optimum[trial] = best.objective
        inp = BufferUpdateInput(g.sample_ids, (), cfg.budget, g)
        for spec, name in zip(strategies, names):
            sel = select(spec, inp, client_id="bench", salt=trial,
                         opts=solver_opts)
            val = objective_discrete(g, sel, include_diagonal=True)
            result.values[name][trial] = val
            if csv_path is not None:
                rows.append((trial, name, val, best.objective,
                             val - best.objective, val / best.objective))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            fh.write("# config: " + json.dumps(cfg.__dict__) + "\n")
            writer = csv.writer(fh)
            writer.writerow(["trial", "strategy", "objective", "optimum", "gap", "ratio"])
            writer.writerows(rows)
    return result
