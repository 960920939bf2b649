"""Desk-scale continual federated learning simulator.

FedAvg over T periods with per-client replay buffers.  The model is a
multinomial logistic-regression classifier with hand-derived gradients, which
keeps the parameter count small and per-sample gradients exact and cheap.
Data comes from a synthetic drifting Gaussian class-mixture: class means sit
on a circle in feature space and rotate a little each period, and per-client
class priors are Dirichlet-heterogeneous.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .coordination import ClientSelectionState, run_coordination
from .gradients import GradientSet, ReplaySelection, normalize_columns
from .qp import SolverOptions
from .strategies import BufferUpdateInput, StrategySpec, select


# ---------------------------------------------------------------------------
# model: multinomial logistic regression, parameters packed as [W.ravel(), b]

def param_count(features: int, classes: int) -> int:
    return features * classes + classes


def _unpack(w: np.ndarray, features: int, classes: int):
    mat = w[: features * classes].reshape(classes, features)
    bias = w[features * classes:]
    return mat, bias


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(w: np.ndarray, x: np.ndarray, classes: int) -> np.ndarray:
    mat, bias = _unpack(w, x.shape[1], classes)
    return _softmax(x @ mat.T + bias)


def mean_loss(w: np.ndarray, x: np.ndarray, y: np.ndarray, classes: int) -> float:
    """Mean cross-entropy; exp of this is the perplexity analogue."""
    p = predict_proba(w, x, classes)
    return float(-np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None)).mean())


def loss_gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray, classes: int) -> np.ndarray:
    """Gradient of the mean cross-entropy over the batch."""
    n, features = x.shape
    p = predict_proba(w, x, classes)
    p[np.arange(n), y] -= 1.0
    p /= n
    return np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])


def per_sample_gradients(w: np.ndarray, x: np.ndarray, y: np.ndarray,
                         classes: int, ids) -> GradientSet:
    """Unit-normalized per-sample cross-entropy gradients at the given model.

    Samples predicted correctly with certainty have a zero gradient and are
    dropped by normalization.
    """
    n, features = x.shape
    p = predict_proba(w, x, classes)
    p[np.arange(n), y] -= 1.0
    # gradient of sample i: [outer(p_i, x_i).ravel(), p_i]
    outer = np.einsum("ic,if->icf", p, x).reshape(n, classes * features)
    raw = np.concatenate([outer, p], axis=1).T
    return normalize_columns(raw, ids)


def local_train(w: np.ndarray, x: np.ndarray, y: np.ndarray, classes: int,
                epochs: int, lr: float, batch: int,
                rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient descent on one client's data."""
    w = w.copy()
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            g = loss_gradient(w, x[idx], y[idx], classes)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite loss gradient during local training")
            w -= lr * g
    return w


def _stable_id(client_id: str) -> int:
    digest = hashlib.blake2b(client_id.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def fedavg_round(w: np.ndarray, client_data: dict, classes: int, epochs: int,
                 lr: float, batch: int, seed: int, round_no: int) -> np.ndarray:
    """One FedAvg round: parallel local training, then a sample-count-weighted
    average of the returned weights."""
    sizes = {cid: len(d[1]) for cid, d in client_data.items()}
    total = sum(sizes.values())
    if total == 0:
        raise ValueError("no training samples in this round")
    new_w = np.zeros_like(w)
    for cid in sorted(client_data):
        x, y = client_data[cid]
        if len(y) == 0:
            continue
        rng = np.random.default_rng([seed, round_no, _stable_id(cid)])
        local = local_train(w, x, y, classes, epochs, lr, batch, rng)
        new_w += (sizes[cid] / total) * local
    return new_w


# ---------------------------------------------------------------------------
# synthetic drifting data

@dataclass(frozen=True)
class SyntheticDriftConfig:
    clients: int = 20
    periods: int = 5
    features: int = 10
    classes: int = 5
    concentration: float = 0.5
    drift_angle: float = 0.5
    samples_per_period: int = 200
    test_size: int = 400
    class_radius: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.clients, self.periods, self.features, self.classes,
               self.samples_per_period, self.test_size) < 1:
            raise ValueError("all sizes must be positive")
        if not (0.0 <= self.drift_angle <= math.pi):
            raise ValueError("drift angle must lie in [0, pi]")
        if self.features < 2:
            raise ValueError("need at least 2 features for the class circle")


@dataclass
class ClientTimeline:
    client_id: str
    periods: list  # list of (x, y) arrays, one per period

    @property
    def num_periods(self) -> int:
        return len(self.periods)


def _class_means(cfg: SyntheticDriftConfig, period: int) -> np.ndarray:
    means = np.zeros((cfg.classes, cfg.features))
    for c in range(cfg.classes):
        angle = 2.0 * math.pi * c / cfg.classes + period * cfg.drift_angle
        means[c, 0] = cfg.class_radius * math.cos(angle)
        means[c, 1] = cfg.class_radius * math.sin(angle)
    return means


def gen_drift_data(cfg: SyntheticDriftConfig):
    """Per-client labeled timelines plus a held-out test set per period.

    Class means rotate on a circle by the drift angle each period; client
    class priors are Dirichlet draws (small concentration = heterogeneous).
    Test sets use uniform class priors from the same period distribution.
    """
    rng = np.random.default_rng(cfg.seed)
    priors = rng.dirichlet(np.full(cfg.classes, cfg.concentration), size=cfg.clients)
    timelines = []
    for m in range(cfg.clients):
        periods = []
        for t in range(cfg.periods):
            means = _class_means(cfg, t)
            y = rng.choice(cfg.classes, size=cfg.samples_per_period, p=priors[m])
            x = means[y] + rng.standard_normal((cfg.samples_per_period, cfg.features))
            periods.append((x, y))
        timelines.append(ClientTimeline(f"c{m:03d}", periods))
    tests = []
    for t in range(cfg.periods):
        means = _class_means(cfg, t)
        y = rng.choice(cfg.classes, size=cfg.test_size)
        x = means[y] + rng.standard_normal((cfg.test_size, cfg.features))
        tests.append((x, y))
    return timelines, tests


# ---------------------------------------------------------------------------
# metrics

def forgetting_factor(history) -> float:
    """Latest metric minus the best (smallest) metric of earlier models.

    Positive means the latest model forgot performance a past model had.
    """
    history = list(history)
    if len(history) < 2:
        raise ValueError("need at least two evaluated models")
    return history[-1] - min(history[:-1])


def rcp(metric_experimental: float, metric_baseline: float) -> float:
    """Relative change of the metric versus the no-replay baseline."""
    if metric_baseline <= 0:
        raise ValueError("baseline metric must be positive")
    return (metric_experimental - metric_baseline) / metric_baseline


# ---------------------------------------------------------------------------
# simulation driver

@dataclass(frozen=True)
class CoordinatedSpec:
    """Server-coordinated selection with a fixed number of rounds."""
    iterations: int = 1
    seed: int = 0

    @property
    def kind(self) -> str:
        return f"coordinated@{self.iterations}"


@dataclass(frozen=True)
class SimConfig:
    drift: SyntheticDriftConfig = field(default_factory=SyntheticDriftConfig)
    budget: int = 20
    rounds_per_period: int = 5
    epochs: int = 1
    lr: float = 0.1
    batch: int = 32
    solver: SolverOptions | None = None  # None = solver defaults


@dataclass
class SimResult:
    """metric[t][p]: perplexity analogue of the period-t model on test period p."""
    strategy: str
    budget: int
    seed: int
    metric: np.ndarray
    overall: float  # final model over pooled test samples

    def final_metrics(self) -> np.ndarray:
        return self.metric[-1]

    def forgetting(self, period: int) -> float:
        return forgetting_factor(self.metric[:, period])


def _gather_pool(timeline: ClientTimeline, period: int, buffer_ids: dict):
    """Training arrays for this period's data plus the retained buffer."""
    x_new, y_new = timeline.periods[period]
    new_ids = [f"{timeline.client_id}:t{period}:i{i}" for i in range(len(y_new))]
    xs, ys, ids = [x_new], [y_new], list(new_ids)
    for sid, (sx, sy) in buffer_ids.items():
        xs.append(sx[None])
        ys.append(np.array([sy]))
        ids.append(sid)
    return np.concatenate(xs), np.concatenate(ys), ids, new_ids


def run_simulation(cfg: SimConfig, strategy, seed: int) -> SimResult:
    """One full CFL run: T periods of FedAvg with replay, metrics per period.

    ``strategy`` is a StrategySpec, a CoordinatedSpec, or None for the
    no-replay (budget 0) baseline.
    """
    drift = SyntheticDriftConfig(**{**cfg.drift.__dict__, "seed": seed})
    timelines, tests = gen_drift_data(drift)
    classes = drift.classes
    w = np.zeros(param_count(drift.features, classes))
    buffers = {tl.client_id: {} for tl in timelines}  # id -> (x, y) sample
    metric = np.zeros((drift.periods, drift.periods))
    no_replay = strategy is None or cfg.budget == 0

    for t in range(drift.periods):
        pools = {}
        for tl in timelines:
            x, y, ids, new_ids = _gather_pool(tl, t, buffers[tl.client_id])
            pools[tl.client_id] = (x, y, ids, new_ids)
        for r in range(cfg.rounds_per_period):
            client_data = {cid: (p[0], p[1]) for cid, p in pools.items()}
            w = fedavg_round(w, client_data, classes, cfg.epochs, cfg.lr,
                             cfg.batch, seed, t * cfg.rounds_per_period + r)
        for p, (tx, ty) in enumerate(tests):
            metric[t, p] = math.exp(mean_loss(w, tx, ty, classes))
        if not no_replay and t < drift.periods - 1:
            selections = _update_buffers(cfg, strategy, w, classes, pools, seed, t)
            for tl in timelines:
                cid = tl.client_id
                sample_by_id = dict(zip(pools[cid][2],
                                        zip(pools[cid][0], pools[cid][1])))
                buffers[cid] = {sid: sample_by_id[sid]
                                for sid in sorted(selections[cid].chosen)}

    all_x = np.concatenate([tx for tx, _ in tests])
    all_y = np.concatenate([ty for _, ty in tests])
    overall = math.exp(mean_loss(w, all_x, all_y, classes))
    name = "none" if strategy is None else strategy.kind
    return SimResult(name, 0 if no_replay else cfg.budget, seed, metric, overall)


def _update_buffers(cfg: SimConfig, strategy, w, classes, pools, seed, period):
    """Select the next replay buffer for every client."""
    grads = {}
    need_grads = isinstance(strategy, CoordinatedSpec) or strategy.kind in (
        "greedy_gss", "relaxed_convex", "relaxed_nonconvex")
    if need_grads:
        for cid, (x, y, ids, _) in pools.items():
            grads[cid] = per_sample_gradients(w, x, y, classes, ids)
    if isinstance(strategy, CoordinatedSpec):
        clients = [ClientSelectionState(cid, grads[cid],
                                        min(cfg.budget, grads[cid].count),
                                        solver_opts=cfg.solver or SolverOptions())
                   for cid in sorted(pools)]
        selections, _ = run_coordination(clients, max_rounds=strategy.iterations,
                                         tol=0.0)
        return selections
    selections = {}
    for cid, (x, y, ids, new_ids) in pools.items():
        buffer_ids = tuple(i for i in ids if i not in set(new_ids))
        inp = BufferUpdateInput(tuple(new_ids), buffer_ids, cfg.budget,
                                grads.get(cid))
        selections[cid] = select(strategy, inp, client_id=cid, salt=period,
                                 opts=cfg.solver)
    return selections
