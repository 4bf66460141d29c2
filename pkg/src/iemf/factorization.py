"""Latent factor model, item-relationship regularized objective and SGD training.

The objective over the observed ratings T is::

    1/2 sum_T (r_ui - p_u.q_i)^2 + lambda1/2 |P|^2 + lambda2/2 |Q|^2
        + beta/2 sum_i sum_i' S_ii' |q_i - q_i'|^2

where the double sum runs over both directions of every graph edge, so the last term
equals ``beta * tr(Q L Q^T)`` with ``L = D - S``.  Its gradient with respect to ``q_i``
is ``2 beta (D_ii q_i - sum_i' S_ii' q_i')``; SGD uses exactly these gradients.
``beta = 0`` (or no graph) is plain regularized SVD.

Factors are stored row-major as ``user_factors`` (N x K) and ``item_factors`` (M x K);
``P``/``Q`` expose the K x N / K x M views.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .coupling import SimilarityGraph
from .dataset import SparseRatingMatrix
from .errors import DataError, DivergenceError

_log = logging.getLogger(__name__)


@dataclass
class FactorModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.user_factors = np.ascontiguousarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.ascontiguousarray(self.item_factors, dtype=np.float64)
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2 or \
                self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ValueError("user and item factors must be 2-d with equal column counts")

    @property
    def k(self) -> int:
        return self.user_factors.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def P(self) -> np.ndarray:
        return self.user_factors.T

    @property
    def Q(self) -> np.ndarray:
        return self.item_factors.T

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_factors.copy(), self.item_factors.copy(), self.seed)

    def predict(self, u: int, i: int) -> float:
        """Raw (unclamped) score p_u . q_i."""
        if not (0 <= u < self.n_users and 0 <= i < self.n_items):
            raise IndexError(f"(user {u}, item {i}) outside a {self.n_users}x{self.n_items} model")
        return float(self.user_factors[u] @ self.item_factors[i])

    def predict_many(self, users, items) -> np.ndarray:
        users, items = np.asarray(users), np.asarray(items)
        return np.einsum("nk,nk->n", self.user_factors[users], self.item_factors[items])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_factors).all() and np.isfinite(self.item_factors).all())

    def __eq__(self, other):
        if not isinstance(other, FactorModel):
            return NotImplemented
        return (np.array_equal(self.user_factors, other.user_factors)
                and np.array_equal(self.item_factors, other.item_factors))

    def save(self, path):
        """Text format: ``K N M seed`` then K rows of P and K rows of Q (17 significant digits)."""
        with open(path, "w", encoding="utf-8") as fh:
            seed = "-" if self.seed is None else str(self.seed)
            fh.write(f"{self.k} {self.n_users} {self.n_items} {seed}\n")
            for row in self.P:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            for row in self.Q:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "FactorModel":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().split()
            if len(head) != 4:
                raise DataError(f"{path}: bad model header")
            k, n, m = (int(x) for x in head[:3])
            seed = None if head[3] == "-" else int(head[3])
            rows = [np.array(line.split(), dtype=np.float64) for line in fh if line.strip()]
        if len(rows) != 2 * k or any(len(r) != n for r in rows[:k]) or any(len(r) != m for r in rows[k:]):
            raise DataError(f"{path}: model body does not match header {k} {n} {m}")
        P, Q = np.vstack(rows[:k]).reshape(k, n), np.vstack(rows[k:]).reshape(k, m)
        return cls(P.T, Q.T, seed)


@dataclass(frozen=True)
class TrainConfig:
    k: int = 10
    lambda1: float = 0.1
    lambda2: float = 0.1
    beta: float = 0.1
    eta: float = 0.005
    max_epochs: int = 200
    epsilon: float = 1e-4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if min(self.lambda1, self.lambda2, self.beta) < 0:
            raise ValueError("lambda1, lambda2 and beta must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainTrace:
    objective_per_epoch: list[float] = field(default_factory=list)
    initial_objective: float | None = None
    stop_reason: str | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.objective_per_epoch)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,objective\n")
            for e, v in enumerate(self.objective_per_epoch, 1):
                fh.write(f"{e},{v:.17g}\n")


def init_model(n_users: int, n_items: int, k: int, seed: int = 0) -> FactorModel:
    """Factors drawn i.i.d. uniform on [0, 0.1) from ``default_rng(seed)``; P first, then Q."""
    if n_users < 1 or n_items < 1 or k < 1:
        raise ValueError(f"cannot initialize a model with N={n_users}, M={n_items}, K={k}")
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.0, 0.1, size=(k, n_users))
    Q = rng.uniform(0.0, 0.1, size=(k, n_items))
    return FactorModel(P.T, Q.T, seed)


def _check_graph(graph, n_items):
    if graph is not None and graph.n_items != n_items:
        raise DataError(f"similarity graph has {graph.n_items} items, rating matrix {n_items}")


def graph_regularizer(item_factors: np.ndarray, graph: SimilarityGraph, beta: float) -> float:
    """beta/2 * sum over both edge directions of S_ii' |q_i - q_i'|^2."""
    if graph is None or len(graph.indices) == 0:
        return 0.0
    rows = np.repeat(np.arange(graph.n_items), np.diff(graph.indptr))
    diff = item_factors[rows] - item_factors[graph.indices]
    return 0.5 * beta * float(graph.weights @ np.einsum("ek,ek->e", diff, diff))


def objective(model: FactorModel, train: SparseRatingMatrix, graph: SimilarityGraph | None,
              config: TrainConfig) -> float:
    if model.n_users != train.n_users or model.n_items != train.n_items:
        raise DataError(f"model is {model.n_users}x{model.n_items}, ratings {train.n_users}x{train.n_items}")
    _check_graph(graph, train.n_items)
    with np.errstate(over="ignore", invalid="ignore"):
        err = train.ratings - model.predict_many(train.users, train.items)
        value = 0.5 * float(err @ err)
        value += 0.5 * config.lambda1 * float(np.sum(model.user_factors ** 2))
        value += 0.5 * config.lambda2 * float(np.sum(model.item_factors ** 2))
        if config.beta:
            value += graph_regularizer(model.item_factors, graph, config.beta)
    return value


def gradients(model: FactorModel, u: int, i: int, r: float, graph: SimilarityGraph | None,
              config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the single-rating objective with respect to p_u and q_i."""
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"(user {u}, item {i}) out of range")
    p, q = model.user_factors[u], model.item_factors[i]
    e = r - p @ q
    grad_p = -e * q + config.lambda1 * p
    grad_q = -e * p + config.lambda2 * q
    if graph is not None and config.beta:
        _check_graph(graph, model.n_items)
        nbrs, w = graph.neighbors(i)
        grad_q = grad_q + 2.0 * config.beta * (q * graph.degree[i] - w @ model.item_factors[nbrs])
    return grad_p, grad_q


@njit(cache=True, nogil=True)
def _rsvd_step(P, Q, u, i, r, lambda1, lambda2, eta):
    K = P.shape[1]
    e = r
    for k in range(K):
        e -= P[u, k] * Q[i, k]
    for k in range(K):
        pk = P[u, k]
        qk = Q[i, k]
        P[u, k] = pk + eta * (e * qk - lambda1 * pk)
        Q[i, k] = qk + eta * (e * pk - lambda2 * qk)


@njit(cache=True, nogil=True)
def _iemf_step(P, Q, u, i, r, indptr, indices, weights, degree, lambda1, lambda2, beta, eta):
    K = P.shape[1]
    e = r
    for k in range(K):
        e -= P[u, k] * Q[i, k]
    lo = indptr[i]
    hi = indptr[i + 1]
    for k in range(K):
        pk = P[u, k]
        qk = Q[i, k]
        nsum = 0.0
        for x in range(lo, hi):
            nsum += weights[x] * Q[indices[x], k]
        reg = 2.0 * beta * (qk * degree[i] - nsum)
        P[u, k] = pk + eta * (e * qk - lambda1 * pk)
        Q[i, k] = qk + eta * ((e * pk - lambda2 * qk) - reg)


@njit(cache=True, nogil=True)
def _rsvd_epoch(P, Q, users, items, ratings, order, lambda1, lambda2, eta):
    for x in order:
        _rsvd_step(P, Q, users[x], items[x], ratings[x], lambda1, lambda2, eta)


@njit(cache=True, nogil=True)
def _iemf_epoch(P, Q, users, items, ratings, order, indptr, indices, weights, degree,
                lambda1, lambda2, beta, eta):
    for x in order:
        _iemf_step(P, Q, users[x], items[x], ratings[x], indptr, indices, weights, degree,
                   lambda1, lambda2, beta, eta)


def sgd_step(model: FactorModel, u: int, i: int, r: float, graph: SimilarityGraph | None,
             config: TrainConfig) -> FactorModel:
    """One in-place SGD update of p_u and q_i from a single rating.

    The residual and both gradients use the pre-update vectors.
    """
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"(user {u}, item {i}) out of range")
    if graph is None:
        _rsvd_step(model.user_factors, model.item_factors, u, i, float(r),
                   config.lambda1, config.lambda2, config.eta)
    else:
        _check_graph(graph, model.n_items)
        _iemf_step(model.user_factors, model.item_factors, u, i, float(r), graph.indptr,
                   graph.indices, graph.weights, graph.degree, config.lambda1, config.lambda2,
                   config.beta, config.eta)
    return model


def train(train: SparseRatingMatrix, graph: SimilarityGraph | None, config: TrainConfig,
          model: FactorModel | None = None) -> tuple[FactorModel, TrainTrace]:
    """Run SGD epochs until ``max_epochs`` or until the objective improves by <= epsilon.

    ``graph=None`` selects the graph-free regularized SVD path (``beta`` must then be 0).
    Each epoch visits every observed rating once, in a seeded per-epoch shuffle or in
    entry order when ``config.shuffle`` is false.

    Raises:
        DivergenceError: when the factors or the objective become non-finite.
    """
    if len(train) == 0:
        raise DataError("training set is empty")
    if graph is None and config.beta != 0:
        raise ValueError("beta > 0 requires a similarity graph")
    _check_graph(graph, train.n_items)
    if model is None:
        model = init_model(train.n_users, train.n_items, config.k, config.seed)
    elif model.k != config.k:
        raise ValueError("initial model dimension does not match config.k")
    order_rng = np.random.default_rng((config.seed, 1))
    P, Q = model.user_factors, model.item_factors
    users, items, ratings = train.users, train.items, train.ratings
    entry_order = np.arange(len(train), dtype=np.int64)

    trace = TrainTrace(initial_objective=objective(model, train, graph, config))
    prev = trace.initial_objective
    trace.stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(train)) if config.shuffle else entry_order
        if graph is None:
            _rsvd_epoch(P, Q, users, items, ratings, order, config.lambda1, config.lambda2,
                        config.eta)
        else:
            _iemf_epoch(P, Q, users, items, ratings, order, graph.indptr, graph.indices,
                        graph.weights, graph.degree, config.lambda1, config.lambda2,
                        config.beta, config.eta)
        value = objective(model, train, graph, config)
        if not (np.isfinite(value) and model.is_finite()):
            raise DivergenceError(epoch, f"training diverged at epoch {epoch}: non-finite factors "
                                         f"(eta={config.eta}, beta={config.beta}); lower eta")
        trace.objective_per_epoch.append(value)
        if prev - value <= config.epsilon:
            trace.stop_reason = "converged"
            break
        prev = value
    _log.debug("trained K=%d beta=%g for %d epochs (%s), objective %.4f", config.k, config.beta,
               trace.epochs_run, trace.stop_reason, trace.objective_per_epoch[-1])
    return model, trace


def train_rsvd(train_matrix: SparseRatingMatrix, config: TrainConfig) -> tuple[FactorModel, TrainTrace]:
    """Plain regularized SVD: never touches a similarity graph."""
    return train(train_matrix, None, config.replace(beta=0.0))
