"""MAE/RMSE scoring, k-fold cross-validation, cold-start buckets and parameter sweeps."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .coupling import CouplingConfig, SimilarityGraph, build_graph
from .dataset import (SUPPORT_EDGES, FoldSplit, ItemAttributeTable, ItemSupportBuckets,
                      SparseRatingMatrix, bucket_items, kfold_split)
from .factorization import FactorModel, TrainConfig, train

_log = logging.getLogger(__name__)

AXES = ("beta", "k_dim", "neighborhood")


@dataclass(frozen=True)
class PredictionPair:
    truth: float
    prediction: float


@dataclass(frozen=True)
class EvalReport:
    mae: float | None
    rmse: float | None
    count: int

    def as_dict(self):
        if self.count == 0:
            return {"count": 0}
        return {"mae": self.mae, "rmse": self.rmse, "count": self.count}


def _arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no prediction pairs")
    truth = np.fromiter((p.truth for p in pairs), dtype=np.float64, count=len(pairs))
    pred = np.fromiter((p.prediction for p in pairs), dtype=np.float64, count=len(pairs))
    return truth, pred


def mae(pairs: Iterable[PredictionPair]) -> float:
    truth, pred = _arrays(pairs)
    return float(np.mean(np.abs(truth - pred)))


def rmse(pairs: Iterable[PredictionPair]) -> float:
    truth, pred = _arrays(pairs)
    return math.sqrt(float(np.mean((truth - pred) ** 2)))


def report(truth: np.ndarray, pred: np.ndarray) -> EvalReport:
    if len(truth) == 0:
        return EvalReport(None, None, 0)
    err = truth - pred
    return EvalReport(float(np.mean(np.abs(err))), math.sqrt(float(np.mean(err * err))), len(err))


def clamped_predictions(model: FactorModel, test: SparseRatingMatrix, scale=None) -> np.ndarray:
    lo, hi = test.scale if scale is None else scale
    return np.clip(model.predict_many(test.users, test.items), lo, hi)


def evaluate(model: FactorModel, test: SparseRatingMatrix, scale=None) -> EvalReport:
    """Score ``model`` on ``test`` with predictions clamped to the rating scale."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    if model.n_users < test.n_users or model.n_items < test.n_items:
        raise ValueError("model does not cover the test matrix's users/items")
    return report(test.ratings, clamped_predictions(model, test, scale))


@dataclass
class ColdStartReport:
    """Per-bucket reports keyed by bucket label, in bucket order."""

    buckets: dict[str, EvalReport]

    def total_count(self) -> int:
        return sum(r.count for r in self.buckets.values())

    def as_dict(self):
        return {label: r.as_dict() for label, r in self.buckets.items()}


def _bucket_sums(model, test, buckets, scale):
    pred = clamped_predictions(model, test, scale)
    err = test.ratings - pred
    which = buckets.assignment[test.items]
    nb = len(buckets.labels)
    return (np.bincount(which, minlength=nb),
            np.bincount(which, weights=np.abs(err), minlength=nb),
            np.bincount(which, weights=err * err, minlength=nb))


def _from_sums(labels, counts, abs_sum, sq_sum) -> ColdStartReport:
    out = {}
    for b, label in enumerate(labels):
        n = int(counts[b])
        out[label] = EvalReport(None, None, 0) if n == 0 else \
            EvalReport(float(abs_sum[b] / n), math.sqrt(float(sq_sum[b] / n)), n)
    return ColdStartReport(out)


def coldstart_eval(model: FactorModel, test: SparseRatingMatrix, buckets: ItemSupportBuckets,
                   scale=None) -> ColdStartReport:
    """MAE/RMSE restricted to test entries whose item falls in each support bucket."""
    return _from_sums(buckets.labels, *_bucket_sums(model, test, buckets, scale))


def method_name(config: TrainConfig, coupling: CouplingConfig) -> str:
    if config.beta == 0:
        return "RSVD"
    return "IEMF" if coupling.metric == "cos" else "CBMF"


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    epochs_run: int
    stop_reason: str
    bucket_sums: tuple | None = field(default=None, repr=False)
    model: FactorModel | None = field(default=None, repr=False)

    def as_dict(self):
        return {"fold": self.fold, **self.report.as_dict(), "epochs": self.epochs_run,
                "stop_reason": self.stop_reason}


@dataclass
class CrossValidationResult:
    config: TrainConfig
    coupling: CouplingConfig
    seed: int | None
    per_fold: list[FoldResult]
    mean: EvalReport
    coldstart: ColdStartReport | None = None

    @property
    def method(self) -> str:
        return method_name(self.config, self.coupling)

    def fold_mae(self) -> np.ndarray:
        return np.array([f.report.mae for f in self.per_fold])

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "config": asdict(self.config),
            "coupling": asdict(self.coupling),
            "fold_seed": self.seed,
            "per_fold": [f.as_dict() for f in self.per_fold],
            "mean": self.mean.as_dict(),
        }
        if self.coldstart is not None:
            out["coldstart"] = self.coldstart.as_dict()
        return out

    def write_csv(self, fh):
        fh.write("fold,mae,rmse,count\n")
        for f in self.per_fold:
            fh.write(f"{f.fold},{f.report.mae:.17g},{f.report.rmse:.17g},{f.report.count}\n")
        fh.write(f"mean,{self.mean.mae:.17g},{self.mean.rmse:.17g},{self.mean.count}\n")


def _run_fold(fold, train_m, test_m, graph, config, edges, keep_model):
    cfg = config.replace(seed=config.seed + fold)
    model, trace = train(train_m, graph if config.beta else None, cfg)
    rep = evaluate(model, test_m)
    sums = None
    if edges is not None:
        sums = _bucket_sums(model, test_m, bucket_items(train_m, edges), None)
    _log.info("fold %d: MAE %.4f RMSE %.4f after %d epochs (%s)", fold, rep.mae, rep.rmse,
              trace.epochs_run, trace.stop_reason)
    return FoldResult(fold, rep, trace.epochs_run, trace.stop_reason, sums,
                      model if keep_model else None)


def resolve_graph(data: SparseRatingMatrix, attributes: ItemAttributeTable | None,
                  coupling: CouplingConfig, graph: SimilarityGraph | None = None, jobs: int = 1):
    if graph is not None:
        if graph.n_items != data.n_items:
            raise ValueError(f"graph covers {graph.n_items} items, ratings {data.n_items}")
        return graph
    if attributes is None:
        raise ValueError("beta > 0 needs item attributes or a precomputed similarity graph")
    return build_graph(attributes.align(data.item_ids), coupling, jobs=jobs)


def cross_validate(data: SparseRatingMatrix, attributes: ItemAttributeTable | None = None,
                   coupling: CouplingConfig = CouplingConfig(), config: TrainConfig = TrainConfig(),
                   k: int = 5, seed: int = 0, *, graph: SimilarityGraph | None = None,
                   folds: FoldSplit | None = None, edges: Sequence[int] | None = SUPPORT_EDGES,
                   jobs: int = 1, keep_models: bool = False) -> CrossValidationResult:
    """k-fold cross-validation of one configuration.

    The similarity graph depends only on item attributes, so it is built once over all
    items and shared by every fold.  Fold ``f`` trains with seed ``config.seed + f``.
    The mean report is the unweighted mean of the per-fold metrics; the cold-start
    report pools all folds' test entries per bucket (buckets come from each fold's
    own training set).
    """
    if folds is None:
        folds = kfold_split(data, k, seed)
    if config.beta:
        graph = resolve_graph(data, attributes, coupling, graph)
    else:
        graph = None

    tasks = [(f, tr, te, graph, config, edges, keep_models) for f, (tr, te) in enumerate(folds)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*tasks)))
    else:
        results = [_run_fold(*t) for t in tasks]

    mean = EvalReport(float(np.mean([r.report.mae for r in results])),
                      float(np.mean([r.report.rmse for r in results])),
                      int(sum(r.report.count for r in results)))
    coldstart = None
    if edges is not None:
        labels = bucket_items(folds.folds[0][0], edges).labels
        sums = [np.sum([r.bucket_sums[x] for r in results], axis=0) for x in range(3)]
        coldstart = _from_sums(labels, *sums)
    return CrossValidationResult(config, coupling, folds.seed, results, mean, coldstart)


@dataclass
class SweepResult:
    axis: str
    values: list
    results: list[CrossValidationResult]

    def means(self) -> list[EvalReport]:
        return [r.mean for r in self.results]

    def best(self, metric: str = "mae"):
        """``(value, mean report)`` of the grid point with the lowest mean ``metric``."""
        k = int(np.argmin([getattr(r.mean, metric) for r in self.results]))
        return self.values[k], self.results[k].mean

    def rows(self):
        for v, res in zip(self.values, self.results):
            for f in res.per_fold:
                yield v, f.fold, f.report.mae, f.report.rmse
            yield v, "mean", res.mean.mae, res.mean.rmse

    def write_csv(self, fh):
        fh.write("axis_value,fold,mae,rmse\n")
        for v, fold, m, r in self.rows():
            fh.write(f"{v},{fold},{m:.17g},{r:.17g}\n")


def sweep(axis: str, values: Sequence, data: SparseRatingMatrix,
          attributes: ItemAttributeTable | None = None, coupling: CouplingConfig = CouplingConfig(),
          config: TrainConfig = TrainConfig(), k: int = 5, seed: int = 0, *,
          graph: SimilarityGraph | None = None, jobs: int = 1) -> SweepResult:
    """Cross-validate every grid point on one shared set of folds.

    ``axis`` is ``beta`` (regularization weight), ``k_dim`` (latent dimension) or
    ``neighborhood`` (neighbors kept per item; the graph is rebuilt per value).
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}, expected one of {AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    folds = kfold_split(data, k, seed)
    results = []
    for v in values:
        cfg, cpl, g = config, coupling, graph
        if axis == "beta":
            cfg = config.replace(beta=float(v))
        elif axis == "k_dim":
            cfg = config.replace(k=int(v))
        else:
            cpl = CouplingConfig(coupling.metric, int(v), coupling.normalize, coupling.weights)
            g = None
        if cfg.beta and g is None:
            g = resolve_graph(data, attributes, cpl, None, jobs)
            if axis != "neighborhood":
                graph = g
        res = cross_validate(data, attributes, cpl, cfg, k, seed, graph=g, folds=folds,
                             edges=None, jobs=jobs)
        _log.info("%s=%s: mean MAE %.4f RMSE %.4f", axis, v, res.mean.mae, res.mean.rmse)
        results.append(res)
    return SweepResult(axis, values, results)
