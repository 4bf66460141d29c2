import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pytest import approx

from iemf.coupling import CouplingConfig, build_graph
from iemf.dataset import SUPPORT_EDGES, bucket_items, kfold_split, load_attributes
from iemf.evaluation import (PredictionPair, coldstart_eval, cross_validate, evaluate, mae,
                             report, rmse, sweep)
from iemf.factorization import FactorModel, TrainConfig, init_model, train

from conftest import random_ratings

pairs_st = st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=40)


def P(truths, preds):
    return [PredictionPair(t, p) for t, p in zip(truths, preds)]


def test_mae_rmse_examples():
    assert mae(P([4, 2], [4, 2])) == 0 and rmse(P([4, 2], [4, 2])) == 0
    assert mae(P([4, 2], [3, 4])) == 1.5
    assert rmse(P([4, 2], [3, 4])) == approx(math.sqrt(2.5))
    assert mae(P([5], [1])) == 4
    assert rmse(P([1, 2, 3], [1.5, 2.5, 3.5])) == approx(0.5)
    with pytest.raises(ValueError):
        mae([])
    with pytest.raises(ValueError):
        rmse([])


@settings(max_examples=100, deadline=None)
@given(pairs_st)
def test_power_mean(pairs):
    pp = [PredictionPair(t, p) for t, p in pairs]
    assert rmse(pp) >= mae(pp) - 1e-12 >= -1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.floats(-3, 9)), min_size=1, max_size=30))
def test_clamping_monotone(pairs):
    truth = np.array([t for t, _ in pairs], dtype=float)
    pred = np.array([p for _, p in pairs])
    assert report(truth, np.clip(pred, 1, 5)).mae <= report(truth, pred).mae + 1e-12


def _model(n_users, n_items, k=1, value=0.0):
    return FactorModel(np.full((n_users, k), value), np.full((n_items, k), value))


def test_evaluate_clamps(small_random):
    m = _model(small_random.n_users, small_random.n_items)
    rep = evaluate(m, small_random)
    assert rep.mae == approx(np.mean(small_random.ratings - 1.0))
    assert rep.count == len(small_random)


def test_evaluate_all_zero_model_floor():
    import io as _io
    from iemf.dataset import load_ratings
    m = load_ratings(_io.StringIO("a\tx\t4\nb\ty\t4\n"), "generic-tsv")
    assert evaluate(_model(2, 2), m).mae == 3.0


def test_evaluate_errors(small_random):
    with pytest.raises(ValueError):
        evaluate(_model(small_random.n_users, small_random.n_items), small_random.subset([]))
    with pytest.raises(ValueError):
        evaluate(_model(1, 1), small_random)


def test_perfect_model_on_train():
    rng = np.random.default_rng(0)
    P_, Q_ = rng.uniform(0.5, 1.2, (5, 2)), rng.uniform(0.5, 1.2, (4, 2))
    from iemf.dataset import SparseRatingMatrix
    users, items = np.divmod(np.arange(20), 4)
    r = np.einsum("ek,ek->e", P_[users], Q_[items])
    m = SparseRatingMatrix(users, items, r, [str(x) for x in range(5)], [str(x) for x in range(4)],
                           (0, 5))
    assert evaluate(FactorModel(P_, Q_), m).mae == approx(0.0, abs=1e-15)


def test_coldstart_additivity(small_random):
    folds = kfold_split(small_random, 4, seed=0)
    tr, te = folds.folds[0]
    model, _ = train(tr, None, TrainConfig(k=3, beta=0, max_epochs=20))
    buckets = bucket_items(tr, (2, 4, 8))
    cs = coldstart_eval(model, te, buckets)
    overall = evaluate(model, te)
    assert cs.total_count() == overall.count
    weighted = sum(r.mae * r.count for r in cs.buckets.values() if r.count) / overall.count
    assert weighted == approx(overall.mae, abs=1e-12)
    assert list(cs.buckets) == ["1-2", "3-4", "5-8", ">8"]


def test_coldstart_one_bucket_and_empty(small_random):
    model = init_model(small_random.n_users, small_random.n_items, 2)
    cs = coldstart_eval(model, small_random, bucket_items(small_random, (100, 200)))
    overall = evaluate(model, small_random)
    assert cs.buckets["1-100"].mae == approx(overall.mae, abs=1e-15)
    assert cs.buckets["1-100"].count == overall.count
    assert cs.buckets[">200"].count == 0
    assert cs.as_dict()[">200"] == {"count": 0}
    assert list(coldstart_eval(model, small_random, bucket_items(small_random)).buckets) == \
        ["1-10", "11-20", "21-40", "41-80", "81-160", "161-320", "321-640", ">640"]


def test_cross_validate_structure():
    rows = "".join(f"u{k % 4}\ti{k}\t{1 + k % 5}\n" for k in range(10))
    from iemf.dataset import load_ratings
    data = load_ratings(io.StringIO(rows), "generic-tsv")
    cfg = TrainConfig(k=2, beta=0, max_epochs=5)
    res = cross_validate(data, config=cfg, k=2, seed=0)
    assert len(res.per_fold) == 2
    assert res.mean.mae == approx(np.mean([f.report.mae for f in res.per_fold]))
    assert res.mean.count == 10
    assert res.coldstart.total_count() == 10
    assert res.method == "RSVD"


@pytest.fixture
def attr_data():
    rng = np.random.default_rng(4)
    data = random_ratings(rng, 25, 15, 150)
    rows = "item\tg1\tg2\n" + "".join(f"{i}\t{rng.integers(2)}\t{rng.integers(3)}\n"
                                     for i in data.item_ids)
    return data, load_attributes(io.StringIO(rows))


def test_cross_validate_deterministic_and_parallel(attr_data):
    data, attrs = attr_data
    cfg = TrainConfig(k=3, beta=0.05, max_epochs=15)
    a = cross_validate(data, attrs, CouplingConfig(neighborhood_size=3), cfg, k=3, seed=2)
    b = cross_validate(data, attrs, CouplingConfig(neighborhood_size=3), cfg, k=3, seed=2,
                       jobs=3)
    assert a.to_json() == b.to_json()
    assert a.method == "IEMF"
    c = cross_validate(data, attrs, CouplingConfig(neighborhood_size=3), cfg, k=3, seed=3)
    assert c.to_json() != a.to_json()
    cb = cross_validate(data, attrs, CouplingConfig("sms", 3), cfg, k=3, seed=2)
    assert cb.method == "CBMF"
    with pytest.raises(ValueError):
        cross_validate(data, None, CouplingConfig(), cfg, k=3)


def test_cross_validate_csv(attr_data):
    data, _ = attr_data
    res = cross_validate(data, config=TrainConfig(k=2, beta=0, max_epochs=3), k=2)
    buf = io.StringIO()
    res.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "fold,mae,rmse,count" and lines[-1].startswith("mean,")
    assert len(lines) == 4


def test_sweep_single_point(attr_data):
    data, attrs = attr_data
    cfg = TrainConfig(k=2, beta=0.1, max_epochs=5)
    cpl = CouplingConfig(neighborhood_size=3)
    s = sweep("beta", [0.1], data, attrs, cpl, cfg, k=2, seed=0)
    single = cross_validate(data, attrs, cpl, cfg, k=2, seed=0)
    assert s.results[0].mean == single.mean
    buf = io.StringIO()
    s.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "axis_value,fold,mae,rmse"
    assert [l.split(",")[1] for l in lines[1:]] == ["0", "1", "mean"]


def test_sweep_axes(attr_data):
    data, attrs = attr_data
    cfg = TrainConfig(k=2, beta=0.1, max_epochs=5)
    for axis, values in (("k_dim", [1, 3]), ("neighborhood", [1, 4]), ("beta", [0.0, 0.2])):
        s = sweep(axis, values, data, attrs, CouplingConfig(neighborhood_size=3), cfg, k=2)
        assert len(s.results) == 2
        assert all(len(r.per_fold) == 2 for r in s.results)
        assert s.best()[0] in values
    assert s.results[0].method == "RSVD"
    with pytest.raises(ValueError):
        sweep("lr", [1], data)
    with pytest.raises(ValueError):
        sweep("beta", [], data)
