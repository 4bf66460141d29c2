import numpy as np
import pytest
from pytest import approx

from iemf.coupling import SimilarityGraph, laplacian
from iemf.dataset import SparseRatingMatrix
from iemf.errors import DataError, DivergenceError
from iemf.factorization import (FactorModel, TrainConfig, TrainTrace, gradients,
                                graph_regularizer, init_model, objective, sgd_step, train,
                                train_rsvd)

from conftest import random_ratings


def one_rating(n_users, n_items, u, i, r):
    return SparseRatingMatrix([u], [i], [r], [f"u{x}" for x in range(n_users)],
                              [f"i{x}" for x in range(n_items)], (-100, 100))


def random_graph(rng, n, p=0.4):
    s = np.triu(rng.random((n, n)) * (rng.random((n, n)) < p), 1)
    return SimilarityGraph.from_matrix(s + s.T)


def model_of(p, q):
    return FactorModel(np.atleast_2d(np.asarray(p, dtype=float)),
                       np.atleast_2d(np.asarray(q, dtype=float)))


def test_init_model():
    a = init_model(943, 1682, 10, seed=5)
    b = init_model(943, 1682, 10, seed=5)
    assert a == b
    assert a.P.shape == (10, 943) and a.Q.shape == (10, 1682)
    small = init_model(1, 1, 1)
    assert 0 <= small.P[0, 0] <= 0.1 and 0 <= small.Q[0, 0] <= 0.1
    assert init_model(3, 4, 2, seed=6) != a
    with pytest.raises(ValueError):
        init_model(0, 3, 2)


def test_predict():
    m = FactorModel(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.5, 0.5], [1.0, 0.0]]))
    assert m.predict(0, 0) == 0.0 and m.predict(0, 1) == 0.0
    assert m.predict(1, 0) == approx(0.5)
    assert m.predict(1, 1) == 1.0
    with pytest.raises(IndexError):
        m.predict(2, 0)


def test_objective_zero_model():
    m = model_of([[0.0]], [[0.0]])
    train_m = one_rating(1, 1, 0, 0, 3.0)
    assert objective(m, train_m, None, TrainConfig(beta=0)) == 4.5


def test_objective_beta_zero_equals_rsvd(small_random):
    rng = np.random.default_rng(0)
    m = init_model(small_random.n_users, small_random.n_items, 3, seed=1)
    g = random_graph(rng, small_random.n_items)
    cfg = TrainConfig(k=3, beta=0.0)
    assert objective(m, small_random, g, cfg) == objective(m, small_random, None, cfg)


def test_trace_form():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        n, k = int(rng.integers(2, 15)), int(rng.integers(1, 6))
        beta = float(rng.uniform(0.01, 2.0))
        dense = np.triu(rng.random((n, n)), 1)
        dense = dense + dense.T
        g = SimilarityGraph.from_matrix(dense)
        Q = rng.normal(size=(k, n))
        lap = np.diag(dense.sum(axis=1)) - dense
        oracle = beta * np.trace(Q @ lap @ Q.T)
        assert graph_regularizer(Q.T, g, beta) == approx(oracle, rel=1e-9, abs=1e-9)
        assert beta * sum(laplacian(g).quadratic(Q[r]) for r in range(k)) == \
            approx(oracle, rel=1e-9, abs=1e-9)


def test_gradient_examples():
    cfg = TrainConfig(k=2, lambda1=0.1, lambda2=0.0, beta=0.0, eta=0.005)
    m = model_of([[1.0, 0.0]], [[0.5, 0.5]])
    gp, gq = gradients(m, 0, 0, 4.0, None, cfg)
    assert gp == approx([-1.65, -1.75], abs=1e-15)
    exact = model_of([[1.0, 2.0]], [[0.5, 0.25]])
    z = TrainConfig(k=2, lambda1=0, lambda2=0, beta=0)
    gp, gq = gradients(exact, 0, 0, 1.0, None, z)
    assert np.all(gp == 0) and np.all(gq == 0)


def _fd_gradient(model, train_m, graph, cfg, u, i, h=1e-6):
    fd_p, fd_q = np.zeros(model.k), np.zeros(model.k)
    for out, arr, row in ((fd_p, model.user_factors, u), (fd_q, model.item_factors, i)):
        for k in range(model.k):
            old = arr[row, k]
            arr[row, k] = old + h
            hi = objective(model, train_m, graph, cfg)
            arr[row, k] = old - h
            lo = objective(model, train_m, graph, cfg)
            arr[row, k] = old
            out[k] = (hi - lo) / (2 * h)
    return fd_p, fd_q


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def gradient_check_errors(n_instances=50, seed=7):
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        n_users, n_items, k = int(rng.integers(1, 6)), int(rng.integers(2, 12)), int(rng.integers(1, 6))
        u, i = int(rng.integers(n_users)), int(rng.integers(n_items))
        cfg = TrainConfig(k=k, lambda1=float(rng.uniform(0, 1)), lambda2=float(rng.uniform(0, 1)),
                          beta=float(rng.uniform(0.05, 1.5)))
        model = FactorModel(rng.normal(size=(n_users, k)), rng.normal(size=(n_items, k)))
        r = float(rng.uniform(1, 5))
        train_m = one_rating(n_users, n_items, u, i, r)
        graph = random_graph(rng, n_items)
        if graph.degree[i] == 0:
            j = (i + 1) % n_items
            dense = graph.to_dense()
            dense[i, j] = dense[j, i] = 0.5
            graph = SimilarityGraph.from_matrix(dense)
        gp, gq = gradients(model, u, i, r, graph, cfg)
        fp, fq = _fd_gradient(model, train_m, graph, cfg, u, i)
        errors.append(max(_rel(gp, fp), _rel(gq, fq)))
    return np.array(errors)


def test_gradient_finite_differences():
    errors = gradient_check_errors()
    assert errors.max() < 1e-5


def test_sgd_step_example():
    cfg = TrainConfig(k=2, lambda1=0.1, lambda2=0.1, beta=0.0, eta=0.005)
    m = model_of([[1.0, 0.0]], [[0.5, 0.5]])
    sgd_step(m, 0, 0, 4.0, None, cfg)
    assert m.user_factors[0] == approx([1.00825, 0.00875], abs=1e-15)
    # q uses the pre-update p_u and the same residual 3.5
    assert m.item_factors[0] == approx([0.5 + 0.005 * (3.5 - 0.05), 0.5 - 0.005 * 0.05], abs=1e-15)


def test_sgd_step_moves_along_gradient():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 6, p=0.8)
    cfg = TrainConfig(k=3, beta=0.4, eta=0.01)
    m = FactorModel(rng.normal(size=(2, 3)), rng.normal(size=(6, 3)))
    before = m.copy()
    gp, gq = gradients(before, 1, 2, 3.0, g, cfg)
    sgd_step(m, 1, 2, 3.0, g, cfg)
    assert m.user_factors[1] == approx(before.user_factors[1] - cfg.eta * gp, abs=1e-14)
    assert m.item_factors[2] == approx(before.item_factors[2] - cfg.eta * gq, abs=1e-14)


def test_sgd_step_isolated_item_is_rsvd():
    rng = np.random.default_rng(1)
    dense = np.zeros((3, 3))
    dense[1, 2] = dense[2, 1] = 0.7
    g = SimilarityGraph.from_matrix(dense)
    cfg = TrainConfig(k=2, beta=0.5)
    a = FactorModel(rng.normal(size=(1, 2)), rng.normal(size=(3, 2)))
    b = a.copy()
    sgd_step(a, 0, 0, 4.0, g, cfg)
    sgd_step(b, 0, 0, 4.0, None, cfg)
    assert a == b


def test_rank_one_fixed_point():
    train_m = one_rating(1, 1, 0, 0, 4.0)
    cfg = TrainConfig(k=1, lambda1=0, lambda2=0, beta=0, eta=0.05, max_epochs=5000, epsilon=0)
    model, trace = train(train_m, None, cfg)
    assert model.predict(0, 0) == approx(4.0, abs=1e-3)
    assert trace.epochs_run <= 5000


def test_beta_zero_bitwise(small_random):
    rng = np.random.default_rng(5)
    g = random_graph(rng, small_random.n_items)
    cfg = TrainConfig(k=4, beta=0.0, max_epochs=30, seed=3)
    with_graph, t1 = train(small_random, g, cfg)
    plain, t2 = train_rsvd(small_random, cfg)
    assert with_graph == plain
    assert t1.objective_per_epoch == t2.objective_per_epoch


def test_train_deterministic_and_seeded(small_random):
    rng = np.random.default_rng(5)
    g = random_graph(rng, small_random.n_items)
    cfg = TrainConfig(k=4, beta=0.05, max_epochs=20, seed=1)
    a, ta = train(small_random, g, cfg)
    b, tb = train(small_random, g, cfg)
    assert a == b and ta.objective_per_epoch == tb.objective_per_epoch
    c, _ = train(small_random, g, cfg.replace(seed=2))
    assert c != a


def test_train_trace_and_stop(small_random):
    cfg = TrainConfig(k=3, beta=0.0, max_epochs=400, epsilon=1e-3, eta=0.01)
    _, trace = train(small_random, None, cfg)
    assert trace.epochs_run == len(trace.objective_per_epoch)
    assert trace.stop_reason == "converged" and trace.epochs_run < 400
    obj = np.array([trace.initial_objective] + trace.objective_per_epoch)
    assert np.all(np.diff(obj)[:-1] < -1e-3)
    _, short = train(small_random, None, cfg.replace(max_epochs=2, epsilon=0))
    assert short.stop_reason == "max_epochs" and short.epochs_run == 2


def test_file_order(small_random):
    cfg = TrainConfig(k=2, beta=0.0, max_epochs=3, shuffle=False)
    a, _ = train(small_random, None, cfg)
    b, _ = train(small_random, None, cfg.replace(seed=0))
    assert a == b


def test_divergence(small_random):
    cfg = TrainConfig(k=5, beta=0.0, eta=5.0, max_epochs=50, epsilon=-0.0)
    with pytest.raises(DivergenceError) as info:
        train(small_random, None, cfg)
    assert info.value.epoch >= 1
    assert "epoch" in str(info.value)


def test_train_preconditions(small_random):
    with pytest.raises(ValueError):
        train(small_random, None, TrainConfig(beta=0.1))
    with pytest.raises(DataError):
        train(small_random, SimilarityGraph.empty(3), TrainConfig(beta=0.1))


@pytest.mark.parametrize("field,value", [("eta", 0.0), ("lambda1", -1.0), ("beta", -0.1),
                                         ("max_epochs", 0), ("epsilon", -1.0), ("k", 0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value})


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = FactorModel(rng.normal(size=(4, 3)) / 7, rng.normal(size=(5, 3)) * 1e-9, seed=12)
    path = tmp_path / "model.txt"
    m.save(path)
    again = FactorModel.load(path)
    assert again == m and again.seed == 12
    head = path.read_text().splitlines()[0]
    assert head == "3 4 5 12"
    path.write_text("3 4 5 1\n1 2\n")
    with pytest.raises(DataError):
        FactorModel.load(path)


def test_trace_file(tmp_path):
    t = TrainTrace([3.0, 2.5], 4.0, "max_epochs")
    t.save(tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text() == "epoch,objective\n1,3\n2,2.5\n"
