import numpy as np
import pytest
from hypothesis import given, strategies as st

from bifrom import classifier as cl, local_rom as lr
from bifrom.errors import DimensionMismatchError, ValidationError


@pytest.fixture(scope="module")
def pf_setup(pitchfork, pitchfork_snaps):
    cm = lr.kmeans_cluster(pitchfork_snaps, 10, seed=0)
    bases = lr.build_cluster_bases(pitchfork_snaps, cm, rank=1)
    table = lr.build_error_table(pitchfork_snaps, bases, pitchfork, labels=cm.labels)
    scaler = lr.ParameterScaler.fit(pitchfork_snaps.parameters())
    return table, scaler(pitchfork_snaps.parameters())


@pytest.fixture(scope="module")
def dual(pf_setup):
    table, X = pf_setup
    return cl.train_dual(table, X, hidden=(32, 32), epochs=3000, seed=0)


def test_init_deterministic():
    a, b = cl.init_mlp((2, 8, 3), seed=4), cl.init_mlp((2, 8, 3), seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    c = cl.init_mlp((2, 8, 3), seed=5)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_invalid_sizes():
    with pytest.raises(ValidationError):
        cl.init_mlp((2,))
    with pytest.raises(ValidationError):
        cl.init_mlp((2, 0, 3))


def test_zero_weights_give_uniform_softmax():
    clf = cl.init_mlp((3, 4, 5))
    clf = type(clf)(clf.sizes, tuple(np.zeros_like(W) for W in clf.weights), clf.biases)
    P = cl.predict_proba(clf, np.random.default_rng(0).standard_normal((7, 3)))
    assert np.allclose(P, 0.2)


def test_forward_matches_hand_computation():
    W0 = np.array([[1.0, -2.0], [0.5, 1.0]])
    b0 = np.array([0.0, 0.5])
    W1 = np.array([[2.0, 0.0], [-1.0, 1.0]])
    b1 = np.array([0.1, -0.1])
    clf = cl.MlpClassifier((2, 2, 2), (W0, W1), (b0, b1))
    x = np.array([1.0, 2.0])
    # hidden pre-activation: [1 + 1, -2 + 2 + 0.5] = [2, 0.5]
    h = np.array([2.0, 0.5])
    z = np.array([2 * 2 - 0.5 + 0.1, 0.5 - 0.1])
    logits, _ = cl.forward(clf, x)
    assert np.allclose(logits[0], z)
    p = np.exp(z) / np.exp(z).sum()
    assert np.allclose(cl.predict_proba(clf, x)[0], p)
    assert np.allclose(np.maximum(x @ W0 + b0, 0), h)


def test_forward_dimension_check():
    with pytest.raises(DimensionMismatchError):
        cl.forward(cl.init_mlp((2, 3, 2)), np.ones((4, 3)))


@given(shift=st.floats(-50, 50))
def test_softmax_shift_invariant(shift):
    Z = np.random.default_rng(1).standard_normal((5, 4))
    assert np.allclose(cl.softmax(Z), cl.softmax(Z + shift))
    assert np.allclose(cl.softmax(Z).sum(axis=1), 1.0)


def test_softmax_extreme_logits():
    P = cl.softmax(np.array([[1e4, 0.0, -1e4]]))
    assert np.all(np.isfinite(P)) and P[0, 0] == pytest.approx(1.0)


def test_ties_go_to_lowest_id():
    clf = cl.init_mlp((2, 3))
    clf = type(clf)(clf.sizes, (np.zeros((2, 3)),), (np.array([1.0, 2.0, 2.0]),))
    assert cl.predict(clf, np.ones((2, 2))).tolist() == [1, 1]


def test_separable_toy_set():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (200, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    clf = cl.train(cl.init_mlp((2, 16, 2), seed=0), X, y, epochs=500, lr=1e-2)
    assert clf.train_accuracy == 1.0
    assert clf.loss_history[-1] < clf.loss_history[0]


def test_single_class():
    X = np.random.default_rng(0).standard_normal((10, 2))
    clf = cl.train(cl.init_mlp((2, 4, 3), seed=0), X, np.zeros(10, int), epochs=200, lr=1e-2)
    assert clf.train_accuracy == 1.0


def test_label_range_checked():
    with pytest.raises(ValidationError):
        cl.train(cl.init_mlp((2, 3)), np.ones((2, 2)), [0, 3], epochs=1)
    with pytest.raises(DimensionMismatchError):
        cl.train(cl.init_mlp((2, 3)), np.ones((2, 2)), [0], epochs=1)


def test_training_bitwise_deterministic():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((50, 2)), rng.integers(0, 3, 50)
    a = cl.train(cl.init_mlp((2, 8, 3), seed=1), X, y, epochs=100, lr=1e-2)
    b = cl.train(cl.init_mlp((2, 8, 3), seed=1), X, y, epochs=100, lr=1e-2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert a.loss_history == b.loss_history


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_linear_model():
    rng = np.random.default_rng(0)
    clf = cl.init_mlp((3, 4), seed=0)
    X, y = rng.standard_normal((20, 3)), rng.integers(0, 4, 20)
    assert cl.gradient_check(clf, X, y, n_weights=16) < 1e-9


def test_gradient_small_net():
    rng = np.random.default_rng(0)
    clf = cl.init_mlp((2, 8, 2), seed=0)
    X, y = rng.standard_normal((20, 2)), rng.integers(0, 2, 20)
    assert cl.gradient_check(clf, X, y, n_weights=42) < 1e-5


@pytest.mark.parametrize("hidden", [(32, 32), cl.DEFAULT_HIDDEN], ids=["2x32", "5x512"])
def test_gradient_deep_nets(hidden):
    rng = np.random.default_rng(0)
    clf = cl.init_mlp((2, *hidden, 10), seed=0)
    X, y = rng.uniform(0, 1, (30, 2)), rng.integers(0, 10, 30)
    assert cl.gradient_check(clf, X, y, n_weights=100) < 1e-5


def test_loss_shift_matches_direct_difference():
    rng = np.random.default_rng(3)
    clf = cl.init_mlp((2, 6, 6, 3), seed=2)
    X, y = rng.standard_normal((15, 2)), rng.integers(0, 3, 15)
    _, (acts, pre) = cl.forward(clf, X)
    base = cl.cross_entropy(acts[-1], y)
    for li, idx in [(0, (1, 2)), (2, (4, 0)), (3, (1,)), (5, (2,))]:
        params = [p.copy() for p in clf.params()]
        params[li][idx] += 0.05
        moved = cl.MlpClassifier(clf.sizes, tuple(params[:3]), tuple(params[3:]))
        direct = cl.cross_entropy(cl.forward(moved, X)[0], y) - base
        assert cl._loss_shift(clf, acts, pre, y, li, idx, 0.05) == pytest.approx(direct, rel=1e-9)


def test_gradient_check_flags_wrong_gradient(monkeypatch):
    rng = np.random.default_rng(0)
    clf = cl.init_mlp((2, 8, 2), seed=0)
    X, y = rng.standard_normal((20, 2)), rng.integers(0, 2, 20)
    real = cl.loss_and_grads

    def skewed(*args):
        loss, gW, gb = real(*args)
        return loss, [1.01 * g for g in gW], gb

    monkeypatch.setattr(cl, "loss_and_grads", skewed)
    assert cl.gradient_check(clf, X, y) > 1e-3


# ---------------------------------------------------------------------------
# dual classifiers on the pitchfork table
# ---------------------------------------------------------------------------

def test_dual_training_accuracy(dual):
    assert dual.upper.train_accuracy >= 0.95
    assert dual.lower.train_accuracy >= 0.95


def test_branch_labels_partition(pf_setup):
    table, _ = pf_setup
    up, _ = cl.branch_labels(table, "upper")
    lo, _ = cl.branch_labels(table, "lower")
    tags = np.array(table.branches)
    assert set(tags[up]) == {"single", "upper"} and set(tags[lo]) == {"single", "lower"}
    assert np.intersect1d(up, lo).size == (tags == "single").sum()


def test_dual_nets_split_two_solution_params(pf_setup, dual):
    table, X = pf_setup
    tags = np.array(table.branches)
    two = np.flatnonzero(tags == "upper")
    differ = [dual.predict(X[i])[0] != dual.predict(X[i])[1] for i in two]
    assert np.mean(differ) >= 0.95


def test_dual_nets_agree_on_single_rows(pf_setup, dual):
    """Single-solution rows are shared training data, so both nets should pick the same cluster."""
    table, X = pf_setup
    single = np.flatnonzero(np.array(table.branches) == "single")
    best = table.best_clusters()
    for i in single:
        u, l = dual.predict(X[i])
        assert u == l == best[i]


def test_save_load_round_trip(tmp_path, dual):
    cl.save_mlp(dual.upper, tmp_path, "upper", lo=[0.0, 0.5], hi=[0.3, 1.0])
    back = cl.load_mlp(tmp_path, "upper")
    assert back.sizes == dual.upper.sizes
    assert all(np.array_equal(p, q) for p, q in zip(back.params(), dual.upper.params()))
    X = np.random.default_rng(0).uniform(0, 1, (50, 2))
    assert np.array_equal(cl.predict(back, X), cl.predict(dual.upper, X))


def test_load_rejects_bad_shape(tmp_path, dual):
    cl.save_mlp(dual.upper, tmp_path, "m")
    (tmp_path / "m_W0.csv").write_text("1.0,2.0\n")
    with pytest.raises(DimensionMismatchError):
        cl.load_mlp(tmp_path, "m")
