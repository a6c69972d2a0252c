import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerec.data import ImageRecord, Manifest, make_manifest, split_dataset
from stylerec.features.fvec import FeatureChannel
from stylerec.learner import (
    Hyperparams,
    LinearModel,
    OptimizerState,
    TrainingError,
    adagrad_step,
    default_grid,
    load_multimodel,
    loss_and_subgradient,
    model_from_dict,
    model_to_dict,
    objective,
    predict_score,
    save_multimodel,
    select_hyperparams,
    train_binary,
    train_one_vs_all,
)
from synth import blob_channel_data


class TestLoss:
    def test_hinge_outside_margin(self):
        assert loss_and_subgradient("hinge", 2.0, 1.0) == (0.0, 0.0)

    def test_hinge_boundary_satisfied(self):
        assert loss_and_subgradient("hinge", 1.0, 1.0) == (0.0, 0.0)

    def test_hinge_inside(self):
        assert loss_and_subgradient("hinge", 0.25, -1.0) == (0.75, 1.0)

    def test_logistic_at_zero(self):
        loss, scale = loss_and_subgradient("logistic", 0.0, 1.0)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        assert scale == pytest.approx(-0.5, abs=1e-15)

    def test_logistic_overflow_safe(self):
        loss, scale = loss_and_subgradient("logistic", -1000.0, 1.0)
        assert loss == pytest.approx(1000.0)
        assert scale == pytest.approx(-1.0)
        loss, scale = loss_and_subgradient("logistic", 1000.0, 1.0)
        assert loss == pytest.approx(0.0, abs=1e-300)
        assert scale == pytest.approx(0.0, abs=1e-300)

    def test_unknown(self):
        with pytest.raises(ValueError):
            loss_and_subgradient("squared", 0.0)

    @settings(max_examples=200, deadline=None)
    @given(m=st.floats(-20, 20), y=st.sampled_from([-1.0, 1.0]))
    def test_logistic_finite_difference(self, m, y):
        # derivative with respect to s = w.x, where margin = y * s
        d = 1e-5
        s = m * y
        fd = (loss_and_subgradient("logistic", y * (s + d))[0] - loss_and_subgradient("logistic", y * (s - d))[0]) / (2 * d)
        assert abs(fd - loss_and_subgradient("logistic", m, y)[1]) <= 1e-6

    @settings(max_examples=200, deadline=None)
    @given(m=st.floats(-5, 5), y=st.sampled_from([-1.0, 1.0]))
    def test_hinge_finite_difference_away_from_kink(self, m, y):
        d = 1e-5
        if abs(m - 1.0) < 2 * d:
            return
        s = m * y
        fd = (loss_and_subgradient("hinge", y * (s + d))[0] - loss_and_subgradient("hinge", y * (s - d))[0]) / (2 * d)
        assert abs(fd - loss_and_subgradient("hinge", m, y)[1]) <= 1e-6


class TestAdagradStep:
    def test_zero_gradient(self):
        st0 = OptimizerState(np.array([1.0, 2.0]))
        w = np.array([0.3, -0.7])
        st1, w1 = adagrad_step(st0, w, np.zeros(2), Hyperparams())
        np.testing.assert_array_equal(w1, w)
        np.testing.assert_array_equal(st1.grad_sq_accum, st0.grad_sq_accum)
        assert st1.step_count == 1

    def test_first_step_hand_computed(self):
        st1, w1 = adagrad_step(OptimizerState.zeros(2), np.zeros(2), np.array([2.0, -1.0]), Hyperparams(eta0=0.5))
        np.testing.assert_allclose(w1, [-0.5, 0.5], atol=1e-8)
        np.testing.assert_array_equal(st1.grad_sq_accum, [4.0, 1.0])

    def test_pure(self):
        st0 = OptimizerState.zeros(2)
        w = np.zeros(2)
        adagrad_step(st0, w, np.array([1.0, 1.0]), Hyperparams())
        assert (st0.grad_sq_accum == 0).all() and (w == 0).all()

    def test_l1_zero_is_plain_adagrad(self):
        rng = np.random.default_rng(0)
        st0 = OptimizerState(rng.random(5) + 0.1)
        w = rng.normal(size=5)
        g = rng.normal(size=5)
        _, w1 = adagrad_step(st0, w, g, Hyperparams(lambda1=0.0, eta0=0.3))
        G = st0.grad_sq_accum + g * g
        np.testing.assert_array_equal(w1, w - 0.3 / np.sqrt(G + 1e-8) * g)

    def test_soft_threshold_and_mask(self):
        st0 = OptimizerState.zeros(2)
        _, w1 = adagrad_step(st0, np.array([0.1, 0.1]), np.array([1.0, 1.0]), Hyperparams(lambda1=0.5, eta0=0.5), l1_mask=np.array([1.0, 0.0]))
        # u = 0.1 - 0.5 = -0.4; threshold r*lambda1 = 0.25 on coordinate 0 only
        np.testing.assert_allclose(w1, [-0.15, -0.4], atol=1e-8)

    def test_non_finite(self):
        with pytest.raises(TrainingError):
            adagrad_step(OptimizerState.zeros(1), np.zeros(1), np.array([np.nan]), Hyperparams())

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            adagrad_step(OptimizerState.zeros(2), np.zeros(3), np.zeros(3), Hyperparams())

    def test_accumulator_monotone(self):
        rng = np.random.default_rng(1)
        state, w = OptimizerState.zeros(4), np.zeros(4)
        prev = state.grad_sq_accum.copy()
        for _ in range(50):
            state, w = adagrad_step(state, w, rng.normal(size=4), Hyperparams(lambda1=0.01))
            assert (state.grad_sq_accum >= prev).all()
            prev = state.grad_sq_accum.copy()


def scripted_trace(xs, ys, loss, lambda1, lambda2, eta0, steps):
    """Replay the composite AdaGrad recurrence with scalar Python math."""
    w = [0.0, 0.0]
    G = [0.0, 0.0]
    out = []
    for t in range(steps):
        x, y = xs[t % len(xs)], ys[t % len(ys)]
        s = w[0] * x[0] + w[1] * x[1]
        m = y * s
        if loss == "hinge":
            c = -y if m < 1 else 0.0
        else:
            c = -y / (1.0 + math.exp(m))
        for j in range(2):
            g = c * x[j] + lambda2 * w[j]
            G[j] += g * g
            r = eta0 / math.sqrt(G[j] + 1e-8)
            u = w[j] - r * g
            w[j] = math.copysign(max(0.0, abs(u) - r * lambda1), u)
        out.append(list(w))
    return out


@pytest.mark.parametrize("loss", ["hinge", "logistic"])
@pytest.mark.parametrize("lambda1", [0.0, 0.1])
def test_two_step_trace(loss, lambda1):
    xs = [(1.0, -2.0), (-0.5, 0.3)]
    ys = [1.0, -1.0]
    expected = scripted_trace(xs, ys, loss, lambda1, 0.01, 0.5, 2)
    h = Hyperparams(lambda1=lambda1, lambda2=0.01, loss=loss)
    state, w = OptimizerState.zeros(2), np.zeros(2)
    for t in range(2):
        x, y = np.array(xs[t]), ys[t]
        _, c = loss_and_subgradient(loss, y * (w @ x), y)
        state, w = adagrad_step(state, w, c * x + 0.01 * w, h)
        np.testing.assert_allclose(w, expected[t], atol=1e-12, rtol=0)


def blobs2d(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X = rng.normal(0, 0.5, (n, 2)) + np.outer(y, [2.0, 2.0])
    return X, y


class TestTrainBinary:
    @pytest.mark.parametrize("loss", ["hinge", "logistic"])
    def test_separable_blobs(self, loss):
        X, y = blobs2d()
        m = train_binary(X, y, Hyperparams(loss=loss))
        s = predict_score(m, X)
        assert np.mean(np.sign(s) == y) >= 0.99
        pos, neg = s[y > 0], s[y < 0]
        assert np.mean(pos[:, None] > neg[None, :]) >= 0.99

    def test_sparsity(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(300, 100))
        y = np.where(rng.random(300) < 0.5, 1.0, -1.0)
        strong = train_binary(X, y, Hyperparams(lambda1=10.0))
        assert np.mean(strong.weights == 0.0) >= 0.9
        free = train_binary(X, y, Hyperparams(lambda1=0.0))
        assert np.mean(free.weights == 0.0) < 0.05

    def test_deterministic(self):
        X, y = blobs2d(seed=3)
        a = train_binary(X, y, Hyperparams(loss="logistic", seed=9))
        b = train_binary(X, y, Hyperparams(loss="logistic", seed=9))
        assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias

    def test_single_class(self):
        with pytest.raises(TrainingError):
            train_binary(np.zeros((3, 2)), np.ones(3), Hyperparams())

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            train_binary(np.zeros((3, 2)), np.array([1.0, -1.0]), Hyperparams())

    def test_objective_decreases(self):
        rng = np.random.default_rng(4)
        for seed in range(5):
            X = rng.normal(size=(150, 10))
            y = np.sign(X @ rng.normal(size=10) + rng.normal(0, 1.0, 150))
            for loss in ("hinge", "logistic"):
                m = train_binary(X, y, Hyperparams(loss=loss, lambda2=1e-3, seed=seed))
                assert m.history[-1] <= m.history[0]
                one = train_binary(X, y, Hyperparams(loss=loss, lambda2=1e-3, seed=seed, epochs=1))
                assert objective(m, X, y) <= objective(one, X, y) + 1e-9

    def test_bias_not_regularized(self):
        # all-positive-leaning data with a constant feature: L1 kills w but not b
        rng = np.random.default_rng(5)
        X = rng.normal(size=(200, 3))
        y = np.where(rng.random(200) < 0.85, 1.0, -1.0)
        m = train_binary(X, y, Hyperparams(lambda1=50.0))
        assert (m.weights == 0).all()
        assert m.bias > 0

    def test_order_of_examples_only_matters_through_visit_order(self):
        X, y = blobs2d(seed=6)
        perm = np.random.default_rng(0).permutation(len(y))
        a = train_binary(X, y, Hyperparams(epochs=1))
        b = train_binary(X[perm], y[perm], Hyperparams(epochs=1))
        # different visit orders, same ranking quality
        sa, sb = predict_score(a, X), predict_score(b, X)
        assert np.mean(np.sign(sa) == y) >= 0.97 and np.mean(np.sign(sb) == y) >= 0.97


class TestPredict:
    def test_zero_weights(self):
        m = LinearModel("c", np.zeros(4))
        assert predict_score(m, np.arange(4.0)) == 0.0

    def test_unit_vector(self):
        m = LinearModel("c", np.array([1.0, 0.0, 0.0]))
        assert predict_score(m, np.array([3.0, 5.0, -1.0])) == 3.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            predict_score(LinearModel("c", np.zeros(2)), np.zeros(3))

    def test_batch(self):
        m = LinearModel("c", np.array([1.0, 2.0]), bias=0.5)
        np.testing.assert_allclose(predict_score(m, np.array([[1.0, 1.0], [0.0, -1.0]])), [3.5, -1.5])


def blob_setup(n_classes=3, n_per_class=60, dim=8, seed=0):
    X, y = blob_channel_data(n_per_class, dim, n_classes, seed)
    classes = [f"c{k}" for k in range(n_classes)]
    ids = [f"r{i:04d}" for i in range(len(y))]
    m = make_manifest(classes, [(ids[i], "p", [classes[y[i]]]) for i in range(len(y))])
    m = split_dataset(m, seed)
    return m, FeatureChannel("blobs", dim, ids, X), X, y


class TestOneVsAll:
    def test_three_blobs(self):
        m, ch, X, y = blob_setup()
        mm = train_one_vs_all(m, ch, Hyperparams())
        assert len(mm.models) == 3
        test = [r.id for r in m.in_split("test")]
        truth = [m.classes.index(next(iter(m.by_id()[i].labels))) for i in test]
        pred = np.argmax(mm.score_channel(ch, test), axis=1)
        assert np.mean(pred == truth) >= 0.95
        assert set(mm.train_ids) == {r.id for r in m.in_split("train")}

    def test_single_class_manifest(self):
        ids = [f"r{i}" for i in range(30)]
        rng = np.random.default_rng(0)
        m = Manifest(["A"], [ImageRecord(i, "p", frozenset(["A"]) if k % 2 else frozenset(), "train") for k, i in enumerate(ids)])
        mm = train_one_vs_all(m, FeatureChannel("x", 3, ids, rng.normal(size=(30, 3))), Hyperparams())
        assert len(mm.models) == 1

    def test_twenty_classes(self):
        m, ch, *_ = blob_setup(n_classes=20, n_per_class=10, dim=6)
        mm = train_one_vs_all(m, ch, Hyperparams(epochs=2))
        assert len(mm.models) == 20 and mm.classes == m.classes

    def test_error_tagged_by_class(self):
        ids = ["a", "b", "c"]
        m = Manifest(["A", "B"], [ImageRecord(i, "p", frozenset(["A"]), "train") for i in ids])
        with pytest.raises(TrainingError, match=r"\[A\]"):
            train_one_vs_all(m, FeatureChannel("x", 2, ids, np.zeros((3, 2))), Hyperparams())


class TestSelect:
    def test_single_config(self):
        m, ch, *_ = blob_setup()
        h = Hyperparams(lambda1=1e-5)
        best, table = select_hyperparams([h], m, ch)
        assert best == h and len(table) == 1

    def test_over_regularization_loses(self):
        m, ch, *_ = blob_setup()
        small, huge = Hyperparams(lambda2=1e-6), Hyperparams(lambda2=1e6)
        best, table = select_hyperparams([huge, small], m, ch)
        assert best == small
        assert table[1]["mean_ap"] > table[0]["mean_ap"]

    def test_tie_break_order(self, monkeypatch):
        import stylerec.evaluation as ev

        m, ch, *_ = blob_setup()
        monkeypatch.setattr(ev, "balanced_mean_ap", lambda *a, **k: ev.APFragment({}, 0.5, [], 0))
        grid = [
            Hyperparams(lambda1=0.0, lambda2=1.0, loss="hinge"),
            Hyperparams(lambda1=1e-3, lambda2=0.0, loss="logistic"),
            Hyperparams(lambda1=1e-3, lambda2=0.0, loss="hinge"),
            Hyperparams(lambda1=1e-3, lambda2=1e-5, loss="logistic"),
        ]
        best, _ = select_hyperparams(grid, m, ch)
        assert best == grid[3]
        best, _ = select_hyperparams(grid[:3], m, ch)
        assert best == grid[2]
        twins = [Hyperparams(seed=1), Hyperparams(seed=2)]
        best, _ = select_hyperparams(twins, m, ch)
        assert best == twins[0]

    def test_default_grid_table_shape(self):
        grid = default_grid(epochs=1)
        assert len(grid) == 32
        assert {h.loss for h in grid} == {"hinge", "logistic"}
        m, ch, *_ = blob_setup(n_per_class=20, dim=4)
        best, table = select_hyperparams(grid, m, ch)
        assert len(table) == 32 and best in grid

    def test_failures_do_not_abort(self, monkeypatch):
        import stylerec.learner as learner

        m, ch, *_ = blob_setup()
        real = learner.train_one_vs_all

        def flaky(manifest, channel, h, split="train"):
            if h.lambda2 > 1:
                raise TrainingError("boom")
            return real(manifest, channel, h, split)

        monkeypatch.setattr(learner, "train_one_vs_all", flaky)
        grid = [Hyperparams(lambda2=10.0), Hyperparams()]
        best, table = select_hyperparams(grid, m, ch)
        assert best == grid[1]
        assert table[0]["error"] == "boom" and table[0]["mean_ap"] is None

    def test_all_fail(self):
        m, ch, *_ = blob_setup()
        broken = Manifest(m.classes, [r if r.split != "train" or "c0" not in r.labels else ImageRecord(r.id, r.path, r.labels, "test") for r in m.records])
        with pytest.raises(TrainingError):
            select_hyperparams([Hyperparams()], broken, ch)


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        m, ch, *_ = blob_setup()
        mm = train_one_vs_all(m, ch, Hyperparams(loss="logistic", lambda1=1e-4))
        files = save_multimodel(mm, tmp_path / "models")
        assert len(files) == 3
        back = load_multimodel(tmp_path / "models")
        X = ch.matrix
        np.testing.assert_array_equal(back.scores(X), mm.scores(X))
        assert back.train_ids == mm.train_ids

    def test_format_tag(self):
        d = model_to_dict(LinearModel("c", np.ones(3)))
        assert d["format"] == "SMDL1"
        d["format"] = "XXX"
        with pytest.raises(ValueError):
            model_from_dict(d)


@pytest.mark.parametrize("bad", [dict(lambda1=-1), dict(lambda2=-0.1), dict(loss="sq"), dict(eta0=0), dict(epochs=0)])
def test_hyperparam_validation(bad):
    with pytest.raises(ValueError):
        Hyperparams(**bad)
