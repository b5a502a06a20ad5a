import math

import numpy as np
import pytest

from routekit import learn
from routekit.dataprep import Query, SoftLabelRow, TrainExample, TrainingSet, sample_weights
from routekit.embed import HashEmbedder, SparseVector, fit_vectorizer, vectorize
from routekit.errors import DataError, TrainingDiverged
from routekit.learn import (HeadParams, MlpParams, OptimizerState, TrainConfig,
                            head_config, head_forward, head_gradients, head_init,
                            load_model, mlp_forward, mlp_gradients, mlp_init,
                            optimizer_step, save_model, soft_cross_entropy,
                            train_classifier)


def sparse(dense):
    dense = np.asarray(dense, dtype=np.float64)
    idx = np.nonzero(dense)[0].astype(np.int64)
    return SparseVector(indices=idx, values=dense[idx], dimension=len(dense))


def random_sparse(rng, dim, density=0.5):
    dense = rng.standard_normal(dim) * (rng.uniform(size=dim) < density)
    return sparse(dense)


def random_target(rng, n):
    t = rng.uniform(0.1, 1.0, size=n)
    return t / t.sum()


class TestMlpInit:
    def test_bit_identical_per_seed(self):
        p1, p2 = mlp_init(10, 6, 3, seed=9), mlp_init(10, 6, 3, seed=9)
        for (_, a), (_, b) in zip(p1.tensors(), p2.tensors()):
            assert np.array_equal(a, b)

    def test_biases_zero(self):
        p = mlp_init(10, 6, 3, seed=0)
        assert not p.b1.any() and not p.b2.any()

    def test_glorot_bound(self):
        p = mlp_init(40, 20, 5, seed=1)
        assert np.abs(p.w1).max() <= math.sqrt(6 / (40 + 20))
        assert np.abs(p.w2).max() <= math.sqrt(6 / (20 + 5))


class TestForward:
    def test_zero_params_uniform(self):
        params = MlpParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 5)), np.zeros(5))
        _, y = mlp_forward(params, sparse([1.0, -2.0, 0.0, 3.0]))
        assert np.allclose(y, 0.2, atol=1e-12)

    def test_relu_kills_negative_preactivations(self):
        params = MlpParams(w1=-np.ones((2, 3)), b1=np.zeros(3),
                           w2=np.ones((3, 4)), b2=np.array([0.0, 1.0, 0.0, 0.0]))
        h, y = mlp_forward(params, sparse([1.0, 2.0]))
        assert not h.any()
        expected = np.exp([0, 1, 0, 0]) / np.exp([0, 1, 0, 0]).sum()
        assert np.allclose(y, expected, atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n, m, e = rng.integers(2, 12), rng.integers(1, 9), rng.integers(2, 6)
            params = mlp_init(n, m, e, seed=int(rng.integers(1000)))
            params.b1[:] = rng.standard_normal(m)
            params.b2[:] = rng.standard_normal(e)
            x = random_sparse(rng, n)
            h, y = mlp_forward(params, x)
            # independent straightforward matrix arithmetic
            z1 = params.w1.T @ x.to_dense() + params.b1
            h_ref = np.maximum(z1, 0.0)
            z2 = params.w2.T @ h_ref + params.b2
            y_ref = np.exp(z2 - z2.max()); y_ref /= y_ref.sum()
            assert np.abs(h - h_ref).max() < 1e-12
            assert np.abs(y - y_ref).max() < 1e-12

    def test_probability_vector_for_arbitrary_inputs(self):
        rng = np.random.default_rng(4)
        params = mlp_init(8, 5, 4, seed=0)
        for _ in range(100):
            x = random_sparse(rng, 8)
            _, y = mlp_forward(params, x)
            assert abs(y.sum() - 1.0) < 1e-9 and np.all(y >= 0)

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(5)
        params = mlp_init(6, 4, 3, seed=2)
        x = random_sparse(rng, 6)
        _, y1 = mlp_forward(params, x)
        params.b2 += 7.5
        _, y2 = mlp_forward(params, x)
        assert np.allclose(y1, y2, atol=1e-9)
        head = HeadParams(w=rng.standard_normal((6, 3)), b=rng.standard_normal(3))
        xd = rng.standard_normal(6)
        y1 = head_forward(head, xd)
        head.b -= 123.0
        assert np.allclose(head_forward(head, xd), y1, atol=1e-9)

    def test_dimension_mismatch(self):
        params = mlp_init(4, 3, 2, seed=0)
        with pytest.raises(DataError):
            mlp_forward(params, sparse([1.0, 2.0]))


class TestSoftCrossEntropy:
    def test_self_entropy_is_minimum(self):
        rng = np.random.default_rng(6)
        target = random_target(rng, 4)
        base = soft_cross_entropy(target, target, weight=2.0)
        assert base >= 0
        for _ in range(50):
            other = random_target(rng, 4)
            assert soft_cross_entropy(other, target, weight=2.0) >= base - 1e-12

    def test_one_hot_match_zero(self):
        assert soft_cross_entropy(np.array([0.0, 1.0]), np.array([0.0, 1.0])) == 0.0

    def test_ln_two_case(self):
        loss = soft_cross_entropy(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1.0)
        assert loss == pytest.approx(0.6931471805599453, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            soft_cross_entropy(np.ones(2) / 2, np.ones(3) / 3)


def finite_difference(params, batch, grad_fn, forward_loss, eps=1e-5):
    """Central differences over every coordinate of every tensor."""
    grads = grad_fn(params, batch)
    worst = 0.0
    for name, tensor in params.tensors():
        analytic = dict(grads.tensors())[name]
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = tensor[i]
            tensor[i] = orig + eps
            up = forward_loss(params, batch)
            tensor[i] = orig - eps
            down = forward_loss(params, batch)
            tensor[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(analytic[i]), abs(fd), 1e-8)
            worst = max(worst, abs(analytic[i] - fd) / denom)
            it.iternext()
    return worst


def mlp_batch_loss(params, batch):
    return sum(soft_cross_entropy(mlp_forward(params, x)[1], t, w)
               for x, t, w in batch) / len(batch)


def head_batch_loss(params, batch):
    return sum(soft_cross_entropy(head_forward(params, x), t, w)
               for x, t, w in batch) / len(batch)


class TestGradients:
    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            n, m, e = 6, 4, 3
            params = mlp_init(n, m, e, seed=trial)
            params.b1[:] = rng.standard_normal(m) * 0.1
            params.b2[:] = rng.standard_normal(e) * 0.1
            batch = [(random_sparse(rng, n), random_target(rng, e),
                      float(rng.uniform(0.2, 2.0))) for _ in range(4)]
            worst = finite_difference(params, batch, mlp_gradients, mlp_batch_loss)
            assert worst <= 1e-4

    def test_head_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            d, e = 5, 4
            params = HeadParams(w=rng.standard_normal((d, e)) * 0.3,
                                b=rng.standard_normal(e) * 0.1)
            batch = [(rng.standard_normal(d), random_target(rng, e),
                      float(rng.uniform(0.2, 2.0))) for _ in range(4)]
            worst = finite_difference(params, batch, head_gradients, head_batch_loss)
            assert worst <= 1e-4

    def test_duplicated_sample_same_gradient(self):
        rng = np.random.default_rng(9)
        params = mlp_init(5, 3, 2, seed=1)
        sample = (random_sparse(rng, 5), random_target(rng, 2), 1.3)
        g1 = mlp_gradients(params, [sample])
        g2 = mlp_gradients(params, [sample, sample])
        for (_, a), (_, b) in zip(g1.tensors(), g2.tensors()):
            assert np.allclose(a, b, atol=1e-15)

    def test_zero_weights_zero_gradients(self):
        rng = np.random.default_rng(10)
        params = mlp_init(5, 3, 2, seed=1)
        batch = [(random_sparse(rng, 5), random_target(rng, 2), 0.0)
                 for _ in range(3)]
        grads = mlp_gradients(params, batch)
        for _, tensor in grads.tensors():
            assert not tensor.any()

    def test_empty_batch(self):
        with pytest.raises(DataError):
            mlp_gradients(mlp_init(3, 2, 2, seed=0), [])


class TestOptimizer:
    def test_zero_grads_no_decay_is_identity(self):
        params = HeadParams(w=np.full((2, 2), 3.0), b=np.array([1.0, -1.0]))
        grads = HeadParams(w=np.zeros((2, 2)), b=np.zeros(2))
        state = OptimizerState.for_params(params)
        optimizer_step(state, params, grads, TrainConfig(weight_decay=0.0))
        assert np.array_equal(params.w, np.full((2, 2), 3.0))

    def test_zero_grads_with_decay_shrinks(self):
        config = TrainConfig(learning_rate=0.01, weight_decay=0.1)
        params = HeadParams(w=np.full((2, 2), 3.0), b=np.array([4.0, -4.0]))
        grads = HeadParams(w=np.zeros((2, 2)), b=np.zeros(2))
        state = OptimizerState.for_params(params)
        optimizer_step(state, params, grads, config)
        shrink = 1 - 0.01 * 0.1
        assert np.allclose(params.w, 3.0 * shrink, atol=1e-15)
        assert np.allclose(params.b, np.array([4.0, -4.0]) * shrink, atol=1e-15)

    def test_single_step_hand_computed(self):
        # param 0, grad 1, lr 0.1: bias-corrected first step moves by
        # lr / (1 + eps) = 0.0999999990...
        config = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        params = HeadParams(w=np.zeros((1, 1)), b=np.zeros(1))
        grads = HeadParams(w=np.ones((1, 1)), b=np.zeros(1))
        state = OptimizerState.for_params(params)
        optimizer_step(state, params, grads, config)
        assert params.w[0, 0] == pytest.approx(-0.0999999990000000, abs=1e-12)

    def test_non_finite_gradient_aborts(self):
        params = HeadParams(w=np.zeros((2, 2)), b=np.zeros(2))
        grads = HeadParams(w=np.full((2, 2), np.nan), b=np.zeros(2))
        state = OptimizerState.for_params(params)
        with pytest.raises(TrainingDiverged):
            optimizer_step(state, params, grads, TrainConfig())


def separable_training_set(n_per_class=40, seed=0):
    """Three text classes with disjoint vocabularies and near-one-hot labels."""
    words = {"a": ["apple", "avocado", "apricot"],
             "b": ["banana", "blueberry", "bramble"],
             "c": ["cherry", "cranberry", "currant"]}
    rng = np.random.default_rng(seed)
    rows = []
    for cls, pool in words.items():
        for i in range(n_per_class):
            text = " ".join(rng.choice(pool, size=3))
            probs = {k: 0.05 for k in words}
            probs[cls] = 0.90
            rows.append(TrainExample(
                query=Query(id=f"{cls}{i}", text=text, reference="r", dataset_tag="d"),
                soft_label=SoftLabelRow(query_id=f"{cls}{i}", probs=probs),
                weight=1 / 3,
            ))
    weights = sample_weights({k: n_per_class for k in words})
    return TrainingSet(rows=rows, class_weights=weights,
                       expert_names=sorted(words))


class TestTrainClassifier:
    def test_separable_fixture_high_accuracy_and_descending_loss(self):
        ts = separable_training_set()
        vec = fit_vectorizer([r.query.text for r in ts.rows])
        model = train_classifier(ts, "mlp", vec, config=TrainConfig(seed=42))
        correct = 0
        for row in ts.rows:
            probs = model.predict_proba(vectorize(row.query.text, vec))
            predicted = model.expert_names[int(np.argmax(probs))]
            correct += predicted == max(row.soft_label.probs,
                                        key=row.soft_label.probs.get)
        assert correct / len(ts.rows) >= 0.95
        trace = model.loss_trace
        assert len(trace) == 5
        for earlier, later in zip(trace, trace[1:]):
            assert later <= earlier * 1.05

    def test_head_trains_on_separable_fixture(self):
        ts = separable_training_set()
        emb = HashEmbedder(32)
        model = train_classifier(ts, "head", emb,
                                 config=head_config(learning_rate=1e-2, seed=42))
        correct = sum(
            model.expert_names[int(np.argmax(model.predict_proba(emb.embed(r.query.text))))]
            == max(r.soft_label.probs, key=r.soft_label.probs.get)
            for r in ts.rows)
        assert correct / len(ts.rows) >= 0.95

    def test_deterministic_per_seed(self):
        ts = separable_training_set()
        vec = fit_vectorizer([r.query.text for r in ts.rows])
        m1 = train_classifier(ts, "mlp", vec, config=TrainConfig(seed=7))
        m2 = train_classifier(ts, "mlp", vec, config=TrainConfig(seed=7))
        for (_, a), (_, b) in zip(m1.params.tensors(), m2.params.tensors()):
            assert np.array_equal(a, b)
        assert m1.loss_trace == m2.loss_trace

    def test_empty_split(self):
        ts = TrainingSet(rows=[], class_weights=sample_weights({"a": 1}),
                         expert_names=["a"])
        with pytest.raises(DataError):
            train_classifier(ts, "mlp", fit_vectorizer(["x"]))


class TestModelSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        ts = separable_training_set(n_per_class=10)
        vec = fit_vectorizer([r.query.text for r in ts.rows])
        model = train_classifier(ts, "mlp", vec, config=TrainConfig(seed=3, epochs=2))
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.kind == model.kind
        assert loaded.expert_names == model.expert_names
        assert loaded.loss_trace == model.loss_trace
        for (_, a), (_, b) in zip(model.params.tensors(), loaded.params.tensors()):
            assert np.array_equal(a, b)
        path2 = tmp_path / "model2.bin"
        save_model(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_head_roundtrip(self, tmp_path):
        params = HeadParams(w=np.random.default_rng(0).standard_normal((6, 3)),
                            b=np.zeros(3))
        model = learn.TrainedModel(kind="head", params=params,
                                   expert_names=["a", "b", "c"],
                                   loss_trace=[1.0, 0.5],
                                   config=head_config(),
                                   vector_source={"type": "embedder",
                                                  "name": "hash-64",
                                                  "dimension": 6})
        save_model(model, tmp_path / "h.bin")
        loaded = load_model(tmp_path / "h.bin")
        assert np.array_equal(loaded.params.w, params.w)
        assert loaded.config.learning_rate == learn.HEAD_LEARNING_RATE


def test_head_init_zero():
    params = head_init(5, 3)
    assert not params.w.any() and not params.b.any()
    with pytest.raises(DataError):
        head_init(0, 3)
