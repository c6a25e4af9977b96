import numpy as np
import pytest

from oracles import central_diff, rel_error
from vibattack import autodiff as ad
from vibattack.errors import ConfigurationError, DomainError, NotTrainedError, ShapeError, StateError
from vibattack.models import (
    REGISTRY,
    FaultClassifier,
    ModelSpec,
    TrainConfig,
    accuracy,
    build,
    conv,
    dense,
    grad_input,
    predict,
    train,
)
from vibattack.signal import make_dataset

NAMES = sorted(REGISTRY)


@pytest.fixture(scope="module")
def tiny_dataset():
    return make_dataset(windows_per_class=10, seed=4)


def _untrained(name, seed=0, **kw):
    """A model with initialized (untrained) parameters."""
    return FaultClassifier(name, epochs=0, random_state=seed, **kw).fit(np.zeros((2, 2048)), [0, 1])


def test_wdcnn_wide_first_kernel():
    first = build("wdcnn").layers[0]
    assert first.kind == "conv"
    assert (first.params["kernel"], first.params["stride"], first.params["filters"]) == (64, 16, 16)
    kinds = build("wdcnn").kinds()
    assert kinds.count("conv") == 5 and kinds.count("dense") == 2
    assert build("wdcnn").layers[kinds.index("dense")].params["units"] == 100


@pytest.mark.parametrize("name", NAMES)
def test_shape_chain_reaches_ten_logits(name):
    spec = build(name)
    assert spec.shapes()[-1] == (10,)
    logits = _untrained(name).decision_function(np.random.default_rng(0).uniform(size=(1, 2048)))
    assert logits.shape == (1, 10)


def test_normalization_roster():
    assert build("alexnet1d").uses_normalization is False
    assert "bn" not in build("alexnet1d").kinds()
    for name in ("wdcnn", "lenet1d", "cnn1d"):
        assert build(name).uses_normalization and "bn" in build(name).kinds()
    assert build("alexnet1d").kinds().count("conv") == 5
    assert build("alexnet1d").kinds().count("dense") == 2


def test_unknown_model():
    with pytest.raises(ConfigurationError):
        build("bilstm")


def test_inconsistent_chain_rejected():
    with pytest.raises(ShapeError):
        ModelSpec("bad", (conv(4, 4096),))
    with pytest.raises(ShapeError):
        ModelSpec("bad", (conv(4, 3), dense(10)))


@pytest.mark.parametrize("name", NAMES)
def test_end_to_end_input_gradcheck(name):
    rng = np.random.default_rng(7)
    model = _untrained(name, seed=3)
    model.buffers_ = {k: (v + rng.uniform(0, 0.3, v.shape)) for k, v in model.buffers_.items()}
    X = rng.uniform(size=(3, 2048))
    y = np.array([1, 5, 9])
    _, g = model.loss_gradient(X, y)
    coords = rng.choice(X.size, 100, replace=False)
    # small step: with h=1e-4 an occasional probe straddles a ReLU/max-pool kink
    numeric = central_diff(lambda x: model.loss_gradient(x, y)[0], X, coords, h=1e-6)
    assert rel_error(g.reshape(-1)[coords], numeric).max() < 1e-4


def test_grad_input_symmetry_with_zero_head():
    model = _untrained("cnn1d")
    last = max(k for k in model.params_ if k.endswith(".weight"))
    model.params_[last][:] = 0.0
    row = np.random.default_rng(1).uniform(size=2048)
    X = np.stack([row, row])
    proba, _ = predict(model, X)
    np.testing.assert_allclose(proba, 0.1)
    g = grad_input(model, X, [3, 3])
    assert np.all(np.isfinite(g))
    np.testing.assert_array_equal(g[0], g[1])


def test_grad_input_batch_independence():
    model = _untrained("alexnet1d")
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 2048))
    g = grad_input(model, np.stack([a, b, a]), [4, 2, 4])
    np.testing.assert_array_equal(g[0], g[2])


def test_grad_input_leaves_parameters(tiny_dataset):
    model = _untrained("wdcnn")
    before = model.checkpoint_hash()
    grad_input(model, tiny_dataset.X_test, tiny_dataset.y_test)
    assert model.checkpoint_hash() == before


def test_grad_input_label_domain():
    model = _untrained("lenet1d")
    with pytest.raises(DomainError):
        grad_input(model, np.zeros((1, 2048)), [10])


def test_predict_probabilities_sum_to_one(tiny_dataset):
    proba, labels = predict(_untrained("wdcnn"), tiny_dataset.X_test)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(labels, proba.argmax(axis=1))


def test_argmax_shift_invariance(rng):
    z = rng.standard_normal((20, 10))
    assert np.array_equal(z.argmax(1), (z + 123.4).argmax(1))


def test_predict_shape_error():
    with pytest.raises(ShapeError):
        _untrained("wdcnn").predict(np.zeros((2, 100)))


def test_unfitted_model_refuses():
    with pytest.raises(NotTrainedError):
        FaultClassifier("wdcnn").predict(np.zeros((1, 2048)))
    assert issubclass(NotTrainedError, StateError)


class _Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, X):
        return self.fn(X)


def test_accuracy_stubs():
    X = np.zeros((100, 2048))
    y = np.repeat(np.arange(10), 10)
    assert accuracy(_Stub(lambda X: y), X, y) == 1.0
    assert accuracy(_Stub(lambda X: np.zeros(len(X), int)), X, y) == pytest.approx(0.1)


def test_zero_epochs_is_chance():
    ds = make_dataset(windows_per_class=50, seed=9)
    accs = [train(name, ds, TrainConfig(epochs=0, seed=s)).metrics_["test"] for name in NAMES for s in range(2)]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, seed=11)
    a = train("lenet1d", tiny_dataset, cfg)
    b = train("lenet1d", tiny_dataset, cfg)
    assert a.checkpoint_hash() == b.checkpoint_hash()
    assert a.save(tmp_path / "a").read_bytes() == b.save(tmp_path / "b").read_bytes()
    assert [h["loss"] for h in a.history_] == [h["loss"] for h in b.history_]


def test_checkpoint_round_trip(tiny_dataset, tmp_path):
    model = train("cnn1d", tiny_dataset, TrainConfig(epochs=1, seed=2))
    path = model.save(tmp_path / "m.ckpt")
    header = path.read_bytes().split(b"\n", 1)[0]
    assert b'"tensors"' in header and b'"spec"' in header
    back = FaultClassifier.load(path)
    assert back.checkpoint_hash() == model.checkpoint_hash()
    np.testing.assert_array_equal(back.predict_proba(tiny_dataset.X_test), model.predict_proba(tiny_dataset.X_test))


def test_sklearn_api(tiny_dataset):
    model = FaultClassifier("cnn1d", epochs=1)
    assert model.get_params()["arch"] == "cnn1d"
    model.set_params(epochs=2)
    model.fit(tiny_dataset.X_train, tiny_dataset.y_train)
    assert len(model.history_) == 2
    assert 0.0 <= model.score(tiny_dataset.X_test, tiny_dataset.y_test) <= 1.0
    np.testing.assert_array_equal(model.classes_, np.arange(10))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="rmsprop")


def test_sgd_momentum_trains(tiny_dataset):
    model = train("cnn1d", tiny_dataset, TrainConfig(epochs=2, optimizer="sgd-momentum", learning_rate=0.01))
    assert np.isfinite(model.history_[-1]["loss"])


def test_divergence_names_epoch(tiny_dataset):
    from vibattack.errors import TrainingError

    with pytest.raises(TrainingError, match="epoch"):
        train("alexnet1d", tiny_dataset, TrainConfig(epochs=3, learning_rate=1e12, optimizer="sgd-momentum"))
