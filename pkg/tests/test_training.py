import numpy as np
import pytest

from gcnbvae.losses import NonFiniteLossError
from gcnbvae.model import ModelConfig, build_model
from gcnbvae.pooling import build_hierarchy
from gcnbvae.procaug import choose_reference, fit_policy
from gcnbvae.synthetic import SyntheticSpec, generate_corpus
from gcnbvae.training import METRIC_FIELDS, Adam, TrainConfig, evaluate, train


@pytest.fixture(scope="module")
def setup(small_corpus, small_hierarchy):
    template = np.mean([m.vertices for m in small_corpus], axis=0)
    return build_model(ModelConfig(), small_hierarchy, seed=0, template=template)


def test_adam_matches_hand_update():
    cfg = TrainConfig(lr=0.1)
    opt = Adam({"w": (2,)}, cfg)
    w = {"w": np.array([1.0, -2.0])}
    g = np.array([0.5, -0.25])
    opt.step(w, {"w": g})
    # first step: m_hat = g, v_hat = g^2
    np.testing.assert_allclose(w["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_zero_epochs_unchanged(setup, small_corpus):
    out, hist = train(setup, small_corpus, None, TrainConfig(epochs=0), seed=0)
    assert hist == []
    np.testing.assert_array_equal(out.flat(), setup.flat())
    assert out is not setup


def test_training_deterministic_and_reduces_loss(setup, small_corpus):
    ref = small_corpus[choose_reference(small_corpus)]
    pol = fit_policy(small_corpus, ref)
    cfg = TrainConfig(epochs=4, batch_size=4)
    a, ha = train(setup, small_corpus[:12], pol, cfg, seed=3, val=small_corpus[12:])
    b, hb = train(setup, small_corpus[:12], pol, cfg, seed=3, val=small_corpus[12:])
    assert ha == hb
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert [h["epoch"] for h in ha] == [1, 2, 3, 4]
    assert set(ha[0]) == set(METRIC_FIELDS)
    assert ha[-1]["train_loss"] < ha[0]["train_loss"]
    # input params untouched
    assert not np.array_equal(a.flat(), setup.flat())
    c, _ = train(setup, small_corpus[:12], pol, cfg, seed=4)
    assert not np.array_equal(a.flat(), c.flat())


def test_logging_callback(setup, small_corpus):
    seen = []
    train(setup, small_corpus[:4], None, TrainConfig(epochs=2, batch_size=4), seed=0, log=seen.append)
    assert [r["epoch"] for r in seen] == [1, 2]
    assert np.isnan(seen[0]["val_E"])


def test_nonfinite_aborts(setup, small_corpus):
    bad = setup.copy()
    bad.values["out.w"][:] = np.nan
    with pytest.raises(NonFiniteLossError):
        train(bad, small_corpus[:4], None, TrainConfig(epochs=1), seed=0)


def test_empty_corpus(setup):
    with pytest.raises(ValueError):
        train(setup, [], None, TrainConfig(epochs=1), seed=0)


def test_evaluate(setup, small_corpus):
    e, r = evaluate(setup, small_corpus[:3])
    assert np.isfinite(e) and r >= 0
    assert all(np.isnan(evaluate(setup, [])))


@pytest.mark.slow
def test_200_epochs_improve_heldout_E():
    corpus = generate_corpus(SyntheticSpec(n_theta=8, n_len=32, corpus_size=56, seed=11))
    train_set, held = corpus[:48], corpus[48:]
    h = build_hierarchy(train_set[0], 4, 4.0)
    params = build_model(ModelConfig(latent_dim=8), h, seed=0,
                         template=np.mean([m.vertices for m in train_set], axis=0))
    _, hist = train(params, train_set, None, TrainConfig(epochs=200), seed=0, val=held)
    assert hist[-1]["val_E"] > hist[0]["val_E"]
