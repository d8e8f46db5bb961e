import numpy as np
import pytest
import torch

import oracles
from msssidec.classifier import DiscriminativeModel, augment_labels, predict, supervised_loss, train_classifier
from msssidec.config import TrainingConfig, desk_config
from msssidec.sccae import Encoder, build_sccae, pretrain
from msssidec.signals import build_task, synth_corpus


def test_augment_cardinality_and_provenance():
    rng = np.random.default_rng(0)
    X_sp, y_sp = rng.random((10, 512)), np.arange(10)
    X_un, s = rng.random((3000, 512)), rng.integers(0, 10, 3000)
    aug = augment_labels(X_sp, y_sp, X_un, s)
    assert len(aug) == 3010
    counts = aug.provenance_counts(10)
    np.testing.assert_array_equal(counts["true"], np.bincount(y_sp, minlength=10))
    np.testing.assert_array_equal(counts["pseudo"], np.bincount(s, minlength=10))
    empty = augment_labels(X_sp, y_sp, np.zeros((0, 512)), np.zeros(0, dtype=int))
    assert len(empty) == 10 and not empty.is_pseudo.any()
    with pytest.raises(ValueError):
        augment_labels(X_sp, y_sp, X_un, s[:5])


def test_supervised_loss_examples():
    assert supervised_loss(torch.zeros(4, 10), torch.arange(4)).item() == pytest.approx(np.log(10))
    perfect = torch.full((3, 3), -1e4)
    perfect[range(3), range(3)] = 0
    assert supervised_loss(perfect, torch.arange(3)).item() == pytest.approx(0.0, abs=1e-9)
    # log clamp bounds the loss of a confidently wrong prediction
    assert supervised_loss(perfect, torch.tensor([1, 2, 0])).item() == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        supervised_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_supervised_loss_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(8, 5))
        y = rng.integers(0, 5, 8)
        v = supervised_loss(torch.as_tensor(logits), torch.as_tensor(y)).item()
        assert v == pytest.approx(oracles.cross_entropy(logits.tolist(), y.tolist()), rel=1e-8)


def test_supervised_loss_group_weighting():
    rng = np.random.default_rng(1)
    logits, y = torch.as_tensor(rng.normal(size=(6, 3))), torch.as_tensor(rng.integers(0, 3, 6))
    pseudo = torch.tensor([False, False, True, True, True, True])
    both = supervised_loss(logits, y, pseudo, pseudo_weight=0.5).item()
    true_part = supervised_loss(logits[:2], y[:2]).item()
    pseudo_part = supervised_loss(logits[2:], y[2:]).item()
    assert both == pytest.approx(true_part + 0.5 * pseudo_part, rel=1e-12)


def test_model_shapes_and_encoder_copy():
    torch.manual_seed(0)
    enc = Encoder()
    model = DiscriminativeModel(enc, 10)
    assert model(torch.rand(4, 512)).shape == (4, 10)
    assert model.encoder is not enc
    for a, b in zip(model.encoder.parameters(), enc.parameters()):
        assert torch.equal(a, b)


def test_predict_contract():
    torch.manual_seed(0)
    model = DiscriminativeModel(Encoder(), 3)
    X = np.random.default_rng(0).random((7, 512)).astype(np.float32)
    labels, probs = predict(model, X)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(labels, probs.argmax(1))
    labels2, probs2 = predict(model, X)
    np.testing.assert_array_equal(probs, probs2)


@pytest.fixture(scope="module")
def task3():
    corpus = synth_corpus(3, seed=0, conditions=("0hp",), duration_s=3.0)
    cfg = desk_config(n_cluster=3, n_sp=5, n_un=20, n_test=20, pretrain_epochs=20)
    split = build_task("C1", corpus, cfg, seed=0)
    torch.manual_seed(0)
    ae, _ = pretrain(build_sccae(cfg), split.training_spectra(), cfg, seed=0)
    aug = augment_labels(split.supervised.spectra, split.supervised.labels,
                         split.unsupervised.spectra, split.unsupervised.labels)
    return cfg, split, ae, aug


def test_train_classifier_smoke(task3):
    cfg, split, ae, aug = task3
    torch.manual_seed(0)
    model = DiscriminativeModel(ae.encoder, 3)
    curves = train_classifier(model, aug, cfg, seed=0)
    assert len(curves["loss"]) == 200
    assert max(curves["accuracy"]) >= 0.99
    labels, _ = predict(model, split.test.spectra)
    assert np.mean(labels == split.test.labels) >= 0.9


def test_train_classifier_zero_epochs_and_determinism(task3):
    cfg, _, ae, aug = task3
    torch.manual_seed(0)
    model = DiscriminativeModel(ae.encoder, 3)
    before = [p.detach().clone() for p in model.parameters()]
    assert train_classifier(model, aug, cfg, epochs=0) == {"loss": [], "accuracy": []}
    for a, b in zip(before, model.parameters()):
        assert torch.equal(a, b)
    runs = []
    for _ in range(2):
        torch.manual_seed(1)
        runs.append(train_classifier(DiscriminativeModel(ae.encoder, 3), aug, cfg, seed=2, epochs=3))
    assert runs[0] == runs[1]


def test_train_classifier_missing_class(task3):
    cfg, _, ae, aug = task3
    keep = aug.labels != 2
    partial = augment_labels(aug.spectra[keep], aug.labels[keep], np.zeros((0, 512)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError, match="no training samples"):
        train_classifier(DiscriminativeModel(ae.encoder, 3), partial, cfg, epochs=1)


def test_config_head_defaults():
    cfg = TrainingConfig()
    assert (cfg.classifier_epochs, cfg.classifier_lr, cfg.batch_size) == (4000, 1e-4, 32)
