import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from marsdust.classifiers import (
    CNN,
    EvalReport,
    SVMConfig,
    TorchClassifier,
    TrainHyperparams,
    WeightsUnavailableError,
    build_cnn,
    build_transfer_model,
    elbow_point,
    evaluate,
    fit_pca,
    fit_pca_svm,
    fit_svm,
    load_classifier,
    train_classifier,
)
from marsdust.dataset_io import ChannelStats
from marsdust.receptive_field import flatten_layers, receptive_field
from oracles import rf_recurrence, svm_dual_bruteforce
from synthetic import dusty, terrain

# -- PCA / elbow -------------------------------------------------------------


def test_pca_rank_one():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(30)
    x = rng.standard_normal(50)[:, None] * v[None, :]
    pca = fit_pca(x, 3)
    assert pca.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-9)


def test_pca_matches_covariance_eigendecomposition():
    x = np.random.default_rng(1).standard_normal((20, 5))
    pca = fit_pca(x, 5)
    cov = np.cov(x, rowvar=False)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert np.allclose(pca.explained_variance_ratio, eig / eig.sum(), atol=1e-8)
    assert np.allclose(pca.explained_variance, eig, atol=1e-8)
    assert np.allclose(pca.components @ pca.components.T, np.eye(5), atol=1e-6)


def test_pca_invariants_and_reconstruction():
    x = np.random.default_rng(2).standard_normal((40, 12)) @ np.diag(np.linspace(3, 0.1, 12))
    pca = fit_pca(x, 10)
    r = pca.explained_variance_ratio
    assert np.all(r >= 0) and np.all(np.diff(r) <= 1e-15) and r.sum() <= 1 + 1e-12
    errs = [pca.truncate(k).reconstruction_error(x) for k in range(1, 11)]
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
    with pytest.raises(ValueError):
        fit_pca(x, 13)


def test_elbow_examples():
    assert elbow_point([0.7, 0.2, 0.05, 0.03, 0.02]) == 2
    assert elbow_point([0.4, 0.3, 0.2, 0.1]) == 1
    with pytest.raises(ValueError):
        elbow_point([0.6, 0.4])


# -- SVM ---------------------------------------------------------------------


def test_svm_separable_blobs():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-3, 0.5, (30, 2)), rng.normal(3, 0.5, (30, 2))])
    y = np.repeat([0, 1], 30)
    clf = fit_svm(x, y)
    assert np.array_equal(clf.svc.predict(x), y)


def test_svm_xor_against_dual_oracle():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([0, 0, 1, 1])
    clf = fit_svm(x, y, SVMConfig(C=10000, tol=1e-10))
    assert np.array_equal(clf.svc.predict(x), y)
    gamma = 1.0 / (x.shape[1] * x.var())
    assert clf.gamma_value == pytest.approx(gamma)
    alpha, b = svm_dual_bruteforce(x, np.where(y == 1, 1.0, -1.0), gamma, 10000)
    k = np.exp(-gamma * ((x[:, None] - x[None]) ** 2).sum(-1))
    oracle_decision = k @ (alpha * np.where(y == 1, 1.0, -1.0)) + b
    assert np.allclose(clf.decision_function(x), oracle_decision, atol=1e-6)


def test_svm_single_class_rejected():
    with pytest.raises(ValueError):
        fit_svm(np.zeros((4, 2)), np.ones(4))
    with pytest.raises(ValueError):
        SVMConfig(C=0)


def test_svm_order_invariance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((60, 3))
    y = (x[:, 0] * x[:, 1] > 0).astype(int)
    cfg = SVMConfig(C=10, tol=1e-10)
    perm = rng.permutation(60)
    a = fit_svm(x, y, cfg).decision_function(x)
    b = fit_svm(x[perm], y[perm], cfg).decision_function(x)
    assert np.max(np.abs(a - b)) < 1e-6


def test_pca_svm_pipeline_and_persistence(tmp_path):
    clear, dust = terrain(30, 1), dusty(30, 1)
    raw = np.concatenate([clear, dust])
    y = np.repeat([0, 1], 30)
    clf, full = fit_pca_svm(raw / 255.0, y)
    assert clf.pca.n_components == elbow_point(full.explained_variance_ratio)
    proba = clf.predict_proba(raw)
    assert np.allclose(proba.sum(1), 1) and np.all((proba >= 0) & (proba <= 1))
    clf.save(tmp_path / "svm")
    again = load_classifier(tmp_path / "svm")
    assert np.array_equal(again.predict(raw), clf.predict(raw))


# -- CNN ---------------------------------------------------------------------


def test_cnn_forward_softmax_and_rf():
    torch.manual_seed(0)
    net = build_cnn()
    p = torch.softmax(net(torch.rand(1, 1, 64, 64)), 1)
    assert p.shape == (1, 2)
    assert p.sum().item() == pytest.approx(1.0, abs=1e-6)
    rf = receptive_field(flatten_layers(net.features))
    assert [e.rf for e in rf] == [3, 4, 8, 10, 18]
    assert rf_recurrence([(3, 1), (2, 2), (3, 1), (2, 2), (3, 1)]) == 18
    with pytest.raises(ValueError):
        build_cnn((32, 32, 1))


def test_cnn_initial_loss_near_ln2():
    torch.manual_seed(1)
    net = build_cnn()
    x = torch.rand(32, 1, 64, 64)
    y = torch.tensor([0, 1] * 16)
    loss = torch.nn.functional.cross_entropy(net(x), y).item()
    assert sum(p.numel() for p in net.parameters()) > 0
    assert math.isfinite(loss) and abs(loss - math.log(2)) < 0.2


def _cnn_data(n, seed):
    raw = np.concatenate([terrain(n // 2, seed), dusty(n // 2, seed)])
    y = np.repeat([0, 1], n // 2)
    clf = TorchClassifier(CNN(), "cnn")
    return clf.preprocess(raw).numpy(), y, raw


def test_train_classifier_deterministic_and_history():
    x, y, _ = _cnn_data(16, 2)
    hyper = TrainHyperparams(epochs=2, batch_size=8)
    torch.manual_seed(123)
    net_a = CNN()
    torch.manual_seed(123)
    net_b = CNN()
    _, ha = train_classifier(net_a, (x, y), (x, y), hyper, seed=5)
    _, hb = train_classifier(net_b, (x, y), (x, y), hyper, seed=5)
    assert len(ha) == 2
    assert abs(ha[0].train_loss - hb[0].train_loss) < 1e-6
    assert ha[0].val_acc is not None


def test_train_classifier_shape_mismatch():
    with pytest.raises(ValueError, match="does not match model input"):
        train_classifier(CNN(), (np.zeros((4, 1, 32, 32)), np.zeros(4)), hyper=TrainHyperparams(epochs=1))
    with pytest.raises(ValueError):
        TrainHyperparams(learning_rate=0)


def test_cnn_persistence_roundtrip(tmp_path):
    torch.manual_seed(2)
    _, _, raw = _cnn_data(8, 3)
    clf = TorchClassifier(CNN(), "cnn")
    clf.save(tmp_path / "cnn", {"seed": 2})
    again = load_classifier(tmp_path / "cnn")
    assert np.array_equal(again.predict_proba(raw), clf.predict_proba(raw))


# -- transfer ----------------------------------------------------------------


def test_transfer_weights_unavailable(tmp_path, monkeypatch):
    monkeypatch.setattr(torch.hub, "get_dir", lambda: str(tmp_path))
    with pytest.raises(WeightsUnavailableError, match="ResNet-50 ImageNet weights not found"):
        build_transfer_model("imagenet")
    with pytest.raises(WeightsUnavailableError):
        build_transfer_model(tmp_path / "missing.pth")


def test_transfer_from_local_state_dict(tmp_path):
    from torchvision.models import resnet50

    torch.manual_seed(0)
    src = resnet50(weights=None)
    torch.save(src.state_dict(), tmp_path / "r50.pth")
    net = build_transfer_model(tmp_path / "r50.pth")
    assert torch.equal(net.backbone[0].weight, src.conv1.weight)


def test_transfer_structure():
    torch.manual_seed(0)
    net = build_transfer_model(None)
    assert all(not p.requires_grad for p in net.backbone.parameters())
    assert all(p.requires_grad for p in net.head.parameters())
    widths = [m.out_features for m in net.head if isinstance(m, torch.nn.Linear)]
    assert widths == [512, 128, 2]
    drops = [m.p for m in net.head if isinstance(m, torch.nn.Dropout)]
    assert drops == [0.3, 0.3]
    net.train()
    assert not net.backbone.training and net.head.training
    net.eval()
    with torch.no_grad():
        p = torch.softmax(net(torch.rand(2, 3, 224, 224)), 1)
    assert torch.allclose(p.sum(1), torch.ones(2), atol=1e-6)
    clf = TorchClassifier(net, "transfer", ChannelStats((0.4,), (0.2,)))
    assert clf.preprocess(np.zeros((1, 100, 100), np.uint8)).shape == (1, 3, 224, 224)


# -- evaluation --------------------------------------------------------------


def test_evaluate_perfect_and_inverted():
    truth = np.array([0, 1, 1, 0, 1])
    rep = evaluate(truth, truth)
    assert np.array_equal(rep.confusion, np.diag([2, 3]))
    assert rep.accuracy == 1.0 and rep.f1 == [1.0, 1.0]
    rep = evaluate(1 - truth, truth)
    assert np.trace(rep.confusion) == 0 and rep.accuracy == 0.0


def test_evaluate_hand_tally():
    truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    pred = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1]
    rep = evaluate(pred, truth)
    assert rep.confusion.tolist() == [[6, 1], [2, 3]]
    assert rep.accuracy == pytest.approx(0.75)
    assert rep.precision == pytest.approx([0.75, 0.75])
    assert rep.recall == pytest.approx([6 / 7, 0.6])
    assert rep.f1 == pytest.approx([0.8, 2 / 3])
    assert rep.support == [7, 5]
    assert "weighted avg" in rep.table()


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([0, 1], [0])
    with pytest.raises(ValueError):
        evaluate([], [])


def _check_identities(rep: EvalReport, n: int):
    assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / n)
    assert sum(rep.support) == n
    for p, r, f in zip(rep.precision, rep.recall, rep.f1):
        assert f == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_evaluate_identities_property(pairs):
    pred, truth = zip(*pairs)
    _check_identities(evaluate(pred, truth), len(pairs))
