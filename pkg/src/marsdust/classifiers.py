"""Dusty / not-dusty classifiers: PCA+SVM baseline, a small CNN and a frozen ResNet-50 probe.

Every fitted model exposes ``predict_proba(raw)`` on an (N, H, W) uint8 stack
of raw patches and returns an (N, 2) array whose columns are
(not_dusty, dusty), so the filter pipeline can treat them uniformly.
"""

from __future__ import annotations

import copy
import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.svm import SVC
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from .dataset_io import ChannelStats, LABELS, batch_resize

log = logging.getLogger(__name__)

METADATA = "metadata.json"


# -- PCA -------------------------------------------------------------------


@dataclass
class PCAModel:
    components: np.ndarray  # (k, n_features), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean

    def truncate(self, k: int) -> PCAModel:
        return PCAModel(self.components[:k], self.explained_variance[:k], self.explained_variance_ratio[:k], self.mean)

    def reconstruction_error(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.mean((self.inverse_transform(self.transform(x)) - x) ** 2))


def fit_pca(images: np.ndarray, n_components: int) -> PCAModel:
    """PCA by SVD of the centred (n_samples, n_features) matrix."""
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n, d = x.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"n_components={n_components} must be in [1, min({n}, {d})]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    vt *= signs[:, None]
    var = s**2 / max(n - 1, 1)
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PCAModel(vt[:n_components], var[:n_components], ratio[:n_components], mean)


def elbow_point(ratios: Sequence[float]) -> int:
    """1-based index farthest from the chord joining the first and last ratios."""
    r = np.asarray(ratios, dtype=np.float64)
    k = r.size
    if k < 3:
        raise ValueError("elbow detection needs at least 3 ratios")
    x = np.arange(1, k + 1, dtype=np.float64)
    dx, dy = x[-1] - x[0], r[-1] - r[0]
    dist = np.abs(dy * (x - x[0]) - dx * (r - r[0])) / np.hypot(dx, dy)
    # argmax returns the first maximum, which is the tie rule
    return int(np.argmax(np.round(dist, 12))) + 1


# -- SVM -------------------------------------------------------------------


@dataclass
class SVMConfig:
    kernel: str = "rbf"
    C: float = 10000.0
    gamma: float | str = "scale"
    tol: float = 1e-3
    n_components: int | None = None  # PCA components fed to the SVM; None = elbow point
    pca_fit_components: int = 10

    def __post_init__(self) -> None:
        if self.kernel != "rbf":
            raise ValueError("only the rbf kernel is supported")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if not isinstance(self.gamma, str) and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if isinstance(self.gamma, str) and self.gamma != "scale":
            raise ValueError("gamma must be a positive number or 'scale'")


class SvmClassifier:
    kind = "svm"

    def __init__(self, svc: SVC, config: SVMConfig, pca: PCAModel | None = None, input_size=(100, 100)):
        self.svc = svc
        self.config = config
        self.pca = pca
        self.input_size = tuple(input_size)
        self.gamma_value = float(svc._gamma)

    def features(self, raw: np.ndarray) -> np.ndarray:
        x = np.asarray(raw, dtype=np.float32) / 255.0
        x = batch_resize(x, self.input_size).reshape(len(x), -1)
        return self.pca.transform(x) if self.pca is not None else x

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return self.svc.decision_function(features)

    def predict_proba(self, raw: np.ndarray) -> np.ndarray:
        if len(raw) == 0:
            return np.zeros((0, 2))
        # logistic squashing of the margin keeps argmax identical to the SVM's sign
        p = 1.0 / (1.0 + np.exp(-self.decision_function(self.features(raw))))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, raw: np.ndarray) -> np.ndarray:
        return (self.predict_proba(raw)[:, 1] >= 0.5).astype(np.int64)

    def metadata(self) -> dict:
        return {
            "architecture": self.kind,
            "svm": asdict(self.config),
            "gamma_value": self.gamma_value,
            "input_size": list(self.input_size),
        }

    def save(self, model_dir: str | Path, extra: dict | None = None) -> None:
        d = Path(model_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "svm.pkl", "wb") as fh:
            pickle.dump(self.svc, fh)
        if self.pca is not None:
            np.savez(d / "pca.npz", **asdict(self.pca))
        _write_metadata(d, {**self.metadata(), **(extra or {})})


def fit_svm(features: np.ndarray, labels: np.ndarray, config: SVMConfig = SVMConfig()) -> SvmClassifier:
    """Fit an RBF SVM on precomputed features (rows are samples)."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("SVM training needs samples from both classes")
    svc = SVC(kernel="rbf", C=config.C, gamma=config.gamma, tol=config.tol)
    svc.fit(np.asarray(features, dtype=np.float64), labels)
    return SvmClassifier(svc, config)


def fit_pca_svm(images: np.ndarray, labels: np.ndarray, config: SVMConfig = SVMConfig()) -> tuple[SvmClassifier, PCAModel]:
    """Full baseline: PCA on flattened unit images, elbow-picked components, RBF SVM.

    Returns the classifier and the full PCA fit (all ``pca_fit_components``) for plotting.
    """
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    full = fit_pca(x, config.pca_fit_components)
    k = config.n_components or elbow_point(full.explained_variance_ratio)
    pca = full.truncate(k)
    clf = fit_svm(pca.transform(x), labels, config)
    clf.pca = pca
    clf.input_size = tuple(np.asarray(images).shape[1:3])
    return clf, full


# -- neural classifiers ----------------------------------------------------


class CNN(nn.Module):
    """LeNet-style stack on 64x64x1 input; last conv sees an 18x18 field."""

    input_shape = (1, 64, 64)

    def __init__(self) -> None:
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3),
            nn.ReLU(),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(64 * 12 * 12, 64), nn.ReLU(), nn.Linear(64, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def build_cnn(input_shape: tuple[int, int, int] = (64, 64, 1)) -> CNN:
    if tuple(input_shape) != (64, 64, 1):
        raise ValueError(f"the CNN is defined for (64, 64, 1) input, got {input_shape}")
    return CNN()


class WeightsUnavailableError(RuntimeError):
    pass


_RESNET50_FILES = ("resnet50-11ad3fa6.pth", "resnet50-0676ba61.pth")


def _resnet50_state(weights: str | Path, allow_download: bool) -> dict:
    if weights != "imagenet":
        path = Path(weights)
        if not path.exists():
            raise WeightsUnavailableError(f"backbone weights file {path} does not exist")
        return torch.load(path, map_location="cpu", weights_only=True)
    ckpt_dir = Path(torch.hub.get_dir()) / "checkpoints"
    for name in _RESNET50_FILES:
        if (ckpt_dir / name).exists():
            return torch.load(ckpt_dir / name, map_location="cpu", weights_only=True)
    if allow_download:
        from torchvision.models import ResNet50_Weights

        try:
            return ResNet50_Weights.IMAGENET1K_V2.get_state_dict(progress=False)
        except Exception as exc:  # network errors surface as many types
            raise WeightsUnavailableError(f"downloading ResNet-50 ImageNet weights failed: {exc}") from exc
    raise WeightsUnavailableError(
        f"ResNet-50 ImageNet weights not found in {ckpt_dir}. Place {_RESNET50_FILES[0]} there "
        "(torchvision ResNet50_Weights.IMAGENET1K_V2), pass a state_dict path, or enable downloads."
    )


class TransferNet(nn.Module):
    """Frozen ResNet-50 trunk with a dense/dropout pyramid head."""

    input_shape = (3, 224, 224)

    def __init__(self, backbone: nn.Module, hidden=(512, 128), dropout: float = 0.3, freeze: bool = True) -> None:
        super().__init__()
        # everything up to and including global pooling
        self.backbone = nn.Sequential(*list(backbone.children())[:-1])
        in_features = backbone.fc.in_features
        layers: list[nn.Module] = [nn.Flatten()]
        for width in hidden:
            layers += [nn.Linear(in_features, width), nn.ReLU(), nn.Dropout(dropout)]
            in_features = width
        layers.append(nn.Linear(in_features, 2))
        self.head = nn.Sequential(*layers)
        self.frozen = freeze
        if freeze:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True) -> TransferNet:
        super().train(mode)
        if self.frozen:
            # keep batch-norm running statistics fixed too
            self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def build_transfer_model(weights: str | Path | None = "imagenet", *, allow_download: bool = False, freeze: bool = True, hidden=(512, 128), dropout: float = 0.3) -> TransferNet:
    """``weights`` is ``"imagenet"``, a state_dict path, or ``None`` for a randomly initialised trunk."""
    from torchvision.models import resnet50

    backbone = resnet50(weights=None)
    if weights is not None:
        backbone.load_state_dict(_resnet50_state(weights, allow_download))
    else:
        log.warning("building the transfer model on a randomly initialised backbone")
    return TransferNet(backbone, hidden=hidden, dropout=dropout, freeze=freeze)


class TorchClassifier:
    """A trained CNN or transfer network plus its input preprocessing."""

    def __init__(self, net: nn.Module, kind: str, stats: ChannelStats | None = None, config: dict | None = None):
        self.net = net.eval()
        self.kind = kind
        self.stats = stats
        self.config = config or {}

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.net.input_shape

    def preprocess(self, raw: np.ndarray) -> torch.Tensor:
        c, h, w = self.input_shape
        x = batch_resize(np.asarray(raw, dtype=np.float32) / 255.0, (h, w))
        if self.stats is not None:
            x = (x - self.stats.mean[0]) / self.stats.std[0]
        t = torch.from_numpy(x.astype(np.float32))[:, None]
        return t.expand(-1, c, -1, -1).contiguous() if c > 1 else t

    @torch.no_grad()
    def predict_proba(self, raw: np.ndarray, batch_size: int = 64) -> np.ndarray:
        if len(raw) == 0:
            return np.zeros((0, 2))
        self.net.eval()
        out = []
        for i in range(0, len(raw), batch_size):
            out.append(torch.softmax(self.net(self.preprocess(raw[i : i + batch_size])), dim=1).double().numpy())
        return np.concatenate(out)

    def predict(self, raw: np.ndarray) -> np.ndarray:
        return (self.predict_proba(raw)[:, 1] >= 0.5).astype(np.int64)

    def save(self, model_dir: str | Path, extra: dict | None = None) -> None:
        d = Path(model_dir)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), d / "weights.pt")
        meta = {
            "architecture": self.kind,
            "config": self.config,
            "normalization": self.stats.to_dict() if self.stats else None,
        }
        _write_metadata(d, {**meta, **(extra or {})})


def _write_metadata(d: Path, meta: dict) -> None:
    (d / METADATA).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))


def load_classifier(model_dir: str | Path):
    d = Path(model_dir)
    meta_path = d / METADATA
    if not meta_path.exists():
        raise FileNotFoundError(f"{d} has no {METADATA}")
    meta = json.loads(meta_path.read_text())
    kind = meta["architecture"]
    if kind == "svm":
        with open(d / "svm.pkl", "rb") as fh:
            svc = pickle.load(fh)
        pca = None
        if (d / "pca.npz").exists():
            with np.load(d / "pca.npz") as z:
                pca = PCAModel(**{k: z[k] for k in z.files})
        return SvmClassifier(svc, SVMConfig(**meta["svm"]), pca, meta.get("input_size", (100, 100)))
    if kind == "cnn":
        net: nn.Module = build_cnn()
    elif kind == "transfer":
        cfg = meta.get("config", {})
        net = build_transfer_model(None, hidden=tuple(cfg.get("hidden", (512, 128))), dropout=cfg.get("dropout", 0.3))
    else:
        raise ValueError(f"unknown architecture {kind!r} in {meta_path}")
    net.load_state_dict(torch.load(d / "weights.pt", map_location="cpu", weights_only=True))
    stats = ChannelStats.from_dict(meta["normalization"]) if meta.get("normalization") else None
    return TorchClassifier(net, kind, stats, meta.get("config"))


# -- training --------------------------------------------------------------


@dataclass
class TrainHyperparams:
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    epochs: int = 10
    batch_size: int = 32
    loss: str = "sparse_categorical_crossentropy"

    def __post_init__(self) -> None:
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.loss != "sparse_categorical_crossentropy":
            raise ValueError("only sparse categorical cross-entropy is supported")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None = None
    val_acc: float | None = None


def _as_tensor_data(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    yt = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if len(xt) == 0 or len(xt) != len(yt):
        raise ValueError(f"need a nonempty dataset with matching labels, got {len(xt)} inputs / {len(yt)} labels")
    return xt, yt


@torch.no_grad()
def _loss_acc(net: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> tuple[float, float]:
    net.eval()
    loss_fn = nn.CrossEntropyLoss(reduction="sum")
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = net(x[i : i + batch_size])
        total += loss_fn(logits, y[i : i + batch_size]).item()
        correct += (logits.argmax(1) == y[i : i + batch_size]).sum().item()
    return total / len(x), correct / len(x)


def train_classifier(
    net: nn.Module,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray] | None = None,
    hyper: TrainHyperparams = TrainHyperparams(),
    seed: int = 0,
) -> tuple[nn.Module, list[EpochRecord]]:
    """Train on preprocessed (N, C, H, W) inputs; keeps the best-validation-accuracy weights.

    Without validation data the final epoch's weights are kept.
    """
    xt, yt = _as_tensor_data(*train)
    expected = tuple(net.input_shape)
    if tuple(xt.shape[1:]) != expected:
        raise ValueError(f"input shape {tuple(xt.shape[1:])} does not match model input {expected}")
    xv = yv = None
    if val is not None:
        xv, yv = _as_tensor_data(*val)
        if tuple(xv.shape[1:]) != expected:
            raise ValueError(f"validation shape {tuple(xv.shape[1:])} does not match model input {expected}")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    loader = DataLoader(TensorDataset(xt, yt), batch_size=hyper.batch_size, shuffle=True, generator=gen)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hyper.learning_rate)
    loss_fn = nn.CrossEntropyLoss()

    history: list[EpochRecord] = []
    best_acc, best_state = -1.0, None
    for epoch in range(1, hyper.epochs + 1):
        net.train()
        running, correct = 0.0, 0
        for xb, yb in loader:
            opt.zero_grad()
            logits = net(xb)
            loss = loss_fn(logits, yb)
            loss.backward()
            opt.step()
            running += loss.item() * len(xb)
            correct += (logits.argmax(1) == yb).sum().item()
        rec = EpochRecord(epoch, running / len(xt), correct / len(xt))
        if xv is not None:
            rec.val_loss, rec.val_acc = _loss_acc(net, xv, yv, hyper.batch_size)
            if rec.val_acc > best_acc:
                best_acc, best_state = rec.val_acc, copy.deepcopy(net.state_dict())
        history.append(rec)
        log.info("epoch %d: %s", epoch, rec)
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return net, history


# -- evaluation ------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = true, cols = predicted; order (not_dusty, dusty)
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["labels"] = list(LABELS)
        return d

    def table(self) -> str:
        lines = [f"{'':>12} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}"]
        for i, name in enumerate(LABELS):
            lines.append(f"{name:>12} {self.precision[i]:9.2f} {self.recall[i]:9.2f} {self.f1[i]:9.2f} {self.support[i]:9d}")
        lines.append(f"{'accuracy':>12} {'':>9} {'':>9} {self.accuracy:9.2f} {self.total:9d}")
        for name, avg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{name:>12} {avg['precision']:9.2f} {avg['recall']:9.2f} {avg['f1']:9.2f} {self.total:9d}")
        return "\n".join(lines)


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def evaluate(predictions: Sequence[int], truth: Sequence[int]) -> EvalReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if not (np.isin(pred, (0, 1)).all() and np.isin(true, (0, 1)).all()):
        raise ValueError("label codes must be 0 or 1")
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    precision = [_safe_div(cm[i, i], cm[:, i].sum()) for i in range(2)]
    recall = [_safe_div(cm[i, i], cm[i, :].sum()) for i in range(2)]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    support = [int(cm[i, :].sum()) for i in range(2)]
    total = cm.sum()
    macro = {"precision": float(np.mean(precision)), "recall": float(np.mean(recall)), "f1": float(np.mean(f1))}
    w = np.asarray(support) / total
    weighted = {"precision": float(w @ precision), "recall": float(w @ recall), "f1": float(w @ f1)}
    return EvalReport(cm, float(np.trace(cm) / total), precision, recall, f1, support, macro, weighted)
