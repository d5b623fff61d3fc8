"""Training loop, metrics, curve export and the model x feature benchmark grid."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .datapipe import AugmentPolicy, augment, stack_pairs
from .features import HogSpec, hog, intensity_histogram, pca_fit, pca_transform, subsample
from .layers import LinearParams, linear, softmax_cross_entropy
from .resnet import ResNetConfig, build_model
from .rng import derive_rng
from .simam import Placement
from .tensor import Tensor, backward, finite_checks, no_grad, relu

__all__ = [
    "TrainConfig", "MetricsReport", "CurvePoint", "TrainingError", "MLPModel", "SGD",
    "f1_macro", "confusion_matrix", "train", "evaluate", "predict", "export_curves",
    "read_curves_csv", "smooth", "cosine_lr", "FEATURE_KINDS", "MODEL_KINDS", "GRID_CAVEAT",
    "FeatureParams", "BenchConfig", "GridResult", "pair_features", "benchmark_grid",
]

NUM_CLASSES = 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    lr: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    augmentation: AugmentPolicy | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.lr_min < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "precision": self.precision.tolist(),
                "recall": self.recall.tolist(), "f1": self.f1.tolist(),
                "macro_f1": self.macro_f1, "accuracy": self.accuracy}


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_macro(confusion) -> MetricsReport:
    """Per-class precision/recall/F1 and their macro average; 0/0 counts as 0."""
    conf = np.asarray(confusion)
    if conf.shape != (NUM_CLASSES, NUM_CLASSES):
        raise ValueError(f"expected a {NUM_CLASSES}x{NUM_CLASSES} confusion matrix")
    if (conf < 0).any() or not np.array_equal(conf, np.round(conf)):
        raise ValueError("confusion entries must be non-negative integers")
    conf = conf.astype(np.int64)
    total = int(conf.sum())
    if total < 1:
        raise ValueError("confusion matrix is all zero")
    prec, rec, f1 = [], [], []
    for c in range(NUM_CLASSES):
        tp = int(conf[c, c])
        p = _ratio(tp, int(conf[:, c].sum()))
        r = _ratio(tp, int(conf[c, :].sum()))
        prec.append(p)
        rec.append(r)
        f1.append(_ratio(2 * p * r, p + r))
    return MetricsReport(conf, np.array(prec), np.array(rec), np.array(f1),
                         sum(f1) / NUM_CLASSES, int(np.trace(conf)) / total)


def confusion_matrix(truth, pred) -> np.ndarray:
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return conf


@dataclass
class MLPModel:
    """Two-layer perceptron head: linear -> relu -> linear."""
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(cls, n_in: int, seed: int, hidden: int = 64, n_out: int = NUM_CLASSES,
             dtype=np.float64) -> "MLPModel":
        rng = derive_rng(seed, "init")
        return cls(LinearParams.init(n_in, hidden, rng, dtype),
                   LinearParams.init(hidden, n_out, rng, dtype))

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.data.ndim != 2:
            x = x.reshape(x.shape[0], -1)
        return linear(relu(linear(x, self.fc1)), self.fc2)

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


class SGD:
    """SGD with momentum and L2 weight decay (decay folded into the gradient)."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            v = self.velocity[i] * self.momentum + p.grad + self.weight_decay * p.data
            self.velocity[i] = v.astype(p.dtype, copy=False)
            # rebinding keeps arrays captured by earlier graphs intact
            p.data = p.data - (lr * self.velocity[i]).astype(p.dtype, copy=False)
            p.grad = None


def cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    lo = min(cfg.lr_min, cfg.lr)
    if cfg.epochs == 1:
        return cfg.lr
    return lo + (cfg.lr - lo) * 0.5 * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def _param_dtype(model):
    return model.parameters()[0].dtype


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        x, y = dataset
        return np.asarray(x), np.asarray(y, dtype=np.int64)
    return stack_pairs(dataset)


def predict(model, dataset, batch_size: int = 64):
    """Infer-mode logits and mean loss over a dataset; returns (logits, labels, loss)."""
    x, y = _as_arrays(dataset)
    if len(y) == 0:
        raise ValueError("empty dataset")
    dt = _param_dtype(model)
    logits, loss_sum = [], 0.0
    with no_grad():
        for s in range(0, len(y), batch_size):
            z = model.forward(Tensor(x[s:s + batch_size].astype(dt)), "infer")
            loss_sum += softmax_cross_entropy(z, y[s:s + batch_size]).item() * len(z.data)
            logits.append(z.data)
    return np.concatenate(logits), y, loss_sum / len(y)


def evaluate(model, dataset, batch_size: int = 64) -> MetricsReport:
    """Infer-mode metrics; argmax ties go to the lowest class index."""
    logits, y, _ = predict(model, dataset, batch_size)
    return f1_macro(confusion_matrix(y, logits.argmax(axis=1)))


def train(model, train_set, val_set, cfg: TrainConfig):
    """Mini-batch SGD; returns (model, [CurvePoint per epoch]).

    Datasets are either lists of RadiographPair (augmentation allowed) or
    ``(x, y)`` array tuples.
    """
    pairs = None if isinstance(train_set, tuple) else list(train_set)
    if cfg.augmentation is not None and pairs is None:
        raise ValueError("augmentation needs a list of RadiographPair")
    x_fixed, y_all = _as_arrays(train_set)
    n = len(y_all)
    if n == 0:
        raise ValueError("empty training set")
    dt = _param_dtype(model)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    curves = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg, epoch)
        x_all = x_fixed
        if cfg.augmentation is not None:
            pol = cfg.augmentation
            x_all, _ = stack_pairs([augment(p, pol, derive_rng(pol.seed, "augment", epoch, i))
                                    for i, p in enumerate(pairs)])
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            with finite_checks(False):
                logits = model.forward(Tensor(x_all[idx].astype(dt)), "train")
                loss = softmax_cross_entropy(logits, y_all[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
                backward(loss)
            opt.step(lr)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_all[idx]).sum())
        vlogits, vy, vloss = predict(model, val_set)
        curves.append(CurvePoint(epoch, loss_sum / n, correct / n, vloss,
                                 float((vlogits.argmax(axis=1) == vy).mean())))
    return model, curves


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing-free moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


_CURVE_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


def export_curves(curves: Sequence[CurvePoint], path_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and a two-panel ``<prefix>.svg``."""
    if not curves:
        raise ValueError("no curve points to export")
    prefix = Path(path_prefix)
    csv_path, svg_path = prefix.with_name(prefix.name + ".csv"), prefix.with_name(prefix.name + ".svg")
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(_CURVE_HEADER)
        for c in curves:
            wr.writerow([c.epoch, repr(c.train_loss), repr(c.train_accuracy),
                         repr(c.val_loss), repr(c.val_accuracy)])
    svg_path.write_text(_curves_svg(curves), encoding="utf-8")
    return csv_path, svg_path


def read_curves_csv(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != _CURVE_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [CurvePoint(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in rows[1:]]


def _curves_svg(curves) -> str:
    w, h, pad = 360, 240, 40
    panels = [("loss", [c.train_loss for c in curves], [c.val_loss for c in curves]),
              ("accuracy", [c.train_accuracy for c in curves], [c.val_accuracy for c in curves])]
    epochs = [c.epoch for c in curves]
    e0, e1 = min(epochs), max(epochs)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w}" height="{h}" '
             f'font-family="sans-serif" font-size="11">']
    for k, (title, tr, va) in enumerate(panels):
        ox = k * w
        lo, hi = min(tr + va), max(tr + va)
        if title == "accuracy":
            lo, hi = 0.0, 1.0
        if hi - lo < 1e-12:
            hi = lo + 1.0

        def pt(e, v):
            x = ox + pad + (w - 2 * pad) * ((e - e0) / (e1 - e0) if e1 > e0 else 0.5)
            y = h - pad - (h - 2 * pad) * (v - lo) / (hi - lo)
            return f"{x:.2f},{y:.2f}"

        parts.append(f'<rect x="{ox + pad}" y="{pad}" width="{w - 2 * pad}" '
                     f'height="{h - 2 * pad}" fill="none" stroke="#444"/>')
        parts.append(f'<text x="{ox + w / 2}" y="{pad - 12}" text-anchor="middle">'
                     f'{escape(title)}</text>')
        parts.append(f'<text x="{ox + pad - 4}" y="{pad + 4}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{ox + pad - 4}" y="{h - pad}" text-anchor="end">{lo:.3g}</text>')
        parts.append(f'<text x="{ox + w / 2}" y="{h - 10}" text-anchor="middle">epoch</text>')
        for series, colour, name in ((tr, "#1f77b4", "train"), (va, "#d62728", "val")):
            pts = " ".join(pt(e, v) for e, v in zip(epochs, series))
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                         f'points="{pts}"><title>{name}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# benchmark grid

FEATURE_KINDS = ("raw", "subsample", "histogram", "pca", "hog", "hog+pca")
MODEL_KINDS = ("resnet_simam", "resnet_plain", "mlp")

GRID_CAVEAT = ("Synthetic desk-scale data: values show the pipeline runs end to end "
               "and are not comparable with results on clinical radiographs.")


@dataclass(frozen=True)
class FeatureParams:
    subsample_size: int = 16
    histogram_bins: int = 32
    pca_k: int = 16
    hog: HogSpec = HogSpec()


@dataclass(frozen=True)
class BenchConfig:
    cnn: ResNetConfig = ResNetConfig(width_mult=0.25)
    cnn_train: TrainConfig = TrainConfig(epochs=10)
    mlp_train: TrainConfig = TrainConfig(epochs=100)
    mlp_hidden: int = 64
    features: FeatureParams = FeatureParams()
    seed: int = 0
    dtype: str = "float32"


@dataclass
class GridResult:
    model_kinds: tuple
    feature_kinds: tuple
    cells: dict = field(default_factory=dict)      # (model, feature) -> macro_f1
    protocols: dict = field(default_factory=dict)  # (model, feature) -> description

    def render_text(self) -> str:
        head = ["model"] + list(self.feature_kinds)
        rows = [[m] + [f"{self.cells[m, f]:.4f}" for f in self.feature_kinds]
                for m in self.model_kinds]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(v.ljust(wd) if i == 0 else v.rjust(wd)
                                  for i, (v, wd) in enumerate(zip(r, widths)))
        lines = ["Validation macro-F1 by model and feature", fmt(head)]
        lines += [fmt(r) for r in rows]
        lines.append("")
        lines.append("Protocols:")
        for key in sorted({p for p in self.protocols.values()}):
            cells = [f"{m}/{f}" for (m, f), p in self.protocols.items() if p == key]
            lines.append(f"  {key}: {', '.join(cells)}")
        lines.append("")
        lines.append("Caveat: " + GRID_CAVEAT)
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["model"] + list(self.feature_kinds))
            for m in self.model_kinds:
                wr.writerow([m] + [repr(self.cells[m, f]) for f in self.feature_kinds])


def _gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def _image_features(kind: str, train_imgs: list, imgs: list, fp: FeatureParams):
    """Per-image feature rows for ``imgs``; fitted parts use ``train_imgs`` only."""
    imgs = [_gray(im) for im in imgs]
    train_imgs = [_gray(im) for im in train_imgs]
    if kind == "raw":
        return np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in imgs])
    if kind == "subsample":
        return np.stack([subsample(im, fp.subsample_size, fp.subsample_size) for im in imgs])
    if kind == "histogram":
        return np.stack([intensity_histogram(im, fp.histogram_bins) for im in imgs])
    if kind in ("pca", "hog+pca"):
        base = "raw" if kind == "pca" else "hog"
        ref = _image_features(base, train_imgs, train_imgs, fp)
        k = min(fp.pca_k, ref.shape[0] - 1, ref.shape[1])
        model = pca_fit(ref, k)
        return pca_transform(model, _image_features(base, train_imgs, imgs, fp))
    if kind == "hog":
        return np.stack([hog(im, fp.hog) for im in imgs])
    raise ValueError(f"unknown feature kind {kind!r}")


def pair_features(kind: str, train_pairs, pairs, fp: FeatureParams = FeatureParams()):
    """Concatenate before/after image features into one row per pair."""
    train_imgs = [p.before for p in train_pairs] + [p.after for p in train_pairs]
    before = _image_features(kind, train_imgs, [p.before for p in pairs], fp)
    after = _image_features(kind, train_imgs, [p.after for p in pairs], fp)
    return np.concatenate([before, after], axis=1)


def _standardize(train_x, other_x):
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (train_x - mu) / sd, (other_x - mu) / sd


def _embed(model, pairs, batch_size: int = 64) -> np.ndarray:
    x, _ = stack_pairs(pairs)
    dt = _param_dtype(model)
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(model.embed(Tensor(x[s:s + batch_size].astype(dt)), "infer").data)
    return np.concatenate(out).astype(np.float64)


def _labels(pairs) -> np.ndarray:
    return np.array([int(p.label) for p in pairs], dtype=np.int64)


def benchmark_grid(feature_kinds: Sequence[str], model_kinds: Sequence[str],
                   dataset, cfg: BenchConfig = BenchConfig(), log=None) -> GridResult:
    """Validation macro-F1 for every (model, feature) cell.

    ``dataset`` is a ``(train_pairs, val_pairs)`` tuple. CNN rows train one
    network per model kind on the raw pairs; the raw cell is that network's
    own score, other cells freeze it and fit an MLP head on its pooled
    embedding concatenated with the standardized feature vector. MLP rows fit
    the head on feature vectors alone (raw = flattened pixels).
    """
    for f in feature_kinds:
        if f not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {f!r}")
    for m in model_kinds:
        if m not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {m!r}")
    train_pairs, val_pairs = dataset
    ytr, yva = _labels(train_pairs), _labels(val_pairs)
    dtype = np.dtype(cfg.dtype)
    say = log or (lambda msg: None)
    result = GridResult(tuple(model_kinds), tuple(feature_kinds))
    feats = {}
    for f in feature_kinds:
        if f != "raw" or "mlp" in model_kinds:
            feats[f] = (pair_features(f, train_pairs, train_pairs, cfg.features),
                        pair_features(f, train_pairs, val_pairs, cfg.features))

    def fit_head(xtr, xva, label):
        xtr, xva = _standardize(xtr, xva)
        seed = int(derive_rng(cfg.seed, "head/" + label).integers(2 ** 31))
        head = MLPModel.init(xtr.shape[1], seed, cfg.mlp_hidden, dtype=dtype)
        tcfg = replace(cfg.mlp_train, seed=seed, augmentation=None)
        head, _ = train(head, (xtr.astype(dtype), ytr), (xva.astype(dtype), yva), tcfg)
        return evaluate(head, (xva.astype(dtype), yva)).macro_f1

    for m in model_kinds:
        if m == "mlp":
            for f in feature_kinds:
                say(f"mlp x {f}")
                result.cells[m, f] = fit_head(*feats[f], f"mlp/{f}")
                result.protocols[m, f] = ("mlp on flattened pair pixels" if f == "raw"
                                          else "mlp on pair feature vector")
            continue
        placement = cfg.cnn.simam.placement
        if m == "resnet_plain":
            placement = Placement.NONE
        elif placement is Placement.NONE:
            placement = Placement.PER_BLOCK_ADDITIVE
        net_cfg = replace(cfg.cnn, simam=replace(cfg.cnn.simam, placement=placement))
        say(f"training {m}")
        net = build_model(net_cfg, int(derive_rng(cfg.seed, "cnn", MODEL_KINDS.index(m))
                                       .integers(2 ** 31)), dtype=dtype)
        net, _ = train(net, train_pairs, val_pairs, replace(cfg.cnn_train, seed=cfg.seed))
        emb_tr, emb_va = _embed(net, train_pairs), _embed(net, val_pairs)
        for f in feature_kinds:
            if f == "raw":
                result.cells[m, f] = evaluate(net, val_pairs).macro_f1
                result.protocols[m, f] = "cnn end to end on raw pairs"
            else:
                say(f"{m} x {f}")
                xtr = np.concatenate([emb_tr, feats[f][0]], axis=1)
                xva = np.concatenate([emb_va, feats[f][1]], axis=1)
                result.cells[m, f] = fit_head(xtr, xva, f"{m}/{f}")
                result.protocols[m, f] = "frozen cnn embedding + features, mlp head"
    return result
