"""Slide-level aggregation, metrics, evaluation of trained methods and attention heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_softmax

from . import model as M
from . import tensor as T
from .data import Bag, Slide, extract_bags, write_ppm
from .tensor import Tensor
from .train import Checkpoint, TrainedModel

LOG_CLAMP = 1e-12
PATCH_CAP = 5000
BACKGROUND = (128, 128, 128)

COMPATIBLE = {
    "patch": ("patch",),
    "mil": ("mil",),
    "damil": ("damil", "msdamil"),
    "msdamil": ("msdamil",),
}


class IncompatibleCheckpoint(ValueError):
    pass


# ---------------------------------------------------------------------------
# aggregation


def _geometric_vote(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] != 2:
        raise ValueError(f"expected a non-empty list of 2-class probability vectors, got shape {p.shape}")
    logs = np.log(np.maximum(p, LOG_CLAMP)).mean(axis=0)
    # p1 / (p1 + p0) with p_k = exp(mean log P_k), computed in the log domain
    return float(expit(logs[1] - logs[0]))


def slide_probability(bag_probs) -> float:
    """P(slide positive) from the bags' class probabilities (geometric-mean vote)."""
    return _geometric_vote(bag_probs)


def patch_baseline_probability(patch_probs, cap: int = PATCH_CAP) -> float:
    """Same vote over individual patch predictions of the patch-based baseline."""
    if len(patch_probs) > cap:
        raise ValueError(f"{len(patch_probs)} patches exceed the per-slide cap of {cap}")
    return _geometric_vote(patch_probs)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def compute_metrics(predictions: Sequence[tuple[float, int]], threshold: float = 0.5) -> Metrics:
    """Confusion-matrix metrics; a slide is called positive when P >= threshold.

    An undefined precision or recall (zero denominator) is reported as 0 and
    named in ``flags``.
    """
    if not predictions:
        raise ValueError("no predictions")
    tp = fp = fn = tn = 0
    for p, y in predictions:
        pred = p >= threshold
        if pred and y == 1:
            tp += 1
        elif pred:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    flags = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    if tp + fp == 0:
        flags.append("precision_undefined")
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fn == 0:
        flags.append("recall_undefined")
    return Metrics((tp + tn) / len(predictions), precision, recall, tp, fp, fn, tn, tuple(flags))


# ---------------------------------------------------------------------------
# prediction


@dataclass
class SlidePrediction:
    slide_id: str
    prob: float
    label: int
    bag_probs: np.ndarray  # (B, 2); per patch for the patch baseline
    bag_ids: list[str] = field(default_factory=list)
    attentions: list[list[np.ndarray]] = field(default_factory=list)  # per bag, per scale
    scales: list[int] = field(default_factory=list)


def resolve_model(source, mode: str) -> TrainedModel:
    if isinstance(source, (str, Path)):
        source = Checkpoint.load(source)
    if isinstance(source, Checkpoint):
        source = TrainedModel.from_checkpoint(source)
    if mode not in COMPATIBLE:
        raise ValueError(f"unknown mode {mode!r}")
    if source.mode not in COMPATIBLE[mode]:
        raise IncompatibleCheckpoint(
            f"mode {mode!r} needs a {' or '.join(COMPATIBLE[mode])} checkpoint, got a {source.mode!r} checkpoint"
            f" with scales {source.scales}")
    if mode == "msdamil" and source.head_all is None:
        raise IncompatibleCheckpoint("mode 'msdamil' needs a stage-2 checkpoint (multi-scale head missing)")
    return source


def _single_scale(model: TrainedModel, scale: int | None) -> int:
    if scale is None:
        if len(model.scales) != 1:
            raise ValueError(f"model has scales {model.scales}; choose one")
        return model.scales[0]
    if scale not in model.extractors:
        raise ValueError(f"model has no scale {scale} (available: {model.scales})")
    return scale


def bag_settings(model: TrainedModel, bag_size, max_bags, seed):
    cfg = model.config
    return (bag_size or cfg.get("bag_size", 20), max_bags or cfg.get("max_bags", 10),
            cfg.get("seed", 0) if seed is None else seed)


def predict_bag(model: TrainedModel, bag: Bag, mode: str, scale: int | None = None) -> M.BagOutput:
    with T.no_grad():
        if mode == "msdamil":
            patches = {s: bag.patches(s) for s in model.scales}
            return M.multiscale_bag_predict(patches, model.extractors, model.head_all)
        s = _single_scale(model, scale)
        return M.bag_predict(Tensor(bag.patches(s)), model.extractors[s], model.heads[s])


def predict_slide(model: TrainedModel, slide: Slide, mode: str, scale: int | None = None, *,
                  bag_size: int | None = None, max_bags: int | None = None,
                  seed: int | None = None) -> SlidePrediction:
    if mode == "patch":
        s = _single_scale(model, scale)
        n = min(slide.n_regions, PATCH_CAP)
        probs = []
        with T.no_grad():
            for lo in range(0, n, 256):
                x = Tensor(slide.patch_array(s, slice(lo, min(n, lo + 256))))
                probs.append(M.patch_predict(x, model.extractors[s], model.patch_heads[s]).data)
        probs = np.concatenate(probs).astype(np.float64)
        return SlidePrediction(slide.slide_id, patch_baseline_probability(probs), slide.label, probs,
                               scales=[s])
    bs, mb, sd = bag_settings(model, bag_size, max_bags, seed)
    bags = extract_bags(slide, bs, mb, sd)
    outs = [predict_bag(model, b, mode, scale) for b in bags]
    probs = np.array([o.class_probs.data for o in outs], dtype=np.float64)
    scales = model.scales if mode == "msdamil" else [_single_scale(model, scale)]
    return SlidePrediction(slide.slide_id, slide_probability(probs), slide.label, probs,
                           bag_ids=[b.bag_id for b in bags],
                           attentions=[[a.astype(np.float64) for a in o.attention_by_scale()] for o in outs],
                           scales=list(scales))


@dataclass
class EvalResult:
    metrics: Metrics
    predictions: list[SlidePrediction]

    @property
    def accuracy(self) -> float:
        return self.metrics.accuracy


def evaluate_model(model: TrainedModel, slides: Sequence[Slide], mode: str, scale: int | None = None,
                   threshold: float = 0.5, **bag_kw) -> EvalResult:
    model = resolve_model(model, mode)
    preds = [predict_slide(model, s, mode, scale, **bag_kw) for s in sorted(slides, key=lambda s: s.slide_id)]
    return EvalResult(compute_metrics([(p.prob, p.label) for p in preds], threshold), preds)


def evaluate_corpus(checkpoint, slides: Sequence[Slide], mode: str, scale: int | None = None,
                    threshold: float = 0.5) -> tuple[Metrics, list[SlidePrediction]]:
    """Run one compared method over slides; ``checkpoint`` may be a path, Checkpoint or model."""
    r = evaluate_model(resolve_model(checkpoint, mode), slides, mode, scale, threshold)
    return r.metrics, r.predictions


def attention_scale_stats(predictions: Sequence[SlidePrediction]) -> dict[int, float]:
    """Mean attention mass each scale receives per bag."""
    mass: dict[int, list[float]] = {}
    for p in predictions:
        for per_scale in p.attentions:
            for s, a in zip(p.scales, per_scale):
                mass.setdefault(s, []).append(float(a.sum()))
    return {s: float(np.mean(v)) for s, v in sorted(mass.items())}


# ---------------------------------------------------------------------------
# files


def write_predictions(path: Path | str, predictions: Sequence[SlidePrediction], mode: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["slide_id", "P_pos", "true_label", "mode"])
        for p in predictions:
            w.writerow([p.slide_id, repr(float(p.prob)), p.label, mode])


def read_predictions(path: Path | str) -> list[tuple[str, float, int, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["slide_id"], float(r["P_pos"]), int(r["true_label"]), r["mode"])
                for r in csv.DictReader(fh, delimiter="\t")]


def write_metrics(path: Path | str, metrics: Metrics, mode: str) -> None:
    keys = ["mode", "accuracy", "precision", "recall", "tp", "fp", "fn", "tn", "flags"]
    vals = [mode] + [repr(v) if isinstance(v, float) else str(v) for v in metrics.as_dict().values()]
    vals.append(",".join(metrics.flags))
    Path(path).write_text("\t".join(keys) + "\n" + "\t".join(vals) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# heatmaps


def normalize_attention(a) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def heat_color(v) -> np.ndarray:
    """Blue (0) to red (1) on the straight RGB line."""
    v = np.asarray(v, dtype=np.float64)
    red = np.rint(255 * v)
    return np.stack([red, np.zeros_like(red), 255 - red], axis=-1).astype(np.uint8)


@dataclass
class Heatmap:
    values: list[np.ndarray]  # normalized attention per scale
    rasters: list[np.ndarray]  # (H, W, 3) uint8 per scale
    scales: list[int]


def render_attention_heatmap(positions, attentions: Sequence[np.ndarray], grid_shape: tuple[int, int],
                             cell: int = 8, scales: Sequence[int] | None = None) -> Heatmap:
    """Colour each instance's grid cell by its normalized attention.

    ``attentions`` holds one vector per scale (a single vector for a
    single-scale bag).  Normalization is over the whole bag, so the maps show
    which scale carries the attention.  Cells outside the bag stay gray; a
    region listed twice keeps the last colour drawn.
    """
    if positions is None or grid_shape is None:
        raise ValueError("heatmap rendering needs instance grid positions and the grid shape")
    pos = np.asarray(positions)
    parts = [np.asarray(a, dtype=np.float64) for a in attentions]
    if any(len(a) != len(pos) for a in parts):
        raise ValueError(f"{[len(a) for a in parts]} attentions for {len(pos)} positioned instances")
    if pos.size and (pos.min() < 0 or (pos >= np.asarray(grid_shape)).any()):
        raise ValueError(f"instance positions fall outside the grid {grid_shape}")
    norm = normalize_attention(np.concatenate(parts))
    values = np.split(norm, np.cumsum([len(a) for a in parts])[:-1])
    rows, cols = grid_shape
    rasters = []
    for v in values:
        img = np.empty((rows * cell, cols * cell, 3), dtype=np.uint8)
        img[...] = BACKGROUND
        colors = heat_color(v)
        for (r, c), col in zip(pos, colors):
            img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = col
        rasters.append(img)
    return Heatmap(values, rasters, list(scales) if scales is not None else list(range(1, len(parts) + 1)))


def bag_heatmap(bag: Bag, prediction_attentions: Sequence[np.ndarray], grid_shape, scales, cell: int = 8) -> Heatmap:
    return render_attention_heatmap(bag.positions, prediction_attentions, grid_shape, cell, scales)


def write_heatmaps(out_dir: Path | str, slide: Slide, prediction: SlidePrediction, bags: Sequence[Bag],
                   cell: int = 8) -> list[Path]:
    """One PPM per (bag, scale) plus an index file; returns the image paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["bag_id\tscale\tfile"]
    by_id = {b.bag_id: b for b in bags}
    for bag_id, atts in zip(prediction.bag_ids, prediction.attentions):
        hm = bag_heatmap(by_id[bag_id], atts, slide.grid_shape, prediction.scales, cell)
        for s, raster in zip(hm.scales, hm.rasters):
            name = f"{bag_id.replace('/', '_')}_scale{s}.ppm"
            write_ppm(out_dir / name, raster)
            written.append(out_dir / name)
            lines.append(f"{bag_id}\t{s}\t{name}")
    (out_dir / "index.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written


def signal_attention_contrast(bag: Bag, attentions: Sequence[np.ndarray]) -> float | None:
    """Mean normalized attention on planted-signal instances minus that on background.

    Multi-scale attentions are combined per region (summed over scales)
    before normalizing.  Returns None when the bag lacks either kind.
    """
    sig = np.asarray(bag.is_signal, dtype=bool)
    if sig.all() or not sig.any():
        return None
    combined = np.sum([np.asarray(a, dtype=np.float64) for a in attentions], axis=0)
    v = normalize_attention(combined)
    return float(v[sig].mean() - v[~sig].mean())


# ---------------------------------------------------------------------------
# domain probe


def slide_features(slides: Sequence[Slide], extractor: M.FeatureExtractorParams, scale: int,
                   chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Frozen features of every region of every slide, with the slide index of each row."""
    feats, owner = [], []
    dtype = extractor.weights[0].dtype.type
    with T.no_grad():
        for k, slide in enumerate(slides):
            patches = slide.patches[scale]
            for lo in range(0, len(patches), chunk):
                x = Tensor(patches[lo:lo + chunk].astype(dtype) / dtype(255))
                feats.append(M.extract_features(x, extractor).data.astype(np.float64))
            owner.append(np.full(len(patches), k))
    return np.concatenate(feats), np.concatenate(owner)


def domain_probe_accuracy(features: np.ndarray, domains: np.ndarray, l2: float = 1e-2,
                          max_iter: int = 300) -> float:
    """Training accuracy of an L2-regularised softmax regression predicting the domain.

    Features are standardised first, so the regulariser means the same thing
    for extractors whose outputs live on different scales.  A lower score says
    the features carry less linearly decodable domain information.
    """
    x = np.asarray(features, dtype=np.float64)
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-8)
    x = np.hstack([x, np.ones((len(x), 1))])
    labels = np.asarray(domains)
    k = int(labels.max()) + 1
    onehot = np.eye(k)[labels]
    n, q = x.shape

    def objective(flat):
        W = flat.reshape(q, k)
        logp = log_softmax(x @ W, axis=1)
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (W[:-1] ** 2).sum()
        grad = x.T @ (np.exp(logp) - onehot) / n
        grad[:-1] += l2 * W[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros(q * k), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    pred = (x @ res.x.reshape(q, k)).argmax(axis=1)
    return float((pred == labels).mean())
