"""Two-stage training: per-scale DA-MIL (stage 1) and the shared multi-scale head (stage 2).

Every bag is one mini-batch.  One parameter update in stage 1 is

    theta_y <- theta_y - lr * dL_bag/dtheta_y
    theta_d <- theta_d - lr * lam * dL_d/dtheta_d
    theta_f <- theta_f - lr * (dL_bag/dtheta_f - lam * dL'_d/dtheta_f)

where L_d is the mean domain cross entropy over the bag's instances and L'_d
the same mean weighted by beta_i = max_j a_j - a_i.  Plain gradients are
replaced by SGD-momentum velocities.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import Bag, Slide, augment_slide, derive_rng, extract_bags
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("patch", "mil", "damil", "msdamil")
ALPHA_GRID = (0.5, 1.0, 2.0, 4.0)
_F, _Y, _D, _YALL, _P = 1, 2, 3, 4, 5  # rng stream tags
_SHUFFLE = 0x5F1E


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 10
    alpha: float = 1.0
    fc_dim: int = 512
    attn_hidden: int = 128
    domain_hidden: int = 1024
    conv_widths: tuple[int, ...] = (8, 16)
    kernel: int = 3
    bag_size: int = 20
    max_bags: int = 10
    augment_threshold: int = 0
    resample_bags: bool = False
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d


# ---------------------------------------------------------------------------
# schedule and optimizer


def lambda_schedule(m: float, M_total: int, alpha: float) -> float:
    """2 / (1 + exp(-10 r)) - 1 with r = m / M * alpha."""
    if M_total <= 0:
        raise ValueError(f"total epochs must be positive, got {M_total}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    r = m / M_total * alpha
    return 2.0 / (1.0 + math.exp(-10.0 * r)) - 1.0


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.velocity.clear()


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                      state: OptimizerState, lr: float, momentum: float) -> None:
    """v <- momentum * v + g; theta <- theta - lr * v, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= p.dtype.type(momentum)
        v += g
        p.data -= p.dtype.type(lr) * v


def _named(prefix: str, params: M.ParamSet | M.FeatureExtractorParams) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v for k, v in params.tensors().items()}


def _grads(named: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}


def _frozen(params: M.DomainPredictorParams) -> M.DomainPredictorParams:
    """Same arrays, no gradient tracking."""
    return M.DomainPredictorParams(*(Tensor(t.data, dtype=t.dtype) for t in params.tensors().values()))


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class StepLosses:
    bag: float
    domain: float
    domain_weighted: float


def stage1_losses(x: Tensor, y: np.ndarray, d: np.ndarray | None, theta_f, theta_y, theta_d):
    """Forward pass of one bag: returns (L_bag, L_d, L'_d, bag output).

    L_d is built on detached features so it only reaches theta_d; L'_d uses
    a gradient-free view of theta_d so it only reaches theta_f.  beta is a
    constant taken from this forward pass.
    """
    h = M.extract_features(x, theta_f)
    out = M.bag_head(h, theta_y)
    l_bag = T.cross_entropy(y, out.class_probs)
    if theta_d is None:
        return l_bag, None, None, out
    n = h.shape[0]
    targets = np.broadcast_to(d, (n, d.shape[0]))
    p_d = T.softmax(M.domain_logits(h.detach(), theta_d))
    l_d = T.mean(T.cross_entropy(targets, p_d))
    p_adv = T.softmax(M.domain_logits(h, _frozen(theta_d)))
    beta = Tensor(out.betas, dtype=h.dtype)
    l_dw = T.mean(T.mul(T.cross_entropy(targets, p_adv), beta))
    return l_bag, l_d, l_dw, out


def stage1_gradients(x: Tensor, y: np.ndarray, d: np.ndarray | None,
                     theta_f: M.FeatureExtractorParams, theta_y: M.BagPredictorParams,
                     theta_d: M.DomainPredictorParams | None, lam: float):
    """Backward pass of ``L_bag + lam * (L_d - L'_d)`` for one bag.

    Because of the detached views inside :func:`stage1_losses`, the single
    objective hands each parameter group exactly its own update direction.
    Returns (loss values, named parameters, named gradients).
    """
    l_bag, l_d, l_dw, _ = stage1_losses(x, y, d, theta_f, theta_y, theta_d)
    values = [l_bag.item()] + ([] if l_d is None else [l_d.item(), l_dw.item()])
    objective = l_bag
    if theta_d is not None:
        objective = T.add(objective, T.scale(T.sub(l_d, l_dw), lam))
    named = {**_named("f", theta_f), **_named("y", theta_y)}
    if theta_d is not None:
        named.update(_named("d", theta_d))
    T.zero_grad(named.values())
    if all(math.isfinite(v) for v in values):
        T.backward(objective)
    return values, named, _grads(named)


def stage1_step(bag: Bag, scale: int, y: np.ndarray, d: np.ndarray | None,
                theta_f: M.FeatureExtractorParams, theta_y: M.BagPredictorParams,
                theta_d: M.DomainPredictorParams | None, lam: float, opt: OptimizerState,
                lr: float, momentum: float) -> StepLosses:
    """One parameter update on one bag.  ``theta_d=None`` trains attention-MIL only."""
    if len(bag) == 0:
        raise ValueError(f"bag {bag.bag_id} is empty")
    x = Tensor(bag.patches(scale, dtype=theta_f.weights[0].dtype.type))
    values, named, grads = stage1_gradients(x, y, d, theta_f, theta_y, theta_d, lam)
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"non-finite loss {values} in bag {bag.bag_id} at scale {scale}")
    sgd_momentum_step(named, grads, opt, lr, momentum)
    if theta_d is None:
        return StepLosses(values[0], float("nan"), float("nan"))
    return StepLosses(*values)


@dataclass
class EpochRecord:
    epoch: int
    scale: int
    bag_loss: float
    domain_loss: float
    lam: float


@dataclass
class Stage1Result:
    scale: int
    theta_f: M.FeatureExtractorParams
    theta_y: M.BagPredictorParams
    theta_d: M.DomainPredictorParams | None
    history: list[EpochRecord]


def domain_index(slides: Sequence[Slide]) -> dict[str, int]:
    """One domain per training slide, ordered by slide id."""
    return {s.slide_id: i for i, s in enumerate(sorted(slides, key=lambda s: s.slide_id))}


def build_bags(slides: Sequence[Slide], config: TrainConfig, epoch: int = 0) -> dict[str, list[Bag]]:
    seed = config.seed + (epoch if config.resample_bags else 0) * 7919
    out = {}
    for s in sorted(slides, key=lambda s: s.slide_id):
        src = augment_slide(s, config.augment_threshold) if config.augment_threshold else s
        out[s.slide_id] = extract_bags(src, config.bag_size, config.max_bags, seed)
    return out


def visit_order(bags: Mapping[str, list[Bag]], seed: int, *keys: int) -> list[Bag]:
    """All bags of all slides in one seeded permutation, instances reordered.

    Bags are interleaved across slides rather than visited slide by slide:
    consecutive same-label bags from one slide let momentum run away with
    the class bias before the discriminative direction is learned.
    """
    rng = derive_rng(seed, _SHUFFLE, *keys)
    pool = [bag for sid in sorted(bags) for bag in bags[sid]]
    return [pool[i].permuted(rng.permutation(len(pool[i]))) for i in rng.permutation(len(pool))]


def init_stage1(config: TrainConfig, scale: int, patch_size: int, n_domains: int | None,
                channels: int = 3):
    dtype = config.np_dtype
    theta_f = M.init_extractor(derive_rng(config.seed, scale, _F), channels, config.conv_widths,
                               config.kernel, patch_size, scale, dtype=dtype)
    q = theta_f.feature_dim
    theta_y = M.init_bag_predictor(derive_rng(config.seed, scale, _Y), q, config.fc_dim,
                                   config.attn_hidden, dtype)
    theta_d = None
    if n_domains is not None:
        theta_d = M.init_domain_predictor(derive_rng(config.seed, scale, _D), q, n_domains,
                                          config.domain_hidden, dtype)
    return theta_f, theta_y, theta_d


def _patch_size(slides: Sequence[Slide], scale: int) -> tuple[int, int]:
    shape = slides[0].patches[scale].shape
    return shape[-1], shape[1]


def stage1_train(slides: Sequence[Slide], config: TrainConfig, scale: int, *,
                 domain_adversarial: bool = True,
                 lambda_fn: Callable[[int, int, float], float] | None = None,
                 on_epoch: Callable[[int, Stage1Result], None] | None = None) -> Stage1Result:
    """Train extractor, attention head and domain predictor for one scale.

    ``domain_adversarial=False`` gives the attention-MIL baseline (no domain
    predictor at all).  ``lambda_fn(m, M, alpha)`` overrides the schedule.
    """
    config.validate()
    if not slides:
        raise ValueError("empty training set")
    dom = domain_index(slides)
    p, c = _patch_size(slides, scale)
    theta_f, theta_y, theta_d = init_stage1(config, scale, p, len(dom) if domain_adversarial else None, c)
    schedule = lambda_fn or lambda_schedule
    opt = OptimizerState()
    history: list[EpochRecord] = []
    result = Stage1Result(scale, theta_f, theta_y, theta_d, history)
    bags = build_bags(slides, config)
    n_dom = len(dom)
    labels = {s.slide_id: s.class_onehot for s in slides}
    for m in range(1, config.epochs + 1):
        if config.resample_bags and m > 1:
            bags = build_bags(slides, config, epoch=m)
        lam = schedule(m, config.epochs, config.alpha) if domain_adversarial else 0.0
        losses = []
        for bag in visit_order(bags, config.seed, scale, m):
            d = None
            if domain_adversarial:
                d = np.zeros(n_dom)
                d[dom[bag.slide_id]] = 1.0
            losses.append(stage1_step(bag, scale, labels[bag.slide_id], d, theta_f, theta_y, theta_d,
                                      lam, opt, config.lr, config.momentum))
        rec = EpochRecord(m, scale, float(np.mean([l.bag for l in losses])),
                          float(np.mean([l.domain for l in losses])) if domain_adversarial else float("nan"),
                          lam)
        history.append(rec)
        log.info("stage1 scale=%d epoch=%d L_bag=%.4f L_d=%.4f lambda=%.4f",
                 scale, m, rec.bag_loss, rec.domain_loss, lam)
        if on_epoch is not None:
            on_epoch(m, result)
    return result


# ---------------------------------------------------------------------------
# stage 2


def bag_features(bag: Bag, extractors: Mapping[int, M.FeatureExtractorParams]) -> list[np.ndarray]:
    """Frozen extractor outputs (n, Q) for every scale of a bag."""
    feats = []
    for s in sorted(extractors):
        f = extractors[s]
        feats.append(M.extract_features(Tensor(bag.patches(s, dtype=f.weights[0].dtype.type)), f).data)
    return feats


def _feature_cache(bags: Mapping[str, list[Bag]], extractors) -> dict:
    """bag id -> (region id -> row, per-scale feature arrays)."""
    return {b.bag_id: ({int(r): i for i, r in enumerate(b.region_ids)}, bag_features(b, extractors))
            for bl in bags.values() for b in bl}


@dataclass
class Stage2Result:
    theta_y_all: M.BagPredictorParams
    history: list[EpochRecord]


def stage2_train(slides: Sequence[Slide], extractors: Mapping[int, M.FeatureExtractorParams],
                 config: TrainConfig, scales: Sequence[int] | None = None) -> Stage2Result:
    """Train the shared multi-scale head on frozen extractors."""
    config.validate()
    scales = sorted(scales or extractors)
    for s in scales:
        if s not in extractors:
            raise KeyError(f"missing stage-1 checkpoint for scale {s}")
    extractors = {s: extractors[s] for s in scales}
    frozen = {s: f.copy() for s, f in extractors.items()}
    for f in frozen.values():
        for t in f.tensors().values():
            t.requires_grad = False
    q = {f.feature_dim for f in frozen.values()}
    if len(q) != 1:
        raise ValueError(f"extractors disagree on feature dimension: {sorted(q)}")
    dtype = config.np_dtype
    theta = M.init_bag_predictor(derive_rng(config.seed, 0, _YALL), q.pop(), config.fc_dim,
                                 config.attn_hidden, dtype)
    named = _named("y_all", theta)
    opt = OptimizerState()
    labels = {s.slide_id: s.class_onehot for s in slides}
    bags = build_bags(slides, config)
    cache = _feature_cache(bags, frozen)
    history = []
    for m in range(1, config.epochs + 1):
        if config.resample_bags and m > 1:
            bags = build_bags(slides, config, epoch=m)
            cache = _feature_cache(bags, frozen)
        losses = []
        for bag in visit_order(bags, config.seed, 0, m):
            rows, feats = cache[bag.bag_id]
            order = [rows[int(r)] for r in bag.region_ids]
            out = M.multiscale_head([Tensor(f[order]) for f in feats], theta)
            loss = T.cross_entropy(labels[bag.slide_id], out.class_probs)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss in bag {bag.bag_id} (stage 2)")
            T.backward(loss)
            sgd_momentum_step(named, _grads(named), opt, config.lr, config.momentum)
            losses.append(loss.item())
        history.append(EpochRecord(m, 0, float(np.mean(losses)), float("nan"), 0.0))
        log.info("stage2 epoch=%d L_bag=%.4f", m, history[-1].bag_loss)
    return Stage2Result(theta, history)


# ---------------------------------------------------------------------------
# patch-based baseline


@dataclass
class PatchResult:
    scale: int
    theta_f: M.FeatureExtractorParams
    head: M.PatchClassifierParams
    history: list[EpochRecord]


def patch_train(slides: Sequence[Slide], config: TrainConfig, scale: int) -> PatchResult:
    """Every patch inherits its slide's label; each bag's patches form a mini-batch."""
    config.validate()
    p, c = _patch_size(slides, scale)
    dtype = config.np_dtype
    theta_f = M.init_extractor(derive_rng(config.seed, scale, _F), c, config.conv_widths,
                               config.kernel, p, scale, dtype=dtype)
    head = M.init_patch_classifier(derive_rng(config.seed, scale, _P), theta_f.feature_dim,
                                   config.fc_dim, dtype)
    named = {**_named("f", theta_f), **_named("p", head)}
    opt = OptimizerState()
    labels = {s.slide_id: s.class_onehot for s in slides}
    bags = build_bags(slides, config)
    history = []
    for m in range(1, config.epochs + 1):
        if config.resample_bags and m > 1:
            bags = build_bags(slides, config, epoch=m)
        losses = []
        for bag in visit_order(bags, config.seed, scale, m):
            probs = M.patch_predict(Tensor(bag.patches(scale, dtype=dtype)), theta_f, head)
            targets = np.broadcast_to(labels[bag.slide_id], probs.shape)
            loss = T.mean(T.cross_entropy(targets, probs))
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss in bag {bag.bag_id} (patch baseline)")
            T.backward(loss)
            sgd_momentum_step(named, _grads(named), opt, config.lr, config.momentum)
            losses.append(loss.item())
        history.append(EpochRecord(m, scale, float(np.mean(losses)), float("nan"), 0.0))
    return PatchResult(scale, theta_f, head, history)


# ---------------------------------------------------------------------------
# trained model bundle and checkpoints


@dataclass
class TrainedModel:
    """Everything needed to evaluate one method."""

    mode: str
    patch_size: int
    extractors: dict[int, M.FeatureExtractorParams] = field(default_factory=dict)
    heads: dict[int, M.BagPredictorParams] = field(default_factory=dict)
    domain: dict[int, M.DomainPredictorParams] = field(default_factory=dict)
    head_all: M.BagPredictorParams | None = None
    patch_heads: dict[int, M.PatchClassifierParams] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def scales(self) -> list[int]:
        return sorted(self.extractors)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for s, f in sorted(self.extractors.items()):
            out.update({k: v.data for k, v in _named(f"f{s}", f).items()})
        for s, y in sorted(self.heads.items()):
            out.update({k: v.data for k, v in _named(f"y{s}", y).items()})
        for s, d in sorted(self.domain.items()):
            out.update({k: v.data for k, v in _named(f"d{s}", d).items()})
        for s, p in sorted(self.patch_heads.items()):
            out.update({k: v.data for k, v in _named(f"p{s}", p).items()})
        if self.head_all is not None:
            out.update({k: v.data for k, v in _named("y_all", self.head_all).items()})
        return out

    def to_checkpoint(self) -> "Checkpoint":
        meta = {"mode": self.mode, "patch_size": self.patch_size, "config": self.config,
                "epoch": self.epoch,
                "input_center": {str(s): f.input_center for s, f in sorted(self.extractors.items())}}
        return Checkpoint(scales=self.scales, tensors=self.named_arrays(), meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "TrainedModel":
        meta = ckpt.meta
        model = cls(mode=meta["mode"], patch_size=int(meta["patch_size"]), config=meta.get("config", {}),
                    epoch=int(meta.get("epoch", 0)))
        centers = meta.get("input_center", {})
        groups: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in ckpt.tensors.items():
            prefix, key = name.split("/", 1)
            groups.setdefault(prefix, {})[key] = arr
        for prefix, arrays in groups.items():
            t = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
            if prefix == "y_all":
                model.head_all = M.BagPredictorParams(**{k: t[k] for k in M.BagPredictorParams._names})
                continue
            kind, s = prefix[0], int(prefix[1:])
            if kind == "f":
                n = len(arrays) // 2
                model.extractors[s] = M.FeatureExtractorParams(
                    [t[f"conv{i + 1}.W"] for i in range(n)], [t[f"conv{i + 1}.b"] for i in range(n)],
                    model.patch_size, s, float(centers.get(str(s), 0.5)))
            elif kind == "y":
                model.heads[s] = M.BagPredictorParams(**{k: t[k] for k in M.BagPredictorParams._names})
            elif kind == "d":
                model.domain[s] = M.DomainPredictorParams(**{k: t[k] for k in M.DomainPredictorParams._names})
            elif kind == "p":
                model.patch_heads[s] = M.PatchClassifierParams(**{k: t[k] for k in M.PatchClassifierParams._names})
            else:
                raise ValueError(f"unknown tensor group {prefix!r} in checkpoint")
        return model


MAGIC = b"MSDAMIL\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Versioned binary container.

    Layout (little-endian): magic, u32 version, u32 number of scales, u32
    tensor count; per tensor u32 name length, UTF-8 name, u32 rank, u32 dims,
    float32 values; then u32 length and UTF-8 JSON metadata (mode, scales,
    config echo, epoch).
    """

    scales: list[int]
    tensors: dict[str, np.ndarray]
    meta: dict
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<III", self.version, len(self.scales), len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        meta = dict(self.meta, scales=list(self.scales))
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, n_scales, count = struct.unpack_from("<III", buf, pos)
        pos += 12
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
        (ln,) = struct.unpack_from("<I", buf, pos)
        meta = json.loads(buf[pos + 4:pos + 4 + ln].decode("utf-8"))
        scales = meta.pop("scales")
        if len(scales) != n_scales:
            raise ValueError("checkpoint header and metadata disagree on the number of scales")
        return cls(scales=scales, tensors=tensors, meta=meta, version=version)

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def param_digest(params: M.ParamSet | M.FeatureExtractorParams) -> str:
    h = hashlib.sha256()
    for name, t in params.tensors().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def write_history(path: Path | str, history: Iterable[EpochRecord]) -> None:
    lines = ["epoch\tscale\tmean_bag_loss\tmean_domain_loss\tlambda"]
    for r in history:
        lines.append(f"{r.epoch}\t{r.scale}\t{r.bag_loss:.8g}\t{r.domain_loss:.8g}\t{r.lam:.8g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# whole-method drivers


def train_method(mode: str, train_slides: Sequence[Slide], config: TrainConfig,
                 scales: Sequence[int], stage1: Mapping[int, Stage1Result] | None = None) -> TrainedModel:
    """Train one of the compared methods and bundle the result.

    For ``msdamil``, pre-trained DA-MIL stage-1 results may be passed in to
    avoid retraining the extractors.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    p = _patch_size(train_slides, scales[0])[0]
    model = TrainedModel(mode=mode, patch_size=p, config=config.to_dict(), epoch=config.epochs)
    if mode == "patch":
        for s in scales:
            r = patch_train(train_slides, config, s)
            model.extractors[s], model.patch_heads[s] = r.theta_f, r.head
        return model
    for s in scales:
        r = stage1[s] if stage1 and s in stage1 else stage1_train(
            train_slides, config, s, domain_adversarial=(mode != "mil"))
        model.extractors[s], model.heads[s] = r.theta_f, r.theta_y
        if r.theta_d is not None:
            model.domain[s] = r.theta_d
    if mode == "msdamil":
        model.head_all = stage2_train(train_slides, model.extractors, config).theta_y_all
    return model


def select_alpha(train_slides: Sequence[Slide], val_slides: Sequence[Slide], config: TrainConfig,
                 scale: int, grid: Sequence[float] = ALPHA_GRID,
                 on_epoch: Callable[[float, int, Stage1Result], None] | None = None
                 ) -> tuple[float, dict[float, float], Stage1Result]:
    """Train DA-MIL once per grid value and keep the one with the best validation accuracy.

    Ties go to the earlier grid entry. Returns the chosen alpha, the
    validation accuracy of every candidate and the chosen stage-1 result.
    """
    from .evaluate import evaluate_model

    scores, results = {}, {}
    for a in grid:
        cfg = replace(config, alpha=float(a))
        hook = None if on_epoch is None else (lambda m, r, a=a: on_epoch(a, m, r))
        r = stage1_train(train_slides, cfg, scale, on_epoch=hook)
        model = train_method("damil", train_slides, cfg, [scale], stage1={scale: r})
        scores[a] = evaluate_model(model, val_slides, "damil", scale=scale).accuracy
        results[a] = r
    best = max(grid, key=lambda a: (scores[a], -list(grid).index(a)))
    return best, scores, results[best]
