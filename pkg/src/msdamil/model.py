"""Feature extractor, attention-MIL bag predictor and domain predictor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# parameter containers


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class ParamSet:
    """Mixin: ordered name -> Tensor view used by the optimizer and checkpoints."""

    _names: tuple[str, ...] = ()

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self._names}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in self._names:
            getattr(self, name).data[...] = arrays[name]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        for name in self._names:
            src = getattr(self, name)
            setattr(clone, name, Tensor(src.data.copy(), requires_grad=src.requires_grad))
        return clone

    def astype(self, dtype):
        clone = self.copy()
        for name in self._names:
            t = getattr(clone, name)
            t.data = t.data.astype(dtype)
        return clone


@dataclass(eq=False)
class FeatureExtractorParams(ParamSet):
    """Stack of conv -> relu -> maxpool blocks followed by flattening.

    ``weights``/``biases`` hold one kernel bank and bias per block; the
    extractor maps a (channels, patch_size, patch_size) patch to a
    ``feature_dim`` vector. Pixels are shifted by ``input_center`` before
    the first convolution; with inputs in [0, 1] the default of 0.5 keeps the
    first-layer activations centred, which the optimizer needs to make
    progress from a zero-bias start.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    patch_size: int
    scale: int = 1
    input_center: float = 0.5

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i + 1}.W"] = w
            out[f"conv{i + 1}.b"] = b
        return out

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self.tensors().items():
            t.data[...] = arrays[name]

    def copy(self) -> "FeatureExtractorParams":
        return FeatureExtractorParams(
            weights=[Tensor(w.data.copy(), requires_grad=w.requires_grad) for w in self.weights],
            biases=[Tensor(b.data.copy(), requires_grad=b.requires_grad) for b in self.biases],
            patch_size=self.patch_size,
            scale=self.scale,
            input_center=self.input_center,
        )

    def astype(self, dtype) -> "FeatureExtractorParams":
        clone = self.copy()
        for t in clone.tensors().values():
            t.data = t.data.astype(dtype)
        return clone

    @property
    def channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return extractor_output_dim(self.patch_size, [w.shape for w in self.weights])


def extractor_output_dim(patch_size: int, kernel_shapes: Sequence[tuple]) -> int:
    side = patch_size
    for k, _, r, _ in kernel_shapes:
        side = (side - r + 1) // 2
        if side < 1:
            raise ShapeError(f"patch size {patch_size} too small for extractor {list(kernel_shapes)}")
    return int(kernel_shapes[-1][0] * side * side)


@dataclass(eq=False)
class BagPredictorParams(ParamSet):
    fc_W: Tensor  # (Q, Q')
    fc_b: Tensor
    V: Tensor  # (hidden, Q')
    w: Tensor  # (hidden,)
    cls_W: Tensor  # (Q', 2)
    cls_b: Tensor

    _names = ("fc_W", "fc_b", "V", "w", "cls_W", "cls_b")

    @property
    def in_dim(self) -> int:
        return self.fc_W.shape[0]


@dataclass(eq=False)
class DomainPredictorParams(ParamSet):
    hid_W: Tensor  # (Q, hidden)
    hid_b: Tensor
    out_W: Tensor  # (hidden, N)
    out_b: Tensor

    _names = ("hid_W", "hid_b", "out_W", "out_b")

    @property
    def n_domains(self) -> int:
        return self.out_W.shape[1]


@dataclass(eq=False)
class PatchClassifierParams(ParamSet):
    """Per-patch head of the patch-based baseline: fc -> relu -> linear(2)."""

    fc_W: Tensor
    fc_b: Tensor
    cls_W: Tensor
    cls_b: Tensor

    _names = ("fc_W", "fc_b", "cls_W", "cls_b")


def init_extractor(rng: np.random.Generator, channels: int = 3, widths: Sequence[int] = (8, 16),
                   kernel: int = 3, patch_size: int = 32, scale: int = 1,
                   dtype=np.float32, input_center: float = 0.5) -> FeatureExtractorParams:
    weights, biases = [], []
    c = channels
    for k in widths:
        weights.append(_uniform(rng, (k, c, kernel, kernel), c * kernel * kernel, dtype))
        biases.append(_zeros((k,), dtype))
        c = k
    params = FeatureExtractorParams(weights, biases, patch_size, scale, input_center)
    params.feature_dim  # validates the geometry
    return params


def init_bag_predictor(rng: np.random.Generator, in_dim: int, fc_dim: int = 512,
                       attn_hidden: int = 128, dtype=np.float32) -> BagPredictorParams:
    return BagPredictorParams(
        fc_W=_uniform(rng, (in_dim, fc_dim), in_dim, dtype),
        fc_b=_zeros((fc_dim,), dtype),
        V=_uniform(rng, (attn_hidden, fc_dim), fc_dim, dtype),
        w=_uniform(rng, (attn_hidden,), attn_hidden, dtype),
        cls_W=_uniform(rng, (fc_dim, 2), fc_dim, dtype),
        cls_b=_zeros((2,), dtype),
    )


def init_domain_predictor(rng: np.random.Generator, in_dim: int, n_domains: int,
                          hidden: int = 1024, dtype=np.float32) -> DomainPredictorParams:
    if n_domains < 1:
        raise ValueError("domain predictor needs at least one domain")
    return DomainPredictorParams(
        hid_W=_uniform(rng, (in_dim, hidden), in_dim, dtype),
        hid_b=_zeros((hidden,), dtype),
        out_W=_uniform(rng, (hidden, n_domains), hidden, dtype),
        out_b=_zeros((n_domains,), dtype),
    )


def init_patch_classifier(rng: np.random.Generator, in_dim: int, fc_dim: int = 512,
                          dtype=np.float32) -> PatchClassifierParams:
    return PatchClassifierParams(
        fc_W=_uniform(rng, (in_dim, fc_dim), in_dim, dtype),
        fc_b=_zeros((fc_dim,), dtype),
        cls_W=_uniform(rng, (fc_dim, 2), fc_dim, dtype),
        cls_b=_zeros((2,), dtype),
    )


# ---------------------------------------------------------------------------
# forward passes


@dataclass(eq=False)
class BagOutput:
    class_probs: Tensor  # (2,)
    attentions: Tensor  # (n,)
    betas: np.ndarray  # (n,), detached
    pooled: Tensor  # (Q',)
    features: Tensor | None = None  # (n, Q) extractor outputs, when computed here
    scale_sizes: tuple[int, ...] = field(default=())

    def attention_by_scale(self) -> list[np.ndarray]:
        """Split the attention vector into per-scale slices (multi-scale bags)."""
        sizes = self.scale_sizes or (self.attentions.shape[0],)
        bounds = np.cumsum((0,) + tuple(sizes))
        a = self.attentions.data
        return [a[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def _as_patch_batch(patches, params: FeatureExtractorParams) -> tuple[Tensor, bool]:
    if isinstance(patches, (list, tuple)):
        if not patches:
            raise ValueError("empty list of patches")
        patches = np.stack([p.data if isinstance(p, Tensor) else np.asarray(p) for p in patches])
    x = T.as_tensor(patches)
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"patches must be (c, p, p) or (n, c, p, p), got {x.shape}")
    c, h, w = x.shape[-3:]
    if (h, w) != (params.patch_size, params.patch_size) or c != params.channels:
        raise ShapeError(
            f"patch shape {x.shape[-3:]} does not match extractor input "
            f"({params.channels}, {params.patch_size}, {params.patch_size})")
    wdtype = params.weights[0].dtype
    if x.dtype != wdtype and not x.requires_grad:
        x = Tensor(x.data.astype(wdtype))
    return x, single


def extract_features(patches, params: FeatureExtractorParams) -> Tensor:
    """Map one patch (c, p, p) to a Q-vector, or a batch (n, c, p, p) to (n, Q)."""
    x, single = _as_patch_batch(patches, params)
    h = x if not single else T.reshape(x, (1,) + x.shape)
    if params.input_center:
        h = T.add_scalar(h, -params.input_center)
    for w, b in zip(params.weights, params.biases):
        h = T.maxpool2x2(T.relu(T.conv2d(h, w, b)))
    h = T.reshape(h, (h.shape[0], -1))
    return T.reshape(h, (h.shape[1],)) if single else h


def _stack_instances(features) -> Tensor:
    if isinstance(features, Tensor):
        if features.ndim != 2:
            raise ShapeError(f"instance features must be (n, d), got {features.shape}")
        if features.shape[0] == 0:
            raise ValueError("empty bag")
        return features
    features = list(features)
    if not features:
        raise ValueError("empty bag")
    return T.concat([T.reshape(T.as_tensor(f), (1, -1)) for f in features], axis=0)


def attention_scores(features_prime, V: Tensor, w: Tensor) -> Tensor:
    """Per-instance scores w^T tanh(V h'_i), shape (n,)."""
    hp = _stack_instances(features_prime)
    hidden = T.tanh(T.matmul(hp, T.transpose(V)))
    s = T.matmul(hidden, T.reshape(w, (w.shape[0], 1)))
    return T.reshape(s, (hp.shape[0],))


def attention_weights(features_prime, V: Tensor, w: Tensor) -> Tensor:
    return T.softmax(attention_scores(features_prime, V, w))


def attention_pool(features_prime, attentions: Tensor) -> Tensor:
    """z = sum_i a_i h'_i."""
    hp = _stack_instances(features_prime)
    a = T.as_tensor(attentions, dtype=hp.dtype)
    if a.shape != (hp.shape[0],):
        raise ValueError(f"{a.shape[0] if a.ndim else 0} attentions for {hp.shape[0]} instances")
    z = T.matmul(T.reshape(a, (1, hp.shape[0])), hp)
    return T.reshape(z, (hp.shape[1],))


def beta_weights(attentions) -> np.ndarray:
    """max_j a_j - a_i for every instance; the argmax instance(s) get exactly 0."""
    a = np.asarray(attentions.data if isinstance(attentions, Tensor) else attentions)
    return a.max() - a


def bag_head(features: Tensor, theta_y: BagPredictorParams) -> BagOutput:
    """Apply the attention-MIL head to extractor outputs (n, Q) of one bag."""
    h = _stack_instances(features)
    if h.shape[1] != theta_y.in_dim:
        raise ShapeError(f"features of dim {h.shape[1]} but head expects {theta_y.in_dim}")
    hp = T.relu(T.linear(h, theta_y.fc_W, theta_y.fc_b))
    a = attention_weights(hp, theta_y.V, theta_y.w)
    z = attention_pool(hp, a)
    logits = T.linear(T.reshape(z, (1, z.shape[0])), theta_y.cls_W, theta_y.cls_b)
    probs = T.softmax(T.reshape(logits, (2,)))
    return BagOutput(class_probs=probs, attentions=a, betas=beta_weights(a), pooled=z, features=h)


def bag_predict(patches, theta_f: FeatureExtractorParams, theta_y: BagPredictorParams) -> BagOutput:
    x, _ = _as_patch_batch(patches, theta_f)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[0] == 0:
        raise ValueError("empty bag")
    out = bag_head(extract_features(x, theta_f), theta_y)
    out.scale_sizes = (x.shape[0],)
    return out


def multiscale_head(features_per_scale: Sequence[Tensor], theta_y_all: BagPredictorParams) -> BagOutput:
    """Shared head over the union of all scales' instances (scale order kept)."""
    feats = [_stack_instances(f) for f in features_per_scale]
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise ShapeError(f"extractor output dimensions differ across scales: {sorted(dims)}")
    out = bag_head(feats[0] if len(feats) == 1 else T.concat(feats, axis=0), theta_y_all)
    out.scale_sizes = tuple(f.shape[0] for f in feats)
    return out


def multiscale_bag_predict(patches_per_scale: Mapping[int, object],
                           extractors: Mapping[int, FeatureExtractorParams],
                           theta_y_all: BagPredictorParams) -> BagOutput:
    scales = sorted(extractors)
    for s in scales:
        if s not in patches_per_scale:
            raise ValueError(f"bag is missing patches for scale {s}")
        if len(patches_per_scale[s]) == 0:
            raise ValueError(f"bag has no instances at scale {s}")
    feats = [extract_features(patches_per_scale[s], extractors[s]) for s in scales]
    return multiscale_head(feats, theta_y_all)


def domain_logits(features: Tensor, theta_d: DomainPredictorParams) -> Tensor:
    return T.linear(T.relu(T.linear(features, theta_d.hid_W, theta_d.hid_b)), theta_d.out_W, theta_d.out_b)


def domain_predict(feature: Tensor, theta_d: DomainPredictorParams) -> Tensor:
    """Domain probabilities for one feature (Q,) or a batch (n, Q)."""
    f = T.as_tensor(feature)
    single = f.ndim == 1
    if single:
        f = T.reshape(f, (1, f.shape[0]))
    if f.shape[1] != theta_d.hid_W.shape[0]:
        raise ShapeError(f"feature dim {f.shape[1]} but domain predictor expects {theta_d.hid_W.shape[0]}")
    p = T.softmax(domain_logits(f, theta_d))
    return T.reshape(p, (theta_d.n_domains,)) if single else p


def patch_predict(patches, theta_f: FeatureExtractorParams, head: PatchClassifierParams) -> Tensor:
    """Class probabilities (n, 2) for each patch of the patch-based baseline."""
    x, single = _as_patch_batch(patches, theta_f)
    if single:
        x = T.reshape(x, (1,) + x.shape)
    h = extract_features(x, theta_f)
    hp = T.relu(T.linear(h, head.fc_W, head.fc_b))
    return T.softmax(T.linear(hp, head.cls_W, head.cls_b))
