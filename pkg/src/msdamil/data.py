"""Synthetic multi-scale slide corpora, bag construction and patch-directory I/O.

A synthetic slide is a grid of tissue regions.  Every region is rendered once
at a base resolution of ``patch_size * 2**(S-1)`` (at least ``2 * patch_size``)
and cut into co-registered patches: scale 1 is the central ``patch_size``
crop, scale ``s`` is the central ``patch_size * 2**(s-1)`` crop box-averaged
down to ``patch_size``.

Class signal comes in two kinds:

* fine: a period-2 stripe/checker modulation; it is zero-mean over every
  aligned 2x2 block, so it vanishes completely at scale 2 and above;
* coarse: dark nuclei clusters placed in the ring outside the central crop,
  so they are invisible at scale 1.

Stain (domain) variation is a per-slide channel gain and bias.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

POSITIVE, NEGATIVE = "positive", "negative"
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("slide_id", "class_label", "scale", "region_id", "relative_path", "row", "col", "signal")

# H&E-like colour ramp: light pink background to dark purple nuclei
_LIGHT = np.array([0.92, 0.70, 0.82], dtype=np.float64)
_DARK = np.array([0.35, 0.15, 0.50], dtype=np.float64)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_slides: int = 40  # per class
    scales: int = 2
    patch_size: int = 32
    regions_per_slide: int = 200
    bag_size: int = 20
    max_bags: int = 10
    tumor_rate: float = 0.2
    shift: float = 0.0
    scale_split: bool = False
    confound: float = 0.0
    signal_strength: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_slides", "scales", "patch_size", "regions_per_slide", "bag_size", "max_bags"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patch_size % 4:
            raise ConfigError(f"patch_size must be a multiple of 4, got {self.patch_size}")
        if not 0 < self.tumor_rate < 1:
            raise ConfigError(f"tumor_rate must lie in (0, 1), got {self.tumor_rate}")
        if self.shift < 0:
            raise ConfigError(f"shift must be >= 0, got {self.shift}")
        if not 0 <= self.confound <= 1:
            raise ConfigError(f"confound must lie in [0, 1], got {self.confound}")


@dataclass(eq=False)
class Slide:
    """One case: its label, domain and co-registered multi-scale patches.

    ``patches[s]`` is a uint8 array (R, 3, p, p) whose i-th entry is region
    ``region_ids[i]`` at scale ``s``.
    """

    slide_id: str
    label: int  # 1 positive, 0 negative
    domain: int
    region_ids: np.ndarray
    positions: np.ndarray  # (R, 2) grid row/col
    is_signal: np.ndarray  # (R,) bool
    patches: dict[int, np.ndarray]
    signal_scale: str = "none"  # none | fine | coarse | both
    stain: np.ndarray = field(default_factory=lambda: np.array([1, 1, 1, 0, 0, 0], dtype=np.float64))

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def scales(self) -> list[int]:
        return sorted(self.patches)

    @property
    def class_onehot(self) -> np.ndarray:
        return np.array([1 - self.label, self.label], dtype=np.float64)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(self.positions[:, 0].max()) + 1, int(self.positions[:, 1].max()) + 1

    def patch_array(self, scale: int, index=None) -> np.ndarray:
        raw = self.patches[scale] if index is None else self.patches[scale][index]
        return raw.astype(np.float32) / np.float32(255)


@dataclass(eq=False)
class Bag:
    bag_id: str
    slide_id: str
    label: int
    region_ids: np.ndarray  # (n,) shared by every scale
    positions: np.ndarray  # (n, 2)
    is_signal: np.ndarray  # (n,)
    instances: dict[int, np.ndarray]  # scale -> uint8 (n, 3, p, p)

    def __len__(self) -> int:
        return len(self.region_ids)

    @property
    def scales(self) -> list[int]:
        return sorted(self.instances)

    def patches(self, scale: int, dtype=np.float32) -> np.ndarray:
        return self.instances[scale].astype(dtype) / dtype(255)

    def permuted(self, order: np.ndarray) -> "Bag":
        return replace(self, region_ids=self.region_ids[order], positions=self.positions[order],
                       is_signal=self.is_signal[order],
                       instances={s: v[order] for s, v in self.instances.items()})


# ---------------------------------------------------------------------------
# seeding


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys (SeedSequence mixing)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


_TISSUE, _STAIN, _CONFOUND = 1, 2, 3


# ---------------------------------------------------------------------------
# rendering


def _base_size(cfg: CorpusConfig) -> int:
    return cfg.patch_size * 2 ** (max(cfg.scales, 2) - 1)


def _render_regions(rng: np.random.Generator, cfg: CorpusConfig, fine: np.ndarray,
                    coarse: np.ndarray) -> np.ndarray:
    """Intensity maps t in [0, 1] of shape (R, B, B); 0 is light tissue, 1 nuclei."""
    R, B, p = len(fine), _base_size(cfg), cfg.patch_size
    noise = rng.standard_normal((R, B, B))
    t = ndimage.gaussian_filter(noise, sigma=(0, 2.0, 2.0), mode="wrap")
    t = 0.35 + 0.12 * t / (t.std(axis=(1, 2), keepdims=True) + 1e-12)

    # scattered nuclei everywhere so that blobs alone are not a giveaway of tissue
    yy, xx = np.mgrid[0:B, 0:B]
    for r in range(R):
        for _ in range(rng.integers(2, 6)):
            cy, cx = rng.uniform(0, B, size=2)
            rad = rng.uniform(1.0, 2.0)
            t[r] = np.maximum(t[r], 0.75 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2)))

    amp = 0.16 * cfg.signal_strength
    for r in np.flatnonzero(fine):
        kind = rng.integers(3)
        if kind == 0:
            pattern = np.where(yy % 2 == 0, 1.0, -1.0)
        elif kind == 1:
            pattern = np.where(xx % 2 == 0, 1.0, -1.0)
        else:
            pattern = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        t[r] += amp * pattern

    lo, hi = (B - p) // 2, (B + p) // 2  # scale-1 field of view
    olo, ohi = (B - 2 * p) // 2, (B + 2 * p) // 2  # scale-2 field of view
    unit = p / 32  # blob geometry follows the patch size
    for r in np.flatnonzero(coarse):
        for _ in range(rng.integers(3, 6)):
            rad = unit * rng.uniform(3.0, 4.5)
            for _attempt in range(10_000):
                cy, cx = rng.uniform(olo + rad, ohi - rad, size=2)
                gap_y = max(lo - cy, cy - hi, 0)
                gap_x = max(lo - cx, cx - hi, 0)
                if max(gap_y, gap_x) > rad + 1.5 * unit:
                    break
            else:
                raise ConfigError(f"patch_size {p} leaves no room for coarse-scale structure")
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
            t[r] = np.maximum(t[r], min(1.0, 0.95 * cfg.signal_strength) * (blob > 0.3) * blob ** 0.25)
    return np.clip(t, 0.0, 1.0)


def _colorize(t: np.ndarray, stain: np.ndarray) -> np.ndarray:
    """(R, B, B) intensities -> (R, 3, B, B) RGB in [0, 1] after the slide's stain."""
    rgb = _LIGHT[None, :, None, None] + t[:, None] * (_DARK - _LIGHT)[None, :, None, None]
    gain, bias = stain[:3], stain[3:]
    return np.clip(rgb * gain[None, :, None, None] + bias[None, :, None, None], 0.0, 1.0)


def _cut_scales(rgb: np.ndarray, cfg: CorpusConfig) -> dict[int, np.ndarray]:
    B, p = rgb.shape[-1], cfg.patch_size
    out = {}
    for s in range(1, cfg.scales + 1):
        side = p * 2 ** (s - 1)
        lo = (B - side) // 2
        crop = rgb[..., lo:lo + side, lo:lo + side]
        f = 2 ** (s - 1)
        if f > 1:
            R, C = crop.shape[:2]
            crop = crop.reshape(R, C, p, f, p, f).mean(axis=(3, 5))
        out[s] = np.rint(crop * 255).astype(np.uint8)
    return out


def _stain(rng: np.random.Generator, sigma: float) -> np.ndarray:
    gain = rng.uniform(1 - sigma, 1 + sigma, size=3)
    bias = rng.uniform(-sigma, sigma, size=3)
    return np.concatenate([gain, bias])


def _confound_shift(label: int, strength: float) -> np.ndarray:
    """Class-correlated stain tilt: positives redder, negatives bluer."""
    sign = 1.0 if label == 1 else -1.0
    return sign * strength * np.array([0, 0, 0, 0.12, -0.04, -0.12])


def generate_slide(cfg: CorpusConfig, index: int, label: int, signal_scale: str) -> Slide:
    """Render slide number ``index`` of the corpus.

    Tissue, stain and confounding draw from separate streams keyed by
    (seed, index), so changing the stain settings leaves the tissue unchanged.
    """
    R = cfg.regions_per_slide
    tissue_rng = derive_rng(cfg.seed, index, _TISSUE)
    cols = math.ceil(math.sqrt(R))
    positions = np.stack([np.arange(R) // cols, np.arange(R) % cols], axis=1)

    is_signal = np.zeros(R, dtype=bool)
    if label == 1:
        k = int(round(cfg.tumor_rate * R))
        if k == 0:
            raise ConfigError(f"tumor_rate {cfg.tumor_rate} gives no signal regions for {R} regions")
        # tumour as a compact cluster around a random centre
        centre = positions[tissue_rng.integers(R)]
        d = np.abs(positions - centre).sum(axis=1) + tissue_rng.uniform(0, 0.5, size=R)
        is_signal[np.argsort(d, kind="stable")[:k]] = True
    fine = is_signal & (signal_scale in ("fine", "both"))
    coarse = is_signal & (signal_scale in ("coarse", "both"))
    t = _render_regions(tissue_rng, cfg, fine, coarse)

    stain = _stain(derive_rng(cfg.seed, index, _STAIN), cfg.shift)
    if cfg.confound > 0:
        stain = stain + _confound_shift(label, cfg.confound)
    patches = _cut_scales(_colorize(t, stain), cfg)
    return Slide(
        slide_id=f"slide{index:04d}",
        label=label,
        domain=index,
        region_ids=np.arange(R, dtype=np.int64),
        positions=positions,
        is_signal=is_signal,
        patches=patches,
        signal_scale=signal_scale if label == 1 else "none",
        stain=stain,
    )


def generate_synthetic_corpus(cfg: CorpusConfig) -> list[Slide]:
    """``cfg.n_slides`` positive and ``cfg.n_slides`` negative slides.

    Positive slides come first.  In scale-split mode even-numbered positive
    slides carry only fine signal and odd-numbered ones only coarse signal;
    otherwise every signal region carries both.
    """
    cfg.validate()
    slides = []
    for i in range(2 * cfg.n_slides):
        label = 1 if i < cfg.n_slides else 0
        if label == 0:
            kind = "none"
        elif cfg.scale_split:
            kind = "fine" if i % 2 == 0 else "coarse"
        else:
            kind = "both"
        slides.append(generate_slide(cfg, i, label, kind))
    return slides


# ---------------------------------------------------------------------------
# bags


def extract_bags(slide: Slide, bag_size: int, max_bags: int, seed: int) -> list[Bag]:
    """Disjoint random bags of ``bag_size`` regions, at most ``max_bags`` of them.

    The same regions are used at every scale.
    """
    if bag_size <= 0 or max_bags <= 0:
        raise ValueError("bag_size and max_bags must be positive")
    if slide.n_regions < bag_size:
        raise DataError(f"slide {slide.slide_id} has {slide.n_regions} regions, fewer than bag size {bag_size}")
    rng = derive_rng(seed, _slide_key(slide.slide_id))
    order = rng.permutation(slide.n_regions)
    n_bags = min(max_bags, slide.n_regions // bag_size)
    bags = []
    for b in range(n_bags):
        idx = np.sort(order[b * bag_size:(b + 1) * bag_size])
        bags.append(Bag(
            bag_id=f"{slide.slide_id}/bag{b:03d}",
            slide_id=slide.slide_id,
            label=slide.label,
            region_ids=slide.region_ids[idx],
            positions=slide.positions[idx],
            is_signal=slide.is_signal[idx],
            instances={s: slide.patches[s][idx] for s in slide.scales},
        ))
    return bags


def _slide_key(slide_id: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(slide_id.encode("utf-8")[-8:].rjust(8, b"\0"), "little") ^ len(slide_id)


def rotation_augment(patches: Sequence[np.ndarray] | np.ndarray, threshold: int):
    """Append 90/180/270 degree rotations of every patch when fewer than ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    n = len(patches)
    if n >= threshold:
        return patches
    rotated = [np.rot90(p, k, axes=(-2, -1)) for k in (1, 2, 3) for p in patches]
    if isinstance(patches, np.ndarray):
        return np.concatenate([patches, np.ascontiguousarray(np.stack(rotated))])
    return list(patches) + [np.ascontiguousarray(r) for r in rotated]


def augment_slide(slide: Slide, threshold: int) -> Slide:
    """Rotation augmentation applied coherently to every scale of a slide.

    Rotated copies get fresh region ids but keep their grid position and
    signal flag.
    """
    if slide.n_regions >= threshold:
        return slide
    R = slide.n_regions
    base = int(slide.region_ids.max()) + 1
    return replace(
        slide,
        region_ids=np.concatenate([slide.region_ids] + [slide.region_ids + k * base for k in (1, 2, 3)]),
        positions=np.tile(slide.positions, (4, 1)),
        is_signal=np.tile(slide.is_signal, 4),
        patches={s: rotation_augment(v, threshold) for s, v in slide.patches.items()},
    ) if R else slide


# ---------------------------------------------------------------------------
# splits


def _stratified_counts(n: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(math.floor(f * n + 0.5)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def split_dataset(slides: Sequence[Slide], fractions: Sequence[float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> tuple[list[Slide], ...]:
    """Slide-level split stratified by class; deterministic in ``seed``."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    if len(slides) < len(fractions):
        raise DataError(f"{len(slides)} slides cannot fill {len(fractions)} partitions")
    rng = derive_rng(seed, 0x5B117)
    parts: list[list[Slide]] = [[] for _ in fractions]
    for label in (1, 0):
        members = sorted((s for s in slides if s.label == label), key=lambda s: s.slide_id)
        members = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for part, c in zip(parts, _stratified_counts(len(members), fractions)):
            part.extend(members[start:start + c])
            start += c
    return tuple(sorted(p, key=lambda s: s.slide_id) for p in parts)


def kfold_splits(slides: Sequence[Slide], k: int = 5, seed: int = 0) -> list[tuple[list[Slide], list[Slide]]]:
    """Stratified k-fold (train, test) pairs over slides."""
    if len(slides) < k:
        raise DataError(f"{len(slides)} slides cannot fill {k} folds")
    rng = derive_rng(seed, 0xF01D)
    folds: list[list[Slide]] = [[] for _ in range(k)]
    offset = 0
    for label in (1, 0):
        members = sorted((s for s in slides if s.label == label), key=lambda s: s.slide_id)
        for j, i in enumerate(rng.permutation(len(members))):
            folds[(j + offset) % k].append(members[i])
        offset += len(members)
    out = []
    for f in range(k):
        test = sorted(folds[f], key=lambda s: s.slide_id)
        train = sorted((s for g in range(k) if g != f for s in folds[g]), key=lambda s: s.slide_id)
        out.append((train, test))
    return out


# ---------------------------------------------------------------------------
# patch directories


def write_ppm(path: Path | str, rgb: np.ndarray) -> None:
    """Binary P6 pixmap from a (3, h, w) or (h, w, 3) uint8 array."""
    arr = np.asarray(rgb)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    if arr.dtype != np.uint8:
        raise ValueError("PPM writer expects uint8 data")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_image(path: Path | str) -> np.ndarray:
    """8-bit RGB image as a (3, h, w) uint8 array."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1).copy()


def export_corpus(slides: Iterable[Slide], root: Path | str) -> Path:
    """Write every patch as a PPM file plus a tab-separated manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for slide in slides:
        label = POSITIVE if slide.label == 1 else NEGATIVE
        for s in slide.scales:
            d = root / slide.slide_id / f"scale{s}"
            d.mkdir(parents=True, exist_ok=True)
            for i, rid in enumerate(slide.region_ids):
                rel = f"{slide.slide_id}/scale{s}/r{int(rid):05d}.ppm"
                write_ppm(root / rel, slide.patches[s][i])
                r, c = slide.positions[i]
                rows.append((slide.slide_id, label, s, int(rid), rel, int(r), int(c), int(slide.is_signal[i])))
    manifest = root / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    return manifest


class IngestError(DataError):
    pass


def ingest_patch_directory(root: Path | str, manifest: str = MANIFEST_NAME) -> list[Slide]:
    """Load slides from a manifest of per-patch rows.

    Required columns: slide_id, class_label, scale, region_id, relative_path.
    Optional columns row, col, signal supply grid geometry and planted-signal
    flags; without them regions are laid out row-major on a square grid.
    """
    root = Path(root)
    mpath = root / manifest
    if not mpath.is_file():
        raise IngestError(f"manifest not found: {mpath}")
    per_slide: dict[str, dict] = {}
    with open(mpath, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"slide_id", "class_label", "scale", "region_id", "relative_path"} - set(reader.fieldnames or ())
        if missing:
            raise IngestError(f"manifest {mpath} lacks columns {sorted(missing)}")
        for row in reader:
            sid = row["slide_id"]
            label = row["class_label"].strip().lower()
            if label not in (POSITIVE, NEGATIVE, "1", "0"):
                raise IngestError(f"{mpath}: unknown class label {row['class_label']!r} for slide {sid}")
            y = 1 if label in (POSITIVE, "1") else 0
            entry = per_slide.setdefault(sid, {"label": y, "scales": {}, "geom": {}})
            if entry["label"] != y:
                raise IngestError(f"{mpath}: slide {sid} has conflicting class labels")
            rid = int(row["region_id"])
            path = root / row["relative_path"]
            if not path.is_file():
                raise IngestError(f"missing patch file: {path}")
            try:
                img = read_image(path)
            except Exception as exc:  # PIL raises several unrelated types
                raise IngestError(f"unreadable image: {path} ({exc})") from exc
            entry["scales"].setdefault(int(row["scale"]), {})[rid] = img
            if row.get("row") not in (None, ""):
                entry["geom"][rid] = (int(row["row"]), int(row["col"]), bool(int(row.get("signal") or 0)))

    slides = []
    for index, sid in enumerate(sorted(per_slide)):
        entry = per_slide[sid]
        scales = sorted(entry["scales"])
        region_sets = {s: set(entry["scales"][s]) for s in scales}
        all_ids = set().union(*region_sets.values())
        for s in scales:
            lacking = sorted(all_ids - region_sets[s])
            if lacking:
                raise IngestError(f"slide {sid}: region {lacking[0]} present at some scales but not at scale {s}")
        rids = np.array(sorted(all_ids), dtype=np.int64)
        if entry["geom"] and set(entry["geom"]) >= all_ids:
            geom = [entry["geom"][int(r)] for r in rids]
            positions = np.array([(g[0], g[1]) for g in geom], dtype=np.int64)
            is_signal = np.array([g[2] for g in geom], dtype=bool)
        else:
            cols = math.ceil(math.sqrt(len(rids)))
            positions = np.stack([np.arange(len(rids)) // cols, np.arange(len(rids)) % cols], axis=1)
            is_signal = np.zeros(len(rids), dtype=bool)
        patches = {}
        for s in scales:
            imgs = [entry["scales"][s][int(r)] for r in rids]
            shapes = {im.shape for im in imgs}
            if len(shapes) != 1:
                raise IngestError(f"slide {sid} scale {s}: patches have differing sizes {sorted(shapes)}")
            patches[s] = np.stack(imgs)
        slides.append(Slide(slide_id=sid, label=entry["label"], domain=index, region_ids=rids,
                            positions=positions, is_signal=is_signal, patches=patches))
    return slides
