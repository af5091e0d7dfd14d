"""Synthetic texture corpus and dataset directory ingestion.

Each category is a distinct procedural texture family (sinusoidal
gratings, value noise, checkered composites) with category-specific
parameters; anomalous test images carry pasted defects with exact
ground-truth masks whose area stays within a 1-10% band of the image.
Pixels are quantized to the 8-bit grid at generation time, so exporting
to PNG and reloading is lossless.

The on-disk layout mirrors the common industrial-inspection structure::

    <category>/train/good/*.png
    <category>/test/good/*.png
    <category>/test/<defect>/*.png
    <category>/ground_truth/<defect>/<stem>_mask.png
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError
from .tensor import bilinear_resize

DEFECT_KINDS = ("blob", "scratch_line", "texture_swap")
_AREA_BAND = (0.01, 0.10)


@dataclass
class CategoryData:
    train: np.ndarray  # [n, 3, S, S] float32 in [0, 1]
    test: np.ndarray  # [m, 3, S, S]
    masks: np.ndarray  # [m, S, S] uint8 in {0, 1}; all-zero row = normal image


@dataclass
class Corpus:
    categories: dict = field(default_factory=dict)  # name -> CategoryData
    image_size: int = 64
    provenance: str = ""

    def names(self):
        return sorted(self.categories)


def _value_noise(rng, size: int, grid: int, octaves: int = 2) -> np.ndarray:
    out = np.zeros((size, size))
    amp = 1.0
    total = 0.0
    g = grid
    for _ in range(octaves):
        coarse = rng.random((g + 1, g + 1))
        out += amp * bilinear_resize(coarse, (size, size))
        total += amp
        amp *= 0.5
        g *= 2
    return out / total


def _texture(rng, family: int, params: dict, size: int) -> np.ndarray:
    """Scalar texture field in [0, 1] for one image."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if family == 0:  # grating
        fx, fy = params["freq"]
        phase = rng.uniform(0, 2 * np.pi)
        v = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
        v = 0.8 * v + 0.2 * _value_noise(rng, size, 4)
    elif family == 1:  # value noise
        v = _value_noise(rng, size, params["grid"], octaves=3)
    else:  # checkered composite
        p = params["period"]
        checker = (((yy // p) + (xx // p)) % 2).astype(np.float64)
        fx, fy = params["freq"]
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
        v = 0.55 * checker + 0.45 * wave
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)


def _colorize(v: np.ndarray, palette) -> np.ndarray:
    lo_c, hi_c = palette
    img = lo_c[:, None, None] + v[None] * (hi_c - lo_c)[:, None, None]
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _category_params(rng, index: int) -> dict:
    family = index % 3
    palette = (
        np.array([0.15, 0.2, 0.25]) + rng.uniform(0, 0.15, 3),
        np.array([0.7, 0.7, 0.65]) + rng.uniform(0, 0.25, 3),
    )
    if family == 0:
        angle = rng.uniform(0, np.pi)
        cycles = rng.uniform(5, 9)
        freq = (cycles * np.cos(angle), cycles * np.sin(angle))
        return {"family": 0, "freq": freq, "palette": palette}
    if family == 1:
        return {"family": 1, "grid": int(rng.integers(3, 6)), "palette": palette}
    cycles = rng.uniform(3, 6)
    angle = rng.uniform(0, np.pi)
    return {
        "family": 2,
        "period": int(rng.integers(6, 12)),
        "freq": (cycles * np.cos(angle), cycles * np.sin(angle)),
        "palette": palette,
    }


def _paste_blob(img, mask, rng, size, other_texture) -> None:
    target = rng.uniform(0.015, 0.06) * size * size
    r1 = np.sqrt(target / np.pi) * rng.uniform(0.7, 1.1)
    r2 = target / (np.pi * r1)
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(0.2, 0.8) * size
    cx = rng.uniform(0.2, 0.8) * size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    yr = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    xr = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    blob = (yr / r1) ** 2 + (xr / r2) ** 2 <= 1.0
    color = rng.uniform(0.0, 1.0, 3)
    img[:, blob] = 0.15 * img[:, blob] + 0.85 * color[:, None]
    mask |= blob


def _paste_scratch(img, mask, rng, size, other_texture) -> None:
    length = rng.uniform(0.4, 0.7) * size
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(0.25, 0.75) * size
    cx = rng.uniform(0.25, 0.75) * size
    thickness = rng.uniform(1.0, 1.8)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    along = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    across = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    line = (np.abs(along) <= length / 2) & (np.abs(across) <= thickness)
    shade = 0.05 if rng.random() < 0.5 else 0.95
    img[:, line] = 0.2 * img[:, line] + 0.8 * shade
    mask |= line


def _paste_texture_swap(img, mask, rng, size, other_texture) -> None:
    side = int(rng.uniform(0.12, 0.25) * size)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    img[:, top : top + side, left : left + side] = other_texture[:, top : top + side, left : left + side]
    mask[top : top + side, left : left + side] = True


_DEFECT_FNS = {"blob": _paste_blob, "scratch_line": _paste_scratch, "texture_swap": _paste_texture_swap}


def generate_corpus(
    num_categories: int = 4,
    train_per_category: int = 60,
    test_per_category: int = 20,
    size: int = 64,
    defect_kinds=DEFECT_KINDS,
    seed: int = 0,
    levels: int = 4,
) -> Corpus:
    """Seed-deterministic synthetic corpus; half of each test set is anomalous."""
    if size % (2**levels):
        raise ConfigurationError(f"size {size} not divisible by 2^{levels}")
    if num_categories < 1 or train_per_category < 1 or test_per_category < 1:
        raise ConfigurationError("corpus dimensions must be positive")
    for kind in defect_kinds:
        if kind not in DEFECT_KINDS:
            raise ConfigurationError(f"unknown defect kind {kind!r}")
    master = np.random.default_rng(seed)
    cat_params = [_category_params(master, i) for i in range(num_categories)]
    corpus = Corpus(image_size=size, provenance=f"synthetic(seed={seed})")
    for ci in range(num_categories):
        params = cat_params[ci]
        rng = np.random.default_rng([seed, 101 + ci])

        def make_image(local_rng, p=params):
            v = _texture(local_rng, p["family"], p, size)
            return _quantize(_colorize(v, p["palette"]))

        train = np.stack([make_image(rng) for _ in range(train_per_category)])
        n_anom = test_per_category // 2
        test = []
        masks = []
        for ti in range(test_per_category):
            img = make_image(rng)
            mask = np.zeros((size, size), dtype=bool)
            if ti < n_anom:
                kind = defect_kinds[ti % len(defect_kinds)]
                other = cat_params[(ci + 1) % num_categories]
                other_tex = _colorize(_texture(rng, other["family"], other, size), other["palette"])
                work = img.astype(np.float64)
                for _ in range(8):  # resample until the area lands in the band
                    trial_img = work.copy()
                    trial_mask = np.zeros((size, size), dtype=bool)
                    _DEFECT_FNS[kind](trial_img, trial_mask, rng, size, other_tex)
                    frac = trial_mask.mean()
                    if _AREA_BAND[0] <= frac <= _AREA_BAND[1]:
                        break
                img = _quantize(trial_img)
                mask = trial_mask
            test.append(img)
            masks.append(mask)
        corpus.categories[f"cat{ci:02d}"] = CategoryData(
            train=train.astype(np.float32),
            test=np.stack(test).astype(np.float32),
            masks=np.stack(masks).astype(np.uint8),
        )
    return corpus


def stack_labeled(corpus: Corpus):
    """All train images with integer category labels, for pretraining."""
    images = []
    labels = []
    for li, name in enumerate(corpus.names()):
        cat = corpus.categories[name]
        images.append(cat.train)
        labels.extend([li] * cat.train.shape[0])
    return np.concatenate(images, axis=0), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# directory layout IO


def _save_png(img: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def export_mvtec_layout(corpus: Corpus, root) -> None:
    root = Path(root)
    for name in corpus.names():
        cat = corpus.categories[name]
        (root / name / "train" / "good").mkdir(parents=True, exist_ok=True)
        (root / name / "test" / "good").mkdir(parents=True, exist_ok=True)
        (root / name / "test" / "defect").mkdir(parents=True, exist_ok=True)
        (root / name / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(cat.train):
            _save_png(img, root / name / "train" / "good" / f"{i:03d}.png")
        for i, (img, mask) in enumerate(zip(cat.test, cat.masks)):
            if mask.any():
                _save_png(img, root / name / "test" / "defect" / f"{i:03d}.png")
                Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
                    root / name / "ground_truth" / "defect" / f"{i:03d}_mask.png"
                )
            else:
                _save_png(img, root / name / "test" / "good" / f"{i:03d}.png")


def load_mvtec_layout(root, size: int = None) -> Corpus:
    """Ingest a dataset directory in the layout documented above.

    Images are resized bilinearly to ``size`` when given (masks with
    nearest-neighbour, so they stay binary); test images from ``good``
    get all-zero masks; an anomalous test image without its mask file is
    an ingestion error naming the file.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    cat_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not cat_dirs:
        raise IngestionError(f"no category directories under {root}")
    corpus = Corpus(provenance=str(root))
    target = None
    for cat_dir in cat_dirs:
        train_dir = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_dir.is_dir() or not test_dir.is_dir():
            raise IngestionError(f"{cat_dir} lacks train/good or test directories")
        train = []
        for p in sorted(train_dir.glob("*.png")):
            img = _load_png(p)
            if size is not None and img.shape[1:] != (size, size):
                img = np.stack([bilinear_resize(c, (size, size)) for c in img]).astype(np.float32)
            train.append(img)
        if not train:
            raise IngestionError(f"no training images in {train_dir}")
        test = []
        masks = []
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            for p in sorted(defect_dir.glob("*.png")):
                img = _load_png(p)
                if defect_dir.name == "good":
                    mask = np.zeros(img.shape[1:], dtype=np.uint8)
                else:
                    mask_path = cat_dir / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
                    if not mask_path.is_file():
                        raise IngestionError(f"missing ground-truth mask {mask_path}")
                    with Image.open(mask_path) as im:
                        mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
                if size is not None and img.shape[1:] != (size, size):
                    img = np.stack([bilinear_resize(c, (size, size)) for c in img]).astype(np.float32)
                    mask = _nearest_resize(mask, (size, size))
                test.append(img)
                masks.append(mask)
        if not test:
            raise IngestionError(f"no test images in {test_dir}")
        shapes = {im.shape for im in train} | {im.shape for im in test}
        if len(shapes) != 1:
            raise IngestionError(f"inconsistent image sizes in {cat_dir}: {sorted(shapes)}")
        corpus.categories[cat_dir.name] = CategoryData(
            train=np.stack(train).astype(np.float32),
            test=np.stack(test).astype(np.float32),
            masks=np.stack(masks).astype(np.uint8),
        )
        target = train[0].shape[1]
    corpus.image_size = int(target if size is None else size)
    return corpus


def _nearest_resize(mask: np.ndarray, out_hw) -> np.ndarray:
    h, w = mask.shape
    oh, ow = out_hw
    ys = np.minimum((np.floor((np.arange(oh) + 0.5) * h / oh)).astype(np.int64), h - 1)
    xs = np.minimum((np.floor((np.arange(ow) + 0.5) * w / ow)).astype(np.int64), w - 1)
    return mask[ys][:, xs]
