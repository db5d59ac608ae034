"""Synthetic segmentation data, training augmentation and PPM/PGM storage."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .network import STREAM_IDS, RngStream

VOID = 255


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: np.ndarray  # H x W uint8, class ids or VOID

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"image must be HxWx3, got {self.image.shape}")
        if self.label.shape != self.image.shape[:2]:
            raise DataError(f"label {self.label.shape} does not match image {self.image.shape[:2]}")

    def validate(self, num_classes: int) -> None:
        bad = (self.label != VOID) & (self.label >= num_classes)
        if np.any(bad):
            raise DataError(f"label values outside [0, {num_classes}) and != {VOID}")


@dataclass
class DatasetConfig:
    num_images: int = 200
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: Tuple[int, int] = (2, 5)
    pixel_noise_std: float = 0.1
    boundary_label_noise: float = 0.05
    void_border: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2 or self.num_classes > 255:
            raise ConfigError("num_classes must be in [2, 255]")
        if self.num_images < 0 or self.height < 1 or self.width < 1:
            raise ConfigError("image count and size must be positive")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("shapes_per_image must be an ordered non-negative range")
        if self.pixel_noise_std < 0:
            raise ConfigError("pixel_noise_std must be >= 0")
        if not 0.0 <= self.boundary_label_noise < 1.0:
            raise ConfigError("boundary_label_noise must lie in [0, 1)")
        if self.void_border < 0 or 2 * self.void_border >= min(self.height, self.width):
            raise ConfigError("void_border must leave a non-empty interior")


def palette(num_classes: int) -> np.ndarray:
    """Base RGB colour per class: dark grey background, evenly spaced hues otherwise."""
    colors = [(0.15, 0.15, 0.15)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
    return np.asarray(colors, dtype=np.float64)


def _image_rng(seed: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAM_IDS["datagen"], int(index)))
    return np.random.Generator(np.random.PCG64(seq))


def _shape_mask(gen: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    kind = gen.integers(0, 3)
    if kind == 0:  # rectangle
        rh = gen.integers(max(h // 8, 1), max(h // 2, 2))
        rw = gen.integers(max(w // 8, 1), max(w // 2, 2))
        top = gen.integers(0, h - rh + 1)
        left = gen.integers(0, w - rw + 1)
        return (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
    if kind == 1:  # disk
        r = gen.uniform(min(h, w) / 10, min(h, w) / 4)
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # stripe: band of random orientation through a random point
    theta = gen.uniform(0, np.pi)
    half = gen.uniform(1.5, max(min(h, w) / 12, 2.0))
    cy, cx = gen.uniform(0, h), gen.uniform(0, w)
    dist = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
    return np.abs(dist) <= half


def _paint(config: DatasetConfig, index: int):
    gen = _image_rng(config.seed, index)
    h, w, c = config.height, config.width, config.num_classes
    base = palette(c)
    label = np.zeros((h, w), dtype=np.uint8)
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = np.clip(base[0] + gen.uniform(-0.05, 0.05, 3), 0, 1)
    lo, hi = config.shapes_per_image
    for _ in range(int(gen.integers(lo, hi + 1))):
        cls = int(gen.integers(1, c))
        color = np.clip(base[cls] + gen.uniform(-0.08, 0.08, 3), 0, 1)
        mask = _shape_mask(gen, h, w)
        label[mask] = cls
        image[mask] = color
    return image, label, gen


def paint_regions(config: DatasetConfig, index: int) -> Sample:
    """The noise-free image and label map for image ``index``."""
    image, label, _ = _paint(config, index)
    return Sample(image.astype(np.float32), label)


def _boundary(label: np.ndarray) -> np.ndarray:
    edge = np.zeros(label.shape, dtype=bool)
    diff_v = label[1:, :] != label[:-1, :]
    diff_h = label[:, 1:] != label[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    return edge


def generate_one(config: DatasetConfig, index: int) -> Sample:
    image, label, gen = _paint(config, index)
    if config.pixel_noise_std > 0:
        image = np.clip(image + gen.normal(0.0, config.pixel_noise_std, image.shape), 0.0, 1.0)
    if config.boundary_label_noise > 0:
        edge = _boundary(label)
        flip = edge & (gen.random(label.shape) < config.boundary_label_noise)
        label = label.copy()
        label[flip] = gen.integers(0, config.num_classes, int(flip.sum()))
    b = config.void_border
    if b:
        label = label.copy()
        label[:b, :] = VOID
        label[-b:, :] = VOID
        label[:, :b] = VOID
        label[:, -b:] = VOID
    return Sample(image.astype(np.float32), label)


def generate(config: DatasetConfig, first_index: int = 0) -> List[Sample]:
    """Images ``first_index .. first_index + num_images - 1``.

    Each image is seeded from (seed, index) alone, so any subset can be
    regenerated independently and in any order.
    """
    config.validate()
    return [generate_one(config, first_index + i) for i in range(config.num_images)]


# -- augmentation ----------------------------------------------------------


@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.5, 2.0)
    crop: Tuple[int, int] = (48, 48)
    hflip_prob: float = 0.5

    def validate(self) -> None:
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ConfigError("scale_range must be positive and ordered")
        if min(self.crop) < 1:
            raise ConfigError("crop size must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must lie in [0, 1]")


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, wy = axis(out_h, h)
    x0, x1, wx = axis(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(image.dtype)


def _resize_nearest(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = label.shape
    ys = np.minimum(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    xs = np.minimum(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return label[ys][:, xs]


def rescale(sample: Sample, factor: float) -> Sample:
    h, w = sample.label.shape
    out_h = max(int(round(h * factor)), 1)
    out_w = max(int(round(w * factor)), 1)
    if (out_h, out_w) == (h, w):
        return Sample(sample.image.copy(), sample.label.copy())
    return Sample(_resize_bilinear(sample.image, out_h, out_w), _resize_nearest(sample.label, out_h, out_w))


def pad_to(sample: Sample, min_h: int, min_w: int) -> Sample:
    """Pad bottom/right with image 0 and label void up to at least min_h x min_w."""
    h, w = sample.label.shape
    ph, pw = max(min_h - h, 0), max(min_w - w, 0)
    if not ph and not pw:
        return sample
    image = np.pad(sample.image, ((0, ph), (0, pw), (0, 0)), constant_values=0)
    label = np.pad(sample.label, ((0, ph), (0, pw)), constant_values=VOID)
    return Sample(image, label)


def crop(sample: Sample, top: int, left: int, height: int, width: int) -> Sample:
    return Sample(
        sample.image[top : top + height, left : left + width].copy(),
        sample.label[top : top + height, left : left + width].copy(),
    )


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.label[:, ::-1].copy())


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Random scale, then random crop (padding when too small), then random flip."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    lo, hi = cfg.scale_range
    out = rescale(sample, gen.uniform(lo, hi))
    ch, cw = cfg.crop
    out = pad_to(out, ch, cw)
    h, w = out.label.shape
    top = int(gen.integers(0, h - ch + 1))
    left = int(gen.integers(0, w - cw + 1))
    out = crop(out, top, left, ch, cw)
    if gen.random() < cfg.hflip_prob:
        out = hflip(out)
    return out


# -- netpbm files ----------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise DataError("PGM values must lie in [0, 255]")
    h, w = values.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + values.astype(np.uint8).tobytes())


def _read_netpbm(path, magic: bytes) -> Tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} magic, got {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: malformed header")
    pos += 1
    w, h, maxval = fields
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only maxval 255 with positive size is supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).copy(), maxval


def read_ppm(path) -> np.ndarray:
    raw, maxval = _read_netpbm(path, b"P6")
    return (raw.astype(np.float32) / maxval).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    raw, _ = _read_netpbm(path, b"P5")
    return raw


def save_pair(stem, sample: Sample) -> None:
    """Write ``<stem>.ppm`` and ``<stem>_label.pgm``."""
    stem = str(stem)
    write_ppm(stem + ".ppm", sample.image)
    write_pgm(stem + "_label.pgm", sample.label)


def load_pair(stem) -> Sample:
    stem = str(stem)
    return Sample(read_ppm(stem + ".ppm"), read_pgm(stem + "_label.pgm"))


# -- dataset directories ---------------------------------------------------

SPLITS = ("train", "val")


def write_manifest(root, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    (Path(root) / "dataset.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.txt"
    if not path.exists():
        raise DataError(f"{root}: missing dataset.txt manifest")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = int(value.strip())
    for key in ("C", "H", "W", "num_train", "num_val"):
        if key not in out:
            raise FormatError(f"{path}: missing key {key}")
    return out


def write_dataset(root, config: DatasetConfig, num_train: int, num_val: int) -> dict:
    """Generate train and val splits under ``root`` (val indices follow train)."""
    root = Path(root)
    manifest = {
        "C": config.num_classes,
        "H": config.height,
        "W": config.width,
        "num_train": num_train,
        "num_val": num_val,
    }
    config.validate()
    for split, first, count in (("train", 0, num_train), ("val", num_train, num_val)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            save_pair(root / split / f"{i:06d}", generate_one(config, first + i))
    write_manifest(root, manifest)
    return manifest


def load_split(root, split: str, num_classes: Optional[int] = None) -> List[Sample]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    manifest = read_manifest(root)
    c = manifest["C"] if num_classes is None else num_classes
    count = manifest[f"num_{split}"]
    samples = []
    for i in range(count):
        sample = load_pair(Path(root) / split / f"{i:06d}")
        sample.validate(c)
        samples.append(sample)
    return samples


def to_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into images [N,3,H,W] float32 and labels [N,H,W]."""
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    labels = np.stack([s.label for s in samples])
    return np.ascontiguousarray(images, dtype=np.float32), labels
