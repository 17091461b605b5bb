"""Image ingestion, six-channel encoding and the synthetic shapes dataset."""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
SHAPE_CLASSES = ("circle", "cross", "square", "triangle")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int
    source_id: str
    bbox: tuple[int, int, int, int] | None = None  # (y0, x0, y1, x1), exclusive end


@dataclass
class DatasetManifest:
    root: str | None
    class_names: list[str]
    samples: list[Sample]
    split_seed: int = 0
    train_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[Sample]:
        idx = {"train": self.train_idx, "test": self.test_idx, "all": range(len(self.samples))}[name]
        return [self.samples[i] for i in idx]

    def per_class(self) -> dict[int, list[Sample]]:
        groups: dict[int, list[Sample]] = {k: [] for k in range(self.num_classes)}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    def write_index(self, path) -> None:
        """One ``relative/path<TAB>class_index`` line per sample."""
        if not self.paths:
            raise ValueError("manifest has no file paths; save the images first")
        lines = [f"{p}\t{s.label}\n" for p, s in zip(self.paths, self.samples)]
        Path(path).write_text("".join(lines), encoding="utf-8")


# encoding -------------------------------------------------------------------------


def encode_six_channel(rgb: np.ndarray) -> np.ndarray:
    """``[..., 3, H, W]`` in [0, 1] -> ``[..., 6, H, W]`` as (r, g, b, 1-r, 1-g, 1-b)."""
    rgb = np.asarray(rgb)
    if rgb.ndim < 3 or rgb.shape[-3] != 3:
        raise ValueError(f"expected [..., 3, H, W], got {rgb.shape}")
    if rgb.size and (rgb.min() < 0 or rgb.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    if not np.issubdtype(rgb.dtype, np.floating):
        rgb = rgb.astype(np.float64)
    # snap to the grid on which both v and 1 - v are representable, so the
    # complement is exact in both directions
    step = 2.0 ** (np.finfo(rgb.dtype).nmant + 1)
    rgb = np.round(rgb * step) / step
    return np.concatenate([rgb, 1 - rgb], axis=-3)


def pad_quaternion(x: np.ndarray) -> np.ndarray:
    """Append two zero channels so the channel count (8) is divisible by 4."""
    x = np.asarray(x)
    if x.shape[-3] != 6:
        raise ValueError(f"expected 6 channels, got {x.shape[-3]}")
    zeros = np.zeros(x.shape[:-3] + (2,) + x.shape[-2:], dtype=x.dtype)
    return np.concatenate([x, zeros], axis=-3)


def encode_batch(images, channels: int = 6) -> np.ndarray:
    """Stack ``[3, H, W]`` images into an encoded ``[N, channels, H, W]`` float32 batch."""
    x = encode_six_channel(np.stack(images).astype(np.float32))
    if channels == 8:
        x = pad_quaternion(x)
    elif channels != 6:
        raise ValueError(f"unsupported channel count {channels}")
    return x


# resampling and augmentation ---------------------------------------------------------


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` with half-pixel centres."""
    h, w = img.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (c - lo)

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    top = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    out = top[..., x0] * (1 - fx) + top[..., x1] * fx
    return out.astype(img.dtype, copy=False)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def random_resized_crop(img, rng, size, scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3)):
    h, w = img.shape[-2:]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch, cw = h, w
        top = left = 0
    return resize_bilinear(img[..., top:top + ch, left:left + cw], (size, size))


def augment(sample: Sample, rng, size: int | None = None, flip_p: float = 0.5,
            scale=(0.6, 1.0)) -> Sample:
    """Random resized crop then horizontal flip, on the raw RGB image."""
    size = size or sample.image.shape[-1]
    img = random_resized_crop(sample.image, rng, size, scale)
    if rng.random() < flip_p:
        img = hflip(img)
    return Sample(np.clip(img, 0, 1).astype(np.float32), sample.label, sample.source_id)


def sample_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Per-sample stream, independent of batching or worker scheduling."""
    return np.random.default_rng([seed, index, epoch])


# splitting ----------------------------------------------------------------------------


def stratified_split(labels, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, test = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(len(idx) * test_fraction))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return sorted(train), sorted(test)


# synthetic shapes ----------------------------------------------------------------------


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        a = 0.85 * r
        return (np.abs(dy) <= a) & (np.abs(dx) <= a)
    if kind == "cross":
        t = 0.3 * r
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "triangle":
        # apex up; base at cy + r/2, apex at cy - r
        half_width = (dy + r) / np.sqrt(3)
        return (dy <= 0.5 * r) & (dy >= -r) & (np.abs(dx) <= half_width)
    raise ValueError(kind)


def _texture(rng, size) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.35), rng.uniform(0.3, 0.7)))
    coarse = rng.normal(0, 0.08, (3, 8, 8))
    smooth = resize_bilinear(coarse, (size, size))
    fine = rng.normal(0, 0.03, (3, size, size))
    return base[:, None, None] + smooth + fine


def render_shape(kind: str, rng, size: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    img = _texture(rng, size)
    r = rng.uniform(0.16, 0.3) * size
    cy = rng.uniform(r + 1, size - r - 1)
    cx = rng.uniform(r + 1, size - r - 1)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    mask = _shape_mask(kind, yy, xx, cy, cx, r)
    color = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)))
    img = np.where(mask[None], color[:, None, None], img)
    ys, xs = np.nonzero(mask)
    bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
    return np.clip(img, 0, 1).astype(np.float32), bbox


def synth_shapes(num_per_class: int, image_size: int = 64, seed: int = 0,
                 test_fraction: float = 0.2) -> DatasetManifest:
    """Four-class dataset: one coloured shape per image on a textured background."""
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    samples = []
    for label, kind in enumerate(SHAPE_CLASSES):
        for k in range(num_per_class):
            rng = np.random.default_rng([seed, label, k])
            img, bbox = render_shape(kind, rng, image_size)
            samples.append(Sample(img, label, f"{kind}/{k:05d}", bbox))
    train, test = stratified_split([s.label for s in samples], test_fraction, seed)
    return DatasetManifest(None, list(SHAPE_CLASSES), samples, seed, train, test)


# image folders --------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode PNG/PPM to ``[3, H, W]`` float32 in [0, 1]; grayscale is replicated."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.floor(np.asarray(rgb).transpose(1, 2, 0) * 255 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def resize_center_crop(img: np.ndarray, size: int, resize_ratio: float = 256 / 224) -> np.ndarray:
    big = int(round(size * resize_ratio))
    img = resize_bilinear(img, (big, big))
    off = (big - size) // 2
    return img[:, off:off + size, off:off + size].copy()


def load_image_folder(root, image_size: int = 64, test_fraction: float = 0.2,
                      seed: int = 0) -> DatasetManifest:
    """Folder-per-class dataset; images resized then centre-cropped to ``image_size``."""
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subdirectories")
    samples, paths, warnings = [], [], []
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = 0
        for f in files:
            try:
                img = read_image(f)
            except Exception as exc:  # PIL raises a variety of types
                msg = f"skipped unreadable {f.relative_to(root)}: {exc}"
                log.warning(msg)
                warnings.append(msg)
                continue
            rel = f.relative_to(root).as_posix()
            samples.append(Sample(resize_center_crop(img, image_size), label, rel))
            paths.append(rel)
            loaded += 1
        if loaded == 0:
            raise ValueError(f"{root}: class {name!r} has no readable images")
    train, test = stratified_split([s.label for s in samples], test_fraction, seed)
    return DatasetManifest(str(root), classes, samples, seed, train, test, paths, warnings)


def save_image_folder(manifest: DatasetManifest, root, index_name: str = "index.tsv") -> Path:
    """Write samples as PNGs in a folder-per-class tree plus the index file."""
    root = Path(root)
    paths = []
    for i, s in enumerate(manifest.samples):
        rel = f"{manifest.class_names[s.label]}/{i:05d}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        write_image(root / rel, s.image)
        paths.append(rel)
    manifest.paths = paths
    manifest.root = str(root)
    manifest.write_index(root / index_name)
    return root / index_name


def read_index(path) -> list[tuple[str, int]]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            rel, label = line.split("\t")
            entries.append((rel, int(label)))
    return entries
