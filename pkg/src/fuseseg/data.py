"""Dataset handling: PNG I/O, tiling, augmentation, synthetic samples.

Geometric augmentation follows a fixed recipe: random scale in [0.5, 2]
(bilinear for the image, nearest for the mask), then a random crop to the
target size (padding with zeros / background when the scaled extent falls
short), then horizontal flip with probability 1/2.  Image and mask always
receive the identical transform, and every draw comes from an explicit
seed.

Directory layout for on-disk datasets: ``<root>/{train,val,test}/{images,labels}/*.png``
with image/label pairs matched by filename.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError
from .ops import interp_matrix
from .rng import Stream, fold


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) int64 in {0 background, 1 building}

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise ShapeError(
                f"sample image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class ManifestRow:
    split: str
    path: str
    source_id: str
    row: int
    col: int


MANIFEST_HEADER = ["split", "path", "source_id", "row", "col"]


# ---------------------------------------------------------------------------
# PNG I/O


def load_image_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc
    return (arr > 0.5).astype(np.int64)


def save_image_png(image: np.ndarray, path):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"save_image_png wants (3, H, W), got {arr.shape}")
    data = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


def save_mask_png(mask: np.ndarray, path):
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(data, "L").save(path)


def load_sample(image_path, label_path) -> Sample:
    return Sample(load_image_png(image_path), load_mask_png(label_path))


def load_split(root, split: str) -> list[Sample]:
    base = Path(root) / split
    img_dir, lab_dir = base / "images", base / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DataError(f"missing {img_dir} or {lab_dir}")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        lab_path = lab_dir / img_path.name
        if not lab_path.exists():
            raise DataError(f"no label for {img_path}")
        samples.append(load_sample(img_path, lab_path))
    if not samples:
        raise DataError(f"no samples under {base}")
    return samples


# ---------------------------------------------------------------------------
# Tiling


def tile(image: np.ndarray, size: int = 250) -> list[tuple[int, int, np.ndarray]]:
    """Cut an array with trailing (H, W) axes into non-overlapping size x size
    tiles, row-major.  Returns (row, col, tile) triples."""
    h, w = image.shape[-2:]
    if h % size or w % size:
        raise DataError(f"extents {h}x{w} not divisible by tile size {size}")
    out = []
    for r in range(h // size):
        for c in range(w // size):
            window = image[..., r * size:(r + 1) * size, c * size:(c + 1) * size]
            out.append((r, c, np.ascontiguousarray(window)))
    return out


def untile(tiles: list[tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Reassemble the output of :func:`tile` into the source array."""
    if not tiles:
        raise DataError("untile: no tiles")
    size = tiles[0][2].shape[-1]
    rows = 1 + max(t[0] for t in tiles)
    cols = 1 + max(t[1] for t in tiles)
    lead = tiles[0][2].shape[:-2]
    out = np.zeros(lead + (rows * size, cols * size), tiles[0][2].dtype)
    for r, c, t in tiles:
        out[..., r * size:(r + 1) * size, c * size:(c + 1) * size] = t
    return out


# ---------------------------------------------------------------------------
# Geometric augmentation


@dataclass
class Geometry:
    scale: float
    crop_y: int
    crop_x: int
    flip: bool


def _resize_image(image: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = image.shape[-2:]
    rmat = interp_matrix(oh, h, np.float32)
    cmat = interp_matrix(ow, w, np.float32)
    t = np.tensordot(image, rmat, axes=([1], [1]))
    return np.ascontiguousarray(np.tensordot(t, cmat, axes=([1], [1])))


def _resize_mask(mask: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.clip(np.floor((np.arange(oh) + 0.5) * (h / oh)), 0, h - 1).astype(np.int64)
    ci = np.clip(np.floor((np.arange(ow) + 0.5) * (w / ow)), 0, w - 1).astype(np.int64)
    return np.ascontiguousarray(mask[ri][:, ci])


def sample_geometry(stream: Stream, in_hw: tuple[int, int], out_size: int) -> Geometry:
    """Draw scale, crop origin and flip for one sample.  Draw order is fixed:
    scale, crop row, crop col, flip."""
    scale = 0.5 + 1.5 * float(stream.uniform(1)[0])
    sh = max(1, int(round(in_hw[0] * scale)))
    sw = max(1, int(round(in_hw[1] * scale)))
    crop_y = stream.integers(0, max(sh - out_size, 0) + 1)
    crop_x = stream.integers(0, max(sw - out_size, 0) + 1)
    return Geometry(scale, crop_y, crop_x, stream.coin())


def apply_geometry(sample: Sample, geo: Geometry, out_size: int) -> Sample:
    h, w = sample.mask.shape
    sh = max(1, int(round(h * geo.scale)))
    sw = max(1, int(round(w * geo.scale)))
    image = _resize_image(sample.image, sh, sw)
    mask = _resize_mask(sample.mask, sh, sw)
    if sh < out_size or sw < out_size:
        # short extents are padded at the bottom/right with background
        pimg = np.zeros((3, max(sh, out_size), max(sw, out_size)), np.float32)
        pmask = np.zeros((max(sh, out_size), max(sw, out_size)), np.int64)
        pimg[:, :sh, :sw] = image
        pmask[:sh, :sw] = mask
        image, mask = pimg, pmask
    y, x = geo.crop_y, geo.crop_x
    image = image[:, y:y + out_size, x:x + out_size]
    mask = mask[y:y + out_size, x:x + out_size]
    if geo.flip:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask))


def random_crop_scale_flip(sample: Sample, seed: int, out_size: int) -> Sample:
    stream = Stream(seed)
    geo = sample_geometry(stream, sample.mask.shape, out_size)
    return apply_geometry(sample, geo, out_size)


def augment(sample: Sample, seed: int) -> Sample:
    """The 250 -> 125 training augmentation: scale [0.5, 2], crop, flip."""
    if sample.mask.shape != (250, 250):
        raise ShapeError(f"augment expects 250x250 samples, got {sample.mask.shape}")
    return random_crop_scale_flip(sample, seed, 125)


# ---------------------------------------------------------------------------
# Synthetic data


def synth_sample(seed: int, canvas: int = 128) -> Sample:
    """Noise background with 1-5 bright axis-aligned rectangles as the
    foreground class.  Rectangle edges span 10-30% of the canvas, so the
    foreground fraction stays below 5 * 0.3^2 = 0.45."""
    stream = Stream(seed)
    lo, hi = max(canvas // 10, 2), max(int(canvas * 0.3), 3)
    image = (0.05 + 0.4 * stream.uniform(3 * canvas * canvas)).astype(np.float32)
    image = image.reshape(3, canvas, canvas)
    mask = np.zeros((canvas, canvas), np.int64)
    for _ in range(stream.integers(1, 6)):
        rh = stream.integers(lo, hi + 1)
        rw = stream.integers(lo, hi + 1)
        y0 = stream.integers(0, canvas - rh + 1)
        x0 = stream.integers(0, canvas - rw + 1)
        base = 0.65 + 0.3 * stream.uniform(3)
        jitter = 0.05 * (stream.uniform(3 * rh * rw).reshape(3, rh, rw) - 0.5)
        patch = (base[:, None, None] + jitter).astype(np.float32)
        image[:, y0:y0 + rh, x0:x0 + rw] = np.clip(patch, 0.0, 1.0)
        mask[y0:y0 + rh, x0:x0 + rw] = 1
    return Sample(image, mask)


def synth_dataset(n: int, seed: int, canvas: int = 128) -> list[Sample]:
    if n < 1:
        raise DataError(f"synth_dataset: n must be >= 1, got {n}")
    return [synth_sample(fold(seed, "synth", k), canvas) for k in range(n)]


# ---------------------------------------------------------------------------
# Batching


def stack_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


def batcher(samples: list[Sample], batch_size: int, shuffle_seed: int,
            epochs: int | None = 1, transform=None):
    """Yield (images, masks) batches, reshuffled per epoch by seed.

    The last short batch of an epoch is kept.  ``transform(sample, epoch,
    index)`` runs per sample before stacking; ``epochs=None`` streams
    forever.
    """
    if not samples:
        raise DataError("batcher: empty dataset")
    if batch_size < 1:
        raise DataError(f"batcher: batch_size must be >= 1, got {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = Stream(fold(shuffle_seed, "epoch", epoch)).permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            chunk = order[start:start + batch_size]
            batch = [samples[int(i)] for i in chunk]
            if transform is not None:
                batch = [transform(s, epoch, int(i)) for s, i in zip(batch, chunk)]
            yield stack_batch(batch)
        epoch += 1


# ---------------------------------------------------------------------------
# Manifest CSV


def write_manifest(rows: list[ManifestRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.split, r.path, r.source_id, r.row, r.col])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"bad manifest header in {path}: {header}")
        return [ManifestRow(s, p, sid, int(r), int(c)) for s, p, sid, r, c in reader]
