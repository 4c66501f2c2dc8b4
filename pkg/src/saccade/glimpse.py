"""Images, glimpse actions, the observation mapping, and dataset IO.

Locations are normalized coordinates in [-1, 1]^2 (x = column axis,
y = row axis); the image spans [0, W) x [0, H) in continuous pixel units.
Windows that extend past the image read as black. All resampling is exact
area averaging (see kernels), so mean intensity over the covered region is
conserved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, InputFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_MAGIC = b"SACD"
DATASET_VERSION = 1


@dataclass
class Action:
    """One glimpse decision: where to look and at what scale.

    location is a length-2 float array in [-1, 1]^2 for continuous mode,
    or an integer cell index for discrete (toy-world) mode.
    """
    location: object
    scale_index: int = 0


@dataclass
class GlimpseObservation:
    patch: np.ndarray
    source_action: Action

    @property
    def flat(self) -> np.ndarray:
        return self.patch.ravel()


@dataclass
class LabeledExample:
    image: np.ndarray
    label: int


def location_to_pixel(location, height: int, width: int) -> tuple[float, float]:
    """Map a clamped normalized location to a continuous pixel-space center."""
    x, y = float(location[0]), float(location[1])
    x = min(1.0, max(-1.0, x))
    y = min(1.0, max(-1.0, y))
    return (y + 1.0) / 2.0 * height, (x + 1.0) / 2.0 * width


def extract_glimpse(image: np.ndarray, action: Action, scales, retina: int) -> GlimpseObservation:
    """Crop a square window at the action's location/scale, resampled to retina^2."""
    if not 0 <= action.scale_index < len(scales):
        raise ConfigurationError(
            f"scale index {action.scale_index} outside table of size {len(scales)}")
    h, w = image.shape
    win = float(scales[action.scale_index])
    row, col = location_to_pixel(action.location, h, w)
    patch = kernels.resample_window(image, row - win / 2.0, col - win / 2.0, win, retina)
    return GlimpseObservation(patch=patch, source_action=action)


def low_res_view(image: np.ndarray, side: int) -> np.ndarray:
    """Area-averaged downsample of the whole (square-windowed) image."""
    h, w = image.shape
    if side > min(h, w):
        raise ConfigurationError(f"low-res side {side} exceeds image size {min(h, w)}")
    if h != w:
        raise ConfigurationError("low_res_view expects a square image")
    return kernels.resample_window(image, 0.0, 0.0, float(h), side)


# ---------------------------------------------------------------------------
# translated / scaled digit canvas generation

def place_digit(digit: np.ndarray, canvas: int, scale: float,
                row0: int, col0: int) -> np.ndarray:
    """Rescale a digit by ``scale`` and paste it at integer offset (row0, col0)."""
    side = digit.shape[0]
    new_side = max(1, int(round(side * scale)))
    if new_side > canvas:
        raise ConfigurationError("scaled digit larger than canvas")
    resized = np.clip(kernels.resample_window(digit, 0.0, 0.0, float(side), new_side), 0.0, 1.0)
    out = np.zeros((canvas, canvas))
    out[row0:row0 + new_side, col0:col0 + new_side] = resized
    return out


def generate_translated_scaled_mnist(images: np.ndarray, labels: np.ndarray,
                                     canvas: int, scale_range, rng: np.random.Generator):
    """Yield an endless stream of LabeledExample canvases.

    Classes are drawn uniformly (then a uniform source digit within the
    class), the scale uniformly from scale_range with rejection when the
    scaled digit would not fit, and the position uniformly over all offsets
    that keep the digit fully inside the canvas.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.max() > 1.0:
        images = images / 255.0
    labels = np.asarray(labels, dtype=np.int64)
    by_class = [np.flatnonzero(labels == c) for c in range(labels.max() + 1)]
    if any(len(idx) == 0 for idx in by_class):
        raise ConfigurationError("every class needs at least one source digit")
    lo, hi = float(scale_range[0]), float(scale_range[1])
    side = images.shape[1]
    while True:
        c = int(rng.integers(len(by_class)))
        digit = images[by_class[c][int(rng.integers(len(by_class[c])))]]
        while True:
            scale = float(rng.uniform(lo, hi))
            if int(round(side * scale)) <= canvas:
                break
        new_side = max(1, int(round(side * scale)))
        row0 = int(rng.integers(canvas - new_side + 1))
        col0 = int(rng.integers(canvas - new_side + 1))
        yield LabeledExample(image=place_digit(digit, canvas, scale, row0, col0), label=c)


# ---------------------------------------------------------------------------
# IDX files (big-endian, standard magic numbers)

def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise InputFormatError(f"truncated IDX image file: {path}")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise InputFormatError(f"bad IDX image magic 0x{magic:08x} in {path}")
        data = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    if data.size != n * rows * cols:
        raise InputFormatError(f"truncated IDX image payload: {path}")
    return data.reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise InputFormatError(f"truncated IDX label file: {path}")
        magic, n = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise InputFormatError(f"bad IDX label magic 0x{magic:08x} in {path}")
        data = np.frombuffer(f.read(n), dtype=np.uint8)
    if data.size != n:
        raise InputFormatError(f"truncated IDX label payload: {path}")
    return data.copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def write_fallback_digit_corpus(out_dir, train_fraction: float = 0.85, seed: int = 0) -> None:
    """Write an IDX digit corpus from scikit-learn's bundled 8x8 digits.

    Stand-in for environments without the real 28x28 corpus: each 8x8
    digit is area-upsampled to 28x28. Produces the standard four files
    (train/t10k images and labels).
    """
    from pathlib import Path

    from sklearn.datasets import load_digits

    data = load_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data.target))
    images8 = data.images[order] / 16.0
    labels = data.target[order].astype(np.uint8)
    big = np.empty((len(labels), 28, 28), dtype=np.uint8)
    for i, img in enumerate(images8):
        up = kernels.resample_window(img, 0.0, 0.0, 8.0, 28)
        big[i] = np.clip(up * 255.0, 0, 255).round().astype(np.uint8)
    n_train = int(round(train_fraction * len(labels)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", big[:n_train])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[:n_train])
    write_idx_images(out / "t10k-images-idx3-ubyte", big[n_train:])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[n_train:])


# ---------------------------------------------------------------------------
# flat binary dataset container

def write_dataset(path, examples, canvas: int, num_classes: int) -> None:
    """Write labeled canvases: fixed header then label byte + pixel bytes."""
    examples = list(examples)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHHI", DATASET_MAGIC, DATASET_VERSION,
                            canvas, num_classes, len(examples)))
        for ex in examples:
            if ex.image.shape != (canvas, canvas):
                raise ConfigurationError("example canvas size mismatch")
            f.write(struct.pack("B", ex.label))
            f.write(np.clip(ex.image * 255.0, 0, 255).round().astype(np.uint8).tobytes())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read a dataset container; returns (images in [0,1], labels, num_classes)."""
    with open(path, "rb") as f:
        head = f.read(struct.calcsize("<4sHHHI"))
        if len(head) < struct.calcsize("<4sHHHI"):
            raise InputFormatError(f"truncated dataset header: {path}")
        magic, version, canvas, num_classes, count = struct.unpack("<4sHHHI", head)
        if magic != DATASET_MAGIC:
            raise InputFormatError(f"bad dataset magic {magic!r} in {path}")
        if version != DATASET_VERSION:
            raise InputFormatError(f"unsupported dataset version {version} in {path}")
        per = 1 + canvas * canvas
        raw = np.frombuffer(f.read(count * per), dtype=np.uint8)
    if raw.size != count * per:
        raise InputFormatError(f"truncated dataset payload: {path}")
    raw = raw.reshape(count, per)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(count, canvas, canvas).astype(np.float64) / 255.0
    return images, labels, num_classes
