"""
Synthetic super-resolution data
Procedural HR textures, bicubic LR degradation, patch sampling with dihedral
augmentation and mean-RGB subtraction. Optional PNG folder ingestion.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from tensorkit import DTYPE

logger = logging.getLogger(__name__)

TEXTURES = ("gradient", "checker", "blobs", "noise")
BICUBIC_A = -0.5


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    count_train: int = 16
    count_val: int = 4
    image_size: int = 192           # HR side length; fits the full ×4 LR patch
    scale: int = 2
    textures: Tuple[str, ...] = TEXTURES

    def __post_init__(self):
        object.__setattr__(self, "textures", tuple(self.textures))
        if self.count_train < 1 or self.count_val < 0:
            raise ConfigError(f"Dataset counts must be train >= 1, val >= 0 (got {self.count_train}, {self.count_val})")
        if self.scale < 1 or self.image_size % self.scale:
            raise ConfigError(f"image_size {self.image_size} is not divisible by scale {self.scale}")
        unknown = set(self.textures) - set(TEXTURES)
        if not self.textures or unknown:
            raise ConfigError(f"Unknown textures {sorted(unknown)}; choose from {TEXTURES}")


@dataclass(frozen=True)
class ImagePair:
    id: str
    hr: np.ndarray          # (3, H, W) in [0, 1]
    lr: np.ndarray          # (3, H/scale, W/scale)

    @property
    def scale(self) -> int:
        return self.hr.shape[1] // self.lr.shape[1]


@dataclass
class Dataset:
    train: List[ImagePair]
    val: List[ImagePair]
    mean_rgb: np.ndarray
    scale: int
    source: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[List[ImagePair]]:
        yield self.train
        yield self.val

    def manifest(self) -> dict:
        return {
            **self.source,
            "count_train": len(self.train),
            "count_val": len(self.val),
            "scale": self.scale,
            "mean_rgb": [float(v) for v in self.mean_rgb],
        }

    def save_manifest(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))


# ── Degradation ─────────────────────────────────────────────────

def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect(index: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(index)
    period = 2 * (size - 1)
    index = np.mod(index, period)
    return np.where(index >= size, period - index, index)


def downsample_matrix(size: int, scale: int) -> np.ndarray:
    """(size/scale, size) resampling matrix along one axis"""
    out = size // scale
    matrix = np.zeros((out, size))
    centers = (np.arange(out) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(int)
    for tap in range(-1, 3):
        src = base + tap
        weights = cubic_kernel(centers - src)
        np.add.at(matrix, (np.arange(out), _reflect(src, size)), weights)
    return matrix


def bicubic_downsample(hr: np.ndarray, scale: int) -> np.ndarray:
    """Separable bicubic (a = -0.5) over the last two axes, reflect borders"""
    h, w = hr.shape[-2:]
    if scale < 1 or h % scale or w % scale:
        raise ShapeError(f"Image not divisible by scale {scale}", expected=f"multiples of {scale}", actual=(h, w))
    if scale == 1:
        return hr.astype(DTYPE, copy=True)
    rows = downsample_matrix(h, scale)
    cols = downsample_matrix(w, scale)
    out = np.einsum("ij,...jk,lk->...il", rows, hr.astype(np.float64), cols)
    return out.astype(DTYPE)


# ── Procedural textures ─────────────────────────────────────────

def _colors(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(count, 3, 1, 1))


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    if kind == "gradient":
        angle = rng.uniform(0, 2 * math.pi)
        t = xx * math.cos(angle) + yy * math.sin(angle)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        a, b = _colors(rng, 2)
        return a + (b - a) * t
    if kind == "checker":
        period = int(rng.integers(3, 9))
        oy, ox = rng.integers(0, period, size=2)
        iy, ix = np.mgrid[0:size, 0:size]
        mask = (((iy + oy) // period + (ix + ox) // period) % 2).astype(float)
        a, b = _colors(rng, 2)
        return a + (b - a) * mask
    if kind == "blobs":
        image = _colors(rng, 1)[0] * np.ones((3, size, size))
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0, 1, size=2)
            sigma = rng.uniform(0.05, 0.25)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            image = image + (_colors(rng, 1)[0] - 0.5) * bump
        return image
    if kind == "noise":
        cutoff = rng.uniform(0.08, 0.3)
        freq = np.sqrt(np.fft.fftfreq(size)[:, None] ** 2 + np.fft.fftfreq(size)[None, :] ** 2)
        channels = []
        for _ in range(3):
            spectrum = np.fft.fft2(rng.standard_normal((size, size))) * (freq <= cutoff)
            plane = np.real(np.fft.ifft2(spectrum))
            plane = (plane - plane.min()) / max(plane.max() - plane.min(), 1e-9)
            channels.append(plane)
        return np.stack(channels)
    raise ConfigError(f"Unknown texture {kind!r}")


def synthesize_image(spec: DatasetSpec, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, index])
    kind = spec.textures[index % len(spec.textures)]
    image = _texture(kind, spec.image_size, rng)
    # Overlay a second texture at low weight so no image is a pure pattern
    overlay = _texture(spec.textures[int(rng.integers(len(spec.textures)))], spec.image_size, rng)
    weight = rng.uniform(0.0, 0.3)
    return np.clip((1 - weight) * image + weight * overlay, 0.0, 1.0).astype(DTYPE)


def _pair(pair_id: str, hr: np.ndarray, scale: int) -> ImagePair:
    return ImagePair(pair_id, hr, bicubic_downsample(hr, scale))


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic train/val split; unpacks as (train, val)"""
    train = [_pair(f"train-{k:04d}", synthesize_image(spec, k), spec.scale) for k in range(spec.count_train)]
    val = [_pair(f"val-{k:04d}", synthesize_image(spec, spec.count_train + k), spec.scale)
           for k in range(spec.count_val)]
    mean = np.mean([p.hr.mean(axis=(1, 2)) for p in train], axis=0).astype(DTYPE)
    source = {"source": "synthetic", **asdict(spec)}
    source["textures"] = list(spec.textures)
    logger.debug(f"  🧩 Generated {len(train)}+{len(val)} synthetic pairs at x{spec.scale}")
    return Dataset(train, val, mean, spec.scale, source)


# ── PNG ingestion ───────────────────────────────────────────────

def load_image(path: Path) -> np.ndarray:
    """(3, H, W) in [0, 1] from an 8-bit PNG or a float .npy array"""
    path = Path(path)
    if path.suffix == ".npy":
        array = np.load(path).astype(DTYPE)
        if array.ndim != 3 or array.shape[0] != 3:
            raise ShapeError(f"{path.name} is not a (3, H, W) image", expected=(3, "H", "W"), actual=array.shape)
        return array
    from PIL import Image

    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1)).astype(DTYPE)


def load_png_folder(folder: Path, scale: int, prefix: str = "") -> List[ImagePair]:
    """8-bit RGB PNGs, HR cropped to a multiple of `scale`"""
    folder = Path(folder)
    paths = sorted(folder.glob("*.png"))
    if not paths:
        raise ConfigError(f"No PNG files in {folder}")
    pairs = []
    for path in paths:
        image = load_image(path)
        h, w = (image.shape[1] // scale) * scale, (image.shape[2] // scale) * scale
        pairs.append(_pair(prefix + path.stem, np.ascontiguousarray(image[:, :h, :w]), scale))
    return pairs


def dataset_from_folders(train_dir: Path, val_dir: Path, scale: int) -> Dataset:
    train = load_png_folder(train_dir, scale, "train-")
    val = load_png_folder(val_dir, scale, "val-")
    pixels = sum(p.hr.shape[1] * p.hr.shape[2] for p in train)
    mean = (sum(p.hr.sum(axis=(1, 2)) for p in train) / pixels).astype(DTYPE)
    return Dataset(train, val, mean, scale, {"source": "png", "train_dir": str(train_dir), "val_dir": str(val_dir)})


# ── Patch sampling ──────────────────────────────────────────────

def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """Element k in 0..7 of D4 over the last two axes: flip-h, flip-v, then transpose"""
    if k & 1:
        x = x[..., :, ::-1]
    if k & 2:
        x = x[..., ::-1, :]
    if k & 4:
        x = np.swapaxes(x, -1, -2)
    return x


def sample_patch_batch(pairs: Sequence[ImagePair], batch: int, lr_patch: int, augment: bool,
                       rng: np.random.Generator,
                       mean_rgb: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Co-located (LR, HR) patches, identically augmented, mean-subtracted"""
    scale = pairs[0].scale
    hr_patch = lr_patch * scale
    lr_batch = np.empty((batch, 3, lr_patch, lr_patch), dtype=DTYPE)
    hr_batch = np.empty((batch, 3, hr_patch, hr_patch), dtype=DTYPE)
    for b in range(batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        lh, lw = pair.lr.shape[1:]
        if lr_patch > lh or lr_patch > lw:
            raise ShapeError("LR patch larger than image", expected=(lh, lw), actual=lr_patch)
        y = int(rng.integers(lh - lr_patch + 1))
        x = int(rng.integers(lw - lr_patch + 1))
        lr = pair.lr[:, y:y + lr_patch, x:x + lr_patch]
        hr = pair.hr[:, y * scale:(y + lr_patch) * scale, x * scale:(x + lr_patch) * scale]
        if augment:
            k = int(rng.integers(8))
            lr, hr = dihedral(lr, k), dihedral(hr, k)
        lr_batch[b] = lr
        hr_batch[b] = hr
    if mean_rgb is not None:
        shift = np.asarray(mean_rgb, dtype=DTYPE).reshape(1, 3, 1, 1)
        lr_batch -= shift
        hr_batch -= shift
    return lr_batch, hr_batch
