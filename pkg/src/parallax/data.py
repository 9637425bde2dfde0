"""Datasets: CIFAR binary batches, synthetic workloads and PPM image folders.

All images are float32 ``[n, 3, H, W]`` in [-1, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from parallax.errors import FormatError, UsageError

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise UsageError(f"images must be [n,3,H,W], got {self.images.shape}")
        if self.labels is not None:
            if self.labels.shape != (len(self.images),):
                raise UsageError("labels must have one entry per image")
            if self.num_classes is not None and len(self.labels) and (
                    self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise UsageError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int, split: str | None = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.images[:n], labels, split or self.split, self.num_classes)


def bytes_to_unit(b: np.ndarray) -> np.ndarray:
    return (b.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def unit_to_bytes(x: np.ndarray) -> np.ndarray:
    """[-1,1] -> {0..255} via round((x + 1) * 127.5), clamped."""
    v = np.floor((np.asarray(x, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------
# CIFAR binary format
# ----------------------------------------------------------------------
def load_cifar_binary(path, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Read one CIFAR binary batch file (cifar100 uses the fine label)."""
    if variant not in CIFAR_RECORD:
        raise UsageError(f"unknown CIFAR variant {variant!r}")
    raw = np.fromfile(path, dtype=np.uint8)
    rec = CIFAR_RECORD[variant]
    if raw.size == 0 or raw.size % rec:
        raise FormatError(f"{path}: size {raw.size} bytes is not a positive multiple of the {rec}-byte {variant} record")
    raw = raw.reshape(-1, rec)
    labels = raw[:, rec - CIFAR_PIXELS - 1].astype(np.int64)
    images = bytes_to_unit(raw[:, rec - CIFAR_PIXELS :]).reshape(-1, 3, 32, 32)
    return Dataset(images, labels, split, CIFAR_CLASSES[variant])


def load_cifar_dir(root, variant: str = "cifar10") -> tuple[Dataset, Dataset]:
    """Load the standard train/test batch files from an extracted CIFAR binary directory."""
    root = Path(root)
    if variant == "cifar10":
        train_files = sorted(root.glob("data_batch_*.bin"))
        test_files = [root / "test_batch.bin"]
    else:
        train_files = [root / "train.bin"]
        test_files = [root / "test.bin"]
    missing = [str(f) for f in train_files + test_files if not f.exists()]
    if not train_files or missing:
        raise FileNotFoundError(f"CIFAR binaries not found under {root}: {missing or 'no training batches'}")
    return (_concat([load_cifar_binary(f, variant, "train") for f in train_files]),
            _concat([load_cifar_binary(f, variant, "test") for f in test_files]))


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].split, parts[0].num_classes)


def write_cifar_binary(path, dataset: Dataset, variant: str = "cifar10") -> None:
    """Inverse of :func:`load_cifar_binary` (cifar100 writes the fine label twice)."""
    n = len(dataset)
    pixels = unit_to_bytes(dataset.images).reshape(n, CIFAR_PIXELS)
    labels = dataset.labels.astype(np.uint8).reshape(n, 1)
    head = labels if variant == "cifar10" else np.hstack([labels, labels])
    np.hstack([head, pixels]).tofile(path)


# ----------------------------------------------------------------------
# synthetic workloads
# ----------------------------------------------------------------------
def gen_provocation_set(n: int = 2048, seed: int = 0, num_classes: int = 10) -> Dataset:
    """High-contrast noise images with random labels.

    Pixels are uniform on [-1, 1], scaled by 3 and clamped, so most are
    saturated; the labels carry no signal.  Fitting it forces large logits,
    which is the divergence workload for comparing block variants.
    """
    if n < 64:
        raise UsageError(f"provocation set needs n >= 64, got {n}")
    rng = np.random.default_rng(seed)
    images = np.clip(rng.uniform(-1.0, 1.0, (n, 3, 32, 32)) * 3.0, -1.0, 1.0).astype(np.float32)
    labels = rng.integers(0, num_classes, n)
    return Dataset(images, labels, "train", num_classes)


def _squares(n: int, rng: np.random.Generator, dominant: int) -> np.ndarray:
    images = np.zeros((n, 3, 32, 32), dtype=np.float32)
    for i in range(n):
        size = int(rng.integers(8, 21))
        top = int(rng.integers(0, 33 - size))
        left = int(rng.integers(0, 33 - size))
        color = rng.uniform(-0.8, -0.2, 3)
        color[dominant] = rng.uniform(0.6, 1.0)
        images[i, :, top : top + size, left : left + size] = color[:, None, None]
    noise = rng.normal(0.0, 0.02, images.shape)
    return np.clip(images + noise, -1.0, 1.0).astype(np.float32)


def gen_toy_domains(n: int = 256, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Two unpaired 32x32 domains: red-dominant squares (A) and green-dominant squares (B) on gray."""
    if n < 16:
        raise UsageError(f"toy domains need n >= 16, got {n}")
    seq_a, seq_b = np.random.SeedSequence(seed).spawn(2)
    a = _squares(n, np.random.default_rng(seq_a), dominant=0)
    b = _squares(n, np.random.default_rng(seq_b), dominant=1)
    return Dataset(a, None, "A"), Dataset(b, None, "B")


# ----------------------------------------------------------------------
# PPM (P6, maxval 255)
# ----------------------------------------------------------------------
def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3,H,W] image in [-1,1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"expected [3,H,W], got {image.shape}")
    _, h, w = image.shape
    pixels = unit_to_bytes(image).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos) if len(data) - pos >= w * h * 3 else None
    if body is None:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data) - pos}")
    return bytes_to_unit(body.reshape(h, w, 3).transpose(2, 0, 1))


def load_ppm_dir(path, split: str = "train") -> Dataset:
    files = sorted(f for f in os.listdir(path) if f.lower().endswith(".ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm files in {path}")
    return Dataset(np.stack([read_ppm(os.path.join(path, f)) for f in files]), None, split)


def save_ppm_dir(path, images: np.ndarray, prefix: str = "") -> list[str]:
    os.makedirs(path, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = os.path.join(path, f"{prefix}{i:05d}.ppm")
        write_ppm(name, img)
        names.append(name)
    return names
