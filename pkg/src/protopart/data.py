"""Datasets, PPM images, the ``ppds`` container and offline augmentation.

``ppds`` layout (little-endian)::

    b"PPDS" | u32 version=1 | u32 N | u32 K | u32 H | u32 W
    N x (u32 label | H*W*3 bytes RGB, row-major)
    u32 CRC-32 of every preceding byte
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import InvalidArgumentError, InvalidDatasetError, ParseError

PPDS_MAGIC = b"PPDS"
PPDS_VERSION = 1
_PPDS_HEADER = struct.Struct("<4sIIIII")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple = ()
    split: str = "train"
    n_classes: int = field(default=0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.n_classes:
            self.n_classes = len(self.class_names) or (int(self.labels.max()) + 1 if self.labels.size else 0)
        if not self.class_names:
            self.class_names = tuple(f"class{k}" for k in range(self.n_classes))
        self.class_names = tuple(self.class_names)
        self.validate()

    def validate(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise InvalidDatasetError(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.images) < 1:
            raise InvalidDatasetError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise InvalidDatasetError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InvalidDatasetError(f"labels must lie in [0, {self.n_classes})")
        if len(self.class_names) != self.n_classes:
            raise InvalidDatasetError("class_names must name every class")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise InvalidDatasetError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.class_names, self.split, self.n_classes)


def to_bytes(images):
    """Quantise [0, 1] values to uint8 with round-half-up."""
    images = np.asarray(images, dtype=np.float64)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise InvalidArgumentError("pixel values must lie in [0, 1]")
    return np.floor(images * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------- PPM


def encode_ppm(image):
    data = to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidArgumentError(f"PPM images must be H x W x 3, got {data.shape}")
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(image, path):
    Path(path).write_bytes(encode_ppm(image))


def _ppm_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header", pos)
        tokens.append((raw[start:pos], start))
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    return tokens, pos + 1


def decode_ppm(raw):
    """Decode a binary P6 PPM into an H x W x 3 float array in [0, 1]."""
    tokens, offset = _ppm_tokens(raw, 4)
    if tokens[0][0] != b"P6":
        raise ParseError(f"not a P6 PPM (magic {tokens[0][0]!r})", 0)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as exc:
        raise ParseError("non-numeric PPM header field", tokens[1][1]) from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ParseError(f"unsupported PPM geometry {w}x{h} maxval {maxval}", tokens[1][1])
    expected = h * w * 3
    if len(raw) - offset != expected:
        raise ParseError(f"PPM raster holds {len(raw) - offset} bytes, expected {expected}", offset)
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset).reshape(h, w, 3)
    if data.max(initial=0) > maxval:
        raise ParseError("PPM sample exceeds maxval", offset)
    return data.astype(np.float64) / maxval


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------- ppds


def encode_ppds(dataset):
    data = to_bytes(dataset.images)
    n, h, w, _ = data.shape
    parts = [_PPDS_HEADER.pack(PPDS_MAGIC, PPDS_VERSION, n, dataset.n_classes, h, w)]
    for label, image in zip(dataset.labels, data):
        parts.append(struct.pack("<I", int(label)))
        parts.append(image.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(dataset, path):
    Path(path).write_bytes(encode_ppds(dataset))


def decode_ppds(raw, split="train"):
    if len(raw) < _PPDS_HEADER.size:
        raise ParseError("truncated ppds header", len(raw))
    magic, version, n, k, h, w = _PPDS_HEADER.unpack_from(raw, 0)
    if magic != PPDS_MAGIC:
        raise ParseError(f"bad ppds magic {magic!r}", 0)
    if version != PPDS_VERSION:
        raise ParseError(f"unsupported ppds version {version}", 4)
    if n < 1 or k < 1 or h < 1 or w < 1:
        raise ParseError("ppds header declares an empty dataset", 8)
    record = 4 + h * w * 3
    expected = _PPDS_HEADER.size + n * record + 4
    if len(raw) != expected:
        offset = min(len(raw), expected)
        raise ParseError(f"ppds payload is {len(raw)} bytes, header implies {expected}", offset)
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if crc != zlib.crc32(raw[: expected - 4]):
        raise ParseError("ppds checksum mismatch", expected - 4)
    body = np.frombuffer(raw, dtype=np.uint8, count=n * record, offset=_PPDS_HEADER.size).reshape(n, record)
    labels = body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    if labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise InvalidDatasetError(f"record {bad} has label {labels[bad]} but K={k}")
    images = body[:, 4:].reshape(n, h, w, 3).astype(np.float64) / 255.0
    return Dataset(images, labels, split=split, n_classes=k)


def load_ppm_tree(path, split="train"):
    root = Path(path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InvalidDatasetError(f"{root} has no class subdirectories")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for file in sorted(class_dir.glob("*.ppm")):
            image = read_ppm(file)
            if images and image.shape != images[0].shape:
                raise InvalidDatasetError(f"{file} is {image.shape}, expected {images[0].shape}")
            images.append(image)
            labels.append(label)
    if not images:
        raise InvalidDatasetError(f"{root} contains no .ppm images")
    return Dataset(np.stack(images), labels, tuple(d.name for d in class_dirs), split)


def save_ppm_tree(dataset, path):
    root = Path(path)
    for k, name in enumerate(dataset.class_names):
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        write_ppm(image, root / dataset.class_names[label] / f"{i:06d}.ppm")


def load_dataset(path, format=None, split="train"):
    """Load a ``ppds`` file or a ``ppm-tree`` directory (format inferred if omitted)."""
    path = Path(path)
    if format is None:
        format = "ppm-tree" if path.is_dir() else "ppds"
    if format == "ppds":
        return decode_ppds(path.read_bytes(), split)
    if format == "ppm-tree":
        return load_ppm_tree(path, split)
    raise InvalidArgumentError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------- augmentation

AUGMENT_OPS = ("flip", "rotate", "crop")


def flip_horizontal(image):
    return image[:, ::-1, :].copy()


def rotate(image, degrees):
    """Rotate about the centre; nearest-neighbour sampling, edge pixels extend outward."""
    return ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=0, mode="nearest")


def crop_rescale(image, top, left, fraction=7 / 8):
    """Crop a ``fraction``-sized window at (top, left) and resize it back (nearest)."""
    h, w = image.shape[:2]
    ch, cw = max(1, int(h * fraction)), max(1, int(w * fraction))
    window = image[top : top + ch, left : left + cw]
    rows = np.arange(h) * ch // h
    cols = np.arange(w) * cw // w
    return window[rows][:, cols].copy()


def augment_offline(dataset, ops=AUGMENT_OPS, copies=1, seed=0):
    """Append ``copies`` randomly transformed variants of every image.

    Each variant applies one op drawn uniformly from ``ops``.  The original
    images come first and are never modified.
    """
    if copies < 0:
        raise InvalidArgumentError("copies must be non-negative")
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown or not ops:
        raise InvalidArgumentError(f"unknown augmentation ops {sorted(unknown)}")
    if copies == 0:
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.class_names, dataset.split, dataset.n_classes)
    rng = np.random.default_rng(seed)
    h, w = dataset.images.shape[1:3]
    extra_images, extra_labels = [], []
    for image, label in zip(dataset.images, dataset.labels):
        for _ in range(copies):
            op = ops[rng.integers(len(ops))]
            if op == "flip":
                out = flip_horizontal(image)
            elif op == "rotate":
                out = rotate(image, rng.uniform(-15.0, 15.0))
            else:
                top = rng.integers(h - int(h * 7 / 8) + 1)
                left = rng.integers(w - int(w * 7 / 8) + 1)
                out = crop_rescale(image, top, left)
            extra_images.append(out)
            extra_labels.append(label)
    images = np.concatenate([dataset.images, np.stack(extra_images)])
    labels = np.concatenate([dataset.labels, np.asarray(extra_labels, dtype=np.int64)])
    return Dataset(images, labels, dataset.class_names, dataset.split, dataset.n_classes)

