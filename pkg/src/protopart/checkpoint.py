"""Bit-exact binary checkpoints.

Layout (little-endian)::

    b"PPNX" | u32 version=1
    config:  u32 H_img, W_img, C_img | u32 n_blocks
             n_blocks x (u32 filters, kernel, stride, padding, pool, pool_stride)
             u32 D, H1, W1, K, m | f64 epsilon | u32 n_seeds, n_seeds x u32 seed
    arrays:  (u32 rank, rank x u32 extent, payload) for every backbone weight
             and bias (layer order), the prototypes, the allocation (u32
             payload) and the last layer; all other payloads are f64
    records: u32 count, count x (u32 prototype, class, image, row, col,
             f64 squared_distance, f64 move_distance)
    u32 CRC-32 of every preceding byte
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import CorruptCheckpointError, UnsupportedVersionError
from .model import Backbone, ConvBlock, ModelConfig, ProtoPNetModel
from .projection import ProjectionRecord
from .tensor import Tensor

MAGIC = b"PPNX"
VERSION = 1


class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, *values):
        self.parts.append(struct.pack(f"<{len(values)}I", *(int(v) for v in values)))

    def f64(self, *values):
        self.parts.append(struct.pack(f"<{len(values)}d", *(float(v) for v in values)))

    def array(self, values, dtype="<f8"):
        values = np.ascontiguousarray(values)
        self.u32(values.ndim, *values.shape)
        self.parts.append(values.astype(dtype).tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def _take(self, size):
        if self.pos + size > len(self.raw):
            raise CorruptCheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u32s(self, count):
        return struct.unpack(f"<{count}I", self._take(4 * count))

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def array(self, dtype="<f8"):
        rank = self.u32()
        shape = self.u32s(rank)
        size = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        return np.frombuffer(self._take(size), dtype=dtype).reshape(shape).copy()


def encode_checkpoint(model):
    cfg = model.config
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    w.u32(*cfg.input_shape)
    w.u32(len(cfg.blocks))
    for b in cfg.blocks:
        w.u32(b.filters, b.kernel, b.stride, b.padding, b.pool, b.pool_stride)
    w.u32(cfg.addon_channels, *cfg.prototype_shape, model.n_classes, model.n_prototypes)
    w.f64(cfg.epsilon)
    w.u32(len(model.seed_lineage), *model.seed_lineage)
    for p in model.backbone.parameters():
        w.array(p.values)
    w.array(model.prototypes.values)
    w.array(model.allocation, "<u4")
    w.array(model.last_layer.values)
    w.u32(len(model.projection_records))
    for r in model.projection_records:
        w.u32(r.prototype, r.class_index, r.image_index, r.row, r.col)
        w.f64(r.squared_distance, r.move_distance)
    body = w.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path):
    Path(path).write_bytes(encode_checkpoint(model))


def decode_checkpoint(raw):
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpointError("not a protopart checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    r = _Reader(raw[:-4])
    r.pos = 4
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    input_shape = r.u32s(3)
    n_blocks = r.u32()
    blocks = tuple(ConvBlock(*r.u32s(6)) for _ in range(n_blocks))
    d, h1, w1, k, m = r.u32s(5)
    epsilon = r.f64()
    n_seeds = r.u32()
    seeds = r.u32s(n_seeds)
    params = [Tensor(r.array(), requires_grad=True) for _ in range(2 * (n_blocks + 2))]
    prototypes = r.array()
    allocation = r.array("<u4").astype(np.int64)
    last_layer = r.array()
    records = []
    for _ in range(r.u32()):
        fields = r.u32s(5)
        records.append(ProjectionRecord(*fields, r.f64(), r.f64()))
    if r.pos != len(r.raw):
        raise CorruptCheckpointError(f"{len(r.raw) - r.pos} unexpected trailing bytes")
    if prototypes.shape != (m, h1, w1, d) or last_layer.shape != (k, m) or allocation.shape != (m,):
        raise CorruptCheckpointError("array extents disagree with the config block")

    counts = tuple(int(c) for c in np.bincount(allocation, minlength=k))
    config = ModelConfig(input_shape, blocks, d, (h1, w1), k, counts, epsilon)
    backbone = Backbone(config, params[0::2], params[1::2])
    return ProtoPNetModel(
        config=config,
        backbone=backbone,
        prototypes=Tensor(prototypes, requires_grad=True),
        allocation=allocation,
        last_layer=Tensor(last_layer, requires_grad=True),
        seed_lineage=seeds,
        projection_records=records,
    )


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
