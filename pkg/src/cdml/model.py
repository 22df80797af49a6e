"""Model container and the binary checkpoint format.

Layout (all integers little-endian)::

    b"CDML"                     magic
    uint32  version (= 1)
    uint32  tensor count
    repeated:
        uint32  name length, name bytes (utf-8)
        uint32  rank, uint64 * rank extents
        float64 * prod(extents) payload
    uint32  config length, config bytes (utf-8 JSON, sorted keys)

Anything short of the declared sizes, or trailing bytes, is corruption.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .extractor import ConvSpec, ExtractorConfig, ExtractorParams, init_params
from .metric import MetricLayer
from .tensor import Tensor

MAGIC = b"CDML"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Wrong magic or unsupported version."""


class CheckpointCorruptError(ValueError):
    """Truncated or otherwise malformed checkpoint payload."""


@dataclass
class Model:
    extractor: ExtractorParams
    metric: MetricLayer
    info: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, config: ExtractorConfig, seed: int = 0, lam: float = 1e-2) -> "Model":
        return cls(init_params(config, seed), MetricLayer.identity(config.out_dim, lam))

    @property
    def config(self) -> ExtractorConfig:
        return self.extractor.config

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + [self.metric.W]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.extractor.tensors.items()}
        out["metric.W"] = self.metric.W.data
        out["metric.b"] = self.metric.b
        return out

    def copy(self) -> "Model":
        return Model(self.extractor.copy(), self.metric.copy(), json.loads(json.dumps(self.info)))


def config_to_dict(config: ExtractorConfig) -> dict:
    d = asdict(config)
    d["convs"] = [asdict(c) for c in config.convs]
    return d


def config_from_dict(d: dict) -> ExtractorConfig:
    return ExtractorConfig(
        input_shape=tuple(d["input_shape"]),
        windows=tuple(tuple(w) for w in d["windows"]),
        convs=tuple(ConvSpec(**c) for c in d["convs"]),
        hidden=d["hidden"],
        out_dim=d["out_dim"],
        conv_relu=d["conv_relu"],
        tied_branches=d["tied_branches"],
    )


def checkpoint_bytes(model: Model) -> bytes:
    arrays = model.named_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {"extractor": config_to_dict(model.config), "lambda": model.metric.lam, "info": model.info}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointCorruptError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < len(MAGIC) and MAGIC.startswith(buf):
        raise CheckpointCorruptError(f"checkpoint truncated inside the header ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("not a CDML checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"bad tensor name: {exc}") from exc
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"bad config block: {exc}") from exc
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{len(buf) - r.pos} trailing bytes after config block")

    config = config_from_dict(meta["extractor"])
    expected = init_params(config, 0).tensors
    missing = set(expected) - set(arrays)
    if missing or "metric.W" not in arrays:
        raise CheckpointCorruptError(f"checkpoint lacks tensors {sorted(missing | ({'metric.W'} - set(arrays)))}")
    tensors = {}
    for k, ref in expected.items():
        if arrays[k].shape != ref.shape:
            raise CheckpointCorruptError(f"tensor {k} has shape {arrays[k].shape}, expected {ref.shape}")
        tensors[k] = Tensor(arrays[k], requires_grad=True, name=k)
    metric = MetricLayer(Tensor(arrays["metric.W"], requires_grad=True, name="metric.W"), meta["lambda"])
    if "metric.b" in arrays and np.any(arrays["metric.b"] != 0):
        raise CheckpointCorruptError("metric bias must be zero")
    return Model(ExtractorParams(config, tensors), metric, meta.get("info", {}))


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
