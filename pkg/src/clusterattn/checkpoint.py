"""Bit-exact named-array checkpoint files.

Layout (all integers 4-byte little-endian unsigned):

    magic "CFK1" | version | array count |
    per array: name length | name bytes (utf-8) | rank | extents... |
               values as little-endian IEEE-754 single, row-major |
    config blob length | config blob (flat key=value text, utf-8)

Values are stored in single precision, so save/load round-trips are
bit-exact for single-precision models; loading into a double-precision
config upcasts.
"""

from __future__ import annotations

import struct
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError, ConfigError
from .encoder import ClusterModel, ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"CFK1"
VERSION = 1

_U32 = struct.Struct("<I")


def _config_text(config: ModelConfig, meta: dict[str, str] | None = None) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key}={value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> tuple[ModelConfig, dict[str, str]]:
    """Inverse of the config echo; returns the config and any meta.* entries."""
    fields: dict[str, str] = {}
    meta: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line in checkpoint: {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    return config_from_fields(fields), meta


def config_from_fields(fields: dict[str, str]) -> ModelConfig:
    """Build a ModelConfig from flat key=value strings (unknown keys rejected)."""
    kwargs = {}
    converters = {
        "image_size": int, "patch_size": int, "in_channels": int,
        "num_classes": int, "head_dim": int, "iterations": int, "seed": int,
        "precision": str, "activation": str, "similarity": str,
    }
    tuple_keys = {"stage_depths", "stage_dims", "stage_centers", "num_heads"}
    for key, value in fields.items():
        if key in tuple_keys:
            kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
        elif key in converters:
            kwargs[key] = converters[key](value)
        elif key == "logit_scale":
            kwargs[key] = None if value == "None" else float(value)
        elif key == "m_step_residual":
            kwargs[key] = value in ("True", "true", "1")
        else:
            raise ConfigError(f"unknown model config key {key!r}")
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_checkpoint(model: ClusterModel, path, meta: dict[str, str] | None = None):
    """Write every parameter array plus the config echo."""
    blob = _config_text(model.config, meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(model.params)))
        for name, t in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(t.data.ndim))
            for extent in t.shape:
                fh.write(_U32.pack(extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint {self.path} (needed {n} more bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_arrays(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict[str, str]]:
    """Parse a checkpoint file into named float32 arrays plus the echoed config."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate array name {name!r}")
        arrays[name] = values
    blob = r.take(r.u32()).decode("utf-8")
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after config blob")
    config, meta = parse_config_text(blob)
    return arrays, config, meta


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[ClusterModel, dict[str, str]]:
    """Rebuild a model from a checkpoint, validating names and shapes.

    When `expected_config` is given, the echoed config must match it exactly.
    """
    arrays, config, meta = read_arrays(path)
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the expected config")
    dtype = config.dtype
    params: dict[str, Tensor] = {}
    expected = param_shapes(config)
    for name, shape, _ in expected:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter array {name!r}")
        values = arrays[name]
        if values.shape != shape:
            raise CheckpointError(
                f"{path}: array {name!r} has shape {values.shape}, expected {shape}")
        params[name] = Tensor(values.astype(dtype), requires_grad=True)
    extra = set(arrays) - {name for name, _, _ in expected}
    if extra:
        raise CheckpointError(f"{path}: unexpected arrays {sorted(extra)}")
    return ClusterModel(config, params), meta
