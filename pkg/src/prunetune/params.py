"""Parameter storage, group tags, and the tensor checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, TruncatedError, VersionError

CHECKPOINT_VERSION = 1
_MAGIC = b"PTCKPT\x00\x00"

GROUPS = ("embedding", "layer_norm", "attention", "ffn", "output_projection", "adapter")


@dataclass(frozen=True)
class ParamTag:
    """Architectural role of one parameter tensor.

    ``layer`` is the block index on ``side`` ("encoder", "decoder" or
    "shared"); final layer norms use ``layer == num_layers``.
    """

    group: str
    layer: int = -1
    side: str = "shared"

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ContractError(f"unknown parameter group {self.group!r}")


class ParamStore(dict):
    """Ordered name -> float64 array mapping that also carries tags."""

    def __init__(self, *args, tags=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.tags: dict[str, ParamTag] = dict(tags or {})

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: np.array(v, dtype=np.float64, copy=True) for k, v in self.items()},
            tags=self.tags,
        )

    def add(self, name, value, tag: ParamTag):
        if name in self:
            raise ContractError(f"parameter {name!r} already exists")
        self[name] = np.asarray(value, dtype=np.float64)
        self.tags[name] = tag

    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def names_in(self, *groups) -> list[str]:
        return [n for n in self if self.tags[n].group in groups]

    def check_tags(self):
        """Raise unless every entry carries exactly one tag."""
        untagged = [n for n in self if n not in self.tags]
        stale = [n for n in self.tags if n not in self]
        if untagged or stale:
            raise ContractError(f"untagged parameters {untagged}, stale tags {stale}")

    def digest(self) -> dict[str, str]:
        """Per-tensor SHA-256 of the raw bytes (freeze checks)."""
        return {
            n: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
            for n, v in self.items()
        }

    def equals(self, other) -> bool:
        """Bit-exact equality of names, shapes and contents."""
        return list(self) == list(other) and all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes()
            for n in self
        )


def zeros_like(params) -> ParamStore:
    return ParamStore(
        {n: np.zeros_like(v, dtype=np.float64) for n, v in params.items()},
        tags=getattr(params, "tags", {}),
    )


def save_checkpoint(path, tensors) -> None:
    """Write tensors as a JSON header plus little-endian float64 payloads."""
    names = list(tensors)
    header = {
        "format": "prunetune-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dtype": "float64-le",
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise TruncatedError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("dtype") != "float64-le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')}")
    out = ParamStore()
    pos = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise TruncatedError(f"{path}: payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_model(path, config, params: ParamStore) -> None:
    """Checkpoint plus a ``.json`` sidecar holding the config and tags."""
    path = Path(path)
    save_checkpoint(path, params)
    sidecar = {
        "config": asdict(config),
        "tags": {n: asdict(t) for n, t in params.tags.items()},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(ModelConfig, ParamStore)``."""
    from .model import ModelConfig

    path = Path(path)
    params = load_checkpoint(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    params.tags = {n: ParamTag(**t) for n, t in sidecar["tags"].items()}
    params.check_tags()
    return ModelConfig(**sidecar["config"]), params
