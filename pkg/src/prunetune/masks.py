"""Domain ownership of parameters and the binary masks derived from it.

Every parameter element is in exactly one state: FREE, PERMANENT_FROZEN, or
owned by one domain. Ownership is stored as one small integer per element
(the domain ordinal, or a negative sentinel), so an element cannot have two
owners by construction; :meth:`MaskRegistry.assign_domain` only ever writes
FREE elements, so an owner never changes.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    ContractError,
    FormatError,
    OverlapError,
    ShapeError,
    TruncatedError,
    VersionError,
)

FREE = -1
FROZEN = -2
MASKS_VERSION = 1
_MAGIC = b"PTMASKS\x00"
MULTI_DOMAIN_FROZEN_GROUPS = ("embedding", "layer_norm")


class BinaryMask(Mapping):
    """Per-tensor boolean arrays congruent with a parameter store."""

    def __init__(self, arrays):
        self._arrays = {n: np.asarray(a, dtype=bool) for n, a in arrays.items()}

    @classmethod
    def ones(cls, params):
        return cls({n: np.ones(np.shape(p), dtype=bool) for n, p in params.items()})

    @classmethod
    def zeros(cls, params):
        return cls({n: np.zeros(np.shape(p), dtype=bool) for n, p in params.items()})

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def _combine(self, other, op):
        if list(self) != list(other):
            raise ShapeError("masks cover different tensors")
        return BinaryMask({n: op(a, other[n]) for n, a in self._arrays.items()})

    def __and__(self, other):
        return self._combine(other, np.logical_and)

    def __or__(self, other):
        return self._combine(other, np.logical_or)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a & ~b)

    def __invert__(self):
        return BinaryMask({n: ~a for n, a in self._arrays.items()})

    def __eq__(self, other):
        if not isinstance(other, BinaryMask) or list(self) != list(other):
            return NotImplemented if not isinstance(other, BinaryMask) else False
        return all(np.array_equal(a, other[n]) for n, a in self._arrays.items())

    __hash__ = None

    def popcount(self) -> int:
        return int(sum(a.sum() for a in self._arrays.values()))

    def counts(self) -> dict[str, int]:
        return {n: int(a.sum()) for n, a in self._arrays.items()}

    def apply(self, params):
        """Return a copy of ``params`` with masked-out elements set to +0.0."""
        from .params import ParamStore

        out = ParamStore(tags=getattr(params, "tags", {}))
        for n, p in params.items():
            out[n] = np.where(self._arrays[n], p, 0.0) if n in self._arrays else p.copy()
        return out

    def check_congruent(self, params):
        for n, p in params.items():
            if n not in self._arrays or self._arrays[n].shape != np.shape(p):
                raise ShapeError(f"mask is not congruent with parameter {n!r}")


@dataclass(frozen=True)
class DomainId:
    name: str
    ordinal: int


class MaskRegistry:
    """Ownership arrays plus the table of registered domains."""

    def __init__(self, owners, domains=(), ancestors=None, frozen_tensors=()):
        self.owners: dict[str, np.ndarray] = {
            n: np.asarray(a, dtype=np.int16) for n, a in owners.items()
        }
        self.domains: list[DomainId] = list(domains)
        self.ancestors: dict[str, tuple[str, ...]] = dict(ancestors or {})
        self.frozen_tensors: tuple[str, ...] = tuple(frozen_tensors)

    # -- queries -----------------------------------------------------------

    def domain(self, name) -> DomainId:
        if isinstance(name, DomainId):
            name = name.name
        for d in self.domains:
            if d.name == name:
                return d
        raise ContractError(f"unknown domain {name!r}")

    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def _where(self, predicate) -> BinaryMask:
        return BinaryMask({n: predicate(o) for n, o in self.owners.items()})

    def free_mask(self) -> BinaryMask:
        return self._where(lambda o: o == FREE)

    def frozen_mask(self) -> BinaryMask:
        return self._where(lambda o: o == FROZEN)

    def eligible_mask(self) -> BinaryMask:
        return self._where(lambda o: o != FROZEN)

    def owned_mask(self, name) -> BinaryMask:
        ordinal = self.domain(name).ordinal
        return self._where(lambda o: o == ordinal)

    def lineage(self, name) -> list[str]:
        """``name`` followed by all its transitive ancestors."""
        seen, stack = [], [self.domain(name).name]
        while stack:
            current = stack.pop()
            if current in seen:
                continue
            seen.append(current)
            stack.extend(self.ancestors.get(current, ()))
        return seen

    def counts(self) -> dict[str, int]:
        """Element counts per state: ``free``, ``frozen`` and each domain."""
        out = {"free": 0, "frozen": 0}
        out.update({d.name: 0 for d in self.domains})
        for o in self.owners.values():
            out["free"] += int((o == FREE).sum())
            out["frozen"] += int((o == FROZEN).sum())
            for d in self.domains:
                out[d.name] += int((o == d.ordinal).sum())
        return out

    def tensor_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for n, o in self.owners.items():
            row = {"free": int((o == FREE).sum()), "frozen": int((o == FROZEN).sum())}
            for d in self.domains:
                row[d.name] = int((o == d.ordinal).sum())
            out[n] = row
        return out

    def total(self) -> int:
        return int(sum(o.size for o in self.owners.values()))

    def check_invariants(self):
        """Raise ContractError if the partition or domain table is inconsistent."""
        valid = {FREE, FROZEN} | {d.ordinal for d in self.domains}
        for n, o in self.owners.items():
            bad = set(np.unique(o).tolist()) - valid
            if bad:
                raise ContractError(f"tensor {n!r} holds unknown owner codes {sorted(bad)}")
            if n in self.frozen_tensors and (o != FROZEN).any():
                raise ContractError(f"frozen tensor {n!r} has non-frozen elements")
            if n not in self.frozen_tensors and (o == FROZEN).any():
                raise ContractError(f"tensor {n!r} has stray frozen elements")
        for i, d in enumerate(self.domains):
            if d.ordinal != i:
                raise ContractError("domain ordinals must follow assignment order")
            for a in self.ancestors.get(d.name, ()):
                if self.domain(a).ordinal >= d.ordinal:
                    raise ContractError(f"ancestor {a!r} of {d.name!r} is not earlier")
        counts = self.counts()
        if sum(counts.values()) != self.total():
            raise ContractError("ownership counts do not add up to the total")

    # -- mutation ----------------------------------------------------------

    def assign_domain(self, name: str, keep_mask, ancestors=()) -> "MaskRegistry":
        """Give every FREE element selected by ``keep_mask`` to domain ``name``."""
        if not name:
            raise ContractError("domain name must be non-empty")
        if name in self.domain_names():
            raise ContractError(f"domain {name!r} is already registered")
        ancestors = tuple(a.name if isinstance(a, DomainId) else a for a in ancestors)
        for a in ancestors:
            self.domain(a)
        keep_mask = keep_mask if isinstance(keep_mask, BinaryMask) else BinaryMask(keep_mask)
        for n, o in self.owners.items():
            k = keep_mask.get(n)
            if k is None:
                continue
            if k.shape != o.shape:
                raise ShapeError(f"keep mask shape {k.shape} != {o.shape}", n)
            clash = k & (o != FREE)
            if clash.any():
                index = int(np.flatnonzero(clash.reshape(-1))[0])
                owner = int(o.reshape(-1)[index])
                label = "PERMANENT_FROZEN" if owner == FROZEN else self.domains[owner].name
                raise OverlapError(n, index, label)
        ordinal = len(self.domains)
        for n, o in self.owners.items():
            k = keep_mask.get(n)
            if k is not None:
                self.owners[n] = np.where(k, np.int16(ordinal), o).astype(np.int16)
        self.domains.append(DomainId(name, ordinal))
        self.ancestors[name] = ancestors
        return self

    def copy(self) -> "MaskRegistry":
        return MaskRegistry(
            {n: o.copy() for n, o in self.owners.items()},
            self.domains,
            self.ancestors,
            self.frozen_tensors,
        )

    def __eq__(self, other):
        if not isinstance(other, MaskRegistry):
            return NotImplemented
        return (
            list(self.owners) == list(other.owners)
            and all(np.array_equal(o, other.owners[n]) for n, o in self.owners.items())
            and self.domains == other.domains
            and {k: tuple(v) for k, v in self.ancestors.items()}
            == {k: tuple(v) for k, v in other.ancestors.items()}
            and self.frozen_tensors == other.frozen_tensors
        )

    __hash__ = None


def new_registry(params, multi_domain: bool, frozen_groups=None) -> MaskRegistry:
    """Fresh registry: everything FREE except the permanently frozen tensors.

    In multi-domain mode embeddings and layer norms are frozen; pass
    ``frozen_groups`` to override that choice in either mode.
    """
    tags = getattr(params, "tags", {})
    missing = [n for n in params if n not in tags]
    if missing:
        raise ContractError(f"untagged parameters: {missing}")
    if frozen_groups is None:
        frozen_groups = MULTI_DOMAIN_FROZEN_GROUPS if multi_domain else ()
    frozen = tuple(n for n in params if tags[n].group in frozen_groups)
    owners = {
        n: np.full(np.shape(p), FROZEN if n in frozen else FREE, dtype=np.int16)
        for n, p in params.items()
    }
    return MaskRegistry(owners, frozen_tensors=frozen)


def assign_domain(registry, domain, keep_mask, ancestors=()) -> MaskRegistry:
    return registry.assign_domain(domain, keep_mask, ancestors)


def trainable_mask(registry: MaskRegistry, active_domain=None) -> BinaryMask:
    """FREE elements when ``active_domain`` is None, else that domain's elements."""
    if active_domain is None:
        return registry.free_mask()
    return registry.owned_mask(active_domain)


def inference_mask(registry: MaskRegistry, domain) -> BinaryMask:
    """Elements of ``domain``, its ancestors, and the frozen tensors."""
    ordinals = [registry.domain(n).ordinal for n in registry.lineage(domain)]
    return registry._where(lambda o: np.isin(o, ordinals) | (o == FROZEN))


# -- serialization ----------------------------------------------------------


def _pack(codes: np.ndarray, bits: int) -> bytes:
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    planes = (codes.reshape(-1, 1).astype(np.uint32) >> shifts) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1)).tobytes()


def _unpack(blob: bytes, count: int, bits: int) -> np.ndarray:
    planes = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=count * bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.uint32)
    return (planes.reshape(count, bits).astype(np.uint32) * weights).sum(axis=1)


def save_masks(registry: MaskRegistry, path) -> None:
    """Write the registry as a JSON header plus bit-packed ownership codes."""
    max_code = len(registry.domains) + 1
    bits = max(1, int(max_code).bit_length())
    payloads, entries = [], []
    for n, o in registry.owners.items():
        blob = _pack((o.astype(np.int32) + 2).astype(np.uint32), bits)
        payloads.append(blob)
        entries.append(
            {"name": n, "shape": list(o.shape), "nbytes": len(blob), "crc32": zlib.crc32(blob)}
        )
    header = {
        "format": "prunetune-masks",
        "version": MASKS_VERSION,
        "byteorder": "little",
        "bits": bits,
        "tensors": entries,
        "frozen_tensors": list(registry.frozen_tensors),
        "domains": [
            {"name": d.name, "ordinal": d.ordinal,
             "ancestors": list(registry.ancestors.get(d.name, ()))}
            for d in registry.domains
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_masks(path) -> MaskRegistry:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise FormatError(f"{path}: not a mask file")
    if len(data) < 16:
        raise TruncatedError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise TruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("version") != MASKS_VERSION:
        raise VersionError(f"{path}: unsupported mask format version {header.get('version')}")
    bits = int(header["bits"])
    pos = 16 + hlen
    owners = {}
    for entry in header["tensors"]:
        end = pos + int(entry["nbytes"])
        if end > len(data):
            raise TruncatedError(f"{path}: payload for {entry['name']!r} is truncated")
        blob = data[pos:end]
        if zlib.crc32(blob) != entry["crc32"]:
            raise ChecksumError(f"{path}: checksum mismatch in {entry['name']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        codes = _unpack(blob, count, bits).astype(np.int32) - 2
        owners[entry["name"]] = codes.reshape(shape).astype(np.int16)
        pos = end
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    domains = [DomainId(d["name"], int(d["ordinal"])) for d in header["domains"]]
    ancestors = {d["name"]: tuple(d["ancestors"]) for d in header["domains"]}
    registry = MaskRegistry(owners, domains, ancestors, header["frozen_tensors"])
    registry.check_invariants()
    return registry
