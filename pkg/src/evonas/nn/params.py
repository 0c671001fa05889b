"""Flat parameter store with named slots, gradient and momentum buffers."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import CorruptFileError, UsageError, VersionMismatchError
from .tensor import DTYPE, Tensor

MAGIC = b"EVPSTORE"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SlotSpec:
    name: str
    shape: tuple[int, ...]
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


class ParamStore:
    """Named parameter tensors laid out back to back in one float32 vector.

    ``data``, ``grad`` and ``momentum`` are flat arrays of equal length; the
    tensors handed out by :meth:`tensor` are views, so gradient accumulation
    and optimizer updates act on the shared storage directly.
    """

    def __init__(self, specs: Iterable[tuple[str, Sequence[int]]]):
        self.slots: list[SlotSpec] = []
        self._index: dict[str, int] = {}
        offset = 0
        for name, shape in specs:
            if name in self._index:
                raise UsageError(f"duplicate slot name {name!r}")
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape)) if shape else 1
            self._index[name] = len(self.slots)
            self.slots.append(SlotSpec(name, shape, offset, offset + size))
            offset += size
        self.total = offset
        self.data = np.zeros(offset, dtype=DTYPE)
        self.grad = np.zeros(offset, dtype=DTYPE)
        self.momentum = np.zeros(offset, dtype=DTYPE)
        self.touched = np.zeros(len(self.slots), dtype=bool)
        self._tensors: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.slots)

    def spec(self, name: str) -> SlotSpec:
        return self.slots[self._index[name]]

    def view(self, name: str, which: str = "data") -> np.ndarray:
        s = self.spec(name)
        return getattr(self, which)[s.start:s.stop].reshape(s.shape)

    def tensor(self, name: str) -> Tensor:
        t = self._tensors.get(name)
        if t is None:
            i = self._index[name]
            t = Tensor(self.view(name), requires_grad=True, grad=self.view(name, "grad"), name=name)

            def reached(i=i):
                self.touched[i] = True

            t._on_reached = reached
            self._tensors[name] = t
        return t

    def range_mask(self, names: Iterable[str]) -> np.ndarray:
        """Flat boolean mask covering the listed slots."""
        m = np.zeros(self.total, dtype=bool)
        for n in names:
            s = self.spec(n)
            m[s.start:s.stop] = True
        return m

    def touched_mask(self) -> np.ndarray:
        sizes = np.fromiter((s.size for s in self.slots), dtype=np.int64, count=len(self.slots))
        return np.repeat(self.touched, sizes)

    def zero_grad(self) -> None:
        self.grad[:] = 0
        self.touched[:] = False

    # -------------------------------------------------------------- io

    def header(self) -> dict:
        return {
            "format": "paramstore",
            "version": FORMAT_VERSION,
            "dtype": "<f4",
            "total": self.total,
            "slots": [{"name": s.name, "shape": list(s.shape), "offset": s.start} for s in self.slots],
        }

    def to_bytes(self, meta: dict | None = None) -> bytes:
        payload = self.data.astype("<f4").tobytes() + self.momentum.astype("<f4").tobytes()
        header = self.header()
        header["arrays"] = ["data", "momentum"]
        if meta:
            header["meta"] = meta
        return write_container(MAGIC, header, payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamStore", dict]:
        header, payload = read_container(blob, MAGIC)
        if header.get("format") != "paramstore":
            raise CorruptFileError("not a parameter store")
        store = cls((s["name"], s["shape"]) for s in header["slots"])
        if store.total != header["total"] or any(
            s.start != h["offset"] for s, h in zip(store.slots, header["slots"])
        ):
            raise CorruptFileError("slot offsets inconsistent with shapes")
        n = store.total * 4
        if len(payload) != 2 * n:
            raise CorruptFileError(f"payload has {len(payload)} bytes, expected {2 * n}")
        store.data[:] = np.frombuffer(payload[:n], dtype="<f4")
        store.momentum[:] = np.frombuffer(payload[n:], dtype="<f4")
        return store, header.get("meta", {})

    def copy_from(self, other: "ParamStore") -> None:
        if [(s.name, s.shape) for s in self.slots] != [(s.name, s.shape) for s in other.slots]:
            raise UsageError("parameter stores have different layouts")
        self.data[:] = other.data
        self.momentum[:] = other.momentum


def read_container(blob: bytes, magic: bytes) -> tuple[dict, bytes]:
    """Parse ``magic | u64 header length | JSON header | payload`` and verify it."""
    if len(blob) < len(magic) + 8 or blob[: len(magic)] != magic:
        raise CorruptFileError("bad magic or truncated header")
    (hlen,) = struct.unpack("<Q", blob[len(magic): len(magic) + 8])
    start = len(magic) + 8
    if len(blob) < start + hlen:
        raise CorruptFileError("truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {header.get('version')}, expected {FORMAT_VERSION}")
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptFileError("payload checksum mismatch (truncated or modified file)")
    return header, payload


def write_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    header = dict(header)
    header["version"] = FORMAT_VERSION
    header["sha256"] = hashlib.sha256(payload).hexdigest()
    hb = json.dumps(header, sort_keys=True).encode()
    return magic + struct.pack("<Q", len(hb)) + hb + payload
