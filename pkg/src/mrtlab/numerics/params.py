"""Named parameter blocks, their gradients, and the ``MRTL`` binary container."""

from __future__ import annotations

import struct
import zlib
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from ..errors import ContractError, NumericFault, ParseError
from .autograd import Tensor, run_backward

MAGIC = b"MRTL"
FORMAT_VERSION = 1


class ParamStore(Mapping):
    """Ordered ``name -> float64 array`` map with fixed shapes.

    Arrays may be updated in place (the optimizer does this) but a block's
    shape never changes after creation.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray] | None = None):
        self._blocks: dict[str, np.ndarray] = {}
        for name, arr in (blocks or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> np.ndarray:
        if name in self._blocks:
            raise ContractError(f"duplicate parameter block {name!r}")
        arr = np.array(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFault(f"non-finite values in block {name!r}", block=name)
        self._blocks[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self._blocks.values()))

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._blocks.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._blocks.items()})

    def leaves(self) -> dict[str, Tensor]:
        """Fresh graph leaves sharing storage with the blocks."""
        return {k: Tensor(v, name=k, requires_grad=True) for k, v in self._blocks.items()}

    def assign(self, name: str, arr) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self._blocks[name].shape:
            raise ContractError(f"shape change for {name!r}: {self._blocks[name].shape} -> {arr.shape}")
        self._blocks[name][...] = arr

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._blocks.values()]) if self._blocks else np.zeros(0)

    def equals(self, other: "ParamStore") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


class GradBundle(Mapping):
    """Per-block gradients, shape-matched to a :class:`ParamStore`."""

    def __init__(self, params: ParamStore, grads: Mapping[str, np.ndarray] | None = None):
        grads = grads or {}
        self._grads = {}
        for name, p in params.items():
            g = grads.get(name)
            g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} does not match block {name!r} {p.shape}")
            self._grads[name] = g

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._grads.values()]) if self._grads else np.zeros(0)

    def scaled(self, factor: float) -> "GradBundle":
        out = object.__new__(GradBundle)
        out._grads = {k: v * factor for k, v in self._grads.items()}
        return out

    def __add__(self, other: "GradBundle") -> "GradBundle":
        out = object.__new__(GradBundle)
        out._grads = {k: v + other[k] for k, v in self._grads.items()}
        return out

    def check_finite(self) -> None:
        for name, g in self._grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient in block {name!r}", block=name)


def backward(loss: Tensor, params: ParamStore, leaves: Mapping[str, Tensor]) -> GradBundle:
    """Exact reverse-mode gradients of scalar ``loss`` w.r.t. ``leaves``.

    ``leaves`` are the tensors obtained from ``params.leaves()`` for this
    forward pass. Blocks not reachable from ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericFault("loss is not finite")
    for leaf in leaves.values():
        leaf.grad = None
    if loss.requires_grad:
        run_backward(loss)
    bundle = GradBundle(params, {k: t.grad for k, t in leaves.items() if t.grad is not None})
    bundle.check_finite()
    return bundle


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def to_bytes(params: ParamStore) -> bytes:
    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    payload = []
    for name, arr in params.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        head.append(data)
        payload.append(data)
    crc = zlib.crc32(b"".join(payload)) & 0xFFFFFFFF
    return b"".join(head) + struct.pack("<I", crc)


def from_bytes(buf: bytes) -> ParamStore:
    if buf[:4] != MAGIC:
        raise ParseError("not an MRTL container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported MRTL format version {version}")
    off = 12
    blocks, payload = {}, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            data = buf[off : off + nbytes]
            if len(data) != nbytes:
                raise ParseError(f"truncated payload for block {name!r}")
            off += nbytes
            payload.append(data)
            blocks[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        (crc,) = struct.unpack_from("<I", buf, off)
    except struct.error as exc:
        raise ParseError(f"truncated MRTL container: {exc}") from None
    if crc != zlib.crc32(b"".join(payload)) & 0xFFFFFFFF:
        raise ParseError("MRTL checksum mismatch")
    return ParamStore(blocks)


def save_params(params: ParamStore, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_params(path) -> ParamStore:
    return from_bytes(Path(path).read_bytes())
