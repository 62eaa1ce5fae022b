"""Flat parameter vectors with a named layout, plus their binary format.

Binary layout (little-endian)::

    b"DVPV" | version u32 | descriptor count u32
    per descriptor: name length u32 | UTF-8 name | rank u32 | dims u64 * rank
    raw float64 values (sum of descriptor sizes)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError, SizeMismatchError

MAGIC = b"DVPV"
VERSION = 1


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self):
        return self.offset + self.size


class ParamVector:
    """Immutable snapshot of model parameters θ.

    ``node`` is the autodiff tensor these values came from, if any. A vector
    returned by :meth:`tracked` owns a fresh leaf node, so losses built from
    :meth:`__getitem__` views can be differentiated with respect to it.
    """

    __slots__ = ("values", "layout", "node", "_index")

    def __init__(self, values, layout, node=None):
        values = np.array(values, dtype=np.float64).reshape(-1)
        values.flags.writeable = False
        layout = tuple(layout)
        offset = 0
        for slot in layout:
            if slot.offset != offset:
                raise ContractError(f"slot {slot.name!r} at offset {slot.offset}, expected {offset}")
            offset = slot.stop
        if offset != values.size:
            raise ContractError(f"layout covers {offset} values but vector has {values.size}")
        names = [s.name for s in layout]
        if len(set(names)) != len(names):
            raise ContractError("duplicate slot names in layout")
        self.values = values
        self.layout = layout
        self.node = node
        self._index = {s.name: s for s in layout}

    @classmethod
    def from_arrays(cls, arrays):
        """Build from an ordered mapping of name -> array."""
        layout, chunks, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Slot(name, tuple(arr.shape), offset))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @classmethod
    def from_tensor(cls, tensor, layout):
        return cls(tensor.data, layout, node=tensor)

    def __len__(self):
        return self.values.size

    @property
    def names(self):
        return [s.name for s in self.layout]

    def slot(self, name):
        return self._index[name]

    def tracked(self):
        """Copy with a fresh leaf node that records gradients."""
        return ParamVector(self.values, self.layout, node=ad.Tensor(self.values.copy(), requires_grad=True))

    def detached(self):
        return ParamVector(self.values, self.layout)

    def tensor(self):
        return self.node if self.node is not None else ad.Tensor(self.values)

    def __getitem__(self, name):
        """View of one named parameter as a (possibly differentiable) tensor."""
        s = self._index[name]
        if self.node is None:
            return ad.Tensor(self.values[s.offset : s.stop].reshape(s.shape))
        return ad.reshape(ad.take(self.node, slice(s.offset, s.stop)), s.shape)

    def array(self, name):
        s = self._index[name]
        return self.values[s.offset : s.stop].reshape(s.shape)

    def arrays(self):
        return {s.name: self.array(s.name) for s in self.layout}

    def replace(self, values):
        return ParamVector(values, self.layout)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.content_hash())

    def __repr__(self):
        return f"ParamVector({len(self)} values, slots={self.names})"

    def content_hash(self):
        """Stable hex digest of layout and exact values."""
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    # serialization

    def to_bytes(self):
        out = [MAGIC, struct.pack("<II", VERSION, len(self.layout))]
        for s in self.layout:
            name = s.name.encode("utf-8")
            out.append(struct.pack("<I", len(name)))
            out.append(name)
            out.append(struct.pack("<I", len(s.shape)))
            out.append(struct.pack(f"<{len(s.shape)}Q", *s.shape))
        out.append(self.values.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        vec, used = cls._parse(buf)
        if used != len(buf):
            raise SizeMismatchError(used, len(buf), "DVPV buffer")
        return vec

    @classmethod
    def _parse(cls, buf, pos=0):
        def read(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise SizeMismatchError(pos + size, len(buf), "DVPV header")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        if bytes(buf[pos : pos + 4]) != MAGIC:
            raise FormatError(f"bad magic {bytes(buf[pos:pos + 4])!r}, expected {MAGIC!r}")
        pos += 4
        version, count = read("<II")
        if version != VERSION:
            raise FormatError(f"unsupported DVPV version {version}")
        arrays_layout, offset = [], 0
        for _ in range(count):
            (nlen,) = read("<I")
            if pos + nlen > len(buf):
                raise SizeMismatchError(pos + nlen, len(buf), "DVPV header")
            name = bytes(buf[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = read("<I")
            dims = read(f"<{rank}Q") if rank else ()
            slot = Slot(name, tuple(int(d) for d in dims), offset)
            arrays_layout.append(slot)
            offset += slot.size
        nbytes = offset * 8
        if pos + nbytes > len(buf):
            raise SizeMismatchError(pos + nbytes, len(buf), "DVPV payload")
        values = np.frombuffer(buf, dtype="<f8", count=offset, offset=pos).astype(np.float64)
        return cls(values, arrays_layout), pos + nbytes

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def grad(loss, params, *, retain_graph=False, create_graph=False):
    """dL/dθ laid out like ``params``.

    ``params`` must be a tracked vector that took part in ``loss``; entries
    that did not influence the loss come back as exact zeros. With
    ``create_graph`` the result keeps its own graph (``result.node``) so it can
    feed :func:`grad_of_grad`.
    """
    if params.node is None:
        raise ContractError("params are not tracked; call .tracked() before building the loss")
    if loss.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")
    (g,) = ad.backward(loss, [params.node], retain_graph=retain_graph, create_graph=create_graph)
    if create_graph:
        return ParamVector.from_tensor(g, params.layout)
    return ParamVector(g.data, params.layout)


def grad_of_grad(loss, params, inner_result):
    """Derivative of ``loss`` (a scalar built from ``inner_result``) w.r.t. ``params``.

    ``inner_result`` must come from :func:`grad` with ``create_graph=True``;
    otherwise the chain back to ``params`` was never recorded.
    """
    if inner_result.node is None or not inner_result.node.requires_grad:
        raise ContractError(
            "inner_result has no retained graph; recompute it with grad(..., create_graph=True)"
        )
    return grad(loss, params)
