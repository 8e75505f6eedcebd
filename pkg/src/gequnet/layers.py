"""Group convolution layers on regular-representation feature maps.

Feature maps have shape ``(B, fields, |G|, H, W)``. A lifting layer maps a
planar image to such a map; a group layer maps one to another. Both are
realised by expanding the learnable kernels into a full planar filter bank
(one spatially transformed, fiber-permuted copy per output element) and
running a single :func:`~gequnet.tensor.conv2d`.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .groups import GroupSpec, cayley_table, enumerate_elements, kernel_destinations, kernel_sources
from .tensor import ShapeError


class GroupMismatchError(ValueError):
    pass


@dataclass
class GFeatureMap:
    data: np.ndarray
    spec: GroupSpec

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"GFeatureMap data must be 5-D, got {self.data.shape}")
        if self.data.shape[2] != self.spec.order:
            raise ShapeError(
                f"fiber axis has length {self.data.shape[2]}, {self.spec} has order {self.spec.order}"
            )

    @property
    def fields(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def planar(self) -> np.ndarray:
        """View as ``(B, fields*|G|, H, W)``."""
        B, F, G, H, W = self.data.shape
        return self.data.reshape(B, F * G, H, W)


# ---------------------------------------------------------------------------
# filter-bank expansion tables

_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fiber_fault():
    """Test hook: corrupt the fiber permutation used inside group layers."""
    _FAULTS.add("fiber")
    try:
        yield
    finally:
        _FAULTS.discard("fiber")


@lru_cache(maxsize=None)
def _lift_tables(spec: GroupSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    els = enumerate_elements(spec)
    src = np.stack([kernel_sources(spec, g, k) for g in els])
    dest = np.stack([kernel_destinations(spec, g, k) for g in els])
    return src, dest


@lru_cache(maxsize=None)
def _gconv_tables(spec: GroupSpec, k: int, faulty: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Index ``E[g, h*k*k + q]`` into a flattened ``(|G|, k, k)`` kernel slice, and its inverse."""
    G, kk = spec.order, k * k
    tab = cayley_table(spec)
    src, _ = _lift_tables(spec, k)
    fib = tab.compose[tab.inverse]  # fib[g, h] = g^-1 ∘ h
    if faulty and G > 1:
        fib = fib.copy()
        fib[1, [0, 1]] = fib[1, [1, 0]]
    E = (fib[:, :, None] * kk + src[:, None, :]).reshape(G, G * kk)
    inv = np.empty_like(E)
    rows = np.arange(G)[:, None]
    inv[rows, E] = np.arange(G * kk)[None, :]
    return E, inv


def _gtables(spec: GroupSpec, k: int):
    return _gconv_tables(spec, k, "fiber" in _FAULTS)


# ---------------------------------------------------------------------------
# layers


@dataclass
class LiftingConvLayer:
    weights: np.ndarray  # (out_fields, in_channels, k, k)
    bias: np.ndarray  # (out_fields,)
    spec: GroupSpec

    @classmethod
    def create(cls, in_channels: int, out_fields: int, spec: GroupSpec, k: int = 3, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        return cls(
            np.zeros((out_fields, in_channels, k, k), dtype=dtype),
            np.zeros(out_fields, dtype=dtype),
            spec,
        )

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_fields(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[-1]

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.k**2

    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def expanded_bank(self) -> np.ndarray:
        O, C, k, _ = self.weights.shape
        src, _ = _lift_tables(self.spec, k)
        bank = self.weights.reshape(O, C, k * k)[:, :, src]  # (O, C, G, kk)
        return np.ascontiguousarray(bank.transpose(0, 2, 1, 3)).reshape(O * self.spec.order, C, k, k)

    def reduce_bank_grad(self, grad_bank: np.ndarray) -> np.ndarray:
        O, C, k, _ = self.weights.shape
        G = self.spec.order
        _, dest = _lift_tables(self.spec, k)
        g = grad_bank.reshape(O, G, C, k * k).transpose(0, 2, 1, 3)
        picked = g[:, :, np.arange(G)[:, None], dest]  # (O, C, G, kk)
        return picked.sum(axis=2).reshape(O, C, k, k)


@dataclass
class GConvLayer:
    weights: np.ndarray  # (out_fields, in_fields, |G|, k, k)
    bias: np.ndarray  # (out_fields,)
    spec: GroupSpec

    @classmethod
    def create(cls, in_fields: int, out_fields: int, spec: GroupSpec, k: int = 3, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        return cls(
            np.zeros((out_fields, in_fields, spec.order, k, k), dtype=dtype),
            np.zeros(out_fields, dtype=dtype),
            spec,
        )

    @property
    def in_fields(self) -> int:
        return self.weights.shape[1]

    @property
    def out_fields(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[-1]

    @property
    def fan_in(self) -> int:
        return self.in_fields * self.spec.order * self.k**2

    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def expanded_bank(self) -> np.ndarray:
        O, I, G, k, _ = self.weights.shape
        E, _ = _gtables(self.spec, k)
        bank = self.weights.reshape(O, I, G * k * k)[:, :, E]  # (O, I, G_out, G_in*kk)
        bank = np.ascontiguousarray(bank.transpose(0, 2, 1, 3))
        return bank.reshape(O * G, I * G, k, k)

    def reduce_bank_grad(self, grad_bank: np.ndarray) -> np.ndarray:
        O, I, G, k, _ = self.weights.shape
        _, inv = _gtables(self.spec, k)
        g = grad_bank.reshape(O, G, I, G * k * k).transpose(0, 2, 1, 3)
        picked = g[:, :, np.arange(G)[:, None], inv]  # (O, I, G_out, G*kk)
        return picked.sum(axis=2).reshape(O, I, G, k, k)


Layer = LiftingConvLayer | GConvLayer


# ---------------------------------------------------------------------------
# forward / backward


def _square(x: np.ndarray) -> None:
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"group layers need square inputs, got {x.shape[-2:]}")


def lift_forward(x: np.ndarray, layer: LiftingConvLayer) -> GFeatureMap:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"expected (B,{layer.in_channels},H,W), got {x.shape}")
    _square(x)
    out = T.conv2d(x, layer.expanded_bank().astype(x.dtype, copy=False))
    B, _, H, W = out.shape
    out = out.reshape(B, layer.out_fields, layer.spec.order, H, W)
    out += layer.bias.astype(x.dtype, copy=False)[None, :, None, None, None]
    return GFeatureMap(out, layer.spec)


def lift_backward(x: np.ndarray, layer: LiftingConvLayer, grad_output: GFeatureMap | np.ndarray):
    g = grad_output.data if isinstance(grad_output, GFeatureMap) else grad_output
    B, F, G, H, W = g.shape
    gx, gbank = T.conv2d_backward(x, layer.expanded_bank().astype(x.dtype, copy=False), g.reshape(B, F * G, H, W))
    return gx, layer.reduce_bank_grad(gbank), g.sum(axis=(0, 2, 3, 4))


def gconv_forward(f: GFeatureMap, layer: GConvLayer) -> GFeatureMap:
    if f.spec != layer.spec:
        raise GroupMismatchError(f"feature map is over {f.spec}, layer over {layer.spec}")
    if f.fields != layer.in_fields:
        raise ShapeError(f"layer expects {layer.in_fields} fields, got {f.fields}")
    _square(f.data)
    x = f.planar()
    out = T.conv2d(x, layer.expanded_bank().astype(x.dtype, copy=False))
    B, _, H, W = out.shape
    out = out.reshape(B, layer.out_fields, layer.spec.order, H, W)
    out += layer.bias.astype(x.dtype, copy=False)[None, :, None, None, None]
    return GFeatureMap(out, layer.spec)


def gconv_backward(f: GFeatureMap, layer: GConvLayer, grad_output: GFeatureMap | np.ndarray):
    g = grad_output.data if isinstance(grad_output, GFeatureMap) else grad_output
    B, F, G, H, W = g.shape
    x = f.planar()
    gx, gbank = T.conv2d_backward(x, layer.expanded_bank().astype(x.dtype, copy=False), g.reshape(B, F * G, H, W))
    return (
        GFeatureMap(gx.reshape(f.data.shape), f.spec),
        layer.reduce_bank_grad(gbank),
        g.sum(axis=(0, 2, 3, 4)),
    )


def group_pool(f: GFeatureMap, mode: str = "mean") -> np.ndarray:
    if mode == "mean":
        return f.data.mean(axis=2)
    if mode == "max":
        return f.data.max(axis=2)
    raise ValueError(f"unknown group pooling mode {mode!r}")


def group_pool_backward(f: GFeatureMap, grad_output: np.ndarray, mode: str = "mean") -> GFeatureMap:
    G = f.spec.order
    if mode == "mean":
        g = np.broadcast_to(grad_output[:, :, None] / G, f.data.shape)
        return GFeatureMap(np.ascontiguousarray(g), f.spec)
    if mode == "max":
        idx = f.data.argmax(axis=2)
        g = np.zeros_like(f.data)
        np.put_along_axis(g, idx[:, :, None], grad_output[:, :, None], axis=2)
        return GFeatureMap(g, f.spec)
    raise ValueError(f"unknown group pooling mode {mode!r}")


def relu_g(f: GFeatureMap) -> GFeatureMap:
    return GFeatureMap(T.relu(f.data), f.spec)


def relu_g_backward(f: GFeatureMap, grad_output: GFeatureMap) -> GFeatureMap:
    return GFeatureMap(T.relu_backward(f.data, grad_output.data), f.spec)


def maxpool_g(f: GFeatureMap) -> tuple[GFeatureMap, np.ndarray]:
    out, idx = T.maxpool2(f.data)
    return GFeatureMap(out, f.spec), idx


def maxpool_g_backward(grad_output: GFeatureMap, indices: np.ndarray) -> GFeatureMap:
    return GFeatureMap(T.maxpool2_backward(grad_output.data, indices), grad_output.spec)


def upsample_g(f: GFeatureMap) -> GFeatureMap:
    return GFeatureMap(T.upsample_nearest2(f.data), f.spec)


def upsample_g_backward(grad_output: GFeatureMap) -> GFeatureMap:
    return GFeatureMap(T.upsample_nearest2_backward(grad_output.data), grad_output.spec)


def concat_fields(f1: GFeatureMap, f2: GFeatureMap) -> GFeatureMap:
    if f1.spec != f2.spec:
        raise GroupMismatchError(f"cannot concatenate {f1.spec} and {f2.spec} maps")
    if f1.shape[0] != f2.shape[0] or f1.shape[3:] != f2.shape[3:]:
        raise ShapeError(f"batch/spatial mismatch: {f1.shape} vs {f2.shape}")
    return GFeatureMap(np.concatenate([f1.data, f2.data], axis=1), f1.spec)


def concat_fields_backward(grad_output: GFeatureMap, split: int) -> tuple[GFeatureMap, GFeatureMap]:
    d = grad_output.data
    return GFeatureMap(d[:, :split], grad_output.spec), GFeatureMap(d[:, split:], grad_output.spec)


# ---------------------------------------------------------------------------
# serialization
#
# blob := header weights bias
# header := "GQL1" kind:u8 n:u8 type:u8 k:u8 in:u32 out:u32   (little endian)
#   kind 0 = cyclic, 1 = dihedral; type 0 = lifting, 1 = group conv;
#   in = input channels (lifting) or input fields (group conv)
# weights := float32 LE, C order of (out, in, k, k) or (out, in, |G|, k, k),
#   fiber axis in canonical element order
# bias := float32 LE, out values

_HEADER = struct.Struct("<4sBBBBII")
_MAGIC = b"GQL1"


def layer_to_bytes(layer: Layer) -> bytes:
    kind = 0 if layer.spec.kind == "cyclic" else 1
    ltype = 0 if isinstance(layer, LiftingConvLayer) else 1
    nin = layer.weights.shape[1]
    head = _HEADER.pack(_MAGIC, kind, layer.spec.n, ltype, layer.k, nin, layer.weights.shape[0])
    return head + layer.weights.astype("<f4").tobytes() + layer.bias.astype("<f4").tobytes()


def layer_from_bytes(buf: bytes, offset: int = 0) -> tuple[Layer, int]:
    magic, kind, n, ltype, k, nin, nout = _HEADER.unpack_from(buf, offset)
    if magic != _MAGIC:
        raise ValueError(f"bad layer magic {magic!r} at offset {offset}")
    spec = GroupSpec("cyclic" if kind == 0 else "dihedral", n)
    offset += _HEADER.size
    shape = (nout, nin, k, k) if ltype == 0 else (nout, nin, spec.order, k, k)
    count = int(np.prod(shape))
    w = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    offset += 4 * count
    b = np.frombuffer(buf, dtype="<f4", count=nout, offset=offset)
    offset += 4 * nout
    cls = LiftingConvLayer if ltype == 0 else GConvLayer
    return cls(w.astype(np.float32), b.astype(np.float32), spec), offset
