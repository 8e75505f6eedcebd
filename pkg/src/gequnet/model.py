"""RadioGUNet: a single UNet whose convolutions are group convolutions.

Layout per stage (fields, not planar channels):

    enc1  lift(C_in->6)   + gconv(6->6)      + pool
    enc2  gconv(6->50)    + gconv(50->50)    + pool
    enc3  gconv(50->100)  + gconv(100->100)  + pool
    enc4  gconv(100->100) + gconv(100->100)  + pool
    enc5  gconv(100->170) + gconv(170->170)  + pool
    bottleneck 3 x gconv(170->170)
    dec1  up, cat enc5 (170+170) -> 100, 100
    dec2  up, cat enc4 (100+100) -> 100, 100
    dec3  up, cat enc3 (100+100) -> 50, 50
    dec4  up, cat enc2 (50+50)   -> 6, 6
    out   up, gconv(6->1), mean over the fiber axis

Every convolution except the output one is followed by a ReLU. Skips tap
the encoder activations before pooling. The fifth upsample in the output
stage restores the input resolution.
"""
from __future__ import annotations

import io
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import layers as L
from .groups import GroupSpec
from .layers import GConvLayer, GFeatureMap, LiftingConvLayer
from .tensor import ShapeError

ENCODER_WIDTHS = (6, 50, 100, 100, 170)
BOTTLENECK_WIDTH = 170
DECODER_WIDTHS = (100, 100, 50, 6)


@dataclass
class ModelConfig:
    spec: GroupSpec = field(default_factory=lambda: GroupSpec("cyclic", 4))
    with_cars: bool = False
    encoder_widths: tuple[int, ...] = ENCODER_WIDTHS
    bottleneck_width: int = BOTTLENECK_WIDTH
    decoder_widths: tuple[int, ...] = DECODER_WIDTHS
    width_scale: Fraction = Fraction(1)
    seed: int = 0
    kernel_size: int = 3

    def __post_init__(self):
        self.width_scale = Fraction(self.width_scale)
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if len(self.encoder_widths) != 5 or len(self.decoder_widths) != 4:
            raise ValueError("need 5 encoder widths and 4 decoder widths")
        if min(self.encoder_widths + self.decoder_widths + (self.bottleneck_width,)) < 1:
            raise ValueError("widths must be positive")

    @property
    def in_channels(self) -> int:
        return 3 if self.with_cars else 2

    def scaled(self, w: int) -> int:
        return max(1, math.ceil(w * self.width_scale))

    def widths(self) -> tuple[list[int], int, list[int]]:
        return (
            [self.scaled(w) for w in self.encoder_widths],
            self.scaled(self.bottleneck_width),
            [self.scaled(w) for w in self.decoder_widths],
        )

    def to_dict(self) -> dict[str, str]:
        return {
            "group": self.spec.name,
            "with_cars": str(int(self.with_cars)),
            "encoder_widths": ",".join(map(str, self.encoder_widths)),
            "bottleneck_width": str(self.bottleneck_width),
            "decoder_widths": ",".join(map(str, self.decoder_widths)),
            "width_scale": str(self.width_scale),
            "seed": str(self.seed),
            "kernel_size": str(self.kernel_size),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(","))

        return cls(
            spec=GroupSpec.parse(d.get("group", "c4")),
            with_cars=d.get("with_cars", "0").lower() in ("1", "true", "yes"),
            encoder_widths=ints(d["encoder_widths"]) if "encoder_widths" in d else ENCODER_WIDTHS,
            bottleneck_width=int(d.get("bottleneck_width", BOTTLENECK_WIDTH)),
            decoder_widths=ints(d["decoder_widths"]) if "decoder_widths" in d else DECODER_WIDTHS,
            width_scale=Fraction(d.get("width_scale", "1")),
            seed=int(d.get("seed", 0)),
            kernel_size=int(d.get("kernel_size", 3)),
        )


class Model:
    """Layer list plus the fixed UNet wiring, with a hand-written backward pass."""

    def __init__(self, config: ModelConfig, layers: list[L.Layer], names: list[str]):
        self.config = config
        self.spec = config.spec
        self.layers = layers
        self.names = names
        self.grads: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._tape: dict | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.weights = layer.weights.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return self

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.weights = arrays[2 * i]
            layer.bias = arrays[2 * i + 1]

    def grad_list(self) -> list[np.ndarray]:
        if self.grads is None:
            raise RuntimeError("call backward() first")
        return [g for pair in self.grads for g in pair]

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"expected (B,C,H,W), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model built for {self.config.in_channels} input channels "
                f"(with_cars={self.config.with_cars}), got {x.shape[1]}"
            )
        H, W = x.shape[2:]
        if H != W:
            raise ShapeError(f"input must be square, got {H}x{W}")
        if H % 32:
            raise ShapeError(f"spatial size must be divisible by 32, got {H}")

    def _conv(self, li: int, inp, relu: bool):
        layer = self.layers[li]
        if isinstance(layer, LiftingConvLayer):
            out = L.lift_forward(inp, layer)
        else:
            out = L.gconv_forward(inp, layer)
        if relu:
            out = L.relu_g(out)
        if self._tape is not None:
            self._tape["conv"][li] = (inp, out if relu else None)
        return out

    def forward(self, x: np.ndarray, keep: bool = False) -> np.ndarray:
        """Map ``(B, C, H, W)`` inputs to ``(B, 1, H, W)`` estimates.

        With ``keep=True`` the intermediate activations are retained for
        :meth:`backward`.
        """
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        self._tape = {"conv": {}, "pool": [], "skip_fields": [], "up_fields": []} if keep else None
        li = 0
        f = x
        skips = []
        for _ in range(5):
            f = self._conv(li, f, True)
            f = self._conv(li + 1, f, True)
            li += 2
            skips.append(f)
            f, idx = L.maxpool_g(f)
            if keep:
                self._tape["pool"].append(idx)
        for _ in range(3):
            f = self._conv(li, f, True)
            li += 1
        for d in range(4):
            f = L.upsample_g(f)
            if keep:
                self._tape["up_fields"].append(f.fields)
            f = L.concat_fields(f, skips[4 - d])
            f = self._conv(li, f, True)
            f = self._conv(li + 1, f, True)
            li += 2
        f = L.upsample_g(f)
        f = self._conv(li, f, False)
        if keep:
            self._tape["out"] = f
        return L.group_pool(f, "mean")

    __call__ = forward

    def layer_outputs(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Post-activation output of every convolution for one forward pass."""
        self.forward(x, keep=True)
        conv = self._tape["conv"]
        outs = {}
        for li, name in enumerate(self.names):
            post = conv[li][1]
            outs[name] = (self._tape["out"] if post is None else post).data
        self._tape = None
        return outs

    # -- backward ----------------------------------------------------------

    def _conv_back(self, li: int, g):
        inp, out = self._tape["conv"][li]
        layer = self.layers[li]
        if out is not None:
            g = L.relu_g_backward(out, g)
        if isinstance(layer, LiftingConvLayer):
            gi, gw, gb = L.lift_backward(inp, layer, g)
        else:
            gi, gw, gb = L.gconv_backward(inp, layer, g)
        self.grads[li] = (gw, gb)
        return gi

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Backpropagate ``dLoss/dOutput``; fills :attr:`grads`, returns ``dLoss/dInput``."""
        if self._tape is None:
            raise RuntimeError("forward(keep=True) must precede backward()")
        tape = self._tape
        self.grads = [None] * len(self.layers)
        li = len(self.layers) - 1
        g = L.group_pool_backward(tape["out"], grad_output.astype(self.dtype, copy=False), "mean")
        g = self._conv_back(li, g)
        g = L.upsample_g_backward(g)
        skip_grads = [None] * 5
        for d in reversed(range(4)):
            li -= 2
            g = self._conv_back(li + 1, g)
            g = self._conv_back(li, g)
            gu, gs = L.concat_fields_backward(g, tape["up_fields"][d])
            skip_grads[4 - d] = gs
            g = L.upsample_g_backward(gu)
        for _ in range(3):
            li -= 1
            g = self._conv_back(li, g)
        for b in reversed(range(5)):
            li -= 2
            g = L.maxpool_g_backward(g, tape["pool"][b])
            if skip_grads[b] is not None:
                g = GFeatureMap(g.data + skip_grads[b].data, g.spec)
            g = self._conv_back(li + 1, g)
            g = self._conv_back(li, g)
        assert li == 0
        self._tape = None
        return g

    # -- parameters --------------------------------------------------------

    def count_params(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def param_table(self) -> list[dict]:
        rows = []
        for name, layer in zip(self.names, self.layers):
            rows.append(
                {
                    "name": name,
                    "type": "lift" if isinstance(layer, LiftingConvLayer) else "gconv",
                    "in": layer.weights.shape[1],
                    "out": layer.weights.shape[0],
                    "params": layer.param_count(),
                }
            )
        return rows


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count from the layer formulas alone."""
    G, kk = config.spec.order, config.kernel_size**2
    enc, bott, dec = config.widths()
    total = enc[0] * config.in_channels * kk + enc[0]

    def gc(i, o):
        return o * i * G * kk + o

    total += gc(enc[0], enc[0])
    for a, b in zip(enc, enc[1:]):
        total += gc(a, b) + gc(b, b)
    total += gc(enc[-1], bott) + 2 * gc(bott, bott)
    prev = bott
    for d, w in enumerate(dec):
        total += gc(prev + enc[4 - d], w) + gc(w, w)
        prev = w
    return total + gc(prev, 1)


def build(config: ModelConfig) -> Model:
    spec, k = config.spec, config.kernel_size
    enc, bott, dec = config.widths()
    layers: list[L.Layer] = []
    names: list[str] = []

    def add(name, layer):
        names.append(name)
        layers.append(layer)

    add("enc1.conv1", LiftingConvLayer.create(config.in_channels, enc[0], spec, k))
    add("enc1.conv2", GConvLayer.create(enc[0], enc[0], spec, k))
    for b in range(1, 5):
        add(f"enc{b + 1}.conv1", GConvLayer.create(enc[b - 1], enc[b], spec, k))
        add(f"enc{b + 1}.conv2", GConvLayer.create(enc[b], enc[b], spec, k))
    prev = enc[-1]
    for j in range(3):
        add(f"bottleneck.conv{j + 1}", GConvLayer.create(prev, bott, spec, k))
        prev = bott
    for d, w in enumerate(dec):
        add(f"dec{d + 1}.conv1", GConvLayer.create(prev + enc[4 - d], w, spec, k))
        add(f"dec{d + 1}.conv2", GConvLayer.create(w, w, spec, k))
        prev = w
    add("out.conv", GConvLayer.create(prev, 1, spec, k))
    model = Model(config, layers, names)
    return init_weights(model, config.seed)


def init_weights(model: Model, seed: int) -> Model:
    """He-normal weights scaled by the expanded fan-in, zero bias."""
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        std = math.sqrt(2.0 / layer.fan_in)
        layer.weights = (rng.standard_normal(layer.weights.shape) * std).astype(np.float32)
        layer.bias = np.zeros_like(layer.bias, dtype=np.float32)
    return model


# ---------------------------------------------------------------------------
# checkpoints
#
# file := "GQCK1\n" hlen:u32 header n_layers:u32 blob* crc:u32
# header := UTF-8 "key=value\n" lines (ModelConfig plus free metadata keys)
# blob := layers.layer_to_bytes(...)
# crc := zlib.crc32 of every preceding byte, little endian

_CK_MAGIC = b"GQCK1\n"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: Model, meta: dict[str, str] | None = None) -> bytes:
    header = dict(model.config.to_dict())
    for key, val in (meta or {}).items():
        header[f"meta.{key}"] = str(val)
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode()
    buf = io.BytesIO()
    buf.write(_CK_MAGIC)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        buf.write(L.layer_to_bytes(layer))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Model, path: str | Path, meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, meta))
    os.replace(tmp, path)


def read_checkpoint_header(data: bytes | str | Path) -> dict[str, str]:
    """Header key/values of a checkpoint, given its bytes or its path."""
    if not isinstance(data, bytes):
        data = Path(data).read_bytes()
    if not data.startswith(_CK_MAGIC):
        raise CheckpointError("not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(_CK_MAGIC))
    start = len(_CK_MAGIC) + 4
    text = data[start : start + hlen].decode()
    return dict(line.split("=", 1) for line in text.splitlines() if line)


def load_checkpoint(path: str | Path) -> tuple[Model, dict[str, str]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if len(data) < len(_CK_MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    header = read_checkpoint_header(data)
    config = ModelConfig.from_dict(header)
    model = build(config)
    off = len(_CK_MAGIC) + 4 + struct.unpack_from("<I", data, len(_CK_MAGIC))[0]
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    if n != len(model.layers):
        raise CheckpointError(f"{path}: {n} layers stored, config implies {len(model.layers)}")
    for i in range(n):
        layer, off = L.layer_from_bytes(data, off)
        ref = model.layers[i]
        if layer.spec != config.spec or layer.weights.shape != ref.weights.shape:
            raise CheckpointError(f"{path}: layer {i} does not match the header config")
        model.layers[i] = layer
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return model, meta
