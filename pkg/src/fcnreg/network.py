"""Fully convolutional registration networks.

Three variants share one encoder:

``multires``
    conv1 -> pool -> conv2 -> pool -> conv3 -> reg1 (1/4 res), then
    deconv1 -> conv4 -> reg2 (1/2 res), deconv2 -> reg3 (full res).
``no_pool``
    conv1 -> conv2 -> conv3 at full resolution, one regression head.
``coarse_interp``
    the multires encoder up to reg1, followed by fixed trilinear upsampling
    of the quarter-resolution field to full resolution.

Every conv/deconv is followed by batch norm and ReLU; regression heads are
plain convolutions initialised to zero so an untrained network returns the
identity transform.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    BatchNormState,
    Tensor,
    avgpool3d,
    batchnorm,
    concat_channels,
    conv3d,
    no_grad,
    relu,
    transposed_conv3d,
)
from .volume import Volume
from .warp import upsample_field

VARIANTS = ("multires", "no_pool", "coarse_interp")
VARIANT_ALIASES = {"nopool": "no_pool", "coarse": "coarse_interp"}

CONV_CHANNELS = (32, 64, 128, 64)
DECONV_CHANNELS = (64, 32)
FIELD_CHANNELS = 3

MODEL_MAGIC = b"FCNR"
MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a serialized model fails validation."""


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str
    dims: tuple

    def __post_init__(self):
        variant = VARIANT_ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.dims) != 3:
            raise ValueError(f"dims must have three entries, got {self.dims}")
        if variant == "no_pool":
            if min(self.dims) < 3:
                raise ValueError(f"no_pool needs every dim >= 3, got {self.dims}")
        elif any(n % 4 or n < 4 for n in self.dims):
            raise ValueError(f"{variant} needs dims divisible by 4, got {self.dims}")


# (name, kind, in_channels, out_channels); kind is conv | deconv | reg
def layer_plan(variant: str) -> list:
    c1, c2, c3, c4 = CONV_CHANNELS
    d1, d2 = DECONV_CHANNELS
    encoder = [("conv1", "conv", 2, c1), ("conv2", "conv", c1, c2), ("conv3", "conv", c2, c3)]
    if variant == "no_pool":
        return encoder + [("reg", "reg", c3, FIELD_CHANNELS)]
    if variant == "coarse_interp":
        return encoder + [("reg1", "reg", c3, FIELD_CHANNELS)]
    return encoder + [
        ("reg1", "reg", c3, FIELD_CHANNELS),
        ("deconv1", "deconv", c3, d1),
        ("conv4", "conv", d1, c4),
        ("reg2", "reg", c4, FIELD_CHANNELS),
        ("deconv2", "deconv", c4, d2),
        ("reg3", "reg", d2, FIELD_CHANNELS),
    ]


def _weight_shape(kind: str, cin: int, cout: int, k: int = 3) -> tuple:
    if kind == "deconv":
        return (cin, cout, k, k, k)
    return (cout, cin, k, k, k)


class Network:
    """Parameter store plus the forward computation for one variant."""

    def __init__(self, config: ArchitectureConfig):
        self.config = config
        self.params: dict = {}
        self.bn: dict = {}
        self.plan = layer_plan(config.variant)
        for name, kind, cin, cout in self.plan:
            self.params[f"{name}.weight"] = Tensor(np.zeros(_weight_shape(kind, cin, cout)),
                                                   requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            if kind != "reg":
                self.params[f"{name}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
                self.params[f"{name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
                self.bn[name] = BatchNormState.create(cout)

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameters(self) -> dict:
        return self.params

    def state_arrays(self) -> dict:
        """Every serialized array in manifest order: parameters, then BN statistics."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def manifest(self) -> list:
        return [(name, tuple(arr.shape)) for name, arr in self.state_arrays().items()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward -----------------------------------------------------------
    def _block(self, name: str, kind: str, x: Tensor, mode: str, update_stats: bool) -> Tensor:
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if kind == "deconv":
            h = transposed_conv3d(x, w, b, stride=2, padding=1, output_padding=1)
        else:
            h = conv3d(x, w, b, stride=1, padding=1)
        if kind == "reg":
            return h
        h = batchnorm(h, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                      self.bn[name], mode=mode, update_stats=update_stats)
        return relu(h)

    def forward(self, fixed, moving, mode: str = "train", update_stats: bool = True) -> list:
        """Displacement fields, coarsest first (three for multires, else one)."""
        fixed, moving = _as_input(fixed), _as_input(moving)
        if fixed.shape != moving.shape:
            raise ValueError(f"fixed {fixed.shape[2:]} and moving {moving.shape[2:]} differ")
        if tuple(fixed.shape[2:]) != self.config.dims:
            raise ValueError(f"input dims {tuple(fixed.shape[2:])} do not match network dims "
                             f"{self.config.dims}")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "eval":
            with no_grad():
                return self._forward(fixed, moving, mode, False)
        return self._forward(fixed, moving, mode, update_stats)

    def _forward(self, fixed, moving, mode, update_stats) -> list:
        def block(name, kind, x):
            return self._block(name, kind, x, mode, update_stats)

        x = concat_channels(fixed, moving)
        h1 = block("conv1", "conv", x)
        if self.variant == "no_pool":
            h = block("conv3", "conv", block("conv2", "conv", h1))
            return [block("reg", "reg", h)]
        h2 = block("conv2", "conv", avgpool3d(h1, 3, 2, 1))
        h3 = block("conv3", "conv", avgpool3d(h2, 3, 2, 1))
        f1 = block("reg1", "reg", h3)
        if self.variant == "coarse_interp":
            return [upsample_field(f1, 4)]
        h4 = block("conv4", "conv", block("deconv1", "deconv", h3))
        f2 = block("reg2", "reg", h4)
        f3 = block("reg3", "reg", block("deconv2", "deconv", h4))
        return [f1, f2, f3]

    __call__ = forward


def _as_input(x) -> Tensor:
    if isinstance(x, Volume):
        arr = x.channel_first()[None]
    elif isinstance(x, Tensor):
        arr = x.data
    else:
        arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None, None]
    elif arr.ndim == 4:
        arr = arr[:, None]
    if arr.ndim != 5 or arr.shape[1] != 1:
        raise ValueError(f"expected single-channel volumes, got shape {arr.shape}")
    return Tensor(arr)


def build_network(config: ArchitectureConfig, seed: int = 0) -> Network:
    """Initialise weights with N(0, 2/fan_in); heads, biases and BN shifts at 0."""
    net = Network(config)
    rng = np.random.default_rng(seed)
    for name, kind, cin, cout in net.plan:
        w = net.params[f"{name}.weight"]
        if kind == "reg":
            continue
        fan_in = w.size // cout
        w.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
    return net


def forward(net: Network, fixed, moving, mode: str = "train") -> list:
    return net.forward(fixed, moving, mode)


# -- model file -------------------------------------------------------------

def serialize(net: Network) -> bytes:
    """Magic, u32 manifest length, JSON manifest, little-endian float32 blob."""
    records, chunks, offset = [], [], 0
    for name, arr in net.state_arrays().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "variant": net.variant,
        "input_dims": list(net.config.dims),
        "records": records,
        "blob_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MODEL_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def deserialize(blob: bytes, expected: Optional[ArchitectureConfig] = None) -> Network:
    """Rebuild a network, validating every record against the architecture."""
    if len(blob) < 8 or blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (n_head,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + n_head:
        raise ModelFormatError("truncated model file: manifest incomplete")
    try:
        manifest = json.loads(blob[8:8 + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc}") from None
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version "
                               f"{manifest.get('format_version')!r}")
    try:
        config = ArchitectureConfig(manifest["variant"], tuple(manifest["input_dims"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid architecture in manifest: {exc}") from None
    if expected is not None and expected != config:
        raise ModelFormatError(f"model is {config.variant} {config.dims}, expected "
                               f"{expected.variant} {expected.dims}")
    body = blob[8 + n_head:]
    if len(body) != manifest.get("blob_bytes"):
        raise ModelFormatError(f"truncated model file: blob has {len(body)} bytes, manifest "
                               f"declares {manifest.get('blob_bytes')}")

    net = Network(config)
    expected_records = net.manifest()
    records = manifest.get("records", [])
    if len(records) != len(expected_records):
        raise ModelFormatError(f"manifest lists {len(records)} arrays, architecture has "
                               f"{len(expected_records)}")
    arrays = {}
    for rec, (name, shape) in zip(records, expected_records):
        if rec.get("name") != name or tuple(rec.get("shape", ())) != shape:
            raise ModelFormatError(f"record {rec.get('name')!r} {rec.get('shape')} does not "
                                   f"match expected {name!r} {list(shape)}")
        start = rec["offset"]
        n_bytes = 4 * int(np.prod(shape))
        if start < 0 or start + n_bytes > len(body):
            raise ModelFormatError(f"record {name!r} runs past the end of the blob")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n_bytes // 4,
                                     offset=start).reshape(shape).astype(np.float32)
    for name, t in net.params.items():
        t.data = arrays[name]
    for name, st in net.bn.items():
        st.running_mean = arrays[f"{name}.running_mean"]
        st.running_var = arrays[f"{name}.running_var"]
    return net


def save_model(net: Network, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, serialize(net))


def load_model(path, expected: Optional[ArchitectureConfig] = None) -> Network:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), expected)
