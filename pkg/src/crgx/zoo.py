"""Small seeded models whose internals are cheap enough to enumerate.

Three architectures share one contract: a designated "tap" layer whose
output is exposed as a stack of maps (n_maps x d positions), plus a head
that maps the tap to class logits. `forward_with_tap` rebuilds the head on
a tape with the tap as the independent input, so gradients and HVPs are
taken with respect to the tap values themselves, not the image.

Weights serialize to a single binary blob: a 4-byte little-endian header
length, a JSON header (architecture, seed, tensor table), then the tensor
payload as little-endian float64, concatenated row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

ARCHS = ("cnn-relu", "cnn-smooth", "mlp-smooth")

_MLP_MAPS = 4
_MLP_SPATIAL = (4, 4)
_CONV_CHANNELS = 4
_KERNEL = 3


@dataclass(frozen=True)
class ActivationStack:
    """Tap-layer output as maps: one row per map, one column per position."""

    maps: np.ndarray          # (n_maps, d)
    spatial: tuple[int, int]  # (h, w) with h*w == d
    layer: str

    def __post_init__(self):
        n, d = self.maps.shape
        if self.spatial[0] * self.spatial[1] != d:
            raise ValueError(f"activation stack: spatial {self.spatial} does not cover d={d}")

    @property
    def n_maps(self) -> int:
        return self.maps.shape[0]

    @property
    def d(self) -> int:
        return self.maps.shape[1]


class TapRun(NamedTuple):
    logits: np.ndarray
    activations: ActivationStack
    tape: ad.Tape


def _init_tensor(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.uniform(-0.5, 0.5, size=shape) / np.sqrt(fan_in)


def _tensor_specs(arch: str, num_classes: int, in_shape: tuple[int, int, int]):
    """Ordered (name, shape, fan_in) table; the order fixes RNG draw order
    and the manifest layout."""
    cin, h, w = in_shape
    if arch in ("cnn-relu", "cnn-smooth"):
        fan_conv = cin * _KERNEL * _KERNEL
        return [
            ("conv_w", (_CONV_CHANNELS, cin, _KERNEL, _KERNEL), fan_conv),
            ("conv_b", (_CONV_CHANNELS,), fan_conv),
            ("fc_w", (num_classes, _CONV_CHANNELS), _CONV_CHANNELS),
            ("fc_b", (num_classes,), _CONV_CHANNELS),
        ]
    if arch == "mlp-smooth":
        n_in = cin * h * w
        hidden = _MLP_MAPS * _MLP_SPATIAL[0] * _MLP_SPATIAL[1]
        return [
            ("fc1_w", (hidden, n_in), n_in),
            ("fc1_b", (hidden,), n_in),
            ("fc2_w", (num_classes, hidden), hidden),
            ("fc2_b", (num_classes,), hidden),
        ]
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


@dataclass
class ToyModel:
    """A tiny classifier with a designated tap layer."""

    arch: str
    num_classes: int
    seed: int
    in_shape: tuple[int, int, int]
    weights: dict[str, np.ndarray] = field(repr=False)
    tap: str = "act"

    # -- forward paths ------------------------------------------------------

    def _tap_stack(self, image: np.ndarray) -> np.ndarray:
        """Plain-numpy run up to and including the tap, as (n_maps, d)."""
        image = ad.as_tensor(image)
        if image.shape != self.in_shape:
            raise ValueError(f"image shape {image.shape} does not match "
                             f"model input {self.in_shape}")
        if not np.all(np.isfinite(image)):
            raise ValueError("image: non-finite values are not allowed")
        if self.arch in ("cnn-relu", "cnn-smooth"):
            z = ad.add(ad.conv2d(image, self.weights["conv_w"]),
                       self.weights["conv_b"].reshape(-1, 1, 1))
            act = ad.relu(z) if self.arch == "cnn-relu" else ad.silu(z)
            n, ho, wo = act.shape
            return act.reshape(n, ho * wo)
        z = ad.add(ad.matmul(self.weights["fc1_w"], image.reshape(-1)),
                   self.weights["fc1_b"])
        act = ad.tanh(z)
        return act.reshape(_MLP_MAPS, -1)

    def head(self, x):
        """Logits from a tap stack; works on a taped node or a raw array,
        so the taped and untaped paths share every arithmetic step."""
        if self.arch in ("cnn-relu", "cnn-smooth"):
            pooled = ad.mean(x, axis=1)
            return ad.add(ad.matmul(self.weights["fc_w"], pooled), self.weights["fc_b"])
        flat = ad.reshape(x, (self.weights["fc2_w"].shape[1],))
        return ad.add(ad.matmul(self.weights["fc2_w"], flat), self.weights["fc2_b"])

    def tap_spatial(self) -> tuple[int, int]:
        if self.arch in ("cnn-relu", "cnn-smooth"):
            _, h, w = self.in_shape
            return (h - _KERNEL + 1, w - _KERNEL + 1)
        return _MLP_SPATIAL

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Image to logits, no taping."""
        return self.head(self._tap_stack(image))

    def forward_with_tap(self, image: np.ndarray, tap: str = "auto") -> TapRun:
        """Image to logits with the head taped against the tap stack.

        The tape's input "tap" is the activation stack treated as a free
        variable; gradient/hvp against it differentiate the head only.
        """
        if tap not in ("auto", self.tap):
            raise ValueError(f"unknown tap {tap!r}; this model taps {self.tap!r}")
        stack = self._tap_stack(image)
        tape = ad.Tape()
        x = tape.input("tap", stack)
        with tape:
            logits = self.head(x)
        tape.outputs["logits"] = logits
        activations = ActivationStack(maps=stack, spatial=self.tap_spatial(), layer=self.tap)
        return TapRun(logits=logits.value, activations=activations, tape=tape)


def build_model(arch: str, num_classes: int, seed: int,
                in_shape: tuple[int, int, int] = (3, 6, 6)) -> ToyModel:
    """Construct a model with seeded uniform weights.

    Each tensor draws uniform [-0.5, 0.5] scaled by 1/sqrt(fan_in) from one
    generator in a fixed order, so identical (arch, num_classes, seed,
    in_shape) always yields bit-identical weights.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    in_shape = tuple(int(v) for v in in_shape)
    if len(in_shape) != 3 or in_shape[0] not in (1, 3):
        raise ValueError(f"in_shape must be (channels in {{1,3}}, h, w), got {in_shape}")
    if arch in ("cnn-relu", "cnn-smooth") and (in_shape[1] < _KERNEL or in_shape[2] < _KERNEL):
        raise ValueError(f"{arch} needs at least a {_KERNEL}x{_KERNEL} input, got {in_shape}")
    specs = _tensor_specs(arch, num_classes, in_shape)
    rng = np.random.default_rng(seed)
    weights = {name: _init_tensor(rng, shape, fan_in) for name, shape, fan_in in specs}
    return ToyModel(arch=arch, num_classes=num_classes, seed=seed,
                    in_shape=in_shape, weights=weights)


def forward_with_tap(model: ToyModel, image: np.ndarray, tap: str = "auto") -> TapRun:
    return model.forward_with_tap(image, tap=tap)


# ---------------------------------------------------------------------------
# weight serialization


@dataclass
class WeightManifest:
    """JSON header plus raw little-endian float64 payload."""

    header: dict
    payload: bytes

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return struct.pack("<I", len(head)) + head + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightManifest":
        if len(blob) < 4:
            raise ValueError(f"weight blob truncated at byte {len(blob)}: "
                             "missing 4-byte header length")
        (head_len,) = struct.unpack("<I", blob[:4])
        if len(blob) < 4 + head_len:
            raise ValueError(f"weight blob truncated at byte {len(blob)}: "
                             f"header claims {head_len} bytes")
        try:
            header = json.loads(blob[4:4 + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed weight header: {exc}") from None
        payload = blob[4 + head_len:]
        for key in ("arch", "num_classes", "seed", "in_shape", "tensors"):
            if key not in header:
                raise ValueError(f"malformed weight header: missing {key!r}")
        offset = 0
        for entry in header["tensors"]:
            name = entry.get("name", "<unnamed>")
            nbytes = 8 * int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 8
            if entry["offset"] != offset:
                raise ValueError(f"tensor {name!r}: offset {entry['offset']} "
                                 f"does not follow the previous tensor (expected {offset})")
            offset += nbytes
            if len(payload) < offset:
                raise ValueError(f"tensor {name!r}: payload truncated "
                                 f"({len(payload)} bytes, needs {offset})")
        if len(payload) != offset:
            raise ValueError(f"payload has {len(payload) - offset} trailing bytes "
                             "beyond the last tensor")
        return cls(header=header, payload=payload)


def save_weights(model: ToyModel) -> WeightManifest:
    specs = _tensor_specs(model.arch, model.num_classes, model.in_shape)
    tensors = []
    chunks = []
    offset = 0
    for name, shape, _ in specs:
        arr = model.weights[name]
        if arr.shape != shape:
            raise ValueError(f"tensor {name!r}: expected shape {shape}, got {arr.shape}")
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "arch": model.arch,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "in_shape": list(model.in_shape),
        "tensors": tensors,
    }
    return WeightManifest(header=header, payload=b"".join(chunks))


def load_weights(manifest: WeightManifest) -> ToyModel:
    header = manifest.header
    arch = header["arch"]
    num_classes = int(header["num_classes"])
    in_shape = tuple(int(v) for v in header["in_shape"])
    specs = _tensor_specs(arch, num_classes, in_shape)
    expected = {name: shape for name, shape, _ in specs}
    by_name = {entry["name"]: entry for entry in header["tensors"]}
    if set(by_name) != set(expected):
        missing = sorted(set(expected) - set(by_name)) + sorted(set(by_name) - set(expected))
        raise ValueError(f"weight header tensor set does not match {arch}: {missing}")
    weights = {}
    for name, shape, _ in specs:
        entry = by_name[name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"tensor {name!r}: header advertises shape "
                             f"{tuple(entry['shape'])} but {arch} expects {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        flat = np.frombuffer(manifest.payload, dtype="<f8", count=count, offset=start)
        weights[name] = flat.astype(np.float64).reshape(shape)
    return ToyModel(arch=arch, num_classes=num_classes, seed=int(header["seed"]),
                    in_shape=in_shape, weights=weights)


def save_weights_file(model: ToyModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_weights(model).to_bytes())


def load_weights_file(path) -> ToyModel:
    with open(path, "rb") as fh:
        return load_weights(WeightManifest.from_bytes(fh.read()))
