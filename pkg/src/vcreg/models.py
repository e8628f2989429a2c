"""Small MLP and CNN classifiers with named representation boundaries."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

# hook(name, tensor) -> tensor that continues downstream
Hook = Callable[[str, Tensor], Tensor]


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...] = (2, 128, 128, 2)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("an MLP needs at least input, one hidden and output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ConvNetSpec:
    in_channels: int = 1
    blocks: tuple[ConvBlock, ...] = (ConvBlock(4, 3, 1), ConvBlock(8, 3, 2))
    classes: int = 2

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.blocks)
        if len(blocks) < 2:
            raise ValueError("a ConvNet needs at least 2 blocks")
        for b in blocks:
            if b.channels <= 0 or b.kernel <= 0 or b.stride <= 0:
                raise ValueError(f"invalid block {b}")
            if b.kernel % 2 == 0:
                raise ValueError("kernel sizes must be odd")
        if self.in_channels <= 0 or self.classes <= 0:
            raise ValueError("in_channels and classes must be positive")
        object.__setattr__(self, "blocks", blocks)


class Model:
    """Common surface: ordered parameters, boundaries, forward."""

    kind: str
    params: dict[str, Tensor]
    block_names: list[str]
    downsample_names: list[str]
    penultimate: str

    @property
    def boundaries(self) -> list[str]:
        raise NotImplementedError

    def forward_with_features(self, x, hook: Hook | None = None) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError

    def forward(self, x, hook: Hook | None = None) -> Tensor:
        return self.forward_with_features(x, hook)[0]

    def __call__(self, x, hook: Hook | None = None) -> Tensor:
        return self.forward(x, hook)

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(x).data.argmax(axis=1)

    def features(self, x, name: str | None = None) -> np.ndarray:
        with T.no_grad():
            _, feats = self.forward_with_features(x)
        return feats[name or self.penultimate].data

    def spec_dict(self) -> dict:
        raise NotImplementedError

    def clone(self) -> "Model":
        other = build_model(self.spec_dict(), seed=0)
        for k, p in self.params.items():
            other.params[k].assign(p.data)
        return other


class MLP(Model):
    kind = "mlp"

    def __init__(self, spec: MlpSpec, seed: int):
        self.spec = spec
        gen = T.rng(seed)
        widths = spec.layer_widths
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self.params[f"fc{i}.weight"] = T.parameter(
                T.he_normal(gen, (fan_in, fan_out), fan_in), name=f"fc{i}.weight")
            self.params[f"fc{i}.bias"] = T.parameter(np.zeros(fan_out), name=f"fc{i}.bias")
        self.block_names = [f"block{i}" for i in range(1, len(widths) - 1)]
        self.downsample_names = []
        self.penultimate = self.block_names[-1]

    @property
    def boundaries(self) -> list[str]:
        return list(self.block_names)

    def forward_with_features(self, x, hook=None):
        h = T.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.spec.layer_widths[0]:
            raise T.ShapeError(f"MLP expects (N, {self.spec.layer_widths[0]}) input, got {h.shape}")
        feats = {}
        n_layers = len(self.spec.layer_widths) - 1
        for i in range(1, n_layers + 1):
            h = T.add(T.matmul(h, self.params[f"fc{i}.weight"]), self.params[f"fc{i}.bias"])
            if i < n_layers:
                h = T.relu(h)
                name = f"block{i}"
                if hook is not None:
                    h = hook(name, h)
                feats[name] = h
        return h, feats

    def spec_dict(self) -> dict:
        return {"kind": "mlp", "layer_widths": list(self.spec.layer_widths)}


class ConvNet(Model):
    """conv3x3 + relu blocks; a strided block starts with a linear downsample
    conv whose output is its own boundary. Global average pool + linear head."""

    kind = "convnet"

    def __init__(self, spec: ConvNetSpec, seed: int):
        self.spec = spec
        gen = T.rng(seed)
        self.params = {}
        self.block_names, self.downsample_names = [], []
        c_in = spec.in_channels
        for i, b in enumerate(spec.blocks, start=1):
            if b.stride > 1:
                fan = c_in * b.kernel * b.kernel
                self.params[f"down{i}.weight"] = T.parameter(
                    T.he_normal(gen, (b.channels, c_in, b.kernel, b.kernel), fan), name=f"down{i}.weight")
                self.params[f"down{i}.bias"] = T.parameter(np.zeros(b.channels), name=f"down{i}.bias")
                self.downsample_names.append(f"down{i}")
                c_in = b.channels
            fan = c_in * b.kernel * b.kernel
            self.params[f"block{i}.weight"] = T.parameter(
                T.he_normal(gen, (b.channels, c_in, b.kernel, b.kernel), fan), name=f"block{i}.weight")
            self.params[f"block{i}.bias"] = T.parameter(np.zeros(b.channels), name=f"block{i}.bias")
            self.block_names.append(f"block{i}")
            c_in = b.channels
        self.params["head.weight"] = T.parameter(
            T.he_normal(gen, (c_in, spec.classes), c_in), name="head.weight")
        self.params["head.bias"] = T.parameter(np.zeros(spec.classes), name="head.bias")
        self.penultimate = "pool"

    @property
    def boundaries(self) -> list[str]:
        names = []
        for i, b in enumerate(self.spec.blocks, start=1):
            if b.stride > 1:
                names.append(f"down{i}")
            names.append(f"block{i}")
        return names + ["pool"]

    def _conv(self, h, prefix, stride):
        w = self.params[f"{prefix}.weight"]
        pad = w.shape[-1] // 2
        out = T.conv2d(h, w, stride=stride, padding=pad)
        return T.add(out, T.reshape(self.params[f"{prefix}.bias"], (1, -1, 1, 1)))

    def forward_with_features(self, x, hook=None):
        h = T.as_tensor(x)
        if h.ndim != 4 or h.shape[1] != self.spec.in_channels:
            raise T.ShapeError(f"ConvNet expects (N, {self.spec.in_channels}, H, W) input, got {h.shape}")
        feats = {}

        def site(name, t):
            if hook is not None:
                t = hook(name, t)
            feats[name] = t
            return t

        for i, b in enumerate(self.spec.blocks, start=1):
            if b.stride > 1:
                h = site(f"down{i}", self._conv(h, f"down{i}", b.stride))
            h = site(f"block{i}", T.relu(self._conv(h, f"block{i}", 1)))
        h = site("pool", T.mean_over_axis(h, (2, 3)))
        logits = T.add(T.matmul(h, self.params["head.weight"]), self.params["head.bias"])
        return logits, feats

    def spec_dict(self) -> dict:
        return {
            "kind": "convnet",
            "in_channels": self.spec.in_channels,
            "blocks": [list(asdict(b).values()) for b in self.spec.blocks],
            "classes": self.spec.classes,
        }


def build_mlp(spec: MlpSpec, seed: int) -> MLP:
    return MLP(spec, seed)


def build_convnet(spec: ConvNetSpec, seed: int) -> ConvNet:
    return ConvNet(spec, seed)


def build_model(spec: dict, seed: int) -> Model:
    kind = spec.get("kind")
    if kind == "mlp":
        return build_mlp(MlpSpec(tuple(spec["layer_widths"])), seed)
    if kind == "convnet":
        return build_convnet(ConvNetSpec(
            in_channels=spec["in_channels"],
            blocks=tuple(ConvBlock(*b) for b in spec["blocks"]),
            classes=spec["classes"]), seed)
    raise ValueError(f"unknown model kind {kind!r}")


def forward_with_features(model: Model, x, hook: Hook | None = None):
    return model.forward_with_features(x, hook)


# --------------------------------------------------------------------------
# checkpoints: <stem>.bin holds raw little-endian float64 buffers, <stem>.json
# the manifest of names, shapes and byte offsets.


def save_checkpoint(model: Model, path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    bin_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset, chunks = [], 0, []
    for name, p in model.params.items():
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format": "vcreg-checkpoint/1", "model": model.spec_dict(), "tensors": entries}
    tmp = bin_path.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(bin_path)
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(manifest_path)
    return bin_path, manifest_path


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    model = build_model(manifest["model"], seed=0)
    for e in manifest["tensors"]:
        if e["name"] not in model.params:
            raise ValueError(f"checkpoint tensor {e['name']!r} not in model")
        arr = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        model.params[e["name"]].assign(arr.reshape(e["shape"]))
    return model
