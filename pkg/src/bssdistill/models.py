"""Small classifiers (MLP, tiny CNN) acting as teacher or student.

A model is a :class:`ClassifierSpec` plus a flat list of float64 parameter
arrays. ``forward`` builds an autodiff graph; ``logits`` / ``predict`` are
the plain-array conveniences used by attacks and evaluation.
"""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "none": None}


class SpecError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | maxpool | avgpool
    size: int = 0  # width for dense, output channels for conv, window for pooling
    activation: str = "none"
    kernel: int = 3
    padding: int = 0


@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            num_classes=int(d["num_classes"]),
        )


def mlp_spec(input_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "relu") -> ClassifierSpec:
    layers = [LayerSpec("dense", int(w), activation) for w in hidden]
    layers.append(LayerSpec("dense", num_classes, "none"))
    return ClassifierSpec((int(input_dim),), tuple(layers), int(num_classes))


def tiny_cnn_spec(
    input_shape: Sequence[int],
    num_classes: int,
    channels: Sequence[int] = (4, 8),
    kernel: int = 3,
    pool: int = 2,
) -> ClassifierSpec:
    """Two conv+pool stages followed by one dense layer."""
    layers = []
    for c in channels:
        layers.append(LayerSpec("conv", int(c), "relu", kernel=kernel, padding=kernel // 2))
        layers.append(LayerSpec("maxpool", pool))
    layers.append(LayerSpec("dense", num_classes, "none"))
    return ClassifierSpec(tuple(int(v) for v in input_shape), tuple(layers), int(num_classes))


def _plan(spec: ClassifierSpec) -> list[tuple[int, ...]]:
    """Validate ``spec`` and return the parameter shapes in order."""
    if spec.num_classes < 2:
        raise SpecError("need at least two classes")
    if not spec.layers:
        raise SpecError("spec has no layers")
    if spec.layers[-1].kind != "dense" or spec.layers[-1].size != spec.num_classes:
        raise SpecError("final layer must be dense with width equal to the class count")
    if any(s <= 0 for s in spec.input_shape):
        raise SpecError(f"bad input shape {spec.input_shape}")
    shape = tuple(spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        if layer.activation not in _ACTIVATIONS:
            raise SpecError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.kind == "dense":
            if layer.size <= 0:
                raise SpecError(f"layer {i}: dense width must be positive")
            fan_in = int(np.prod(shape))
            shapes += [(layer.size, fan_in), (layer.size,)]
            shape = (layer.size,)
        elif layer.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            h, w = h + 2 * layer.padding - layer.kernel + 1, w + 2 * layer.padding - layer.kernel + 1
            if layer.size <= 0 or h <= 0 or w <= 0:
                raise SpecError(f"layer {i}: conv does not fit input {shape}")
            shapes += [(layer.size, c, layer.kernel, layer.kernel), (layer.size,)]
            shape = (layer.size, h, w)
        elif layer.kind in ("maxpool", "avgpool"):
            if len(shape) != 3 or layer.size <= 0 or shape[1] < layer.size or shape[2] < layer.size:
                raise SpecError(f"layer {i}: cannot pool {shape} with window {layer.size}")
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        else:
            raise SpecError(f"layer {i}: unknown kind {layer.kind!r}")
    return shapes


@dataclass
class ClassifierModel:
    spec: ClassifierSpec
    params: list[np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = _plan(self.spec)
        if [p.shape for p in self.params] != shapes:
            raise SpecError("parameter shapes do not match spec")
        for p in self.params:
            if not np.isfinite(p).all():
                raise ad.NonFiniteError("model parameters contain non-finite values")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.spec, [p.copy() for p in self.params], copy.deepcopy(self.provenance))

    def forward(self, x, params: Sequence[ad.Tensor] | None = None) -> ad.Tensor:
        """Logit tensor for a batch ``x`` shaped ``(B, *input_shape)``."""
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ad.ShapeError(f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}")
        if params is None:
            params = [ad.Tensor(p, _checked=True) for p in self.params]
        h = x
        it = iter(params)
        for layer in self.spec.layers:
            if layer.kind == "dense":
                if h.data.ndim != 2:
                    h = ad.reshape(h, (h.shape[0], -1))
                h = ad.affine(h, next(it), next(it))
            elif layer.kind == "conv":
                h = ad.conv2d(h, next(it), next(it), padding=layer.padding)
            elif layer.kind == "maxpool":
                h = ad.max_pool2d(h, layer.size)
            else:
                h = ad.avg_pool2d(h, layer.size)
            act = _ACTIVATIONS[layer.activation]
            if act is not None:
                h = act(h)
        return h


def init(spec: ClassifierSpec, seed: int, run_id: str = "") -> ClassifierModel:
    """Fan-in scaled normal weights (He scaling), zero biases."""
    shapes = _plan(spec)
    rng = np.random.default_rng(seed)
    params = []
    for shape in shapes:
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return ClassifierModel(spec, params, {"seed": int(seed), "run_id": run_id})


def _batched(model: ClassifierModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.spec.input_shape:
        return x[None], True
    return x, False


def logits(model: ClassifierModel, x) -> np.ndarray:
    xb, single = _batched(model, x)
    z = model.forward(ad.Tensor(xb)).data
    return z[0] if single else z


def class_probabilities(model: ClassifierModel, x, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return ad.softmax_np(logits(model, x) / temperature)


def predict(model: ClassifierModel, x) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits(model, x), axis=-1)


def accuracy(model: ClassifierModel, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def save(model: ClassifierModel, path) -> None:
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "provenance": model.provenance,
        "num_params": len(model.params),
    }
    arrays = {f"param_{i:03d}": p for i, p in enumerate(model.params)}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load(path) -> ClassifierModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(bytes(f["__meta__"]).decode())
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise ModelFormatError(f"unsupported model format version {version!r} (expected {FORMAT_VERSION})")
            params = [f[f"param_{i:03d}"].astype(np.float64) for i in range(meta["num_params"])]
    except ModelFormatError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise ModelFormatError(f"cannot read model file {path} (format version {FORMAT_VERSION} expected): {exc}") from exc
    spec = ClassifierSpec.from_dict(meta["spec"])
    try:
        return ClassifierModel(spec, params, meta.get("provenance", {}))
    except SpecError as exc:
        raise ModelFormatError(f"model file {path} is inconsistent: {exc}") from exc
