"""Flat parameter vectors and the multilayer-perceptron classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from ..rng import Xoshiro256
from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _check_layout(layout) -> int:
    offset = 0
    for entry in layout:
        if entry.offset != offset:
            raise DimensionError(f"layout entry {entry.name!r} at offset {entry.offset}, expected {offset}")
        offset += entry.size
    return offset


class ParamVector:
    """A point in parameter space: one flat float32 vector plus its layout.

    Instances are immutable snapshots; every update produces a new vector.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        layout = tuple(layout)
        total = _check_layout(layout)
        arr = np.array(values, dtype=np.float32).reshape(-1)
        if arr.size != total:
            raise DimensionError(f"parameter vector has {arr.size} values, layout needs {total}")
        arr.setflags(write=False)
        self.values = arr
        self.layout = layout

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.values), other.layout)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self):
        return f"ParamVector(n={len(self)}, entries={[e.name for e in self.layout]})"

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def view(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def items(self):
        for entry in self.layout:
            yield entry, self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)

    def leaves(self, requires_grad: bool = True) -> list[Tensor]:
        """One leaf tensor per layout entry, tagged so :func:`backward` can reassemble gradients."""
        binding = _Binding(self.layout)
        out = []
        for entry, arr in self.items():
            leaf = Tensor(arr.copy(), requires_grad=requires_grad)
            leaf.param_ref = (binding, entry)
            out.append(leaf)
        return out

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


class _Binding:
    __slots__ = ("layout",)

    def __init__(self, layout):
        self.layout = layout


def backward(loss: Tensor) -> ParamVector:
    """Run reverse mode from a scalar loss and return the gradient as a ParamVector.

    Parameters that do not influence the loss get exactly zero gradient.
    """
    loss.backward()
    leaves = [n for n in T._topo(loss) if n.param_ref is not None and n.requires_grad]
    bindings = {id(leaf.param_ref[0]): leaf.param_ref[0] for leaf in leaves}
    if len(bindings) != 1:
        raise ContractError(f"loss depends on {len(bindings)} trainable parameter sets, expected 1")
    binding = next(iter(bindings.values()))
    flat = np.zeros(_check_layout(binding.layout), dtype=np.float32)
    for leaf in leaves:
        entry = leaf.param_ref[1]
        flat[entry.offset : entry.offset + entry.size] = leaf.grad.reshape(-1)
    return ParamVector(flat, binding.layout)


def grads_from_leaves(leaves, grads) -> ParamVector:
    """Assemble per-leaf gradient tensors (from :func:`tensor.grad`) into a ParamVector."""
    layout = leaves[0].param_ref[0].layout
    flat = np.zeros(_check_layout(layout), dtype=np.float32)
    for leaf, g in zip(leaves, grads):
        if g is not None:
            entry = leaf.param_ref[1]
            flat[entry.offset : entry.offset + entry.size] = g.data.reshape(-1)
    return ParamVector(flat, layout)


@dataclass(frozen=True)
class Arch:
    """Architecture of an MLP classifier: ``(input, hidden..., classes)``."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must have >= 2 positive entries, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def num_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    @property
    def classes(self) -> int:
        return self.layer_dims[-1]

    def layout(self) -> tuple[LayoutEntry, ...]:
        entries, offset = [], 0
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            entries.append(LayoutEntry(f"layers.{i}.weight", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            entries.append(LayoutEntry(f"layers.{i}.bias", (fan_out,), offset))
            offset += fan_out
        return tuple(entries)

    def init_params(self, seed: int) -> ParamVector:
        """Glorot-uniform weights drawn from the portable generator; zero biases."""
        rng = Xoshiro256.derived(seed, "init", *self.layer_dims)
        chunks = []
        for entry in self.layout():
            if entry.name.endswith("weight"):
                fan_in, fan_out = entry.shape
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                chunks.append(rng.uniform_array(entry.size, -limit, limit))
            else:
                chunks.append(np.zeros(entry.size))
        return ParamVector(np.concatenate(chunks), self.layout())

    def build(self, params: ParamVector | None = None, seed: int = 0) -> "MlpModel":
        return MlpModel(self, params if params is not None else self.init_params(seed))


class MlpModel:
    """Fully connected classifier ``x -> act(x W0 + b0) -> ... -> logits``."""

    def __init__(self, arch: Arch, params: ParamVector):
        if len(params) != arch.num_params:
            raise DimensionError(f"{arch.layer_dims} needs {arch.num_params} parameters, got {len(params)}")
        self.arch = arch
        self.params = params

    @property
    def layer_dims(self):
        return self.arch.layer_dims

    @property
    def activation(self):
        return self.arch.activation

    def with_params(self, params: ParamVector) -> "MlpModel":
        return MlpModel(self.arch, params)

    def forward(self, x, leaves=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.arch.layer_dims[0]:
            raise DimensionError(
                f"input shape {x.shape} does not match model input width {self.arch.layer_dims[0]}"
            )
        if leaves is None:
            leaves = self.params.leaves(requires_grad=False)
        act = T.relu if self.arch.activation == "relu" else T.tanh
        h = x
        n_layers = len(leaves) // 2
        for i in range(n_layers):
            h = h @ leaves[2 * i] + leaves[2 * i + 1]
            if i < n_layers - 1:
                h = act(h)
        return h

    def logits(self, x) -> np.ndarray:
        """Evaluation-only forward pass returning a float32 array."""
        with T.no_grad():
            return self.forward(x).data


def forward_logits(model: MlpModel, x) -> Tensor:
    return model.forward(x)


def flatten(model: MlpModel) -> ParamVector:
    return model.params


def unflatten(model: MlpModel, v) -> None:
    values = v.values if isinstance(v, ParamVector) else np.asarray(v)
    if values.size != model.arch.num_params:
        raise DimensionError(f"expected {model.arch.num_params} values, got {values.size}")
    model.params = ParamVector(values, model.arch.layout())
