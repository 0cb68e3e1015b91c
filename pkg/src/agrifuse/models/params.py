"""Parameter containers, initialisers and checkpoint I/O."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterator, Tuple

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.serialize import load_array, save_tensor
from agrifuse.autodiff.tensor import Tensor
from agrifuse.errors import CheckpointError


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Buffer:
    """Fixed array that is saved with the model but never trained."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)


class ParamSet:
    """Base for parameter records.

    Trainable tensors, nested records and lists of records stored as instance
    attributes are discovered in attribute order, so names are stable.
    Batch-norm running statistics and ``Buffer`` attributes are saved but
    never trained.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParamSet):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamSet):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, ops.BatchNormState):
                yield f"{name}.running_mean", value.running_mean
                yield f"{name}.running_var", value.running_var
            elif isinstance(value, Buffer):
                yield name, value.value
            elif isinstance(value, ParamSet):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamSet):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = [n for n in params if n not in state]
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, ops.BatchNormState):
                value.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
                value.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)
            elif isinstance(value, Buffer):
                if name not in state:
                    raise CheckpointError(f"checkpoint lacks buffer {name}")
                loaded = np.array(state[name], dtype=np.float64)
                if loaded.shape != value.value.shape:
                    raise CheckpointError(f"{name}: checkpoint shape {loaded.shape} != model shape {value.value.shape}")
                value.value = loaded
            elif isinstance(value, ParamSet):
                value._load_buffers(state, name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamSet):
                        item._load_buffers(state, f"{name}.{i}.")


def save_checkpoint(directory, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    """Write ``manifest.json`` plus one AGT1 file per named tensor."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, value) in enumerate(tensors.items()):
        fname = f"tensors/{i:04d}.agt"
        save_tensor(directory / fname, value)
        entries.append({"name": name, "shape": list(np.shape(value)), "file": fname})
    manifest = {"format": "AGT1-checkpoint", "meta": meta, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> Tuple[Dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "AGT1-checkpoint":
        raise CheckpointError(f"{manifest_path} is not an AGT1 checkpoint manifest")
    tensors = {}
    for entry in manifest["tensors"]:
        value = load_array(directory / entry["file"])
        if list(value.shape) != entry["shape"]:
            raise CheckpointError(f"{entry['name']}: file shape {value.shape} != manifest {entry['shape']}")
        tensors[entry["name"]] = value
    return tensors, manifest["meta"]
