"""Parameter containers with '/'-namespaced names."""

from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from src.tensor.core import Tensor
from src.tensor.random import uniform_init
from src.utils.errors import ShapeError


class Module:
    """
    Holds parameters under ``prefix`` and child modules.

    Parameters are created in declaration order, so initialization from a
    shared generator is reproducible.
    """

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._params: Dict[str, Tensor] = {}
        self._modules: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        full_name = f"{self.prefix}/{name}" if self.prefix else name
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=full_name)
        self._params[name] = tensor
        return tensor

    def uniform_param(self, name: str, shape, rng: np.random.Generator, fan_in: Optional[int] = None) -> Tensor:
        fan_in = fan_in if fan_in is not None else shape[0]
        return self.add_param(name, uniform_init(rng, shape, fan_in))

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for tensor in self._params.values():
            yield tensor.name, tensor
        for module in self._modules.values():
            yield from module.named_parameters()

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, tensor in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {tensor.shape}")
            tensor.data = value.copy()
