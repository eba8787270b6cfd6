"""
Base class for trainable components.

Every model piece in rtdesk (backbone, TokenLearner, transformer, heads)
derives from ``Module``, which keeps an ordered registry of parameters and
child modules so that parameter sets can be enumerated, saved and restored
by name.
"""
from abc import ABC
from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import CheckpointFormatError
from .numerics import Tensor


class Module(ABC):
    """
    Abstract base class for all trainable components.

    Subclasses register parameters with ``add_parameter`` and sub-modules
    with ``add_module`` and implement their own forward methods.
    """

    def __init__(self):
        self._parameters: "OrderedDict[str, Tensor]" = OrderedDict()
        self._modules: "OrderedDict[str, Module]" = OrderedDict()

    def add_parameter(self, name: str, value: np.ndarray) -> Tensor:
        """
        Register a trainable tensor.

        Args:
            name: Local parameter name (no dots)
            value: Initial value

        Returns:
            The registered leaf tensor
        """
        tensor = Tensor(value, requires_grad=True)
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def freeze(self) -> None:
        """Stop gradient accumulation for every parameter of this module."""
        for _, tensor in self.named_parameters():
            tensor.requires_grad = False
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Restore parameter values by name.

        Args:
            state: Mapping of dotted parameter names to arrays
            strict: Require the key sets to match exactly
        """
        own = self.parameters()
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise CheckpointFormatError(
                    f"Parameter set mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
                )
        for name, tensor in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise CheckpointFormatError(
                    f"Parameter '{name}' has shape {value.shape}, expected {tensor.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype, copy=True)
            if tensor.requires_grad:
                tensor.zero_grad()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(parameters={self.num_parameters()})"
