"""Layer plumbing: parameters, the module tree, and the forward/backward tape."""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from ..errors import UsageError
from ..models import Mode
from ..tensor import ops
from ..tensor.tensor import Tensor


@dataclass
class Parameter:
    """A named trainable tensor with its gradient accumulator."""
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class Tape:
    """Private record of one forward pass.

    Holds the op contexts each module needs for backward, plus the activations
    and output gradients of any module whose path is in ``capture``.
    """
    capture: Set[str] = field(default_factory=set)
    accumulate_grads: bool = True
    _contexts: Dict[int, List[object]] = field(default_factory=dict)
    activations: Dict[str, Tensor] = field(default_factory=dict)
    gradients: Dict[str, Tensor] = field(default_factory=dict)

    def push(self, module: "Module", saved):
        self._contexts.setdefault(id(module), []).append(saved)

    def pop(self, module: "Module"):
        stack = self._contexts.get(id(module))
        if not stack:
            raise UsageError(f"no forward context recorded for module '{module.path or type(module).__name__}'")
        return stack.pop()


class Module:
    """Base class of every layer; children and parameters are registered by name."""

    def __init__(self):
        self._parameters: "OrderedDict[str, Parameter]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.path = ""

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        param = Parameter(name=name, value=value)
        self._parameters[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def assign_paths(self, prefix: str = ""):
        self.path = prefix
        for name, param in self._parameters.items():
            param.name = f"{prefix}.{name}" if prefix else name
        for name, child in self._children.items():
            child.assign_paths(f"{prefix}.{name}" if prefix else name)

    def named_modules(self) -> Iterator[Tuple[str, "Module"]]:
        yield self.path, self
        for child in self._children.values():
            yield from child.named_modules()

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for param in self._parameters.values():
            yield param.name, param
        for child in self._children.values():
            yield from child.named_parameters()

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Non-trainable state (batch-norm running statistics)."""
        for child in self._children.values():
            yield from child.buffers()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for _, module in self.named_modules():
            module._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        pass

    def __call__(self, x: Tensor, mode: Mode = Mode.EVAL, tape: Optional[Tape] = None) -> Tensor:
        out = self.forward(x, mode, tape)
        if tape is not None and self.path in tape.capture:
            tape.activations[self.path] = out
        return out

    def backprop(self, grad_out: Tensor, tape: Tape) -> Tensor:
        if self.path in tape.capture:
            tape.gradients[self.path] = grad_out
        return self.backward(grad_out, tape)

    def forward(self, x: Tensor, mode: Mode, tape: Optional[Tape]) -> Tensor:
        raise NotImplementedError()

    def backward(self, grad_out: Tensor, tape: Tape) -> Tensor:
        raise NotImplementedError()

    @staticmethod
    def _accumulate(tape: Tape, param: Parameter, grad: Optional[np.ndarray]):
        if tape.accumulate_grads and grad is not None:
            param.grad += grad.astype(param.grad.dtype, copy=False)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Grouped convolution with "same" padding and stride 1."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, groups: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = self.add_parameter(
            "weight", kaiming_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in))
        self.bias = self.add_parameter("bias", np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x, mode, tape):
        out, ctx = ops.conv2d(x, self.weight.value, None if self.bias is None else self.bias.value,
                              stride=1, padding=self.kernel_size // 2, groups=self.groups)
        if tape is not None:
            tape.push(self, ctx)
        return out

    def backward(self, grad_out, tape):
        grad_x, grad_w, grad_b = ops.conv2d_backward(tape.pop(self), grad_out)
        self._accumulate(tape, self.weight, grad_w)
        if self.bias is not None:
            self._accumulate(tape, self.bias, grad_b)
        return grad_x


class BatchNorm2d(Module):

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.add_parameter("gamma", np.ones(channels, dtype=np.float32))
        self.beta = self.add_parameter("beta", np.zeros(channels, dtype=np.float32))
        self.running = ops.RunningStats.create(channels)

    def buffers(self):
        yield f"{self.path}.running_mean", self.running.mean
        yield f"{self.path}.running_var", self.running.var

    def _cast_buffers(self, dtype):
        self.running = ops.RunningStats(self.running.mean.astype(dtype), self.running.var.astype(dtype))

    def forward(self, x, mode, tape):
        out, ctx = ops.batch_norm(x, self.gamma.value, self.beta.value, self.running, mode)
        if tape is not None:
            tape.push(self, ctx)
        return out

    def backward(self, grad_out, tape):
        grad_x, grad_gamma, grad_beta = ops.batch_norm_backward(tape.pop(self), grad_out)
        self._accumulate(tape, self.gamma, grad_gamma)
        self._accumulate(tape, self.beta, grad_beta)
        return grad_x


class ReLU(Module):

    def forward(self, x, mode, tape):
        out, ctx = ops.relu(x)
        if tape is not None:
            tape.push(self, ctx)
        return out

    def backward(self, grad_out, tape):
        return ops.relu_backward(tape.pop(self), grad_out)[0]


class Sequential(Module):
    """Children applied in registration order."""

    def __init__(self, **layers: Module):
        super().__init__()
        for name, layer in layers.items():
            self.add_module(name, layer)

    def forward(self, x, mode, tape):
        for child in self._children.values():
            x = child(x, mode, tape)
        return x

    def backward(self, grad_out, tape):
        for child in reversed(list(self._children.values())):
            grad_out = child.backprop(grad_out, tape)
        return grad_out
