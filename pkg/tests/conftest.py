import numpy as np
import pytest

from ssa_nowcast.models import HorizonSpec, Mode, ModelConfig, SynthParams
from ssa_nowcast.nn.module import Tape
from ssa_nowcast.services.data_service import synth_generate
from ssa_nowcast.tensor.ops import DifferentiableOp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny(in_channels=12, out_channels=6)


@pytest.fixture
def blob_sequence():
    """Short advected-blob sequence at 32x32."""
    return synth_generate(40, 32, 32, seed=3, params=SynthParams(n_blobs=3, sigma_range=(3.0, 6.0)))


@pytest.fixture
def six_out():
    return HorizonSpec.for_outputs(6)


@pytest.fixture
def module_op():
    """Wrap a module as a DifferentiableOp over its input and, optionally, one parameter."""

    def factory(module, mode=Mode.TRAIN, param=None):
        def forward(x, value=None):
            if param is not None:
                param.value = value
            tape = Tape()
            return module(x, mode, tape), tape

        def backward(tape, grad_out):
            module.zero_grad()
            grad_x = module.backprop(grad_out, tape)
            if param is None:
                return (grad_x,)
            return grad_x, param.grad.copy()

        return DifferentiableOp(type(module).__name__, forward, backward)

    return factory
