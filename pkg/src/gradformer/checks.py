"""Float64 finite-difference gradient suite over every module and the full model."""

import numpy as np

from . import tensor as T
from .decoder import Decoder
from .encoder import AFRAR
from .fusion import DifferentialAmalgamation
from .glfr import GLFR
from .layers import ConvMlp, ConvTranspose2d, Conv2d, InstanceNorm2d
from .model import build, tiny_config
from .sea import SEA
from .training import cross_entropy_loss, focal_loss, miou_loss


def _probe_indices(tensors, per_tensor, rng):
    """All elements of small tensors, a random subset of larger ones."""
    picks = {}
    for pos, t in enumerate(tensors):
        if per_tensor is not None and t.size > per_tensor:
            picks[pos] = rng.choice(t.size, per_tensor, replace=False)
    return picks


def check_module(module, inputs, step=1e-6, tol=1e-5, per_tensor=None, seed=0):
    """Gradcheck ``sum(module(*inputs) * R)`` for a fixed random ``R`` with
    respect to the inputs and every parameter."""
    rng = np.random.default_rng(seed)
    inputs = [T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    params = module.parameters()
    with T.no_grad():
        probe = module(*inputs)
    weights = rng.standard_normal(probe.shape)
    n_in = len(inputs)

    def f(*ts):
        return T.sum(module(*ts[:n_in]) * weights)

    tensors = inputs + params
    return T.gradcheck(f, tensors, step=step, tol=tol, indices=_probe_indices(tensors, per_tensor, rng))


def check_loss(loss_fn, shape=(2, 2, 4, 4), step=1e-6, tol=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    logits = T.Tensor(rng.standard_normal(shape), requires_grad=True)
    target = rng.integers(0, 2, size=(shape[0],) + shape[2:])
    return T.gradcheck(lambda x: loss_fn(x, target), logits, step=step, tol=tol)


def check_model(cfg=None, size=32, step=1e-4, tol=1e-5, per_tensor=3, seed=0):
    """Cross-entropy gradient of a tiny model w.r.t. sampled elements of every
    parameter tensor and both input images."""
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        model = build(cfg or tiny_config())
    pre = T.Tensor(rng.uniform(size=(1, 3, size, size)), requires_grad=True)
    post = T.Tensor(rng.uniform(size=(1, 3, size, size)), requires_grad=True)
    target = rng.integers(0, 2, size=(1, size, size))

    def f(a, b, *_):
        return cross_entropy_loss(model(a, b), target)

    tensors = [pre, post] + model.parameters()
    return T.gradcheck(f, tensors, step=step, tol=tol, indices=_probe_indices(tensors, per_tensor, rng))


class _ListInput:
    """Adapts a module taking one list of tensors to positional inputs."""

    def __init__(self, module):
        self.module = module

    def parameters(self):
        return self.module.parameters()

    def __call__(self, *inputs):
        return self.module(list(inputs))


def _randomize(module, rng, scale=0.5):
    """Move parameters off their (often degenerate) initial values."""
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return module


def suite(tol=1e-5, seed=0):
    """Yield ``(name, report)`` for each module check, ending with the full model."""
    rng = np.random.default_rng(seed)
    x = lambda *shape: rng.standard_normal(shape)  # noqa: E731
    checks = [
        ("conv2d", lambda: check_module(Conv2d(3, 4, 3, stride=2, padding=1, rng=rng), [x(2, 3, 6, 6)], tol=tol)),
        ("conv_transpose2d", lambda: check_module(ConvTranspose2d(3, 2, 2, 2, rng=rng), [x(2, 3, 3, 3)], tol=tol)),
        ("instance_norm", lambda: check_module(_randomize(InstanceNorm2d(3), rng), [x(2, 3, 4, 4)], tol=tol)),
        ("conv_mlp", lambda: check_module(ConvMlp(4, 4, rng=rng), [x(2, 4, 3, 3)], tol=tol)),
        ("sea", lambda: check_module(_randomize(SEA(4), rng), [x(2, 4, 3, 3)], tol=tol)),
        ("glfr", lambda: check_module(GLFR(16, rng=rng), [x(2, 8, 3, 3)], tol=tol)),
        ("afrar", lambda: check_module(_randomize(AFRAR(16, rng=rng), rng, 0.2), [x(1, 16, 3, 3)], tol=tol)),
        ("da", lambda: check_module(DifferentialAmalgamation(4, rng=rng), [x(2, 4, 3, 3), x(2, 4, 3, 3)], tol=tol)),
        ("decoder", lambda: check_module(
            _ListInput(Decoder((16, 32, 48, 64), 8, rng=rng)),
            [x(1, 16, 8, 8), x(1, 32, 4, 4), x(1, 48, 2, 2), x(1, 64, 1, 1)], tol=tol, per_tensor=12)),
        ("cross_entropy", lambda: check_loss(cross_entropy_loss, tol=tol)),
        ("focal", lambda: check_loss(focal_loss, tol=tol)),
        ("miou", lambda: check_loss(miou_loss, tol=tol)),
        ("model", lambda: check_model(tol=tol)),
    ]
    for name, run in checks:
        with T.float64_mode():
            report = run()
        yield name, report
