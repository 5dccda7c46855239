"""Central finite-difference checks of the analytic gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, backward

EPS = 1e-5
OP_TOLERANCE = 1e-6
NETWORK_TOLERANCE = 1e-4
# smaller step for the whole network: at 1e-5 perturbations regularly cross
# relu/max-pool kinks amplified by batchnorm on 1x1 and 2x2 feature maps
NETWORK_EPS = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the larger gradient's max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, index=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``arr`` (perturbed in place).

    ``index`` restricts the check to a list of flat positions; other entries stay 0.
    """
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def check_function(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)`` for a random R."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    backward(F.sum(F.mul(out, Tensor(proj))))

    def value() -> float:
        return float(np.sum(fn(*[Tensor(t.data) for t in leaves]).data * proj))

    worst = 0.0
    for t in leaves:
        num = numeric_gradient(value, t.data)
        worst = max(worst, relative_error(t.grad, num))
    return worst


# --- per-op random instances ----------------------------------------------


def _distinct(rng, shape):
    """Values with pairwise gaps >= 0.01, so pooling winners are stable under eps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 1e-3, n)).reshape(shape) - n * 0.005


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _off_bounds(rng, shape):
    """Magnitudes in [0.1, 0.4] or [0.6, 1.0]: never within eps of the +-0.5 clip bounds."""
    mag = np.where(rng.random(shape) < 0.5, rng.uniform(0.1, 0.4, shape), rng.uniform(0.6, 1.0, shape))
    return rng.choice([-1.0, 1.0], size=shape) * mag


def _small_nchw(rng, even=False):
    b, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(1, 4, size=2) * 2 if even else rng.integers(3, 7, size=2)
    return (int(b), int(c), int(h), int(w))


def _conv_case(rng):
    shape = _small_nchw(rng)
    kh, kw = [(1, 1), (3, 3), (1, 3), (3, 1), (5, 5), (3, 5)][rng.integers(6)]
    dil = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    cout = int(rng.integers(1, 4))
    arrays = [rng.standard_normal(shape), rng.standard_normal((cout, shape[1], kh, kw)), rng.standard_normal(cout)]
    return (lambda x, k, b: F.conv2d(x, k, b, dilation=dil)), arrays


def _bn_case(rng, training):
    shape = _small_nchw(rng)
    c = shape[1]
    if training and shape[0] * shape[2] * shape[3] < 2:
        shape = (2,) + shape[1:]
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def fn(x, g, b):
        return F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=training)

    return fn, [rng.standard_normal(shape), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def _concat_case(rng):
    b, _, h, w = _small_nchw(rng)
    arrays = [rng.standard_normal((b, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
    return (lambda *xs: F.concat(xs)), arrays


def _add_case(rng):
    shape = _small_nchw(rng)
    arrays = [rng.standard_normal(shape) for _ in range(int(rng.integers(2, 4)))]
    return (lambda *xs: F.add_n(xs)), arrays


def _slice_case(rng):
    shape = _small_nchw(rng)
    c = shape[1]
    start = int(rng.integers(0, c))
    stop = int(rng.integers(start + 1, c + 1))
    return (lambda x: F.channel_slice(x, start, stop)), [rng.standard_normal(shape)]


OP_CASES: dict[str, Callable[[np.random.Generator], tuple]] = {
    "conv2d": _conv_case,
    "maxpool2d": lambda rng: (F.maxpool2d, [_distinct(rng, _small_nchw(rng, even=True))]),
    "avgpool2d": lambda rng: (F.avgpool2d, [rng.standard_normal(_small_nchw(rng, even=True))]),
    "upsample2x": lambda rng: (F.upsample2x, [rng.standard_normal(_small_nchw(rng))]),
    "concat": _concat_case,
    "add": _add_case,
    "slice": _slice_case,
    "relu": lambda rng: (F.relu, [_away_from_zero(rng, _small_nchw(rng))]),
    "softmax": lambda rng: (F.softmax_channels, [rng.standard_normal(_small_nchw(rng))]),
    "batchnorm2d": lambda rng: _bn_case(rng, training=True),
    "batchnorm2d_eval": lambda rng: _bn_case(rng, training=False),
    "log": lambda rng: (F.log, [rng.uniform(0.5, 2.0, _small_nchw(rng))]),
    "clip": lambda rng: (lambda x: F.clip(x, -0.5, 0.5), [_off_bounds(rng, _small_nchw(rng))]),
    "mul": lambda rng: (F.mul, [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((1, 3, 1, 4))]),
    "div": lambda rng: (F.div, [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 2.0, (1, 3, 1, 1))]),
    "mean": lambda rng: (lambda x: F.mean(x, axis=(0, 2, 3)), [rng.standard_normal(_small_nchw(rng))]),
}


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<18} max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e}, {self.instances} instances)"


def check_op(name: str, instances: int = 20, seed: int = 0) -> GradcheckResult:
    if name not in OP_CASES:
        raise KeyError(f"unknown op {name!r}; choose from {sorted(OP_CASES)}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        fn, arrays = OP_CASES[name](rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        worst = max(worst, check_function(fn, arrays, rng))
    return GradcheckResult(name, worst, OP_TOLERANCE, instances)


def check_network_small(seed: int = 0, samples_per_param: int = 1, fusion: str = "hyperdense") -> GradcheckResult:
    """Gradcheck a tiny two-stream network (16x16, base width 4) in float64.

    Every parameter tensor gets ``samples_per_param`` randomly chosen entries
    checked, plus a sample of the modality input pixels.
    """
    from .network import NetworkConfig, build_network

    cfg = NetworkConfig(num_streams=2, fusion=fusion, base_width=4, input_spatial=(16, 16), dtype="float64", seed=seed)
    net = build_network(cfg)
    rng = np.random.default_rng(seed + 1)
    inputs = [Tensor(rng.random((2, 1, 16, 16)), requires_grad=True) for _ in range(2)]
    # perturb BN affine params away from their (1, 0) init so they matter
    for name, p in net.named_parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    state = {k: v.copy() for k, v in net.named_buffers()}

    def restore():
        for k, v in net.named_buffers():
            v[...] = state[k]

    proj = rng.standard_normal((2, 2, 16, 16))
    restore()
    backward(F.sum(F.mul(net(inputs), Tensor(proj))))

    def value() -> float:
        restore()
        return float(np.sum(net([Tensor(x.data) for x in inputs]).data * proj))

    pairs = []
    for _, p in net.named_parameters():
        idx = rng.choice(p.data.size, size=min(samples_per_param, p.data.size), replace=False)
        num = numeric_gradient(value, p.data, index=idx, eps=NETWORK_EPS)
        pairs.append((p.grad.reshape(-1)[idx], num.reshape(-1)[idx]))
    for x in inputs:
        idx = rng.choice(x.data.size, size=8, replace=False)
        num = numeric_gradient(value, x.data, index=idx, eps=NETWORK_EPS)
        pairs.append((x.grad.reshape(-1)[idx], num.reshape(-1)[idx]))
    # tensors whose sampled entries sit on dead units have ~0 gradient; floor
    # their scale at 1e-3 of the largest gradient so rounding noise is not amplified
    floor = 1e-3 * max(np.abs(np.concatenate([a for a, _ in pairs])).max(), 1e-300)
    worst = max(float(np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), floor)) for a, n in pairs)
    checked = len(pairs)
    restore()
    return GradcheckResult(f"network[{fusion}]", worst, NETWORK_TOLERANCE, checked)
