"""Finite-difference checks of analytic gradients.

Every check runs in float64 (:func:`~ehdr.tensor.shadow64`): the scalar
objective is ``sum(out * R)`` for a fixed random ``R``, the analytic
gradient comes from :meth:`Tensor.backward`, the numeric one from central
differences, and the error is ``|a - n| / max(|a|, |n|)`` in the L2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass
import time
from typing import Callable, Sequence

import numpy as np

from . import ops
from .hdr import mu_law_tensor
from .nn import ConvLSTMCell, init_conv
from .tensor import Tensor, shadow64

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    rel_error: float
    checked: int
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<34} rel_err={self.rel_error:.2e} ({self.checked} entries, {self.seconds:.2f}s)"


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def check_gradients(name: str, objective: Callable[[], Tensor], wrt: Sequence[Tensor],
                    eps: float = 1e-6, max_entries: int | None = None,
                    rng: np.random.Generator | None = None, tol: float = TOLERANCE) -> GradResult:
    """Compare backward gradients of ``objective()`` against central differences.

    Args:
        objective: builds the scalar loss from the current values of ``wrt``.
        wrt: leaf tensors to differentiate (their ``data`` is perturbed in place).
        max_entries: check at most this many randomly chosen entries per tensor.
    """
    rng = rng or np.random.default_rng(0)
    t0 = time.perf_counter()
    for t in wrt:
        t.grad = None
    objective().backward()
    analytic, numeric = [], []
    for t in wrt:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective().item()
            flat[i] = orig - eps
            fm = objective().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(g.reshape(-1)[i])
    err = relative_error(np.array(analytic), np.array(numeric))
    return GradResult(name, err, len(numeric), time.perf_counter() - t0, tol)


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return (out * Tensor(r)).sum()


def _conv_params(rng, cin, cout, k=3, stride=1):
    p = init_conv(rng, cin, cout, k, stride)
    p.bias.data = rng.uniform(-0.5, 0.5, cout)
    return p


def check_conv2d(rng, eps=1e-6):
    x = _leaf(rng, (2, 3, 6, 5))
    p = _conv_params(rng, 3, 4)
    r = rng.standard_normal((2, 4, 6, 5))
    yield check_gradients("conv2d", lambda: _weighted(ops.conv2d(x, p), r), [x, p.weight, p.bias], eps)
    ps = _conv_params(rng, 3, 2, stride=2)
    rs = rng.standard_normal((2, 2, 3, 3))
    yield check_gradients("conv2d stride 2", lambda: _weighted(ops.conv2d(x, ps), rs), [x, ps.weight, ps.bias], eps)


def _deform_inputs(rng, n=1, c=2, h=5, w=6, k=9):
    x = _leaf(rng, (n, c, h, w))
    # integer part in [-2, 2], fractional part kept away from bilinear kinks
    whole = rng.integers(-2, 3, (n, 2 * k, h, w))
    frac = rng.uniform(0.1, 0.9, (n, 2 * k, h, w))
    off = Tensor(whole + frac, requires_grad=True)
    m = _leaf(rng, (n, k, h, w), 0.1, 1.0)
    return x, off, m


def check_deform_conv(rng, eps=1e-6):
    x, off, m = _deform_inputs(rng)
    p = _conv_params(rng, 2, 3)
    r = rng.standard_normal((1, 3, 5, 6))
    f = lambda: _weighted(ops.deform_conv2d(x, off, m, p), r)  # noqa: E731
    yield check_gradients("deform_conv input", f, [x], eps)
    yield check_gradients("deform_conv offsets", f, [off], eps)
    yield check_gradients("deform_conv masks", f, [m], eps)
    yield check_gradients("deform_conv weights+bias", f, [p.weight, p.bias], eps)


def check_convlstm(rng, eps=1e-6, steps=4):
    cell = ConvLSTMCell(rng, 2, 3)
    cell.gates.bias.data = rng.uniform(-0.5, 0.5, cell.gates.bias.shape)
    seq = [_leaf(rng, (1, 2, 5, 5)) for _ in range(steps)]
    r = rng.standard_normal((1, 3, 5, 5))
    f = lambda: _weighted(cell.run(seq), r)  # noqa: E731
    yield check_gradients(f"convlstm {steps}-step inputs", f, seq, eps)
    yield check_gradients(f"convlstm {steps}-step params", f, [cell.gates.weight, cell.gates.bias], eps)


def check_pairwise_attention(rng, eps=1e-6):
    from .model import PairwiseAttention

    att = PairwiseAttention(rng, 3)
    for blk in att.blocks:
        blk.conv2.bias.data = rng.uniform(-0.5, 0.5, 3)
    feats = [_leaf(rng, (1, 3, 5, 5)) for _ in range(3)]
    r = rng.standard_normal((1, 3, 5, 5))
    f = lambda: _weighted(att(*feats), r)  # noqa: E731
    yield check_gradients("pairwise attention inputs", f, feats, eps)
    yield check_gradients("pairwise attention params", f, att.parameters(), eps, max_entries=12, rng=rng)


def check_mu_l1_loss(rng, eps=1e-6):
    from .training import mu_l1_loss

    pred = _leaf(rng, (1, 3, 5, 5), 0.01, 0.95)
    gt = rng.uniform(0.0, 1.0, (1, 3, 5, 5))
    yield check_gradients("mu-law L1 loss", lambda: mu_l1_loss(pred, gt), [pred], eps)
    h = _leaf(rng, (4, 4), 0.01, 0.99)
    r = rng.standard_normal((4, 4))
    yield check_gradients("mu-law", lambda: _weighted(mu_law_tensor(h), r), [h], eps)


def check_misc_ops(rng, eps=1e-6):
    x = _leaf(rng, (1, 2, 4, 4))
    r = rng.standard_normal((1, 2, 4, 4))
    for name, fn in [("relu", ops.relu), ("leaky_relu", ops.leaky_relu), ("sigmoid", ops.sigmoid), ("tanh", ops.tanh)]:
        yield check_gradients(name, lambda fn=fn: _weighted(fn(x), r), [x], eps)
    r2 = rng.standard_normal((1, 2, 8, 8))
    yield check_gradients("upsample_bilinear", lambda: _weighted(ops.upsample_bilinear(x, 2), r2), [x], eps)


SUITE = (check_conv2d, check_deform_conv, check_convlstm, check_pairwise_attention, check_mu_l1_loss, check_misc_ops)


def run_suite(seed: int = 0, eps: float = 1e-6, report: Callable[[str], None] | None = None) -> list[GradResult]:
    """Run every check in float64; ``report`` receives one line per check."""
    rng = np.random.default_rng(seed)
    results = []
    with shadow64():
        for check in SUITE:
            for res in check(rng, eps):
                results.append(res)
                if report:
                    report(str(res))
    return results
