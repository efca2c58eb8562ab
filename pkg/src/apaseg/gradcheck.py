"""Finite-difference verification of the reverse-mode gradients.

``grad_check`` compares the backward pass of a scalar-valued function
against central differences with a relative step of 1e-4, and returns the
worst relative error over all checked elements. The suite covers every
primitive operator and whole encoder/decoder attention blocks in double
precision on tiny tensors.
"""

from __future__ import annotations

import numpy as np

from . import convops
from .blocks import AXES, Cot3dBlock, DecoderAttentionBlock, EncoderAttentionBlock, SKFusion
from .losses import one_hot, softmax_probs, total_loss
from .tensor import Parameter, Tensor, avg_pool3d, axis_pool, no_grad, norm_act, tsum

FD_STEP = 1e-4


def grad_check(f, wrt, step: float = FD_STEP) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    ``f`` is a nullary callable returning a scalar Tensor; ``wrt`` lists the
    tensors to perturb. Non-finite analytic or numeric gradients are
    reported as ``inf`` rather than raised.
    """
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, ana in zip(wrt, analytic):
        if not np.all(np.isfinite(ana)):
            return float("inf")
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            with no_grad():
                flat[i] = orig + h
                hi = float(f().data)
                flat[i] = orig - h
                lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2 * h)
            if not np.isfinite(num):
                return float("inf")
            err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
            worst = max(worst, err)
    return worst


def _spread(rng, shape, gap=0.05):
    """Values with pairwise gaps >= gap so max/relu stay off their kinks."""
    n = int(np.prod(shape))
    vals = (np.arange(n, dtype=np.float64) - n / 2) * gap
    return rng.permutation(vals).reshape(shape)


def gradcheck_suite(tol: float = 1e-4):
    """Run every check; yields (name, max_relative_error, tolerance)."""
    rng = np.random.default_rng(7)
    results = []

    def check(name, f, wrt, tol=tol):
        results.append((name, grad_check(f, wrt), tol))

    # primitive convolutions
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    check("conv3d", lambda: tsum(convops.conv3d(x, w, b, padding=1)), [x, w, b])

    xs = Tensor(rng.standard_normal((1, 4, 4, 4, 4)), requires_grad=True)
    wg = Tensor(rng.standard_normal((4, 1, 3, 3, 3)) * 0.5, requires_grad=True)
    check("conv3d_grouped_stride2",
          lambda: tsum(convops.conv3d(xs, wg, None, stride=2, padding=1, groups=4)),
          [xs, wg])

    x2 = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    w2 = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.standard_normal(2), requires_grad=True)
    check("conv2d", lambda: tsum(convops.conv2d(x2, w2, b2, padding=1)), [x2, w2, b2])

    xt = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    wt = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.5, requires_grad=True)
    bt = Tensor(rng.standard_normal(2), requires_grad=True)
    check("transpose_conv2d",
          lambda: tsum(convops.transpose_conv2d(xt, wt, bt, stride=2, padding=1,
                                                output_padding=1)),
          [xt, wt, bt])

    xt3 = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), requires_grad=True)
    wt3 = Tensor(rng.standard_normal((2, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    bt3 = Tensor(rng.standard_normal(2), requires_grad=True)
    check("transpose_conv3d",
          lambda: tsum(convops.transpose_conv3d(xt3, wt3, bt3, stride=2, padding=1,
                                                output_padding=1)),
          [xt3, wt3, bt3])

    # pooling and normalization
    xp = Tensor(_spread(rng, (1, 2, 3, 4, 4)), requires_grad=True)
    for dim, name in ((2, "H"), (3, "W"), (4, "D")):
        check(f"axis_pool_mean_{name}", lambda d=dim: tsum(axis_pool(xp, d, "mean")), [xp])
        check(f"axis_pool_max_{name}", lambda d=dim: tsum(axis_pool(xp, d, "max")), [xp])

    xa = Tensor(rng.standard_normal((1, 3, 4, 4, 4)), requires_grad=True)
    check("avg_pool3d", lambda: tsum(avg_pool3d(xa)), [xa])

    xn = Tensor(_spread(rng, (1, 2, 3, 3, 3)) + 1.0, requires_grad=True)
    check("norm_act", lambda: tsum(norm_act(xn)), [xn], tol=1e-4)

    # selective-kernel gate
    sk = SKFusion(4, rng=rng, dtype=np.float64)
    hh = Tensor(_spread(rng, (1, 4, 3, 3, 3)), requires_grad=True)
    xx = Tensor(_spread(rng, (1, 4, 3, 3, 3)), requires_grad=True)
    check("sk_fuse", lambda: tsum(sk(hh, xx)), [hh, xx] + sk.parameters())

    # whole blocks, one per axis
    for axis in AXES:
        blk = EncoderAttentionBlock(4, axis, rng=rng, dtype=np.float64)
        xb = Tensor(_spread(rng, (1, 4, 3, 3, 3), gap=0.11), requires_grad=True)
        check(f"encoder_block_{axis}", lambda b=blk, t=xb: tsum(b(t)[0]),
              [xb] + blk.parameters())

    dblk = DecoderAttentionBlock(4, "axial", rng=rng, dtype=np.float64)
    xlo = Tensor(_spread(rng, (1, 8, 2, 2, 2), gap=0.13), requires_grad=True)
    xhi = Tensor(_spread(rng, (1, 4, 4, 4, 4), gap=0.07), requires_grad=True)
    check("decoder_block_axial", lambda: tsum(dblk(xlo, xhi)[0]),
          [xlo, xhi] + dblk.parameters())

    cot = Cot3dBlock(4, rng=rng, dtype=np.float64)
    xc = Tensor(_spread(rng, (1, 4, 3, 3, 3), gap=0.09), requires_grad=True)
    check("cot3d_block", lambda: tsum(cot(xc)[0]), [xc] + cot.parameters())

    # loss gradient w.r.t. logits
    logits = Tensor(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    target = one_hot(labels, 3, dtype=np.float64)
    check("total_loss", lambda: total_loss(softmax_probs(logits), target), [logits])

    return results


def run_gradcheck(tol: float = 1e-4, verbose: bool = True) -> bool:
    """Print one line per check; True when every error is under tolerance."""
    ok = True
    for name, err, t in gradcheck_suite(tol):
        passed = err < t
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name:28s} max_rel_err={err:.3e}  tol={t:g}")
    return ok
