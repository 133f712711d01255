#!/usr/bin/env python3
"""Finite-difference audit of every analytic gradient in the package.

Checks the layer primitives (convolution, ReLU, batch normalization,
softmax cross-entropy) one at a time, then the full 11-layer stack in
64-bit precision with kink-adjacent coordinates skipped. Prints one line
per check; exits nonzero if any relative error exceeds its bound.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from histoseg.layers import (BatchNormParams, ConvKernel, batchnorm_backward,
                             batchnorm_forward, conv2d_backward,
                             conv2d_forward, grad_check, relu_backward,
                             relu_forward)
from histoseg.losses import softmax_ce_gradient, softmax_cross_entropy
from histoseg.network import backward, build_network, default_manifest, forward

FAILURES = 0


def report(name: str, rep, bound: float) -> None:
    global FAILURES
    ok = rep.passed and rep.max_relative_error < bound
    FAILURES += 0 if ok else 1
    print(f"{'ok ' if ok else 'BAD'} {name:<22} max rel err "
          f"{rep.max_relative_error:.3e} (bound {bound:.0e}, "
          f"{rep.checked_count} coords)")


def main() -> int:
    rng = np.random.default_rng(7)

    x = rng.standard_normal((2, 5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    probe = rng.standard_normal((2, 5, 4, 3))
    kern = ConvKernel(w, 1)
    gx, gw = conv2d_backward(probe, x, kern)
    report("conv2d", grad_check(
        lambda: float((conv2d_forward(x, kern) * probe).sum()),
        [x, w], [gx, gw], step=1e-5, tolerance=1e-4), 1e-4)

    xr = rng.standard_normal((2, 4, 4, 3))
    xr += np.where(xr >= 0, 0.5, -0.5)   # keep clear of the kink at zero
    pr = rng.standard_normal(xr.shape)
    _, mask = relu_forward(xr)
    report("relu", grad_check(
        lambda: float((relu_forward(xr)[0] * pr).sum()),
        [xr], [relu_backward(pr, mask)], step=1e-5, tolerance=1e-4), 1e-4)

    xb = rng.standard_normal((2, 4, 3, 2))
    gamma = rng.standard_normal(2) + 1.5
    beta = rng.standard_normal(2)
    pb = rng.standard_normal(xb.shape)

    def bn_loss():
        params = BatchNormParams(gamma=gamma.copy(), beta=beta.copy(),
                                 running_mean=np.zeros(2),
                                 running_var=np.ones(2), epsilon=1e-5)
        y, _ = batchnorm_forward(xb, params, "train")
        return float((y * pb).sum())

    params = BatchNormParams(gamma=gamma.copy(), beta=beta.copy(),
                             running_mean=np.zeros(2), running_var=np.ones(2),
                             epsilon=1e-5)
    _, cache = batchnorm_forward(xb, params, "train")
    gxb, gg, gb = batchnorm_backward(pb, cache)
    report("batchnorm", grad_check(bn_loss, [xb, gamma, beta],
                                   [gxb, gg, gb],
                                   step=1e-5, tolerance=1e-4), 1e-4)

    z = rng.standard_normal((2, 3, 4, 3))
    labels = rng.integers(0, 3, size=(2, 3, 4))
    report("softmax cross-entropy", grad_check(
        lambda: softmax_cross_entropy(z, labels),
        [z], [softmax_ce_gradient(z, labels)],
        step=1e-6, tolerance=1e-4), 1e-4)

    net = build_network(default_manifest(), seed=9).cast(np.float64)
    xs = rng.standard_normal((1, 6, 6, 3))
    ls = rng.integers(0, 3, size=(1, 6, 6))

    def stack_loss():
        logits, _ = forward(net, xs, "train")
        return softmax_cross_entropy(logits, ls)

    logits, cache = forward(net, xs, "train")
    grads = backward(net, cache, softmax_ce_gradient(logits, ls))
    report("full 11-layer stack", grad_check(
        stack_loss, net.parameters(), grads, step=1e-6, tolerance=1e-3,
        sample=12, rng=np.random.default_rng(0), skip_kinks=True), 1e-3)

    print("all gradients verified" if FAILURES == 0
          else f"{FAILURES} check(s) failed")
    return 0 if FAILURES == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
