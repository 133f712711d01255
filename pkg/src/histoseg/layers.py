"""Layer primitives: 2-D convolution, ReLU, and batch normalization.

All tensors are numpy arrays in NHWC layout (batch, height, width,
channels). Convolution kernels are (kh, kw, c_in, c_out). Every forward
op has a matching analytic backward op, and `grad_check` verifies any
(loss, gradient) pair against central finite differences.

Convolution is evaluated by unrolling input windows into a matrix
(im2col via stride tricks) and reducing to a single GEMM; a direct
nested-loop evaluation exists only in the test suite as an oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvKernel:
    """Square odd-sized conv filter bank with same-size zero padding.

    weights: (kh, kw, c_in, c_out); padding must equal (kh - 1) // 2 so
    spatial dimensions are preserved. No bias term.
    """

    weights: Array
    padding: int

    def __post_init__(self) -> None:
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ContractError(
                f"kernel weights must be 4-d (kh, kw, c_in, c_out), got shape {w.shape}"
            )
        kh, kw = int(w.shape[0]), int(w.shape[1])
        if kh != kw or kh % 2 == 0 or kh < 1:
            raise ContractError(f"kernel must be square with odd side, got {kh}x{kw}")
        if self.padding != (kh - 1) // 2:
            raise ContractError(
                f"padding {self.padding} does not preserve spatial size for a "
                f"{kh}x{kw} kernel (expected {(kh - 1) // 2})"
            )
        self.weights = w

    @property
    def kh(self) -> int:
        return int(self.weights.shape[0])

    @property
    def kw(self) -> int:
        return int(self.weights.shape[1])

    @property
    def c_in(self) -> int:
        return int(self.weights.shape[2])

    @property
    def c_out(self) -> int:
        return int(self.weights.shape[3])


def _im2col(x: Array, kh: int, kw: int, padding: int) -> Array:
    """Unroll sliding windows of x into rows: (n*ho*wo, kh*kw*c_in)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # (n, ho, wo, c, kh, kw) -> rows ordered (dy, dx, c) to match weight layout
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    n, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * x.shape[3])
    return cols


def _conv2d(x: Array, weights: Array, padding: int) -> Array:
    """Cross-correlate x (n, h, w, c_in) with weights, arbitrary padding."""
    n, h, w, c_in = x.shape
    kh, kw, _, c_out = weights.shape
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ContractError(
            f"input {h}x{w} too small for {kh}x{kw} kernel with padding {padding}"
        )
    if kh == 1 and kw == 1 and padding == 0:
        y = x.reshape(-1, c_in) @ weights.reshape(c_in, c_out)
        return y.reshape(n, h, w, c_out)
    cols = _im2col(x, kh, kw, padding)
    y = cols @ weights.reshape(kh * kw * c_in, c_out)
    return y.reshape(n, ho, wo, c_out)


def conv2d_forward(x: Array, kernel: ConvKernel) -> Array:
    """Convolve a batch with a kernel; output spatial size equals input.

    Args:
        x: input batch (n, h, w, c_in).
        kernel: filter bank; kernel.c_in must match x's channel count.

    Returns:
        Output batch (n, h, w, c_out), same dtype family as the inputs.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"conv input must be 4-d NHWC, got shape {x.shape}")
    if x.shape[3] != kernel.c_in:
        raise ContractError(
            f"conv input has {x.shape[3]} channels but kernel expects {kernel.c_in}"
        )
    return _conv2d(x, kernel.weights, kernel.padding)


def conv2d_backward(grad_out: Array, x: Array, kernel: ConvKernel) -> tuple[Array, Array]:
    """Gradients of a scalar loss through conv2d_forward.

    Args:
        grad_out: upstream gradient, same shape as the forward output.
        x: the forward input batch.
        kernel: the kernel used in the forward pass.

    Returns:
        (grad_input, grad_weights) with grad_input.shape == x.shape and
        grad_weights.shape == kernel.weights.shape.
    """
    grad_out = np.asarray(grad_out)
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[3] != kernel.c_in:
        raise ContractError(f"conv input shape {x.shape} does not match kernel")
    expected = (x.shape[0], x.shape[1], x.shape[2], kernel.c_out)
    if grad_out.shape != expected:
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    kh, kw = kernel.kh, kernel.kw
    # Weight gradient: correlate input windows with the upstream gradient.
    cols = _im2col(x, kh, kw, kernel.padding)
    gmat = grad_out.reshape(-1, kernel.c_out)
    grad_w = (cols.T @ gmat).reshape(kernel.weights.shape)
    # Input gradient: convolve the upstream gradient with the spatially
    # flipped kernel, swapping in/out channel axes.
    wf = np.ascontiguousarray(kernel.weights[::-1, ::-1].transpose(0, 1, 3, 2))
    grad_x = _conv2d(grad_out, wf, kh - 1 - kernel.padding)
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: Array) -> tuple[Array, Array]:
    """Elementwise max(x, 0); also returns the positive mask for backward."""
    x = np.asarray(x)
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(grad_out: Array, mask: Array) -> Array:
    """Pass upstream gradient where the forward input was positive."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != mask.shape:
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match mask shape {mask.shape}"
        )
    return grad_out * mask


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics.

    Batch statistics use the biased (population) variance over the
    n*h*w positions. Running statistics are exponential moving averages:
    running <- momentum * running + (1 - momentum) * batch.
    """

    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self) -> None:
        arrs = [np.asarray(a) for a in
                (self.gamma, self.beta, self.running_mean, self.running_var)]
        if any(a.ndim != 1 for a in arrs):
            raise ContractError("batch norm parameters must be 1-d per-channel vectors")
        if len({a.shape[0] for a in arrs}) != 1:
            raise ContractError("batch norm parameter vectors must share one length")
        if not (0.0 < self.epsilon):
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        self.gamma, self.beta, self.running_mean, self.running_var = arrs

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, epsilon: float = 1e-5,
                 momentum: float = 0.9) -> "BatchNormParams":
        """Fresh parameters: gamma 1, beta 0, running mean 0, running var 1."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )


@dataclass
class BatchNormCache:
    """Forward-pass intermediates needed by batchnorm_backward."""

    x: Array
    mean: Array
    var: Array
    gamma: Array
    epsilon: float


def batchnorm_forward(x: Array, params: BatchNormParams, mode: str
                      ) -> tuple[Array, BatchNormCache | None]:
    """Normalize per channel, then scale and shift.

    In "train" mode uses batch statistics over the (n, h, w) axes with
    biased variance, and updates the running statistics in place. In
    "infer" mode uses the stored running statistics and touches nothing.

    Returns:
        (output, cache); cache is None in infer mode.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"batch norm input must be 4-d NHWC, got shape {x.shape}")
    if x.shape[3] != params.channels:
        raise ContractError(
            f"input has {x.shape[3]} channels but parameters have {params.channels}"
        )
    if mode == "infer":
        inv = 1.0 / np.sqrt(params.running_var + params.epsilon)
        scale = params.gamma * inv
        shift = params.beta - params.running_mean * scale
        return x * scale + shift, None
    n_pos = x.shape[0] * x.shape[1] * x.shape[2]
    if n_pos < 2:
        raise ContractError(
            f"degenerate batch: need at least 2 positions per channel for "
            f"batch statistics, got {n_pos}"
        )
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))  # biased (population) variance
    inv = 1.0 / np.sqrt(var + params.epsilon)
    scale = params.gamma * inv
    shift = params.beta - mean * scale
    y = x * scale + shift
    m = params.momentum
    params.running_mean = m * params.running_mean + (1.0 - m) * mean
    params.running_var = m * params.running_var + (1.0 - m) * var
    cache = BatchNormCache(x=x, mean=mean, var=var, gamma=params.gamma,
                           epsilon=params.epsilon)
    return y, cache


def batchnorm_backward(grad_out: Array, cache: BatchNormCache
                       ) -> tuple[Array, Array, Array]:
    """Gradients through train-mode batch normalization.

    Differentiates through the batch mean and variance (the standard
    full backward, not a straight-through approximation).

    Returns:
        (grad_input, grad_gamma, grad_beta).
    """
    if cache is None:
        raise ContractError("no cache: backward is only defined for train mode")
    grad_out = np.asarray(grad_out)
    x = cache.x
    if grad_out.shape != x.shape:
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match input shape {x.shape}"
        )
    inv = 1.0 / np.sqrt(cache.var + cache.epsilon)
    xhat = (x - cache.mean) * inv
    grad_beta = grad_out.sum(axis=(0, 1, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    gy = grad_out * cache.gamma
    m1 = gy.mean(axis=(0, 1, 2))
    m2 = (gy * xhat).mean(axis=(0, 1, 2))
    grad_x = inv * (gy - m1 - xhat * m2)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_relative_error: float
    per_array_errors: list[float]
    tolerance: float
    checked_count: int = 0
    skipped_count: int = 0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def grad_check(loss_fn, arrays, analytic_grads, step: float = 1e-5,
               tolerance: float = 1e-4, sample: int | None = None,
               rng: np.random.Generator | None = None,
               skip_kinks: bool = False,
               kink_threshold: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Args:
        loss_fn: zero-argument callable returning a scalar loss; it must
            read the arrays in `arrays` so in-place perturbations take
            effect. Use float64 arrays for meaningful comparisons.
        arrays: list of parameter arrays, perturbed in place and restored.
        analytic_grads: list of gradient arrays, aligned with `arrays`.
        step: central-difference step size (must be positive).
        tolerance: max relative error below which the check passes.
        sample: if set, check at most this many randomly chosen elements
            per array instead of every element.
        rng: generator used for sampling positions (required with sample).
        skip_kinks: when true, estimate each derivative twice (at `step`
            and `step / 2`) and skip coordinates where the two estimates
            disagree by more than `kink_threshold` (relative). A rectifier
            network is only piecewise smooth: a perturbation that flips a
            downstream activation puts the two loss evaluations on
            different linear pieces, where no finite-difference estimate
            is valid. An incorrect analytic gradient is still detected at
            every smooth coordinate, because there the two estimates agree
            with each other and jointly disagree with the analytic value.
        kink_threshold: relative disagreement between the two estimates
            above which a coordinate is treated as straddling a kink.

    Returns:
        GradCheckReport with the max relative error seen per array, plus
        counts of coordinates actually compared and skipped. Callers using
        `skip_kinks` should assert `checked_count` stays high enough that
        the comparison remains meaningful.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    if kink_threshold <= 0:
        raise ContractError(
            f"kink_threshold must be positive, got {kink_threshold}"
        )
    if len(arrays) != len(analytic_grads):
        raise ContractError("arrays and analytic_grads must have equal length")
    if sample is not None and rng is None:
        rng = np.random.default_rng(0)
    per_array = []
    checked = 0
    skipped = 0
    for arr, grad in zip(arrays, analytic_grads):
        grad = np.asarray(grad)
        if grad.shape != arr.shape:
            raise ContractError(
                f"gradient shape {grad.shape} does not match array shape {arr.shape}"
            )
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if sample is not None and flat.size > sample:
            positions = rng.choice(flat.size, size=sample, replace=False)
        else:
            positions = range(flat.size)
        worst = 0.0
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn())
            flat[i] = orig - step
            lm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalError(
                    f"loss is non-finite near element {i} during gradient check"
                )
            numeric = (lp - lm) / (2.0 * step)
            if skip_kinks:
                half = 0.5 * step
                flat[i] = orig + half
                lph = float(loss_fn())
                flat[i] = orig - half
                lmh = float(loss_fn())
                flat[i] = orig
                if not (np.isfinite(lph) and np.isfinite(lmh)):
                    raise NumericalError(
                        f"loss is non-finite near element {i} during "
                        f"gradient check"
                    )
                numeric_half = (lph - lmh) / (2.0 * half)
                scale = max(abs(numeric), abs(numeric_half), 1e-12)
                if abs(numeric - numeric_half) / scale > kink_threshold:
                    skipped += 1
                    continue
                # The half-step estimate carries a quarter of the
                # truncation error, so prefer it for the comparison.
                numeric = numeric_half
            checked += 1
            analytic = float(gflat[i])
            denom = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / denom)
        per_array.append(worst)
    overall = max(per_array) if per_array else 0.0
    return GradCheckReport(max_relative_error=overall,
                           per_array_errors=per_array,
                           tolerance=tolerance,
                           checked_count=checked,
                           skipped_count=skipped)
