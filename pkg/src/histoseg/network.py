"""The segmentation network: manifest, init, forward/backward, model I/O.

The default architecture is a fully convolutional 11-layer stack that
preserves spatial size end to end:

    layer 1:      3x3 conv, 3  -> 64
    layers 2-9:   3x3 conv, 64 -> 64
    layer 10:     1x1 conv, 64 -> K
    layer 11:     1x1 conv, K  -> K

Every layer is convolution -> ReLU -> batch normalization, with no bias
terms; 3x3 layers use zero padding 1 and 1x1 layers padding 0, so a
(h, w) input yields (h, w, K) class scores.

Model files are a little-endian binary format with magic ``HSG1``, a
format version, an optional channel-statistics block, a layer manifest,
all parameter tensors as float32, and a trailing CRC-32.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .data import ChannelStats
from .errors import (BadMagicError, BadVersionError, ChecksumError,
                     ContractError, ModelFormatError, NumericalError,
                     TruncatedModelError)
from .layers import (BatchNormCache, BatchNormParams, ConvKernel, _conv2d,
                     batchnorm_backward, batchnorm_forward, conv2d_backward,
                     conv2d_forward, relu_backward, relu_forward)

Array = np.ndarray

MODEL_MAGIC = b"HSG1"
MODEL_VERSION_BASE = 1       # no channel-statistics block
MODEL_VERSION_WITH_STATS = 2  # six float32 (mean rgb, std rgb) after version

# Standard deviation of a unit normal truncated to [-2, 2]; dividing the
# target deviation by this keeps the post-truncation spread on target.
_TRUNC_SD = math.sqrt(
    1.0 - 4.0 * (math.exp(-2.0) / math.sqrt(2.0 * math.pi))
    / math.erf(2.0 / math.sqrt(2.0))
)


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one conv layer; padding preserves spatial size."""

    kh: int
    kw: int
    c_in: int
    c_out: int
    padding: int

    def __post_init__(self) -> None:
        if self.kh != self.kw or self.kh % 2 == 0 or self.kh < 1:
            raise ContractError(
                f"layer kernel must be square with odd side, got {self.kh}x{self.kw}"
            )
        if self.c_in < 1 or self.c_out < 1:
            raise ContractError(
                f"layer channel counts must be positive, got {self.c_in}->{self.c_out}"
            )
        if self.padding != (self.kh - 1) // 2:
            raise ContractError(
                f"layer padding {self.padding} does not preserve spatial size "
                f"for a {self.kh}x{self.kw} kernel"
            )

    @property
    def weight_count(self) -> int:
        return self.kh * self.kw * self.c_in * self.c_out


@dataclass(frozen=True)
class ArchManifest:
    """Ordered layer shapes plus the class count.

    Consecutive layers must chain channel counts, and when layers are
    present the final c_out must equal class_count. An empty manifest is
    permitted for accounting but cannot be built into a network.
    """

    layers: tuple[LayerSpec, ...]
    class_count: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.class_count < 2:
            raise ContractError(
                f"class_count must be at least 2, got {self.class_count}"
            )
        for i in range(len(self.layers) - 1):
            a, b = self.layers[i], self.layers[i + 1]
            if a.c_out != b.c_in:
                raise ContractError(
                    f"channel chaining broken between layers {i + 1} and {i + 2}: "
                    f"{a.c_out} -> {b.c_in}"
                )
        if self.layers and self.layers[-1].c_out != self.class_count:
            raise ContractError(
                f"final layer emits {self.layers[-1].c_out} channels but "
                f"class_count is {self.class_count}"
            )

    @property
    def in_channels(self) -> int:
        if not self.layers:
            raise ContractError("empty manifest has no input channel count")
        return self.layers[0].c_in


def default_manifest(in_channels: int = 3, class_count: int = 3,
                     trunk_width: int = 64) -> ArchManifest:
    """The standard 11-layer stack (one 3x3 in, eight 3x3 trunk, two 1x1)."""
    layers = [LayerSpec(3, 3, in_channels, trunk_width, 1)]
    for _ in range(8):
        layers.append(LayerSpec(3, 3, trunk_width, trunk_width, 1))
    layers.append(LayerSpec(1, 1, trunk_width, class_count, 0))
    layers.append(LayerSpec(1, 1, class_count, class_count, 0))
    return ArchManifest(tuple(layers), class_count)


def manifest_with_extra_layers(manifest: ArchManifest, extra: int) -> ArchManifest:
    """Insert extra trunk layers (copies of the last 3x3 layer) before the 1x1 head."""
    if extra < 0:
        raise ContractError(f"extra layer count must be >= 0, got {extra}")
    trunk = [l for l in manifest.layers if l.kh == 3]
    head = [l for l in manifest.layers if l.kh == 1]
    if not trunk:
        raise ContractError("manifest has no 3x3 trunk layer to replicate")
    last = trunk[-1]
    grown = LayerSpec(3, 3, last.c_out, last.c_out, 1)
    layers = tuple(trunk) + tuple([grown] * extra) + tuple(head)
    return ArchManifest(layers, manifest.class_count)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCounts:
    conv_weights: int
    bn_params: int

    @property
    def total(self) -> int:
        return self.conv_weights + self.bn_params


def _as_manifest(net_or_manifest) -> ArchManifest:
    if isinstance(net_or_manifest, ArchManifest):
        return net_or_manifest
    if isinstance(net_or_manifest, Network):
        return net_or_manifest.manifest
    raise ContractError(
        f"expected a Network or ArchManifest, got {type(net_or_manifest).__name__}"
    )


def count_parameters(net_or_manifest) -> ParamCounts:
    """Exact trainable parameter counts (conv weights, gamma + beta)."""
    manifest = _as_manifest(net_or_manifest)
    conv = sum(l.weight_count for l in manifest.layers)
    bn = sum(2 * l.c_out for l in manifest.layers)
    return ParamCounts(conv_weights=conv, bn_params=bn)


def count_macs(net_or_manifest, height: int, width: int) -> int:
    """Exact multiply-accumulate count for one (height, width) input.

    Spatial size is preserved at every layer, so the count is simply
    height * width * sum over layers of kh * kw * c_in * c_out.
    """
    if height < 1 or width < 1:
        raise ContractError(f"input size must be positive, got {height}x{width}")
    manifest = _as_manifest(net_or_manifest)
    per_pixel = sum(l.weight_count for l in manifest.layers)
    return int(height) * int(width) * per_pixel


# ---------------------------------------------------------------------------
# Network construction
# ---------------------------------------------------------------------------

@dataclass
class Network:
    """Kernels plus batch-norm parameters for each manifest layer."""

    manifest: ArchManifest
    kernels: list[ConvKernel]
    bn: list[BatchNormParams]

    def __post_init__(self) -> None:
        if len(self.kernels) != len(self.manifest.layers) or \
                len(self.bn) != len(self.manifest.layers):
            raise ContractError("kernel/bn lists must match the manifest layer count")
        for i, (spec, k, b) in enumerate(zip(self.manifest.layers,
                                             self.kernels, self.bn)):
            if (k.kh, k.kw, k.c_in, k.c_out) != (spec.kh, spec.kw, spec.c_in,
                                                 spec.c_out):
                raise ContractError(f"kernel {i + 1} does not match its manifest entry")
            if b.channels != spec.c_out:
                raise ContractError(f"bn {i + 1} does not match its manifest entry")

    def parameters(self) -> list[Array]:
        """Trainable arrays in a fixed order: per layer W, gamma, beta."""
        out: list[Array] = []
        for k, b in zip(self.kernels, self.bn):
            out.extend([k.weights, b.gamma, b.beta])
        return out

    def validate_finite(self) -> None:
        for i, (k, b) in enumerate(zip(self.kernels, self.bn)):
            arrays = (k.weights, b.gamma, b.beta, b.running_mean, b.running_var)
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise ContractError(f"layer {i + 1} carries non-finite values")

    def copy(self) -> "Network":
        kernels = [ConvKernel(k.weights.copy(), k.padding) for k in self.kernels]
        bn = [BatchNormParams(b.gamma.copy(), b.beta.copy(),
                              b.running_mean.copy(), b.running_var.copy(),
                              b.epsilon, b.momentum) for b in self.bn]
        return Network(self.manifest, kernels, bn)

    def cast(self, dtype) -> "Network":
        """Copy with all parameter arrays converted to dtype (for checks)."""
        net = self.copy()
        for k in net.kernels:
            k.weights = k.weights.astype(dtype)
        for b in net.bn:
            b.gamma = b.gamma.astype(dtype)
            b.beta = b.beta.astype(dtype)
            b.running_mean = b.running_mean.astype(dtype)
            b.running_var = b.running_var.astype(dtype)
        return net


def _truncated_normal(rng: np.random.Generator, count: int, std: float) -> Array:
    """Zero-mean normal samples rejected outside two base deviations.

    The base deviation is inflated by 1/_TRUNC_SD so the post-truncation
    standard deviation of the samples equals `std`.
    """
    out = np.empty(count, dtype=np.float64)
    filled = 0
    while filled < count:
        draw = rng.standard_normal(count - filled)
        keep = draw[np.abs(draw) <= 2.0]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out * (std / _TRUNC_SD)


def build_network(manifest: ArchManifest, seed: int = 0) -> Network:
    """Initialize a network: truncated He-scaled conv weights, identity BN.

    Conv weights are drawn from a zero-mean truncated normal whose
    deviation targets sqrt(2 / (kh * kw * c_in)); gamma starts at 1,
    beta at 0, running mean at 0, running variance at 1. Deterministic
    for a given seed.
    """
    if not manifest.layers:
        raise ContractError("cannot build a network from an empty manifest")
    rng = np.random.default_rng(seed)
    kernels: list[ConvKernel] = []
    bn: list[BatchNormParams] = []
    for spec in manifest.layers:
        fan_in = spec.kh * spec.kw * spec.c_in
        std = math.sqrt(2.0 / fan_in)
        w = _truncated_normal(rng, spec.weight_count, std)
        w = w.reshape(spec.kh, spec.kw, spec.c_in, spec.c_out).astype(np.float32)
        kernels.append(ConvKernel(w, spec.padding))
        bn.append(BatchNormParams.identity(spec.c_out))
    return Network(manifest, kernels, bn)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class LayerCache:
    conv_input: Array
    relu_mask: Array
    bn_cache: BatchNormCache


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    logits_shape: tuple[int, ...]


def forward(net: Network, batch: Array, mode: str
            ) -> tuple[Array, ForwardCache | None]:
    """Run the full stack; in train mode also return backward caches.

    Args:
        batch: (n, h, w, c_in) float input.
        mode: "train" (batch statistics, caches) or "infer" (running
            statistics, no caches, batch-composition independent).

    Returns:
        (logits, cache) with logits (n, h, w, class_count); cache is
        None in infer mode.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch)
    if x.ndim != 4:
        raise ContractError(f"batch must be 4-d NHWC, got shape {x.shape}")
    if x.shape[3] != net.manifest.in_channels:
        raise ContractError(
            f"batch has {x.shape[3]} channels, network expects "
            f"{net.manifest.in_channels}"
        )
    caches: list[LayerCache] = []
    for i, (k, b) in enumerate(zip(net.kernels, net.bn)):
        z = conv2d_forward(x, k)
        a, mask = relu_forward(z)
        y, bn_cache = batchnorm_forward(a, b, mode)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite activations after layer {i + 1}")
        if mode == "train":
            caches.append(LayerCache(conv_input=x, relu_mask=mask,
                                     bn_cache=bn_cache))
        x = y
    if mode == "train":
        return x, ForwardCache(layers=caches, logits_shape=x.shape)
    return x, None


def backward(net: Network, cache: ForwardCache, grad_logits: Array) -> list[Array]:
    """Backpropagate through the whole stack.

    Returns gradient arrays aligned with net.parameters(): per layer the
    conv weight gradient, then gamma and beta gradients.
    """
    if cache is None:
        raise ContractError("backward requires a train-mode forward cache")
    if len(cache.layers) != len(net.kernels):
        raise ContractError("cache does not match the network depth")
    grad_logits = np.asarray(grad_logits)
    if grad_logits.shape != cache.logits_shape:
        raise ContractError(
            f"grad_logits shape {grad_logits.shape} does not match forward "
            f"output shape {cache.logits_shape}"
        )
    g = grad_logits
    grads: list[Array | None] = [None] * (3 * len(net.kernels))
    for i in range(len(net.kernels) - 1, -1, -1):
        lc = cache.layers[i]
        ga, g_gamma, g_beta = batchnorm_backward(g, lc.bn_cache)
        gz = relu_backward(ga, lc.relu_mask)
        g, g_w = conv2d_backward(gz, lc.conv_input, net.kernels[i])
        grads[3 * i] = g_w
        grads[3 * i + 1] = g_gamma
        grads[3 * i + 2] = g_beta
    return grads  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Full-image inference
# ---------------------------------------------------------------------------

def receptive_radius(manifest: ArchManifest) -> int:
    """Half-width of the stack's receptive field (sum of layer paddings)."""
    return sum((l.kh - 1) // 2 for l in manifest.layers)


def infer_logits(net: Network, image: Array, stripe_rows: int | None = None) -> Array:
    """Class scores for one standardized image, any size, bounded memory.

    Large images are processed in full-width horizontal stripes. Each
    stripe carries enough halo rows that, combined with re-applying the
    per-layer zero padding only at true image borders, the result is
    exactly the single-pass forward output.

    Args:
        image: (h, w, c_in) float image (already standardized).
        stripe_rows: output rows per stripe; default picks a stripe that
            keeps peak activation memory modest.

    Returns:
        (h, w, class_count) logits in the network's working dtype.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != net.manifest.in_channels:
        raise ContractError(
            f"image must be (h, w, {net.manifest.in_channels}), got shape "
            f"{image.shape}"
        )
    h, w = image.shape[0], image.shape[1]
    if stripe_rows is None:
        # Aim at ~64 MB for the widest activation slab (w * 64ch * 4B).
        widest = max(l.c_out for l in net.manifest.layers)
        stripe_rows = max(16, (64 << 20) // max(1, w * widest * 4))
    if stripe_rows < 1:
        raise ContractError(f"stripe_rows must be positive, got {stripe_rows}")
    if stripe_rows >= h:
        out, _ = forward(net, image[None], "infer")
        return out[0]
    pads = [(l.kh - 1) // 2 for l in net.manifest.layers]
    radius = receptive_radius(net.manifest)
    out_dtype = np.result_type(image.dtype, net.kernels[0].weights.dtype) \
        if net.kernels else image.dtype
    out = np.empty((h, w, net.manifest.class_count), dtype=out_dtype)
    for y0 in range(0, h, stripe_rows):
        y1 = min(y0 + stripe_rows, h)
        s0, s1 = max(0, y0 - radius), min(h, y1 + radius)
        x = image[None, s0:s1]
        lo = s0  # absolute row of the slab's first row at this layer
        hi = s1
        for i, (k, b) in enumerate(zip(net.kernels, net.bn)):
            p = pads[i]
            if p:
                top = p if lo == 0 else 0
                bot = p if hi == h else 0
                x = np.pad(x, ((0, 0), (top, bot), (p, p), (0, 0)))
                z = _conv2d(x, k.weights, 0)
                lo = lo + p - top
                hi = hi - p + bot
            else:
                z = conv2d_forward(x, k)
            a, _ = relu_forward(z)
            x, _ = batchnorm_forward(a, b, "infer")
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite activations after layer {i + 1}")
        out[y0:y1] = x[0, y0 - lo:y1 - lo]
    return out


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------

def save_model(net: Network, path, channel_stats: ChannelStats | None = None) -> None:
    """Write the network (and optional channel statistics) to a model file."""
    net.validate_finite()
    buf = bytearray()
    buf += MODEL_MAGIC
    version = MODEL_VERSION_WITH_STATS if channel_stats is not None \
        else MODEL_VERSION_BASE
    buf += struct.pack("<I", version)
    if channel_stats is not None:
        stats = np.concatenate([np.asarray(channel_stats.mean, dtype=np.float64),
                                np.asarray(channel_stats.std, dtype=np.float64)])
        if stats.shape != (6,):
            raise ContractError("channel statistics must carry 3 means and 3 stds")
        buf += stats.astype("<f4").tobytes()
    buf += struct.pack("<I", len(net.manifest.layers))
    for spec in net.manifest.layers:
        buf += struct.pack("<5I", spec.kh, spec.kw, spec.c_in, spec.c_out,
                           spec.padding)
    for k, b in zip(net.kernels, net.bn):
        for arr in (k.weights, b.gamma, b.beta, b.running_mean, b.running_var):
            buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedModelError(
                f"model file ends at byte {len(self.blob)} but {self.pos + n} "
                f"bytes are needed"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, count: int) -> Array:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def load_model(path) -> tuple[Network, ChannelStats | None]:
    """Read a model file; verifies magic, version, checksum, and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedModelError(f"model file holds only {len(blob)} bytes")
    if blob[:4] != MODEL_MAGIC:
        raise BadMagicError(
            f"bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}"
        )
    # Structure first so truncation is reported as such; the checksum can
    # only be judged once the payload boundary is known to be intact.
    r = _Reader(blob[:-4])
    r.take(4)  # magic
    version = r.u32()
    if version not in (MODEL_VERSION_BASE, MODEL_VERSION_WITH_STATS):
        raise BadVersionError(f"unsupported model format version {version}")
    stats = None
    if version == MODEL_VERSION_WITH_STATS:
        vals = r.f32_array(6).astype(np.float64)
        stats = ChannelStats(mean=vals[:3], std=vals[3:])
    layer_count = r.u32()
    specs = []
    for _ in range(layer_count):
        kh, kw, c_in, c_out, padding = (r.u32() for _ in range(5))
        specs.append(LayerSpec(kh, kw, c_in, c_out, padding))
    if not specs:
        raise ContractError("model file declares zero layers")
    manifest = ArchManifest(tuple(specs), class_count=specs[-1].c_out)
    kernels: list[ConvKernel] = []
    bn: list[BatchNormParams] = []
    for spec in specs:
        w = r.f32_array(spec.weight_count).reshape(spec.kh, spec.kw,
                                                   spec.c_in, spec.c_out)
        gamma = r.f32_array(spec.c_out)
        beta = r.f32_array(spec.c_out)
        rmean = r.f32_array(spec.c_out)
        rvar = r.f32_array(spec.c_out)
        kernels.append(ConvKernel(w, spec.padding))
        bn.append(BatchNormParams(gamma, beta, rmean, rvar))
    if r.pos != len(r.blob):
        raise ModelFormatError(
            f"model file carries {len(r.blob) - r.pos} unexpected trailing bytes"
        )
    declared_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if declared_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: file says {declared_crc:#010x}, payload "
            f"hashes to {actual_crc:#010x}"
        )
    net = Network(manifest, kernels, bn)
    net.validate_finite()
    return net, stats
