"""Image I/O, label coding, normalization, augmentation, patch pipeline.

Images are uint8 RGB arrays (h, w, 3); label maps are uint8 (h, w) with
class ids 0 = myocyte, 1 = background, 2 = fibrosis. Ground truth PNGs
encode classes as pure red / white / blue pixels.

The training-set builder draws a fixed per-transform quota of random
patches from each augmented image, ranks every candidate by the spread
of its class proportions, drops the highest-spread fraction, trims the
remainder to a whole number of batches, and shuffles.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (BalanceInfeasibleError, ConfigError, ContractError,
                     ImageChannelError, ImageFormatError, ImageTruncatedError)

Array = np.ndarray

CLASS_NAMES = ("myocyte", "background", "fibrosis")

# RGB color -> class id for ground-truth label images.
DEFAULT_COLORMAP: dict[tuple[int, int, int], int] = {
    (255, 0, 0): 0,       # myocyte (red)
    (255, 255, 255): 1,   # background (white)
    (0, 0, 255): 2,       # fibrosis (blue)
}

TRANSFORM_KINDS = ("rot90", "rot180", "rot270", "flip_h", "flip_v", "warp", "shear")


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def decode_image(path) -> Array:
    """Read an 8-bit RGB PNG into a (h, w, 3) uint8 array.

    Raises ImageFormatError for non-PNG or 16-bit files,
    ImageChannelError for anything that is not 3-channel 8-bit RGB, and
    ImageTruncatedError when pixel data ends early.
    """
    path = Path(path)
    try:
        im = Image.open(path)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image ({exc})") from exc
    with im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: expected PNG, got {im.format}")
        if im.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
            raise ImageFormatError(f"{path}: 16-bit PNG is not supported")
        if im.mode != "RGB":
            raise ImageChannelError(
                f"{path}: expected 3-channel 8-bit RGB, got mode {im.mode!r}"
            )
        try:
            im.load()
        except OSError as exc:
            raise ImageTruncatedError(f"{path}: truncated PNG ({exc})") from exc
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageChannelError(f"{path}: decoded shape {arr.shape} is not (h, w, 3)")
    return arr


def encode_image(img: Array, path) -> None:
    """Write a (h, w, 3) uint8 array as a PNG file."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractError(
            f"image to encode must be uint8 (h, w, 3), got {img.dtype} {img.shape}"
        )
    Image.fromarray(img, "RGB").save(str(path), format="PNG")


# ---------------------------------------------------------------------------
# Label coding
# ---------------------------------------------------------------------------

def labelmap_from_colors(img: Array, colormap: dict | None = None) -> Array:
    """Map a color-coded ground-truth image to a uint8 label map.

    Every pixel must match one of the colormap colors exactly; the first
    offending pixel is reported otherwise.
    """
    if colormap is None:
        colormap = DEFAULT_COLORMAP
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"label image must be (h, w, 3), got shape {img.shape}")
    out = np.zeros(img.shape[:2], dtype=np.uint8)
    matched = np.zeros(img.shape[:2], dtype=bool)
    for color, cls in colormap.items():
        if not (0 <= cls < 256):
            raise ContractError(f"class id {cls} does not fit in uint8")
        hit = np.all(img == np.asarray(color, dtype=np.uint8), axis=2)
        out[hit] = cls
        matched |= hit
    if not matched.all():
        y, x = np.argwhere(~matched)[0]
        raise ContractError(
            f"pixel at (y={y}, x={x}) has color {tuple(int(v) for v in img[y, x])} "
            f"which is not in the colormap"
        )
    return out


def labelmap_to_colors(labels: Array, colormap: dict | None = None) -> Array:
    """Render a label map back to its color-coded RGB image."""
    if colormap is None:
        colormap = DEFAULT_COLORMAP
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ContractError(f"label map must be 2-d, got shape {labels.shape}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    known = np.zeros(256, dtype=bool)
    for color, cls in colormap.items():
        lut[cls] = color
        known[cls] = True
    present = np.unique(labels)
    bad = [int(v) for v in present if not known[v]]
    if bad:
        raise ContractError(f"label values {bad} have no colormap entry")
    return lut[labels]


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def histogram_normalize(img: Array) -> Array:
    """Stretch each channel linearly so its min maps to 0 and max to 255.

    Values are scaled in float and rounded to nearest. A constant
    channel is left unchanged.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractError(
            f"histogram_normalize expects uint8 (h, w, 3), got {img.dtype} {img.shape}"
        )
    out = img.copy()
    for c in range(3):
        ch = img[:, :, c]
        lo, hi = int(ch.min()), int(ch.max())
        if lo == hi:
            continue
        scaled = (ch.astype(np.float64) - lo) * (255.0 / (hi - lo))
        out[:, :, c] = np.rint(scaled).astype(np.uint8)
    return out


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel RGB mean and standard deviation of a training corpus."""

    mean: Array
    std: Array

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (3,) or std.shape != (3,):
            raise ContractError("channel statistics must be two length-3 vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ContractError("channel statistics must be finite")
        if np.any(std <= 0):
            raise ContractError(f"channel std must be positive, got {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def compute_channel_stats(images) -> ChannelStats:
    """Population mean/std per RGB channel, pooled over a list of images."""
    if not images:
        raise ContractError("cannot compute channel statistics of zero images")
    total = 0
    s = np.zeros(3, dtype=np.float64)
    ss = np.zeros(3, dtype=np.float64)
    for img in images:
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractError(f"expected (h, w, 3) images, got shape {img.shape}")
        f = img.reshape(-1, 3).astype(np.float64)
        total += f.shape[0]
        s += f.sum(axis=0)
        ss += (f * f).sum(axis=0)
    mean = s / total
    var = np.maximum(ss / total - mean * mean, 0.0)
    std = np.sqrt(var)
    if np.any(std == 0):
        raise ContractError(
            f"channel std is zero for channels {np.nonzero(std == 0)[0].tolist()}; "
            f"standardization would divide by zero"
        )
    return ChannelStats(mean=mean, std=std)


def standardize(img: Array, stats: ChannelStats) -> Array:
    """Center and scale RGB values by the channel statistics (float32)."""
    img = np.asarray(img)
    if img.ndim < 1 or img.shape[-1] != 3:
        raise ContractError(f"standardize expects a trailing RGB axis, got {img.shape}")
    mean = stats.mean.astype(np.float32)
    inv = (1.0 / stats.std).astype(np.float32)
    return (img.astype(np.float32) - mean) * inv


# ---------------------------------------------------------------------------
# Geometric transforms
# ---------------------------------------------------------------------------

def _mirror_index(idx: Array, n: int) -> Array:
    """Fold integer indices into [0, n) by mirroring without edge repeat."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.abs(idx) % period
    return np.where(m >= n, period - m, m)


def _sample_bilinear_u8(img: Array, ys: Array, xs: Array) -> Array:
    """Bilinear sampling of a uint8 image with mirrored borders."""
    h, w = img.shape[0], img.shape[1]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y0m = _mirror_index(y0, h)
    y1m = _mirror_index(y0 + 1, h)
    x0m = _mirror_index(x0, w)
    x1m = _mirror_index(x0 + 1, w)
    f = img.astype(np.float64)
    top = f[y0m, x0m] * (1.0 - fx) + f[y0m, x1m] * fx
    bot = f[y1m, x0m] * (1.0 - fx) + f[y1m, x1m] * fx
    val = top * (1.0 - fy) + bot * fy
    return np.clip(np.rint(val), 0, 255).astype(np.uint8)


def _sample_nearest(arr: Array, ys: Array, xs: Array) -> Array:
    """Nearest-neighbor sampling with mirrored borders (for label maps)."""
    yi = _mirror_index(np.rint(ys).astype(np.int64), arr.shape[0])
    xi = _mirror_index(np.rint(xs).astype(np.int64), arr.shape[1])
    return arr[yi, xi]


def transform(img: Array, labels: Array, kind: str, *,
              warp_amplitude: float = 8.0, warp_period: float = 96.0,
              shear_factor: float = 0.2) -> tuple[Array, Array]:
    """Apply one named geometric transform to an image/label pair.

    Rotations and flips are exact pixel permutations. ``warp`` displaces
    each row horizontally by amplitude * sin(2*pi*y / period); ``shear``
    displaces rows by factor * (y - center). Both resample the image
    bilinearly and the labels by nearest neighbor, mirroring at borders.

    Returns new arrays; the inputs are never modified.
    """
    img = np.asarray(img)
    labels = np.asarray(labels)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"image must be (h, w, 3), got shape {img.shape}")
    if labels.shape != img.shape[:2]:
        raise ContractError(
            f"label shape {labels.shape} does not match image {img.shape[:2]}"
        )
    if kind not in TRANSFORM_KINDS:
        raise ContractError(
            f"unknown transform {kind!r}; choose one of {TRANSFORM_KINDS}"
        )
    h, w = img.shape[0], img.shape[1]
    if kind == "rot90":
        return (np.ascontiguousarray(np.rot90(img, 1, axes=(0, 1))),
                np.ascontiguousarray(np.rot90(labels, 1, axes=(0, 1))))
    if kind == "rot180":
        return (np.ascontiguousarray(np.rot90(img, 2, axes=(0, 1))),
                np.ascontiguousarray(np.rot90(labels, 2, axes=(0, 1))))
    if kind == "rot270":
        return (np.ascontiguousarray(np.rot90(img, 3, axes=(0, 1))),
                np.ascontiguousarray(np.rot90(labels, 3, axes=(0, 1))))
    if kind == "flip_h":
        return (np.ascontiguousarray(img[:, ::-1]),
                np.ascontiguousarray(labels[:, ::-1]))
    if kind == "flip_v":
        return (np.ascontiguousarray(img[::-1]),
                np.ascontiguousarray(labels[::-1]))
    ygrid = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    xbase = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    if kind == "warp":
        if warp_period == 0:
            raise ContractError("warp period must be nonzero")
        if abs(warp_amplitude) >= w:
            raise ContractError(
                f"warp amplitude {warp_amplitude} displaces sampling entirely "
                f"outside a width-{w} image"
            )
        shift = warp_amplitude * np.sin(2.0 * np.pi * np.arange(h) / warp_period)
        xs = xbase - shift[:, None]
    else:  # shear
        if abs(shear_factor) * (h - 1) / 2.0 >= w:
            raise ContractError(
                f"shear factor {shear_factor} displaces sampling entirely "
                f"outside a width-{w} image"
            )
        center = (h - 1) / 2.0
        xs = xbase - shear_factor * (np.arange(h, dtype=np.float64) - center)[:, None]
    return (_sample_bilinear_u8(img, ygrid, xs),
            _sample_nearest(labels, ygrid, xs))


# ---------------------------------------------------------------------------
# Color adjustment
# ---------------------------------------------------------------------------

_CHANNEL_INDEX = {"red": 0, "green": 1, "blue": 2}


def _adjust_values(v: Array, degree, max_slope: float, max_offset: float) -> Array:
    """v -> clamp(round(m * (v - 128) + 128 + b)) with (m, b) interpolated
    linearly from identity (degree 0) to (max_slope, max_offset) (degree 1).
    Broadcasts over leading axes when degree is an array."""
    m = 1.0 + degree * (max_slope - 1.0)
    b = degree * max_offset
    out = m * (v.astype(np.float64) - 128.0) + 128.0 + b
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def color_adjust(img: Array, channel: str, degree: float,
                 max_slope: float = 1.0, max_offset: float = 40.0) -> Array:
    """Shift one color channel by a degree-scaled linear remap.

    Args:
        img: uint8 (h, w, 3) image.
        channel: "red" or "blue" (the stain-sensitive channels).
        degree: adjustment strength in [0, 1]; 0 is the identity.
        max_slope, max_offset: the remap at degree 1.

    Returns:
        A new image with only the chosen channel changed.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractError(
            f"color_adjust expects uint8 (h, w, 3), got {img.dtype} {img.shape}"
        )
    if channel not in ("red", "blue"):
        raise ContractError(f"channel must be 'red' or 'blue', got {channel!r}")
    if not (0.0 <= degree <= 1.0):
        raise ContractError(f"degree must lie in [0, 1], got {degree}")
    out = img.copy()
    ci = _CHANNEL_INDEX[channel]
    out[:, :, ci] = _adjust_values(img[:, :, ci], degree, max_slope, max_offset)
    return out


# ---------------------------------------------------------------------------
# Patch sampling and class-proportion ranking
# ---------------------------------------------------------------------------

def class_fractions(labels: Array, class_count: int = 3) -> Array:
    """Fraction of pixels per class id, as a (class_count,) float vector."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size == 0:
        raise ContractError("cannot take class fractions of an empty map")
    counts = np.bincount(labels.ravel(), minlength=class_count)
    if counts.shape[0] > class_count:
        raise ContractError(
            f"labels contain values >= class_count {class_count}"
        )
    return counts.astype(np.float64) / labels.size


def class_proportion_sd(labels: Array, class_count: int = 3) -> float:
    """Population standard deviation of the per-class pixel fractions.

    0 for a perfectly balanced patch; maximal (~0.4714 for 3 classes)
    when a single class covers the whole patch.
    """
    return float(class_fractions(labels, class_count).std())


def sample_patches(img: Array, labels: Array, count: int, size: int,
                   rng: np.random.Generator) -> list[tuple[Array, Array]]:
    """Draw `count` uniformly random size*size patch pairs (with overlap).

    Corners are drawn uniformly over all valid positions; the same rng
    state always yields the same patches.
    """
    img = np.asarray(img)
    labels = np.asarray(labels)
    if labels.shape != img.shape[:2]:
        raise ContractError(
            f"label shape {labels.shape} does not match image {img.shape[:2]}"
        )
    if count < 0:
        raise ContractError(f"patch count must be >= 0, got {count}")
    h, w = img.shape[0], img.shape[1]
    if size < 1 or size > h or size > w:
        raise ContractError(f"patch size {size} does not fit a {h}x{w} image")
    ys = rng.integers(0, h - size + 1, count)
    xs = rng.integers(0, w - size + 1, count)
    return [(img[y:y + size, x:x + size].copy(),
             labels[y:y + size, x:x + size].copy()) for y, x in zip(ys, xs)]


def _gather_patches(arr: Array, ys: Array, xs: Array, size: int) -> Array:
    """Extract size*size windows at (ys, xs) corners: (q, size, size[, c])."""
    d = np.arange(size)
    rows = ys[:, None] + d[None, :]
    cols = xs[:, None] + d[None, :]
    if arr.ndim == 2:
        return arr[rows[:, :, None], cols[:, None, :]]
    return arr[rows[:, :, None], cols[:, None, :], :]


def select_low_variability(sds, exclusion_fraction: float) -> tuple[Array, Array]:
    """Indices to keep/drop after excluding the highest-spread fraction.

    The drop count is round(n * exclusion_fraction); ties at the cut are
    resolved by original position (stable sort). Both returned index
    arrays are in ascending original order.
    """
    sds = np.asarray(sds, dtype=np.float64)
    if sds.ndim != 1 or sds.size == 0:
        raise ContractError("sds must be a nonempty 1-d array")
    if not (0.0 <= exclusion_fraction < 1.0):
        raise ContractError(
            f"exclusion_fraction must lie in [0, 1), got {exclusion_fraction}"
        )
    n = sds.size
    n_drop = int(round(n * exclusion_fraction))
    order = np.argsort(sds, kind="stable")
    keep = np.sort(order[:n - n_drop])
    drop = np.sort(order[n - n_drop:])
    return keep, drop


# ---------------------------------------------------------------------------
# Augmentation plan and patch sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPlan:
    """Per-image patch quotas by transform, plus pipeline parameters.

    Quotas cap at 900 per transform. After pooling all candidates, the
    highest class-proportion-spread `exclusion_fraction` is dropped,
    then the count is trimmed to a multiple of batch_size at random.
    """

    rot90: int = 450
    rot180: int = 900
    rot270: int = 450
    flip_h: int = 450
    flip_v: int = 450
    warp: int = 900
    shear: int = 900
    patch_size: int = 48
    exclusion_fraction: float = 4.0 / 9.0
    batch_size: int = 128
    warp_amplitude: float = 8.0
    warp_period: float = 96.0
    shear_factor: float = 0.2

    def __post_init__(self) -> None:
        for kind in TRANSFORM_KINDS:
            q = getattr(self, kind)
            if not isinstance(q, (int, np.integer)) or not (0 <= q <= 900):
                raise ContractError(
                    f"quota for {kind} must be an integer in [0, 900], got {q!r}"
                )
        if self.total_per_image < 1:
            raise ContractError("augmentation plan must request at least one patch")
        if self.patch_size < 1:
            raise ContractError(f"patch_size must be positive, got {self.patch_size}")
        if not (0.0 <= self.exclusion_fraction < 1.0):
            raise ContractError(
                f"exclusion_fraction must lie in [0, 1), got {self.exclusion_fraction}"
            )
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")

    @property
    def quotas(self) -> dict[str, int]:
        return {kind: int(getattr(self, kind)) for kind in TRANSFORM_KINDS}

    @property
    def total_per_image(self) -> int:
        return sum(int(getattr(self, kind)) for kind in TRANSFORM_KINDS)


@dataclass
class PatchSet:
    """A shuffled pool of training patches, sized to whole batches."""

    images: Array
    labels: Array
    batch_size: int

    def __post_init__(self) -> None:
        imgs = np.asarray(self.images)
        labs = np.asarray(self.labels)
        if imgs.ndim != 4 or imgs.shape[3] != 3:
            raise ContractError(
                f"patch images must be (n, s, s, 3), got shape {imgs.shape}"
            )
        if labs.shape != imgs.shape[:3]:
            raise ContractError(
                f"patch labels shape {labs.shape} does not match images "
                f"{imgs.shape[:3]}"
            )
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")
        if imgs.shape[0] == 0 or imgs.shape[0] % self.batch_size != 0:
            raise ContractError(
                f"patch count {imgs.shape[0]} is not a positive multiple of "
                f"batch_size {self.batch_size}"
            )
        self.images = imgs
        self.labels = labs

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def batch_count(self) -> int:
        return len(self) // self.batch_size

    def iter_batches(self):
        """Yield (images, labels) views, batch_size patches at a time."""
        b = self.batch_size
        for i in range(self.batch_count):
            yield self.images[i * b:(i + 1) * b], self.labels[i * b:(i + 1) * b]


@dataclass(frozen=True)
class BuildReport:
    """Accounting for one training-set build."""

    raw_count: int
    excluded_count: int
    kept_count: int
    discarded_count: int
    final_count: int
    batch_count: int
    retained_max_sd: float
    excluded_min_sd: float
    class_fractions: tuple[float, ...] | None = None


def _phase1_candidates(pairs, plan: AugmentPlan, rng: np.random.Generator):
    """Transform each pair, draw quota corners, score every candidate.

    Returns (groups, sds, counts) where groups is a list of
    (pair_index, kind, corner_ys, corner_xs) in draw order, and sds /
    counts hold the class-proportion spread and per-class pixel counts
    of all candidates, concatenated in the same order.
    """
    if not pairs:
        raise ContractError("need at least one image/label pair")
    size = plan.patch_size
    groups = []
    sd_parts = []
    count_parts = []
    for pi, (img, lab) in enumerate(pairs):
        img = np.asarray(img)
        lab = np.asarray(lab)
        if lab.shape != img.shape[:2]:
            raise ContractError(
                f"pair {pi}: label shape {lab.shape} does not match image "
                f"{img.shape[:2]}"
            )
        for kind in TRANSFORM_KINDS:
            q = plan.quotas[kind]
            if q == 0:
                continue
            _, tlab = transform(img, lab, kind,
                                warp_amplitude=plan.warp_amplitude,
                                warp_period=plan.warp_period,
                                shear_factor=plan.shear_factor)
            th, tw = tlab.shape
            if th < size or tw < size:
                raise ContractError(
                    f"pair {pi} transformed by {kind} is {th}x{tw}, smaller "
                    f"than patch size {size}"
                )
            ys = rng.integers(0, th - size + 1, q)
            xs = rng.integers(0, tw - size + 1, q)
            patches = _gather_patches(tlab, ys, xs, size)
            counts = np.stack(
                [(patches == c).sum(axis=(1, 2)) for c in range(3)], axis=1)
            frac = counts.astype(np.float64) / (size * size)
            sd_parts.append(frac.std(axis=1))
            count_parts.append(counts)
            groups.append((pi, kind, ys, xs))
    return groups, np.concatenate(sd_parts), np.concatenate(count_parts, axis=0)


def _materialize(pairs, plan: AugmentPlan, groups, chosen: Array
                 ) -> tuple[Array, Array]:
    """Re-run transforms and extract the chosen candidates (with repeats).

    `chosen` holds global candidate indices in output order; indices may
    repeat (balanced resampling draws with replacement).
    """
    size = plan.patch_size
    n = chosen.shape[0]
    imgs_out = np.empty((n, size, size, 3), dtype=np.uint8)
    labs_out = np.empty((n, size, size), dtype=np.uint8)
    order = np.argsort(chosen, kind="stable")
    sorted_chosen = chosen[order]
    offset = 0
    cursor = 0
    for pi, kind, ys, xs in groups:
        q = ys.shape[0]
        hi = cursor
        while hi < n and sorted_chosen[hi] < offset + q:
            hi += 1
        if hi > cursor:
            local = sorted_chosen[cursor:hi] - offset
            timg, tlab = transform(pairs[pi][0], pairs[pi][1], kind,
                                   warp_amplitude=plan.warp_amplitude,
                                   warp_period=plan.warp_period,
                                   shear_factor=plan.shear_factor)
            dest = order[cursor:hi]
            imgs_out[dest] = _gather_patches(timg, ys[local], xs[local], size)
            labs_out[dest] = _gather_patches(tlab, ys[local], xs[local], size)
            cursor = hi
        offset += q
    return imgs_out, labs_out


def build_training_set(pairs, plan: AugmentPlan, rng: np.random.Generator,
                       return_report: bool = False):
    """Build the augmented, variability-filtered, batch-aligned patch set.

    Per image and transform, draws the plan's quota of random patches;
    pools all candidates; drops the round(n * exclusion_fraction) with
    the highest class-proportion spread; removes a random handful so the
    count divides batch_size; materializes and shuffles.
    """
    groups, sds, _ = _phase1_candidates(pairs, plan, rng)
    keep_idx, drop_idx = select_low_variability(sds, plan.exclusion_fraction)
    n_keep = keep_idx.shape[0]
    if n_keep < plan.batch_size:
        raise ConfigError(
            f"only {n_keep} patches survive exclusion but a batch needs "
            f"{plan.batch_size}"
        )
    discard = n_keep % plan.batch_size
    if discard:
        drop_pos = rng.choice(n_keep, size=discard, replace=False)
        mask = np.ones(n_keep, dtype=bool)
        mask[drop_pos] = False
        final_idx = keep_idx[mask]
    else:
        final_idx = keep_idx
    imgs, labs = _materialize(pairs, plan, groups, final_idx)
    perm = rng.permutation(final_idx.shape[0])
    ps = PatchSet(imgs[perm], labs[perm], plan.batch_size)
    if not return_report:
        return ps
    report = BuildReport(
        raw_count=int(sds.shape[0]),
        excluded_count=int(drop_idx.shape[0]),
        kept_count=int(n_keep),
        discarded_count=int(discard),
        final_count=len(ps),
        batch_count=ps.batch_count,
        retained_max_sd=float(sds[keep_idx].max()),
        excluded_min_sd=float(sds[drop_idx].min()) if drop_idx.size else float("nan"),
    )
    return ps, report


def build_balanced_training_set(pairs, plan: AugmentPlan,
                                rng: np.random.Generator,
                                targets=(0.35, 0.34, 0.31),
                                tolerance: float = 0.02,
                                return_report: bool = False):
    """Like build_training_set, but resampled toward target class fractions.

    After the variability exclusion, patches are reweighted by
    exponential tilting of their class-fraction vectors until the
    weighted pooled fractions hit the targets, then drawn with
    replacement to the same final count the standard builder would
    produce. Raises BalanceInfeasibleError when the corpus cannot reach
    the targets within tolerance.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (3,) or np.any(targets <= 0):
        raise ContractError("targets must be three positive fractions")
    if abs(float(targets.sum()) - 1.0) > 1e-6:
        raise ContractError(f"targets must sum to 1, got {targets.sum()}")
    if tolerance <= 0:
        raise ContractError(f"tolerance must be positive, got {tolerance}")
    groups, sds, counts = _phase1_candidates(pairs, plan, rng)
    keep_idx, drop_idx = select_low_variability(sds, plan.exclusion_fraction)
    n_keep = keep_idx.shape[0]
    if n_keep < plan.batch_size:
        raise ConfigError(
            f"only {n_keep} patches survive exclusion but a batch needs "
            f"{plan.batch_size}"
        )
    n_final = n_keep - (n_keep % plan.batch_size)
    frac = counts[keep_idx].astype(np.float64) / (plan.patch_size ** 2)
    lam = np.zeros(3)
    weights = np.full(n_keep, 1.0 / n_keep)
    pooled = frac.mean(axis=0)
    for _ in range(500):
        if np.max(np.abs(pooled - targets)) < 1e-9:
            break
        if np.any((pooled == 0) & (targets > 0)):
            raise BalanceInfeasibleError(
                f"corpus has no pixels of class "
                f"{int(np.nonzero(pooled == 0)[0][0])}; cannot reach {targets}"
            )
        lam += 0.9 * np.log(targets / np.maximum(pooled, 1e-300))
        logw = frac @ lam
        logw -= logw.max()
        weights = np.exp(logw)
        weights /= weights.sum()
        pooled = weights @ frac
    if np.max(np.abs(pooled - targets)) > tolerance / 2:
        raise BalanceInfeasibleError(
            f"resampling weights reach pooled fractions "
            f"{np.round(pooled, 4).tolist()} but targets are {targets.tolist()} "
            f"(tolerance {tolerance})"
        )
    # Residual resampling: replicate patch i floor(n * w_i) times up
    # front and draw only the remainder randomly (without replacement,
    # biased by the fractional parts). The drawn composition then tracks
    # the weighted one far more tightly than independent draws would,
    # which is what lets small builds stay inside the tolerance.
    expected = n_final * weights
    base = np.floor(expected).astype(np.int64)
    short = n_final - int(base.sum())
    if short > 0:
        resid = expected - base
        total = float(resid.sum())
        if total > 0:
            extra = rng.choice(n_keep, size=short, replace=False,
                               p=resid / total)
        else:
            extra = rng.choice(n_keep, size=short, replace=False)
        base[extra] += 1
    draw = np.repeat(np.arange(n_keep), base)
    chosen = keep_idx[draw]
    achieved = counts[chosen].sum(axis=0).astype(np.float64)
    achieved /= achieved.sum()
    if np.max(np.abs(achieved - targets)) > tolerance:
        raise BalanceInfeasibleError(
            f"drawn set has class fractions {np.round(achieved, 4).tolist()}, "
            f"outside tolerance {tolerance} of targets {targets.tolist()}"
        )
    imgs, labs = _materialize(pairs, plan, groups, chosen)
    perm = rng.permutation(n_final)
    ps = PatchSet(imgs[perm], labs[perm], plan.batch_size)
    if not return_report:
        return ps
    report = BuildReport(
        raw_count=int(sds.shape[0]),
        excluded_count=int(drop_idx.shape[0]),
        kept_count=int(n_keep),
        discarded_count=int(n_keep - n_final),
        final_count=len(ps),
        batch_count=ps.batch_count,
        retained_max_sd=float(sds[keep_idx].max()),
        excluded_min_sd=float(sds[drop_idx].min()) if drop_idx.size else float("nan"),
        class_fractions=tuple(float(v) for v in achieved),
    )
    return ps, report


def apply_color_augmentation(ps: PatchSet, rng: np.random.Generator,
                             fraction: float = 0.4, max_slope: float = 1.0,
                             max_offset: float = 40.0) -> PatchSet:
    """Color-shift two disjoint random subsets of a patch set.

    A `fraction` of patches gets a red-channel adjustment and a disjoint
    `fraction` gets a blue-channel one, each with its own uniformly
    random degree in [0, 1). Labels are untouched.
    """
    if not (0.0 <= fraction <= 0.5):
        raise ContractError(
            f"fraction must lie in [0, 0.5] so the subsets stay disjoint, "
            f"got {fraction}"
        )
    n = len(ps)
    k = int(round(fraction * n))
    perm = rng.permutation(n)
    red_idx = perm[:k]
    blue_idx = perm[k:2 * k]
    imgs = ps.images.copy()
    for channel, idx in (("red", red_idx), ("blue", blue_idx)):
        if idx.size == 0:
            continue
        degrees = rng.random(idx.size)[:, None, None]
        ci = _CHANNEL_INDEX[channel]
        imgs[idx, :, :, ci] = _adjust_values(
            imgs[idx, :, :, ci], degrees, max_slope, max_offset)
    return PatchSet(imgs, ps.labels.copy(), ps.batch_size)


def shuffle_epoch(ps: PatchSet, rng: np.random.Generator) -> PatchSet:
    """Re-randomize the visiting order of whole mini-batches.

    Batch memberships never change, and the final batch also keeps its
    position, so its loss stays comparable from epoch to epoch.
    """
    b = ps.batch_size
    nb = ps.batch_count
    if nb <= 1:
        return PatchSet(ps.images.copy(), ps.labels.copy(), b)
    order = np.concatenate([rng.permutation(nb - 1), [nb - 1]])
    idx = (order[:, None] * b + np.arange(b)[None, :]).ravel()
    return PatchSet(ps.images[idx], ps.labels[idx], b)
