"""Classical baselines: k-means color clustering and multiband thresholding.

k-means runs Lloyd's algorithm in RGB or CIELAB feature space with
multiple random restarts; cluster ids are matched to class ids by
exhaustive permutation search maximizing the set mean DSC.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .metrics import ScoreTable, score_predictions

Array = np.ndarray

# sRGB (D65) linear RGB -> XYZ matrix rows.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = np.array([0.95047, 1.0, 1.08883])  # D65 reference white


def rgb_to_lab(img: Array) -> Array:
    """Convert uint8 sRGB to CIELAB (D65, 2 degree observer), float64.

    L lies in [0, 100]; a and b are signed chroma axes. Pure white maps
    to (100, 0, 0).
    """
    img = np.asarray(img)
    if img.shape[-1] != 3:
        raise ContractError(f"expected a trailing RGB axis, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ContractError(f"expected uint8 sRGB values, got dtype {img.dtype}")
    v = img.astype(np.float64) / 255.0
    linear = np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta * delta) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    """Winning restart of a k-means run."""

    centroids: Array
    assignments: Array
    inertia: float
    n_iter: int
    restart_index: int
    inertia_trace: tuple[float, ...]


def _squared_distances(points: Array, centroids: Array) -> Array:
    d2 = (np.sum(points * points, axis=1)[:, None]
          - 2.0 * points @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def kmeans(points: Array, k: int, rng: np.random.Generator, restarts: int = 3,
           max_iter: int = 300, tol: float = 1e-6,
           objective: str = "squared") -> KMeansResult:
    """Lloyd's algorithm with random-data-point init and restarts.

    Each restart initializes centroids at k distinct random points and
    iterates assign/update until the assignment reaches a fixpoint, the
    relative inertia improvement drops below `tol`, or `max_iter`
    passes. A cluster left empty is reseeded to the point currently
    farthest from its assigned centroid. The restart with the lowest
    reported inertia wins; exact ties keep the earliest restart.

    Args:
        points: (n, d) float feature rows.
        k: cluster count (1 <= k <= n).
        rng: generator driving init; same state, same result.
        objective: "squared" reports summed squared Euclidean distances
            (the quantity Lloyd minimizes); "euclidean" reports the sum
            of plain distances instead. The optimization itself always
            uses squared distances.

    Returns:
        KMeansResult for the winning restart, including its
        per-iteration inertia trace (always the squared objective).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ContractError(f"points must be a nonempty (n, d) array, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ContractError("points must be finite")
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ContractError(f"need 1 <= k <= {n} points, got k={k}")
    if restarts < 1:
        raise ContractError(f"restarts must be >= 1, got {restarts}")
    if max_iter < 1:
        raise ContractError(f"max_iter must be >= 1, got {max_iter}")
    if tol < 0:
        raise ContractError(f"tol must be >= 0, got {tol}")
    if objective not in ("squared", "euclidean"):
        raise ContractError(
            f"objective must be 'squared' or 'euclidean', got {objective!r}"
        )
    best: KMeansResult | None = None
    for restart in range(restarts):
        init_idx = rng.choice(n, size=k, replace=False)
        centroids = points[init_idx].copy()
        prev_assign = None
        prev_inertia = None
        trace: list[float] = []
        assign = np.zeros(n, dtype=np.int64)
        iterations = 0
        for _ in range(max_iter):
            iterations += 1
            d2 = _squared_distances(points, centroids)
            assign = d2.argmin(axis=1)
            min_d2 = d2[np.arange(n), assign]
            inertia = float(min_d2.sum())
            trace.append(inertia)
            if prev_assign is not None and np.array_equal(assign, prev_assign):
                break
            if prev_inertia is not None and \
                    prev_inertia - inertia <= tol * max(prev_inertia, 1e-300):
                break
            # Update step; empty clusters move to the farthest point.
            far_d2 = min_d2.copy()
            for c in range(k):
                members = assign == c
                if members.any():
                    centroids[c] = points[members].mean(axis=0)
                else:
                    far = int(far_d2.argmax())
                    centroids[c] = points[far]
                    far_d2[far] = -1.0
            prev_assign = assign
            prev_inertia = inertia
        if objective == "euclidean":
            d2 = _squared_distances(points, centroids)
            reported = float(np.sqrt(d2[np.arange(n), assign]).sum())
        else:
            reported = trace[-1]
        if best is None or reported < best.inertia:
            best = KMeansResult(centroids=centroids, assignments=assign,
                                inertia=reported, n_iter=iterations,
                                restart_index=restart,
                                inertia_trace=tuple(trace))
    return best


# ---------------------------------------------------------------------------
# Cluster-to-class matching
# ---------------------------------------------------------------------------

def match_permutation(pred_maps, truth_maps, class_count: int
                      ) -> tuple[tuple[int, ...], ScoreTable]:
    """Best relabeling of cluster ids to class ids, by exhaustive search.

    Tries every permutation (cluster id c -> class perm[c]) and keeps
    the one with the highest set mean DSC over all maps; exact ties keep
    the lexicographically first permutation.

    Returns:
        (winning permutation, ScoreTable of the relabeled predictions).
    """
    if len(pred_maps) != len(truth_maps) or not pred_maps:
        raise ContractError("need matching nonempty prediction/truth lists")
    best_perm = None
    best_table = None
    for perm in itertools.permutations(range(class_count)):
        lut = np.asarray(perm, dtype=np.int64)
        relabeled = [lut[np.asarray(p)] for p in pred_maps]
        table = score_predictions(relabeled, truth_maps, class_count)
        if best_table is None or table.mean_dsc > best_table.mean_dsc:
            best_perm = perm
            best_table = table
    return best_perm, best_table


@dataclass(frozen=True)
class KMeansBaselineResult:
    """Relabeled k-means segmentations plus their scores."""

    label_maps: tuple[Array, ...]
    table: ScoreTable
    permutations: tuple[tuple[int, ...], ...]
    inertias: tuple[float, ...]


def run_kmeans_baseline(pairs, rng: np.random.Generator, space: str = "rgb",
                        k: int = 3, restarts: int = 3, max_iter: int = 300,
                        tol: float = 1e-6, pooled: bool = False,
                        objective: str = "squared") -> KMeansBaselineResult:
    """Cluster image colors and score against ground truth.

    By default each image is clustered independently and its cluster ids
    matched to classes by the permutation maximizing that image's mean
    DSC (which also maximizes the set mean). With `pooled`, all pixels
    cluster together and one permutation is chosen for the whole set.

    Args:
        pairs: list of (uint8 image, label map) tuples.
        space: "rgb" (raw values) or "lab" (CIELAB conversion).
    """
    if space not in ("rgb", "lab"):
        raise ContractError(f"space must be 'rgb' or 'lab', got {space!r}")
    if not pairs:
        raise ContractError("need at least one image/label pair")

    def features(img: Array) -> Array:
        img = np.asarray(img)
        if space == "lab":
            return rgb_to_lab(img).reshape(-1, 3)
        return img.reshape(-1, 3).astype(np.float64)

    truths = [np.asarray(lab) for _, lab in pairs]
    if pooled:
        feats = np.concatenate([features(img) for img, _ in pairs], axis=0)
        result = kmeans(feats, k, rng, restarts=restarts, max_iter=max_iter,
                        tol=tol, objective=objective)
        maps = []
        offset = 0
        for img, _ in pairs:
            h, w = np.asarray(img).shape[:2]
            maps.append(result.assignments[offset:offset + h * w].reshape(h, w))
            offset += h * w
        perm, table = match_permutation(maps, truths, k)
        lut = np.asarray(perm, dtype=np.int64)
        relabeled = tuple(lut[m] for m in maps)
        return KMeansBaselineResult(label_maps=relabeled, table=table,
                                    permutations=(perm,) * len(pairs),
                                    inertias=(result.inertia,))
    relabeled = []
    perms = []
    inertias = []
    for img, truth in pairs:
        h, w = np.asarray(img).shape[:2]
        result = kmeans(features(img), k, rng, restarts=restarts,
                        max_iter=max_iter, tol=tol, objective=objective)
        amap = result.assignments.reshape(h, w)
        perm, _ = match_permutation([amap], [truth], k)
        lut = np.asarray(perm, dtype=np.int64)
        relabeled.append(lut[amap])
        perms.append(perm)
        inertias.append(result.inertia)
    table = score_predictions(relabeled, truths, k)
    return KMeansBaselineResult(label_maps=tuple(relabeled), table=table,
                                permutations=tuple(perms),
                                inertias=tuple(inertias))


# ---------------------------------------------------------------------------
# Multiband thresholding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdRule:
    """Assign `cls` where every channel lies in its inclusive range."""

    cls: int
    red: tuple[int, int]
    green: tuple[int, int]
    blue: tuple[int, int]

    def __post_init__(self) -> None:
        if self.cls < 0:
            raise ContractError(f"rule class must be >= 0, got {self.cls}")
        for name in ("red", "green", "blue"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi <= 255):
                raise ContractError(
                    f"rule {name} range ({lo}, {hi}) must satisfy "
                    f"0 <= lo <= hi <= 255"
                )


@dataclass(frozen=True)
class ThresholdRuleSet:
    """Ordered rules (first match wins) plus a fallback class."""

    rules: tuple[ThresholdRule, ...]
    default_cls: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.rules:
            raise ContractError("rule set needs at least one rule")
        if self.default_cls < 0:
            raise ContractError(
                f"default class must be >= 0, got {self.default_cls}"
            )


def default_threshold_rules() -> ThresholdRuleSet:
    """Rules tuned to the bundled synthetic palette; background fallback."""
    return ThresholdRuleSet(rules=(
        ThresholdRule(cls=2, red=(0, 160), green=(0, 190), blue=(140, 255)),
        ThresholdRule(cls=0, red=(140, 255), green=(0, 170), blue=(0, 170)),
        ThresholdRule(cls=1, red=(180, 255), green=(180, 255), blue=(180, 255)),
    ), default_cls=1)


def multiband_threshold(img: Array, ruleset: ThresholdRuleSet) -> Array:
    """Label pixels by the first rule whose RGB ranges all contain them."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"image must be (h, w, 3), got shape {img.shape}")
    out = np.full(img.shape[:2], ruleset.default_cls, dtype=np.uint8)
    assigned = np.zeros(img.shape[:2], dtype=bool)
    for rule in ruleset.rules:
        hit = ~assigned
        for ci, (lo, hi) in enumerate((rule.red, rule.green, rule.blue)):
            ch = img[:, :, ci]
            hit = hit & (ch >= lo) & (ch <= hi)
        out[hit] = rule.cls
        assigned |= hit
    return out
