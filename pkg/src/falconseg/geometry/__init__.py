"""Boundary geometry: exact distance transforms and surface metrics.

Conventions, fixed across the package:

* Masks are 2D arrays whose values are exactly {0, 1} (any integer or bool
  dtype).  Anything else raises ``ShapeMismatchError`` / ``ValueError``.
* ``distance_transform`` maps each pixel to its Euclidean distance to the
  nearest *object* pixel, so it is zero everywhere inside the object.  Pass
  ``to_boundary=True`` for distance to the object's boundary pixels instead
  (nonzero in the object interior).
* An all-zero mask has no nearest object pixel; its transform is the
  constant sentinel ``sqrt(H^2 + W^2)``, one step beyond any realizable
  in-grid distance.
* A boundary pixel is an object pixel with at least one 4-neighbor that is
  background or outside the grid, so objects touching the border contribute
  boundary there.

Distances are exact: squared distances are integers below 2**53 and the
final sqrt is correctly rounded, so both backends agree bitwise with a
brute-force reference.
"""

import numpy as np

from falconseg.backend import use_numba
from falconseg.errors import BothEmptyError, EmptySetError, ShapeMismatchError
from falconseg.geometry.kernels import edt_squared, min_sq_dists

__all__ = [
    "validate_mask",
    "as_pixel_set",
    "distance_transform",
    "boundary_pixels",
    "dsc",
    "hd_directed",
    "hd95",
    "hd95_symmetric",
]


def validate_mask(mask, name: str = "mask") -> np.ndarray:
    """Check a binary mask and return it as a contiguous uint8 array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeMismatchError(f"{name} has zero size, shape {arr.shape}")
    if arr.dtype == bool:
        return np.ascontiguousarray(arr, dtype=np.uint8)
    if not np.issubdtype(arr.dtype, np.integer):
        # float masks are accepted only if they hold exact 0/1 values
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} must be binary, found values outside {{0, 1}}")
        return np.ascontiguousarray(arr != 0, dtype=np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary, found values outside {{0, 1}}")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def as_pixel_set(points) -> np.ndarray:
    """Normalize a pixel collection to a deduplicated (N, 2) int64 array.

    Accepts an (N, 2) array-like of (row, col) pairs.  Rows are sorted
    row-major so the representation is canonical.
    """
    arr = np.asarray(points, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatchError(f"pixel set must have shape (N, 2), got {arr.shape}")
    return np.unique(arr, axis=0)


def boundary_pixels(mask) -> np.ndarray:
    """Boundary PixelSet of a mask: object pixels 4-adjacent to background
    or to the outside of the grid.  Returns (N, 2) int64, row-major sorted.
    """
    m = validate_mask(mask)
    h, w = m.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = m
    obj = m.astype(bool)
    interior = (
        padded[:-2, 1:-1].astype(bool)
        & padded[2:, 1:-1].astype(bool)
        & padded[1:-1, :-2].astype(bool)
        & padded[1:-1, 2:].astype(bool)
    )
    rows, cols = np.nonzero(obj & ~interior)
    out = np.stack([rows, cols], axis=1).astype(np.int64)
    return out  # np.nonzero already yields row-major order


def distance_transform(mask, to_boundary: bool = False) -> np.ndarray:
    """Exact Euclidean distance map of a binary mask, float64 HxW.

    Each pixel's value is the distance to the nearest object pixel (zero
    inside the object).  With ``to_boundary=True`` the target set is the
    object's boundary pixels, so interior pixels get positive depth.  For
    an all-zero mask every pixel takes the sentinel ``sqrt(H^2 + W^2)``.
    """
    m = validate_mask(mask)
    h, w = m.shape
    if not m.any():
        return np.full((h, w), np.sqrt(float(h * h + w * w)), dtype=np.float64)
    if to_boundary:
        b = boundary_pixels(m)
        target = np.zeros((h, w), dtype=np.uint8)
        target[b[:, 0], b[:, 1]] = 1
    else:
        target = m
    return np.sqrt(edt_squared(target, backend_numba=use_numba("geometry")))


def dsc(pred, target) -> float:
    """Dice similarity coefficient 2|U∩V| / (|U| + |V|) of two masks."""
    p = validate_mask(pred, "pred")
    t = validate_mask(target, "target")
    if p.shape != t.shape:
        raise ShapeMismatchError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    sp = int(p.sum())
    st = int(t.sum())
    if sp == 0 and st == 0:
        raise BothEmptyError("dsc undefined: both masks are empty")
    inter = int((p & t).sum())
    return 2.0 * inter / (sp + st)


def _nonempty_sets(u, v):
    su = as_pixel_set(u)
    sv = as_pixel_set(v)
    if su.shape[0] == 0:
        raise EmptySetError("first pixel set is empty")
    if sv.shape[0] == 0:
        raise EmptySetError("second pixel set is empty")
    return su, sv


def _min_dists(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d2 = min_sq_dists(
        u.astype(np.float64), v.astype(np.float64), backend_numba=use_numba("geometry")
    )
    return np.sqrt(d2)


def hd_directed(u, v) -> float:
    """Directed Hausdorff distance max_{p in u} min_{q in v} ‖p−q‖₂.

    Operates on PixelSets ((N, 2) row/col arrays), not masks: compose with
    ``boundary_pixels`` for mask boundaries.  Not symmetric.
    """
    su, sv = _nonempty_sets(u, v)
    return float(_min_dists(su, sv).max())


def hd95(u, v) -> float:
    """Directed 95th percentile of { min_q ‖p−q‖ : p in u }.

    Percentile uses linear interpolation between closest ranks.
    """
    su, sv = _nonempty_sets(u, v)
    return float(np.percentile(_min_dists(su, sv), 95))


def hd95_symmetric(u, v, mode: str = "max") -> float:
    """Symmetric HD95 of two PixelSets.

    ``mode="max"`` (default, the reported metric) takes the worse direction;
    ``mode="mean"`` averages the two directed values.
    """
    if mode not in ("max", "mean"):
        raise ValueError(f"mode must be 'max' or 'mean', got {mode!r}")
    fwd = hd95(u, v)
    bwd = hd95(v, u)
    return float(max(fwd, bwd)) if mode == "max" else float((fwd + bwd) / 2.0)
