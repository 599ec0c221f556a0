"""Strain mathematics on 2D displacement fields.

Conventions used throughout the package:

* images are indexed ``[row, col]``; ``x`` is the column coordinate and ``y``
  the row coordinate, both in pixels;
* a displacement field has shape ``(2, H, W)`` with channel 0 the x (column)
  component and channel 1 the y (row) component;
* angles are measured in the display frame, so increasing angle is
  counter-clockwise on screen (``theta = atan2(cy - y, x - cx)``).
"""

from dataclasses import dataclass
import math

import numpy as np
import torch

BACKGROUND = -1
DEFAULT_ONSET_THRESHOLD = -0.02
LMA_THRESHOLD_MS = 18.0


@dataclass
class ImageSequence:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    dt_ms: float
    modality: str = "cine"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ValueError(f"need (T>=2, H, W) frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite intensities")
        if self.modality not in ("cine", "dense"):
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class MyocardiumMask:
    mask: np.ndarray  # (H, W) bool
    centroid: np.ndarray  # (x, y)
    insertion_points: np.ndarray  # (2, 2), rows are (x, y)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.centroid = np.asarray(self.centroid, dtype=float).reshape(2)
        self.insertion_points = np.asarray(self.insertion_points, dtype=float).reshape(2, 2)


@dataclass
class SectorPartition:
    labels: np.ndarray  # (H, W) int, BACKGROUND outside the myocardium
    n_sectors: int
    start_angle: float  # angular center of sector 0, radians


@dataclass
class StrainMatrix:
    values: np.ndarray  # (N, T)
    dt_ms: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"strain matrix must be 2D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite strain values")


@dataclass
class TOSCurve:
    values: np.ndarray  # (N,) milliseconds

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# geometry helpers


def pixel_grid(shape):
    """Return ``(x, y)`` coordinate arrays for an ``(H, W)`` grid."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    return x, y


def display_angle(x, y, centroid):
    return np.arctan2(centroid[1] - y, x - centroid[0])


def point_angle(point, centroid):
    return math.atan2(centroid[1] - point[1], point[0] - centroid[0])


def insertion_midangle(mask: MyocardiumMask):
    """Bisector angle (shorter arc) of the two insertion points."""
    a = [point_angle(p, mask.centroid) for p in mask.insertion_points]
    return math.atan2(math.sin(a[0]) + math.sin(a[1]), math.cos(a[0]) + math.cos(a[1]))


def circumferential_direction(shape, centroid):
    """Unit counter-clockwise tangent ``(cx, cy)`` at every pixel."""
    x, y = pixel_grid(shape)
    theta = display_angle(x, y, centroid)
    return -np.sin(theta), -np.cos(theta)


# ---------------------------------------------------------------------------
# warping


def _warp_torch(image, u):
    """Bilinear pull-back ``image(x + u(x))`` with border clamping.

    ``image`` is ``(..., H, W)`` and ``u`` is ``(..., 2, H, W)`` with matching
    leading dimensions.  Written with explicit gathers instead of
    ``grid_sample`` so that a zero field reproduces the input bit for bit.
    """
    h, w = image.shape[-2:]
    dtype, device = u.dtype, u.device
    ys = torch.arange(h, dtype=dtype, device=device).view(h, 1)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, w)
    sx = (xs + u[..., 0, :, :]).clamp(0, w - 1)
    sy = (ys + u[..., 1, :, :]).clamp(0, h - 1)
    x0 = sx.detach().floor().clamp(0, max(w - 2, 0))
    y0 = sy.detach().floor().clamp(0, max(h - 2, 0))
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(*image.shape[:-2], h * w)
    lead = flat.shape[:-1]

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(*lead, h * w)
        return torch.gather(flat, -1, idx).reshape(*lead, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def warp(image, u):
    """Return ``image ∘ (id + u)`` by bilinear interpolation.

    Accepts numpy arrays (computed in float64, returned as numpy) or torch
    tensors (differentiable with respect to ``u``).
    """
    if isinstance(image, torch.Tensor) or isinstance(u, torch.Tensor):
        image = torch.as_tensor(image)
        u = torch.as_tensor(u)
        if image.shape[-2:] != u.shape[-2:] or u.shape[-3] != 2:
            raise ValueError(f"shape mismatch: image {tuple(image.shape)}, field {tuple(u.shape)}")
        return _warp_torch(image.to(u.dtype), u)
    image = np.asarray(image, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape[-3] != 2 or image.shape[-2:] != u.shape[-2:]:
        raise ValueError(f"shape mismatch: image {image.shape}, field {u.shape}")
    out = _warp_torch(torch.from_numpy(image), torch.from_numpy(u))
    return out.numpy()


# ---------------------------------------------------------------------------
# strain tensors


def displacement_gradient(u):
    """``grad[i, j] = d u_i / d x_j`` by central differences (one-sided at borders)."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 3 or u.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) field, got {u.shape}")
    grad = np.empty((2, 2) + u.shape[1:])
    for i in range(2):
        d_row, d_col = np.gradient(u[i])
        grad[i, 0] = d_col
        grad[i, 1] = d_row
    return grad


def green_lagrange(u):
    """Green-Lagrange tensor ``E = (F^T F - I) / 2`` as a ``(2, 2, H, W)`` field."""
    F = displacement_gradient(u)
    F[0, 0] += 1.0
    F[1, 1] += 1.0
    E = 0.5 * np.einsum("kihw,kjhw->ijhw", F, F)
    E[0, 0] -= 0.5
    E[1, 1] -= 0.5
    return E


def circumferential_strain(E, mask: MyocardiumMask):
    """Project ``E`` on the circumferential direction; NaN outside the mask."""
    E = np.asarray(E, dtype=float)
    if E.shape[:2] != (2, 2) or E.shape[2:] != mask.mask.shape:
        raise ValueError(f"tensor field {E.shape} does not match mask {mask.mask.shape}")
    cx, cy = circumferential_direction(mask.mask.shape, mask.centroid)
    ecc = cx * cx * E[0, 0] + cx * cy * (E[0, 1] + E[1, 0]) + cy * cy * E[1, 1]
    return np.where(mask.mask, ecc, np.nan)


# ---------------------------------------------------------------------------
# sectors and strain matrices


def sector_index(theta, start_angle, n_sectors):
    """Sector of each angle; wedge 0 is centred on ``start_angle``.

    Angles falling exactly on a wedge boundary go to the lower index.
    """
    width = 2 * np.pi / n_sectors
    pos = np.mod(np.asarray(theta) - start_angle + width / 2, 2 * np.pi) / width
    idx = np.floor(pos).astype(int)
    nearest = np.rint(pos)
    tie = np.abs(pos - nearest) < 1e-9
    tie_idx = np.where(nearest >= 1, nearest.astype(int) - 1, 0)
    idx = np.where(tie, tie_idx, idx)
    return np.where(idx >= n_sectors, 0, idx)


def build_partition(mask: MyocardiumMask, n_sectors: int) -> SectorPartition:
    if n_sectors < 4:
        raise ValueError(f"n_sectors must be >= 4, got {n_sectors}")
    if mask.mask.sum() < n_sectors:
        raise ValueError(f"only {int(mask.mask.sum())} myocardium pixels for {n_sectors} sectors")
    x, y = pixel_grid(mask.mask.shape)
    start = insertion_midangle(mask)
    idx = sector_index(display_angle(x, y, mask.centroid), start, n_sectors)
    labels = np.where(mask.mask, idx, BACKGROUND)
    return SectorPartition(labels=labels, n_sectors=n_sectors, start_angle=start)


def sector_means(field, partition: SectorPartition):
    """Mean of ``field`` over the pixels of each sector."""
    sel = partition.labels >= 0
    lab = partition.labels[sel]
    counts = np.bincount(lab, minlength=partition.n_sectors)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"empty sectors: {empty.tolist()}")
    sums = np.bincount(lab, weights=np.asarray(field)[sel], minlength=partition.n_sectors)
    return sums / counts


def build_strain_matrix(phis, mask: MyocardiumMask, partition: SectorPartition,
                        dt_ms: float = 17.0) -> StrainMatrix:
    """Sector-averaged circumferential strain for a ``(T, 2, H, W)`` sequence."""
    phis = np.asarray(phis, dtype=float)
    if phis.ndim != 4 or phis.shape[1] != 2:
        raise ValueError(f"expected (T, 2, H, W) displacements, got {phis.shape}")
    cols = [sector_means(circumferential_strain(green_lagrange(u), mask), partition)
            for u in phis]
    return StrainMatrix(values=np.stack(cols, axis=1), dt_ms=dt_ms)


# ---------------------------------------------------------------------------
# TOS and LMA


def extract_tos(S: StrainMatrix, onset_threshold: float = DEFAULT_ONSET_THRESHOLD) -> TOSCurve:
    """Onset of circumferential shortening per sector, in ms.

    Frame ``t`` (1-based) is the onset when the two frames that follow it are
    both at or below ``onset_threshold``: the reference frame carries zero
    strain by construction, so shortening that starts at frame ``t`` first
    shows up at ``t + 1``.  Sectors that never shorten get ``T * dt``.
    """
    vals = np.asarray(S.values, dtype=float)
    n, T = vals.shape
    below = vals <= onset_threshold
    pair = below[:, 1:-1] & below[:, 2:]  # column k <-> onset frame k + 1
    tos = np.full(n, float(T))
    hit = pair.any(axis=1)
    tos[hit] = np.argmax(pair[hit], axis=1) + 1
    return TOSCurve(values=tos * S.dt_ms)


def classify_lma(tos: TOSCurve, threshold_ms: float = LMA_THRESHOLD_MS):
    return np.asarray(tos.values) > threshold_ms


# ---------------------------------------------------------------------------
# low-rank smoothing


def low_rank_project(S: StrainMatrix, k: int) -> StrainMatrix:
    """Best rank-``k`` approximation (Frobenius norm) by truncated SVD."""
    vals = np.asarray(S.values, dtype=float)
    if not 1 <= k <= min(vals.shape):
        raise ValueError(f"rank {k} outside [1, {min(vals.shape)}]")
    U, s, Vt = np.linalg.svd(vals, full_matrices=False)
    return StrainMatrix(values=(U[:, :k] * s[:k]) @ Vt[:k], dt_ms=S.dt_ms)


def strain_matrix_to_tensors(S: StrainMatrix, tos: TOSCurve = None):
    tensors = {"strain": S.values}
    if tos is not None:
        tensors["tos"] = tos.values
    return tensors


def write_sector_csv(path, tos: TOSCurve, threshold_ms: float = LMA_THRESHOLD_MS):
    flags = classify_lma(tos, threshold_ms)
    with open(path, "w") as fh:
        fh.write("sector_index,tos_ms,lma_flag\n")
        for i, (t, f) in enumerate(zip(tos.values, flags)):
            fh.write(f"{i},{t:.6f},{int(f)}\n")
