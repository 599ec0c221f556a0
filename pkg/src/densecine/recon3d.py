"""3D activation maps: interpolate per-slice TOS over a mid-wall tube and export PLY."""

from dataclasses import dataclass, field
import os

import numpy as np

from .strain import (
    LMA_THRESHOLD_MS,
    MyocardiumMask,
    TOSCurve,
    build_partition,
    insertion_midangle,
    pixel_grid,
    sector_index,
)

# colour ramp end points (ms): pure blue at or below BLUE_MS, deep red at or above RED_MS
BLUE_MS = 0.0
RED_MS = 150.0


@dataclass
class SliceTOS:
    z_mm: float
    mask: MyocardiumMask
    tos: TOSCurve


@dataclass
class SlicedStudy:
    slices: list
    pixel_spacing_mm: float = 1.5

    def __post_init__(self):
        if len(self.slices) < 2:
            raise ValueError(f"need at least 2 slices, got {len(self.slices)}")
        z = np.array([s.z_mm for s in self.slices], dtype=float)
        if np.any(np.diff(z) <= 0):
            raise ValueError(f"slice z positions must be strictly increasing: {z.tolist()}")
        sizes = {len(s.tos.values) for s in self.slices}
        if len(sizes) != 1:
            raise ValueError(f"slices disagree on the sector count: {sorted(sizes)}")
        if not self.pixel_spacing_mm > 0:
            raise ValueError("pixel spacing must be positive")

    @property
    def n_sectors(self):
        return len(self.slices[0].tos.values)


@dataclass
class ActivationSurface:
    points: np.ndarray  # (P, 3) mm
    tos: np.ndarray  # (P,) ms
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.tos = np.asarray(self.tos, dtype=float).reshape(-1)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.tos) != len(self.points):
            raise ValueError(f"{len(self.tos)} TOS values for {len(self.points)} points")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.points)):
            raise ValueError("face index out of range")


def midwall_radii(mask: MyocardiumMask, n_sectors: int):
    """Per-sector mid-wall radius (pixels): mean of the innermost and outermost pixel radius."""
    partition = build_partition(mask, n_sectors)
    x, y = pixel_grid(mask.mask.shape)
    r = np.hypot(x - mask.centroid[0], y - mask.centroid[1])
    radii = np.empty(n_sectors)
    for n in range(n_sectors):
        rn = r[partition.labels == n]
        if rn.size == 0:
            raise ValueError(f"degenerate mask: sector {n} is empty")
        radii[n] = 0.5 * (rn.min() + rn.max())
    return radii, partition.start_angle


def _ring(slice_: SliceTOS, n_sectors, angles):
    """Radius (sector-piecewise) and TOS (periodic-linear between sector centres) at ``angles``."""
    radii, start = midwall_radii(slice_.mask, n_sectors)
    radius = radii[sector_index(angles, start, n_sectors)]
    width = 2 * np.pi / n_sectors
    pos = np.mod(angles - start, 2 * np.pi) / width  # sector-centre coordinates
    lo = np.floor(pos).astype(int) % n_sectors
    frac = pos - np.floor(pos)
    values = np.asarray(slice_.tos.values, dtype=float)
    tos = (1 - frac) * values[lo] + frac * values[(lo + 1) % n_sectors]
    return radius, tos


def reconstruct_surface(study: SlicedStudy, angular_samples: int, z_samples: int) -> ActivationSurface:
    """Structured (z x angle) tube through the mid-wall of every slice, TOS interpolated bilinearly.

    Angles are measured from the first slice's sector-0 direction so that the
    construction follows a global rotation of the study.
    """
    n = study.n_sectors
    if angular_samples < n:
        raise ValueError(f"angular_samples ({angular_samples}) must be >= n_sectors ({n})")
    if z_samples < len(study.slices):
        raise ValueError(f"z_samples ({z_samples}) must be >= number of slices ({len(study.slices)})")

    origin = insertion_midangle(study.slices[0].mask)
    angles = origin + 2 * np.pi * np.arange(angular_samples) / angular_samples
    rings = [_ring(s, n, angles) for s in study.slices]
    centres = np.array([s.mask.centroid for s in study.slices], dtype=float)
    zs = np.array([s.z_mm for s in study.slices], dtype=float)

    levels = np.linspace(zs[0], zs[-1], z_samples)
    upper = np.clip(np.searchsorted(zs, levels, side="right"), 1, len(zs) - 1)
    lower = upper - 1
    t = np.clip((levels - zs[lower]) / (zs[upper] - zs[lower]), 0.0, 1.0)

    radius = np.array([(1 - ti) * rings[a][0] + ti * rings[b][0] for a, b, ti in zip(lower, upper, t)])
    tos = np.array([(1 - ti) * rings[a][1] + ti * rings[b][1] for a, b, ti in zip(lower, upper, t)])
    centre = (1 - t)[:, None] * centres[lower] + t[:, None] * centres[upper]

    s = study.pixel_spacing_mm
    col = centre[:, :1] + radius * np.cos(angles)
    row = centre[:, 1:] - radius * np.sin(angles)
    points = np.stack([col * s, -row * s, np.broadcast_to(levels[:, None], col.shape)], axis=-1)

    k, j = np.meshgrid(np.arange(z_samples - 1), np.arange(angular_samples), indexing="ij")
    a = k * angular_samples + j
    b = k * angular_samples + (j + 1) % angular_samples
    c, d = a + angular_samples, b + angular_samples
    faces = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
    return ActivationSurface(points.reshape(-1, 3), tos.reshape(-1), faces)


def tos_colors(tos, threshold_ms=LMA_THRESHOLD_MS):
    """Blue below ``threshold_ms``, red at or above it; saturation grows away from the threshold."""
    tos = np.asarray(tos, dtype=float)
    below = np.clip((threshold_ms - tos) / (threshold_ms - BLUE_MS), 0, 1)
    above = np.clip((tos - threshold_ms) / (RED_MS - threshold_ms), 0, 1)
    fade_blue = np.rint(200 * (1 - below)).astype(int)
    fade_red = np.rint(200 * (1 - above)).astype(int)
    lma = tos >= threshold_ms
    red = np.where(lma, 255, fade_blue)
    green = np.where(lma, fade_red, fade_blue)
    blue = np.where(lma, fade_red, 255)
    return np.stack([red, green, blue], axis=-1).astype(np.uint8)


def export_surface(surface: ActivationSurface, path, threshold_ms=LMA_THRESHOLD_MS):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise OSError(f"cannot write {path}: directory {parent} does not exist")
    colors = tos_colors(surface.tos, threshold_ms)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(surface.points)}",
        "property float x",
        "property float y",
        "property float z",
        "property float tos_ms",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(surface.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, v, c in zip(surface.points, surface.tos, colors):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {v:.9g} {c[0]} {c[1]} {c[2]}")
    for f in surface.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path):
    """Parse an ASCII PLY written by :func:`export_surface` -> ``(surface, colors)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply" or "end_header" not in lines:
        raise ValueError(f"{path} is not an ASCII PLY file")
    end = lines.index("end_header")
    counts = {}
    for line in lines[1:end]:
        parts = line.split()
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    body = lines[end + 1:]
    if len(body) < nv + nf:
        raise ValueError(f"{path} is truncated")
    vert = np.array([[float(x) for x in row.split()] for row in body[:nv]]).reshape(nv, 7)
    faces = np.array([[int(x) for x in row.split()[1:]] for row in body[nv:nv + nf]], dtype=np.int64)
    surface = ActivationSurface(vert[:, :3], vert[:, 3], faces.reshape(-1, 3))
    return surface, vert[:, 4:].astype(np.uint8)
