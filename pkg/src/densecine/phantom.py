"""Synthetic annular LV phantom with analytic motion, strain and TOS.

Each sector starts contracting at its own onset frame.  Two smooth angular
profiles come from the sector amplitudes: ``a`` (narrow blend) sets the
circumferential shortening, and ``s`` (wide blend) sets a local radial pull.
The pull-back map at one time point is

    phi(r, psi) = c + (1 - lam s(psi)) r e(Theta(psi))
    Theta'(psi) = sqrt((1 - a)^2 - (lam s')^2) / (1 - lam s)

with ``lam`` chosen so that ``Theta`` closes over a full turn.  With this
choice the circumferential stretch is exactly ``1 - a(psi)`` at every
radius, so a sector that has not started sees (almost) no shortening while
still moving visibly in the radial direction.  A uniform pattern collapses
to pure radial scaling.  Frames are rendered as ``I_t = I_1 o phi_t``.
"""

from dataclasses import asdict, dataclass, field
import json
import math
import os

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from . import io
from .strain import (
    ImageSequence,
    MyocardiumMask,
    StrainMatrix,
    TOSCurve,
    build_partition,
    build_strain_matrix,
    warp,
)

RAMP_FRAMES = 5
BLEND_FWHM_SECTORS = 3.0
RADIAL_FWHM_SECTORS = 12.0
ANGULAR_SAMPLES = 8192
INSERTION_ANGLES_DEG = (150.0, 210.0)


@dataclass
class PhantomSpec:
    grid_size: int = 64
    n_sectors: int = 128
    t_cine: int = 40
    t_dense: int = 20
    cine_dt_ms: float = 40.0
    dense_dt_ms: float = 17.0
    inner_radius: float = 15.0
    outer_radius: float = 26.0
    peak_contraction: float = 0.2
    tos_pattern: tuple = None
    texture_seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.tos_pattern is None:
            self.tos_pattern = (1,) * int(self.n_sectors)
        self.tos_pattern = tuple(int(v) for v in self.tos_pattern)

    def validate(self):
        errors = []
        if self.grid_size < 8 or self.grid_size % 4:
            errors.append(f"grid_size must be a multiple of 4 and >= 8 (got {self.grid_size})")
        if not 0 < self.inner_radius < self.outer_radius < self.grid_size / 2:
            errors.append("radii must satisfy 0 < inner_radius < outer_radius < grid_size/2 "
                          f"(got {self.inner_radius}, {self.outer_radius}, grid {self.grid_size})")
        if self.n_sectors < 4:
            errors.append(f"n_sectors must be >= 4 (got {self.n_sectors})")
        if len(self.tos_pattern) != self.n_sectors:
            errors.append(f"tos_pattern has {len(self.tos_pattern)} entries, expected {self.n_sectors}")
        elif min(self.tos_pattern) < 1:
            errors.append("tos_pattern entries must be frame indices >= 1")
        elif max(self.tos_pattern) > self.t_dense:
            errors.append(f"tos_pattern entries must not exceed t_dense={self.t_dense}")
        if not 0 <= self.peak_contraction < 0.3:
            errors.append(f"peak_contraction must lie in [0, 0.3) (got {self.peak_contraction})")
        if self.t_cine < 2 or self.t_dense < 2:
            errors.append("need at least two cine and two DENSE frames")
        if self.cine_dt_ms <= 0 or self.dense_dt_ms <= 0:
            errors.append("frame intervals must be positive")
        if self.noise_sigma < 0:
            errors.append(f"noise_sigma must be >= 0 (got {self.noise_sigma})")
        if errors:
            raise ValueError("invalid PhantomSpec: " + "; ".join(errors))
        return self

    def to_dict(self):
        d = asdict(self)
        d["tos_pattern"] = list(self.tos_pattern)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PhantomCase:
    cine: ImageSequence
    dense: ImageSequence
    gt_displacements_dense: np.ndarray  # (t_dense, 2, G, G)
    gt_strain: StrainMatrix
    gt_tos: TOSCurve
    myocardium: MyocardiumMask
    spec: PhantomSpec
    seed: int = 0
    case_id: str = ""
    extra: dict = field(default_factory=dict)

    def partition(self):
        return build_partition(self.myocardium, self.spec.n_sectors)


# ---------------------------------------------------------------------------
# geometry


def _centroid(spec):
    c = (spec.grid_size - 1) / 2.0
    return np.array([c, c])


def _polar(spec):
    g = spec.grid_size
    y, x = np.mgrid[0:g, 0:g].astype(float)
    c = _centroid(spec)
    dx, dy = x - c[0], y - c[1]
    return x, y, np.hypot(dx, dy), np.arctan2(-dy, dx)


def make_mask(spec) -> MyocardiumMask:
    x, y, r, theta = _polar(spec)
    mask = (r >= spec.inner_radius) & (r <= spec.outer_radius)
    c = _centroid(spec)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    boundary = mask & ~interior & (r > (spec.inner_radius + spec.outer_radius) / 2)
    by, bx = np.nonzero(boundary)
    points = []
    for deg in INSERTION_ANGLES_DEG:
        target = math.radians(deg)
        diff = np.abs(np.angle(np.exp(1j * (theta[by, bx] - target))))
        k = int(np.argmin(diff - 1e-3 * r[by, bx]))
        points.append((float(bx[k]), float(by[k])))
    return MyocardiumMask(mask=mask, centroid=c, insertion_points=np.array(points))


def sector_zero_angle(spec):
    a = [math.radians(d) for d in INSERTION_ANGLES_DEG]
    return math.atan2(sum(map(math.sin, a)), sum(map(math.cos, a)))


# ---------------------------------------------------------------------------
# motion


def sector_amplitudes(spec, time_ms):
    """Contraction fraction of every sector at time ``time_ms`` after frame 1."""
    onset = (np.asarray(spec.tos_pattern, dtype=float) - 1.0) * spec.dense_dt_ms
    ramp = (time_ms - onset) / (RAMP_FRAMES * spec.dense_dt_ms)
    return spec.peak_contraction * np.clip(ramp, 0.0, 1.0)


def _blend_width(spec):
    width = 2 * np.pi / spec.n_sectors
    return BLEND_FWHM_SECTORS * width / (2 * math.sqrt(2 * math.log(2)))


def blended_amplitude(spec, amps, psi):
    """Periodic Gaussian blend of sector amplitudes at offsets ``psi`` from sector 0."""
    n = spec.n_sectors
    width = 2 * np.pi / n
    sig = _blend_width(spec)
    centers = np.arange(n) * width
    psi = np.asarray(psi, dtype=float)[..., None]
    out = 0.0
    for k in (-1, 0, 1):
        d = (psi - centers - 2 * np.pi * k) / sig
        out = out + np.exp(-0.5 * d * d) @ amps
    return out * width / (sig * math.sqrt(2 * np.pi))


def _gaussian_rows(psi, centers, sig, derivative=False):
    """Periodic Gaussian weights (and optionally their psi-derivative) of ``psi`` to ``centers``."""
    psi = np.asarray(psi, dtype=float).reshape(-1, 1)
    val = 0.0
    der = 0.0
    for k in (-1, 0, 1):
        d = (psi - centers - 2 * np.pi * k) / sig
        g = np.exp(-0.5 * d * d) / (sig * math.sqrt(2 * np.pi))
        val = val + g
        der = der - g * d / sig
    return (val, der) if derivative else val


class _MotionGeometry:
    """Per-geometry constants of the motion model, reused across time points."""

    def __init__(self, spec, samples=ANGULAR_SAMPLES):
        self.x, self.y, self.r, self.theta = _polar(spec)
        self.centroid = _centroid(spec)
        self.psi = np.mod(self.theta - sector_zero_angle(spec), 2 * np.pi)
        n = spec.n_sectors
        width = 2 * np.pi / n
        centers = np.arange(n) * width
        sig = _blend_width(spec)
        sig_radial = math.hypot(sig, _radial_width(spec))
        self.grid = np.arange(samples + 1) * (2 * np.pi / samples)
        # sector amplitudes -> blended amplitude a and radial profile s, s' on the fine grid
        self.a_rows = _gaussian_rows(self.grid, centers, sig) * width
        s_rows, ds_rows = _gaussian_rows(self.grid, centers, sig_radial, derivative=True)
        self.s_rows, self.ds_rows = s_rows * width, ds_rows * width
        self.s_pixels = _gaussian_rows(self.psi, centers, sig_radial) * width


def _radial_width(spec):
    width = 2 * np.pi / spec.n_sectors
    return RADIAL_FWHM_SECTORS * width / (2 * math.sqrt(2 * math.log(2)))


def _angular_speed(a, s, ds, lam):
    return np.sqrt((1 - a) ** 2 - (lam * ds) ** 2) / (1 - lam * s)


def _closing_scale(a, s, ds, grid):
    """Scale ``lam`` of the radial profile for which the angular map closes over one turn."""
    def gap(lam):
        return np.trapezoid(_angular_speed(a, s, ds, lam), grid) - 2 * np.pi

    spread = np.ptp(s) + np.ptp(a) + np.abs(ds).max()
    if spread < 1e-12:  # spatially uniform contraction: purely radial
        return 1.0
    hi = 1.0
    while gap(hi) < 0:
        hi *= 1.25
        if np.any(hi * np.abs(ds) >= 1 - a) or hi * s.max() >= 1:
            raise ValueError("contraction pattern too sharp for a closed shear-free map")
    return brentq(gap, 0.0, hi, xtol=1e-15, rtol=1e-15)


def displacement_at_time(spec, time_ms, geometry=None):
    """Analytic pull-back displacement ``(2, G, G)`` at ``time_ms`` after frame 1."""
    amps = sector_amplitudes(spec, time_ms)
    if not np.any(amps):
        return np.zeros((2, spec.grid_size, spec.grid_size))
    geo = geometry or _MotionGeometry(spec)
    a, s, ds = geo.a_rows @ amps, geo.s_rows @ amps, geo.ds_rows @ amps
    lam = _closing_scale(a, s, ds, geo.grid)
    speed = _angular_speed(a, s, ds, lam)
    step = np.diff(geo.grid)
    turn = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * step)])
    ang = sector_zero_angle(spec) + np.interp(geo.psi, geo.grid, turn)
    scale = 1.0 - lam * (geo.s_pixels @ amps).reshape(geo.psi.shape)
    px = geo.centroid[0] + scale * geo.r * np.cos(ang)
    py = geo.centroid[1] - scale * geo.r * np.sin(ang)
    return np.stack([px - geo.x, py - geo.y])


def dense_time(spec, frame):
    return (frame - 1) * spec.dense_dt_ms


def motion_at(spec: PhantomSpec, dense_frame: int, geometry=None):
    """Displacement at 1-based DENSE frame ``dense_frame`` (frame 1 is the reference)."""
    if not 1 <= dense_frame <= spec.t_dense:
        raise ValueError(f"dense_frame {dense_frame} outside [1, {spec.t_dense}]")
    if dense_frame == 1:
        return np.zeros((2, spec.grid_size, spec.grid_size))
    return displacement_at_time(spec, dense_time(spec, dense_frame), geometry)


# ---------------------------------------------------------------------------
# rendering


def make_texture(spec, rng):
    g = spec.grid_size
    x, y, r, theta = _polar(spec)
    background = ndimage.gaussian_filter(rng.standard_normal((g, g)), 1.5, mode="wrap")
    background /= background.std()
    detail = ndimage.gaussian_filter(rng.standard_normal((g, g)), 1.0, mode="wrap")
    detail /= detail.std()
    band = ((r >= spec.inner_radius) & (r <= spec.outer_radius)).astype(float)
    band = ndimage.gaussian_filter(band, 0.8)
    tex = 0.25 + 0.06 * background + band * (0.45 + 0.08 * detail)
    return np.clip(tex, 0.0, 1.0)


def _render(texture, fields, noise_sigma, rng):
    frames = np.stack([warp(texture, u) for u in fields])
    if noise_sigma > 0:
        frames = frames + noise_sigma * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec, seed: int = 0, case_id: str = "") -> PhantomCase:
    spec.validate()
    tex_rng = np.random.default_rng([int(spec.texture_seed), int(seed), 0])
    cine_rng = np.random.default_rng([int(spec.texture_seed), int(seed), 1])
    dense_rng = np.random.default_rng([int(spec.texture_seed), int(seed), 2])

    mask = make_mask(spec)
    texture = make_texture(spec, tex_rng)
    geo = _MotionGeometry(spec)
    dense_disp = np.stack([motion_at(spec, j, geo) for j in range(1, spec.t_dense + 1)])
    cine_disp = [displacement_at_time(spec, i * spec.cine_dt_ms, geo) if i else
                 np.zeros((2, spec.grid_size, spec.grid_size)) for i in range(spec.t_cine)]

    cine = ImageSequence(_render(texture, cine_disp, spec.noise_sigma, cine_rng),
                         spec.cine_dt_ms, "cine")
    dense = ImageSequence(_render(texture, dense_disp, spec.noise_sigma, dense_rng),
                          spec.dense_dt_ms, "dense")

    partition = build_partition(mask, spec.n_sectors)
    strain = build_strain_matrix(dense_disp, mask, partition, dt_ms=spec.dense_dt_ms)
    tos = TOSCurve(np.asarray(spec.tos_pattern, dtype=float) * spec.dense_dt_ms)
    return PhantomCase(cine=cine, dense=dense, gt_displacements_dense=dense_disp,
                       gt_strain=strain, gt_tos=tos, myocardium=mask, spec=spec,
                       seed=int(seed), case_id=case_id)


# ---------------------------------------------------------------------------
# dataset-style spec sampling


def random_tos_pattern(n_sectors, rng, max_onset=9, min_run=4, normal_prob=0.15):
    """Smooth onset pattern: a staircase bump of delayed sectors over a normal baseline.

    Every level is held for at least ``min_run`` sectors so the angular blend
    cannot move a sector's detected onset.
    """
    pattern = np.ones(n_sectors, dtype=int)
    if rng.random() < normal_prob:
        return tuple(pattern.tolist())
    run = max(2, int(round(min_run * n_sectors / 128.0)))
    budget = n_sectors - 2 * run
    # 2 * (peak - 2) stair runs plus a plateau of at least two runs
    peak_cap = (budget - 2 * run) // (2 * run) + 2
    peak = int(rng.integers(2, max(2, min(max_onset, peak_cap)) + 1))
    rises = [int(rng.integers(run, 2 * run + 1)) for _ in range(peak - 2)]
    falls = [int(rng.integers(run, 2 * run + 1)) for _ in range(peak - 2)]
    plateau = int(rng.integers(2 * run, 5 * run + 1))
    while sum(rises) + sum(falls) + plateau > budget:
        if plateau > 2 * run:
            plateau -= 1
            continue
        runs = rises + falls
        k = int(np.argmax(runs))
        if runs[k] <= run:
            break
        if k < len(rises):
            rises[k] -= 1
        else:
            falls[k - len(rises)] -= 1
    levels = []
    for lvl, length in zip(range(2, peak), rises):
        levels += [lvl] * length
    levels += [peak] * plateau
    for lvl, length in zip(range(peak - 1, 1, -1), falls):
        levels += [lvl] * length
    start = int(rng.integers(0, n_sectors))
    idx = (start + np.arange(len(levels))) % n_sectors
    pattern[idx] = levels
    return tuple(pattern.tolist())


def sample_spec(base: PhantomSpec, seed: int) -> PhantomSpec:
    """Per-case spec: the base geometry with a seeded onset pattern and texture."""
    rng = np.random.default_rng([int(seed), 7])
    d = base.to_dict()
    max_onset = min(9, base.t_dense - 3)
    d["tos_pattern"] = random_tos_pattern(base.n_sectors, rng, max_onset=max_onset)
    d["texture_seed"] = int(seed)
    return PhantomSpec.from_dict(d)


# ---------------------------------------------------------------------------
# serialization


def save_case(case: PhantomCase, path):
    tensors = {
        "cine": case.cine.frames,
        "dense": case.dense.frames,
        "disp": case.gt_displacements_dense,
        "strain": case.gt_strain.values,
        "tos": case.gt_tos.values,
        "mask": case.myocardium.mask.astype(float),
    }
    meta = {
        "case_id": case.case_id,
        "seed": case.seed,
        "spec": case.spec.to_dict(),
        "centroid": case.myocardium.centroid.tolist(),
        "insertion_points": case.myocardium.insertion_points.tolist(),
        "cine_dt_ms": case.cine.dt_ms,
        "dense_dt_ms": case.dense.dt_ms,
    }
    io.write_tensor_dir(path, tensors, meta)


def load_case(path) -> PhantomCase:
    t, meta = io.read_tensor_dir(path)
    spec = PhantomSpec.from_dict(meta["spec"])
    mask = MyocardiumMask(mask=t["mask"] > 0.5, centroid=meta["centroid"],
                          insertion_points=meta["insertion_points"])
    return PhantomCase(
        cine=ImageSequence(t["cine"].astype(float), meta["cine_dt_ms"], "cine"),
        dense=ImageSequence(t["dense"].astype(float), meta["dense_dt_ms"], "dense"),
        gt_displacements_dense=t["disp"].astype(float),
        gt_strain=StrainMatrix(t["strain"].astype(float), meta["dense_dt_ms"]),
        gt_tos=TOSCurve(t["tos"].astype(float)),
        myocardium=mask,
        spec=spec,
        seed=int(meta["seed"]),
        case_id=meta.get("case_id", os.path.basename(os.path.normpath(path))),
    )


def dumps_spec(spec):
    return json.dumps(spec.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# datasets

SPLIT_FRACTIONS = (("train", 0.56), ("val", 0.22))
MANIFEST_NAME = "manifest.json"


def split_sizes(count):
    """``(train, val, test)`` sizes; the test split takes the rounding remainder."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    n_train = int(round(SPLIT_FRACTIONS[0][1] * count))
    n_val = int(round(SPLIT_FRACTIONS[1][1] * count))
    return n_train, n_val, count - n_train - n_val


def write_dataset(path, base: PhantomSpec, count: int, seed: int = 0):
    """Generate ``count`` cases (seeds ``seed .. seed+count-1``) plus a split manifest."""
    n_train, n_val, _ = split_sizes(count)
    base.validate()
    ids = []
    for i in range(count):
        case_seed = seed + i
        case_id = f"case_{case_seed:05d}"
        case = generate_phantom(sample_spec(base, case_seed), case_seed, case_id)
        save_case(case, os.path.join(path, case_id))
        ids.append(case_id)
    manifest = {
        "base_spec": base.to_dict(),
        "seed": seed,
        "count": count,
        "splits": {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
                   "test": ids[n_train + n_val:]},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path):
    with open(os.path.join(path, MANIFEST_NAME)) as fh:
        return json.load(fh)


def load_split(path, split):
    manifest = read_manifest(path)
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}; have {sorted(manifest['splits'])}")
    return [load_case(os.path.join(path, cid)) for cid in manifest["splits"][split]]
