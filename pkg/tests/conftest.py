import numpy as np
import pytest

from densecine.phantom import PhantomSpec, generate_phantom, make_mask, sample_spec


def annulus_mask(grid=64, inner=15.0, outer=26.0, angles=(150.0, 210.0)):
    """Annular mask with insertion points placed on the outer edge at the given angles."""
    spec = PhantomSpec(grid_size=grid, inner_radius=inner, outer_radius=outer)
    mask = make_mask(spec)
    if tuple(angles) != (150.0, 210.0):
        c = mask.centroid
        pts = [(c[0] + outer * np.cos(np.radians(a)), c[1] - outer * np.sin(np.radians(a))) for a in angles]
        mask.insertion_points = np.array(pts)
    return mask


def radial_scaling(grid, eps):
    c = (grid - 1) / 2.0
    y, x = np.mgrid[0:grid, 0:grid].astype(float)
    return np.stack([-eps * (x - c), -eps * (y - c)])


def rotation_field(grid, degrees):
    c = (grid - 1) / 2.0
    y, x = np.mgrid[0:grid, 0:grid].astype(float)
    t = np.radians(degrees)
    dx, dy = x - c, y - c
    return np.stack([np.cos(t) * dx - np.sin(t) * dy - dx, np.sin(t) * dx + np.cos(t) * dy - dy])


SMALL = dict(grid_size=32, n_sectors=16, t_cine=10, t_dense=8, inner_radius=7.0, outer_radius=13.0)


@pytest.fixture(scope="session")
def small_cases():
    base = PhantomSpec(noise_sigma=0.02, **SMALL)
    return [generate_phantom(sample_spec(base, s), s, f"case_{s}") for s in range(4)]


@pytest.fixture(scope="session")
def default_case():
    return generate_phantom(sample_spec(PhantomSpec(), 5), 5, "case_5")
