import filecmp
import os

import numpy as np
import pytest

from densecine.phantom import (
    PhantomSpec,
    generate_phantom,
    load_case,
    load_split,
    make_mask,
    motion_at,
    random_tos_pattern,
    sample_spec,
    save_case,
    sector_zero_angle,
    split_sizes,
    write_dataset,
)
from densecine.strain import build_partition, build_strain_matrix, extract_tos

from conftest import SMALL


def test_onset_at_first_frame_is_17ms():
    case = generate_phantom(PhantomSpec(), seed=0)
    assert np.all(case.gt_tos.values == 17.0)
    assert np.array_equal(extract_tos(case.gt_strain).values, case.gt_tos.values)


def test_zero_contraction_is_static():
    spec = PhantomSpec(peak_contraction=0.0, noise_sigma=0.01)
    case = generate_phantom(spec, seed=1)
    assert np.all(case.gt_displacements_dense == 0)
    assert np.all(case.gt_strain.values == 0)
    clean = generate_phantom(PhantomSpec(peak_contraction=0.0), seed=1)
    assert np.all(np.abs(case.cine.frames - clean.cine.frames[0]) < 0.1)
    assert np.all(clean.cine.frames == clean.cine.frames[0])
    assert np.all(clean.dense.frames == clean.dense.frames[0])


def test_half_delayed_pattern():
    spec = PhantomSpec(tos_pattern=[1] * 64 + [6] * 64)
    case = generate_phantom(spec, seed=2)
    assert np.all(case.gt_tos.values[:64] == 17.0)
    assert np.all(case.gt_tos.values[64:] == 102.0)
    # a 5-frame jump smears into the first two delayed sectors on each side (see ledger)
    rule = extract_tos(case.gt_strain).values
    interior = np.r_[0:64, 66:126]
    assert np.array_equal(rule[interior], case.gt_tos.values[interior])


def test_validation_lists_problems():
    with pytest.raises(ValueError) as err:
        PhantomSpec(inner_radius=30.0, tos_pattern=[0] * 128, peak_contraction=0.5).validate()
    msg = str(err.value)
    assert "radii" in msg and "tos_pattern" in msg and "peak_contraction" in msg
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(tos_pattern=[1] * 10))


def test_motion_reference_frame_and_range():
    spec = PhantomSpec()
    assert np.all(motion_at(spec, 1) == 0)
    assert np.all(motion_at(PhantomSpec(peak_contraction=0.0), 7) == 0)
    with pytest.raises(ValueError):
        motion_at(spec, 0)
    with pytest.raises(ValueError):
        motion_at(spec, spec.t_dense + 1)


def test_uniform_pattern_is_closed_form_radial_map():
    spec = PhantomSpec(peak_contraction=0.2)
    u = motion_at(spec, 12)  # past the 5-frame ramp
    c = (spec.grid_size - 1) / 2
    y, x = np.mgrid[0:spec.grid_size, 0:spec.grid_size].astype(float)
    assert np.allclose(u[0], -0.2 * (x - c), atol=1e-9)
    assert np.allclose(u[1], -0.2 * (y - c), atol=1e-9)


def test_mask_geometry():
    spec = PhantomSpec()
    mask = make_mask(spec)
    assert mask.mask[mask.mask].size > 1000
    part = build_partition(mask, spec.n_sectors)
    assert np.cos(part.start_angle - sector_zero_angle(spec)) > np.cos(0.05)
    for px, py in mask.insertion_points:
        assert mask.mask[int(py), int(px)]


@pytest.mark.parametrize("seed", range(6))
def test_pipeline_identity_and_onset_recovery(seed):
    spec = sample_spec(PhantomSpec(), seed)
    case = generate_phantom(spec, seed)
    again = build_strain_matrix(case.gt_displacements_dense, case.myocardium, case.partition(), 17.0)
    assert np.abs(again.values - case.gt_strain.values).max() < 1e-6
    assert np.array_equal(extract_tos(case.gt_strain).values, case.gt_tos.values)
    assert np.array_equal(case.gt_tos.values, np.array(spec.tos_pattern) * 17.0)


@pytest.mark.parametrize("seed", range(8))
def test_strain_near_zero_before_onset(seed):
    spec = sample_spec(PhantomSpec(), seed)
    S = generate_phantom(spec, seed).gt_strain.values
    frames = np.arange(1, spec.t_dense + 1)
    before = frames[None, :] < np.array(spec.tos_pattern)[:, None]
    assert np.all(S[:, 0] == 0)
    # blended ramps leak a little across sector boundaries (see ledger)
    if before.any():
        assert np.abs(S[before]).max() < 0.01


def test_determinism_bytes(tmp_path):
    spec = sample_spec(PhantomSpec(noise_sigma=0.02, **SMALL), 3)
    save_case(generate_phantom(spec, 3, "a"), tmp_path / "a")
    save_case(generate_phantom(spec, 3, "a"), tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["cine.bin", "dense.bin", "disp.bin", "mask.bin", "meta.json", "strain.bin", "tos.bin"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def test_save_load_roundtrip(tmp_path):
    case = generate_phantom(sample_spec(PhantomSpec(**SMALL), 2), 2, "x")
    save_case(case, tmp_path / "x")
    back = load_case(tmp_path / "x")
    assert back.spec == case.spec
    assert back.case_id == "x" and back.seed == 2
    assert np.allclose(back.cine.frames, case.cine.frames, atol=1e-7)
    assert np.allclose(back.gt_strain.values, case.gt_strain.values, atol=1e-7)
    assert np.array_equal(back.myocardium.mask, case.myocardium.mask)
    assert np.array_equal(back.gt_tos.values, case.gt_tos.values)


def test_noise_is_independent_between_modalities():
    spec = PhantomSpec(noise_sigma=0.02, t_cine=20, cine_dt_ms=17.0)
    case = generate_phantom(spec, 4)
    # same time base, same motion: the only difference is the noise draw
    diff = case.cine.frames[1:] - case.dense.frames[1:]
    assert 0.01 < diff.std() < 0.04


def test_random_patterns_are_valid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = np.array(random_tos_pattern(128, rng))
        assert p.min() >= 1 and p.max() <= 9
        # neighbouring sectors differ by at most one onset frame
        assert np.abs(p - np.roll(p, 1)).max() <= 1
        # runs of equal onset are at least 4 sectors long (periodically)
        change = np.flatnonzero(p != np.roll(p, 1))
        if change.size:
            runs = np.diff(np.concatenate([change, [change[0] + 128]]))
            assert runs.min() >= 4


def test_split_sizes():
    assert split_sizes(118) == (66, 26, 26)
    assert split_sizes(91) == (51, 20, 20)
    with pytest.raises(ValueError):
        split_sizes(0)


def test_dataset_manifest(tmp_path):
    manifest = write_dataset(tmp_path, PhantomSpec(**SMALL), 5, seed=10)
    assert [len(manifest["splits"][k]) for k in ("train", "val", "test")] == [3, 1, 1]
    test = load_split(tmp_path, "test")
    assert test[0].case_id == "case_00014" and test[0].seed == 14
    with pytest.raises(ValueError):
        load_split(tmp_path, "holdout")
