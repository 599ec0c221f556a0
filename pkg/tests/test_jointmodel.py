import csv
import math

import numpy as np
import pytest
import torch

from densecine.jointmodel import (
    COMPONENTS,
    JointModel,
    LossWeights,
    TrainConfig,
    case_batch,
    joint_loss,
    load_checkpoint,
    loss_components,
    low_rank,
    mask_geometry,
    polar_grid,
    predict,
    save_checkpoint,
    strain_forward,
    strain_loss,
    tos_loss,
    total,
    train_joint,
)
from densecine.phantom import PhantomSpec, generate_phantom, sample_spec
from densecine.registration import RegOperatorConfig
from densecine.strain import build_partition, sector_index, warp

import gradcheck
from conftest import SMALL

REDUCED = dict(grid_size=16, n_sectors=8, t_dense=4, t_cine=4, inner_radius=3.0, outer_radius=6.5)


def small_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    spec = PhantomSpec(**SMALL)
    args = dict(grid_size=spec.grid_size, n_sectors=spec.n_sectors, t_dense=spec.t_dense,
                dt_ms=spec.dense_dt_ms, svd_rank=6)
    args.update(kw)
    return JointModel(**args).to(dtype)


def reduced_setup(seed=0):
    spec = sample_spec(PhantomSpec(noise_sigma=0.02, **REDUCED), 1)
    case = generate_phantom(spec, 1)
    torch.manual_seed(seed)
    model = JointModel(grid_size=16, n_sectors=8, t_dense=4, dt_ms=17.0, svd_rank=4).double()
    with torch.no_grad():
        model.reg.head.weight.normal_(0.0, 0.05)
        model.reg.head.bias.normal_(0.0, 0.05)
    return model, case, LossWeights(svd_rank=4)


# ---------------------------------------------------------------------------
# low-rank smoothing


def test_low_rank_output_rank_and_identity():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 16, 8, generator=g, dtype=torch.float64)
    for k in (1, 3, 6):
        s = torch.linalg.svdvals(low_rank(x, k))
        assert torch.all(s[:, k:] / s[:, :1] < 1e-6)
    assert torch.allclose(low_rank(x, 8), x, atol=1e-12)
    with pytest.raises(ValueError):
        low_rank(x, 9)
    with pytest.raises(ValueError):
        low_rank(x, 2, grad="bogus")


def test_tangent_gradient_exact_on_low_rank_input():
    g = torch.Generator().manual_seed(1)
    x = (torch.randn(10, 3, generator=g, dtype=torch.float64)
         @ torch.randn(3, 6, generator=g, dtype=torch.float64)).requires_grad_()
    weight = torch.randn(10, 6, generator=g, dtype=torch.float64)
    (low_rank(x, 3) * weight).sum().backward()
    tangent = x.grad.clone()
    x.grad = None
    (low_rank(x, 3, grad="exact") * weight).sum().backward()
    assert torch.allclose(tangent, x.grad, atol=1e-8)


def test_strain_forward_shape_and_determinism(small_cases):
    case = small_cases[0]
    runs = []
    for _ in range(2):
        model = small_model(seed=4)
        frames, geometry, _, _ = case_batch([case], model)
        _, z = model.register(frames)
        runs.append(strain_forward(model, z[0], geometry[0]))
    assert runs[0].shape == (16, 8)
    assert torch.equal(runs[0], runs[1])
    s = torch.linalg.svdvals(runs[0])
    assert s[6:].max() / s[0] < 1e-6
    with pytest.raises(ValueError):
        strain_forward(model, z, geometry[0])


def test_polar_grid_columns_sit_in_their_sectors(default_case):
    mask = default_case.myocardium
    part = build_partition(mask, 128)
    geom = torch.as_tensor(mask_geometry(mask))[None]
    grid = polar_grid(geom, 128, 3, 64)[0].numpy()
    x = ((grid[..., 0] + 1) * 64 - 1) / 2
    y = ((grid[..., 1] + 1) * 64 - 1) / 2
    theta = np.arctan2(mask.centroid[1] - y, x - mask.centroid[0])
    idx = sector_index(theta, part.start_angle, 128)
    assert np.array_equal(idx, np.broadcast_to(np.arange(128), idx.shape))
    r = np.hypot(x - mask.centroid[0], y - mask.centroid[1])
    assert r.min() > geom[0, 3].item() and r.max() < geom[0, 4].item()


# ---------------------------------------------------------------------------
# strain loss


def test_zero_motion_loss_is_weight_decay_only():
    spec = PhantomSpec(peak_contraction=0.0, **SMALL)
    case = generate_phantom(spec, 0)
    assert np.all(case.gt_strain.values == 0)
    model = small_model()
    with torch.no_grad():
        model.strain_head.out.weight.zero_()
        model.strain_head.out.bias.zero_()
    w = LossWeights()
    expected = (w.lambda_r * sum((p ** 2).sum() for p in model.reg.parameters())
                + w.mu * sum((p ** 2).sum() for p in model.strain_head.parameters()))
    assert strain_loss(model, case, w).item() == pytest.approx(expected.item(), rel=1e-12)


def test_alpha_is_linear(small_cases):
    model = small_model()
    case = small_cases[1]
    frames, geometry, S, y = case_batch([case], model)
    w1 = LossWeights(alpha=1000.0)
    w2 = LossWeights(alpha=2000.0)
    c1 = loss_components(model, frames, geometry, S, y, w1)
    c2 = loss_components(model, frames, geometry, S, y, w2)
    assert c2["strain_sup"].item() == pytest.approx(2 * c1["strain_sup"].item(), rel=1e-12)
    # loss difference with S perturbed also scales with alpha
    d1 = (loss_components(model, frames, geometry, S + 0.01, y, w1)["strain_sup"] - c1["strain_sup"]).item()
    d2 = (loss_components(model, frames, geometry, S + 0.01, y, w2)["strain_sup"] - c2["strain_sup"]).item()
    assert d2 == pytest.approx(2 * d1, rel=1e-9)


def _oracle_strain_loss(model, case, w, reg_cfg):
    """Independent numpy assembly of the four strain-loss terms."""
    frames = case.dense.frames
    frames_t, geometry, _, _ = case_batch([case], model)
    with torch.no_grad():
        out = model(frames_t, geometry)
    u = out["u"][0].numpy()
    data = reg = 0.0
    for t in range(frames.shape[0]):
        warped = warp(frames[0], u[t])
        data += np.mean((warped - frames[t]) ** 2) / (2 * w.sigma ** 2)
        p = np.pad(u[t], ((0, 0), (1, 1), (1, 1)), mode="edge")
        lap = p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2] + p[:, 1:-1, 2:] - 4 * u[t]
        reg += np.mean(np.sum((-reg_cfg.a * lap + reg_cfg.b * u[t]) ** 2, axis=0))
    sup = w.alpha * np.mean((out["strain"][0].numpy() - case.gt_strain.values) ** 2)
    l2 = (w.lambda_r * sum(np.sum(p.detach().numpy() ** 2) for p in model.reg.parameters())
          + w.mu * sum(np.sum(p.detach().numpy() ** 2) for p in model.strain_head.parameters()))
    return data + reg + sup + l2


def test_strain_loss_matches_component_oracle(small_cases):
    model = small_model(seed=2)
    with torch.no_grad():
        model.reg.head.weight.normal_(0.0, 0.02)
    w, reg_cfg = LossWeights(), RegOperatorConfig(a=0.8, b=0.2)
    value = strain_loss(model, small_cases[2], w, reg_cfg).item()
    assert value == pytest.approx(_oracle_strain_loss(model, small_cases[2], w, reg_cfg), rel=1e-9)


# ---------------------------------------------------------------------------
# TOS loss


def _force_lma_output(model, frames_scaled):
    """Make the LMA head emit a constant ``dt * (1 + 4 * frames_scaled)``."""
    with torch.no_grad():
        model.lma_head.out.weight.zero_()
        model.lma_head.out.bias.fill_(frames_scaled)


def test_tos_loss_closed_forms():
    model = small_model()
    S = torch.zeros(16, 8, dtype=torch.float64)
    w = LossWeights()
    _force_lma_output(model, 0.25)  # 34 ms everywhere
    l2 = w.gamma * sum((p ** 2).sum() for p in model.lma_head.parameters()).item()
    assert tos_loss(model.lma_head, S, np.full(16, 34.0), w).item() == pytest.approx(l2, rel=1e-12)
    got = tos_loss(model.lma_head, S, np.full(16, 17.0), w).item()
    assert got == pytest.approx(w.beta * 17.0 ** 2 + l2, rel=1e-12)
    with pytest.raises(ValueError):
        tos_loss(model.lma_head, S, np.full(15, 17.0), w)


def test_tos_head_overfits_single_case(small_cases):
    case = small_cases[0]
    model = small_model(seed=1)
    w = LossWeights(gamma=0.0)
    S = torch.as_tensor(case.gt_strain.values)
    y = case.gt_tos.values
    opt = torch.optim.Adam(model.lma_head.parameters(), lr=1e-2)
    first = None
    for _ in range(400):
        loss = tos_loss(model.lma_head, S, y, w)
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert tos_loss(model.lma_head, S, y, w).item() < 1e-3 * first


# ---------------------------------------------------------------------------
# joint loss


def test_joint_is_sum_of_parts(small_cases):
    model = small_model(seed=5)
    case = small_cases[3]
    w = LossWeights()
    frames, geometry, _, _ = case_batch([case], model)
    S_pred = model(frames, geometry)["strain"][0]
    expected = strain_loss(model, case, w) + tos_loss(model.lma_head, S_pred, case.gt_tos.values, w)
    assert joint_loss(model, case, w).item() == pytest.approx(expected.item(), abs=1e-9)
    no_tos = LossWeights(beta=0.0, gamma=0.0)
    assert joint_loss(model, case, no_tos).item() == pytest.approx(
        strain_loss(model, case, no_tos).item(), abs=1e-9)


def test_beta_reaches_strain_head(small_cases):
    case = small_cases[0]
    grads = []
    for beta in (0.005, 0.0):
        model = small_model(seed=6)
        joint_loss(model, case, LossWeights(beta=beta)).backward()
        grads.append(torch.cat([p.grad.reshape(-1) for p in model.strain_head.parameters()]))
    assert not torch.allclose(grads[0], grads[1], rtol=1e-6, atol=0)


@pytest.mark.parametrize("group", ["r", "s", "l"])
def test_joint_gradient_matches_finite_differences(group):
    model, case, w = reduced_setup()
    rng = np.random.default_rng({"r": 0, "s": 1, "l": 2}[group])
    entries = gradcheck.sample_entries(model.groups()[group].parameters(), 50, rng)
    _, _, passed = gradcheck.check(lambda: joint_loss(model, case, w), entries)
    assert passed.mean() >= 0.98


def test_weight_decay_isolation():
    spec = PhantomSpec(peak_contraction=0.0, **SMALL)
    case = generate_phantom(spec, 0)
    model = small_model()
    w = LossWeights(sigma=1e6, alpha=0.0, beta=0.0)
    frames, geometry, S, y = case_batch([case], model)
    before = {k: sum((p.detach() ** 2).sum() for p in g.parameters()).item()
              for k, g in model.groups().items()}
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    opt.zero_grad()
    total(loss_components(model, frames, geometry, S, y, w)).backward()
    opt.step()
    after = {k: sum((p.detach() ** 2).sum() for p in g.parameters()).item()
             for k, g in model.groups().items()}
    for k in before:
        assert after[k] < before[k]


# ---------------------------------------------------------------------------
# training


def test_overfit_single_case(small_cases):
    model, history = train_joint([small_cases[0]], [], LossWeights(), TrainConfig(epochs=200, seed=0))
    totals = [row["total"] for row in history["epochs"]]
    assert totals[-1] < 0.1 * totals[0]
    assert history["epochs"][0].keys() >= set(COMPONENTS) | {"total", "epoch"}


def test_training_is_deterministic_and_bookkept(small_cases, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3, checkpoint_dir=str(tmp_path / "ckpt"))
    _, h1 = train_joint(small_cases[:3], small_cases[3:], LossWeights(), cfg)
    cfg2 = TrainConfig(epochs=2, batch_size=2, seed=3)
    _, h2 = train_joint(small_cases[:3], small_cases[3:], LossWeights(), cfg2)
    assert h1["steps"] == h2["steps"]
    assert h1["val_tos_mse"] == h2["val_tos_mse"]
    for row in h1["steps"]:
        assert abs(sum(row[k] for k in COMPONENTS) - row["total"]) <= 1e-9
    with open(tmp_path / "ckpt" / "losses.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "data", "reg", "strain_sup", "tos_mse", "l2_r", "l2_s", "l2_l", "total"]
    assert len(rows) == 3


def test_checkpoint_roundtrip(small_cases, tmp_path):
    model = small_model(dtype=torch.float32, seed=7)
    save_checkpoint(model, tmp_path / "m", LossWeights(), TrainConfig())
    back = load_checkpoint(tmp_path / "m")
    S1, t1 = predict(model, small_cases[0])
    S2, t2 = predict(back, small_cases[0])
    assert np.array_equal(S1.values, S2.values) and np.array_equal(t1.values, t2.values)


def test_training_errors(small_cases):
    with pytest.raises(ValueError):
        train_joint([], [], LossWeights(), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_joint(small_cases[:1], [], LossWeights(svd_rank=9), TrainConfig(epochs=1))
    with pytest.raises(FloatingPointError, match="strain_sup"):
        train_joint(small_cases[:1], [], LossWeights(alpha=math.inf), TrainConfig(epochs=1))
