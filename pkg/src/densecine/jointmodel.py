"""Strain head, LMA head, their losses and the joint training loop."""

from dataclasses import asdict, dataclass
import copy
import csv
import logging
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .registration import RegistrationNet, RegOperatorConfig, image_residual_term, reg_term
from .strain import MyocardiumMask, StrainMatrix, TOSCurve, insertion_midangle, pixel_grid

log = logging.getLogger(__name__)

COMPONENTS = ("data", "reg", "strain_sup", "tos_mse", "l2_r", "l2_s", "l2_l")


@dataclass
class LossWeights:
    sigma: float = 0.03
    alpha: float = 1000.0
    lambda_r: float = 1e-4
    mu: float = 1e-4
    beta: float = 0.005
    gamma: float = 1e-4
    svd_rank: int = 6

    def validate(self, n_sectors=None, t_dense=None):
        bad = [k for k, v in asdict(self).items() if not v > 0]
        if bad:
            raise ValueError(f"loss weights must be strictly positive: {bad}")
        if n_sectors is not None and t_dense is not None and self.svd_rank > min(n_sectors, t_dense):
            raise ValueError(f"svd_rank {self.svd_rank} exceeds min(N, T) = {min(n_sectors, t_dense)}")
        return self


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_dir: str = ""

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        return self


# ---------------------------------------------------------------------------
# low-rank smoothing with a projected gradient


def _truncate(x, k):
    U, s, Vh = torch.linalg.svd(x, full_matrices=False)
    Uk, Vk = U[..., :k], Vh[..., :k, :].transpose(-2, -1)
    return (Uk * s[..., None, :k]) @ Vk.transpose(-2, -1), Uk, Vk


class _TangentLowRank(torch.autograd.Function):
    """Rank-k truncation whose backward projects onto the retained subspaces.

    The upstream gradient ``G`` is mapped to ``P_U G + G P_V - P_U G P_V``; the
    terms of the exact SVD derivative that divide by singular-value gaps are
    dropped.  The map is exact when the input already has rank <= k.
    """

    @staticmethod
    def forward(ctx, x, k):
        out, Uk, Vk = _truncate(x, k)
        ctx.save_for_backward(Uk, Vk)
        return out

    @staticmethod
    def backward(ctx, g):
        Uk, Vk = ctx.saved_tensors
        gv = (g @ Vk) @ Vk.transpose(-2, -1)
        ug = Uk @ (Uk.transpose(-2, -1) @ g)
        ugv = Uk @ (Uk.transpose(-2, -1) @ gv)
        return ug + gv - ugv, None


def low_rank(x, k, grad="tangent"):
    """Batched rank-``k`` projection of ``(..., N, T)`` matrices."""
    if not 1 <= k <= min(x.shape[-2:]):
        raise ValueError(f"rank {k} outside [1, {min(x.shape[-2:])}]")
    if grad == "exact":
        return _truncate(x, k)[0]
    if grad != "tangent":
        raise ValueError(f"unknown svd gradient mode {grad!r}")
    return _TangentLowRank.apply(x, k)


# ---------------------------------------------------------------------------
# heads


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class _ResBlock1d(nn.Module):
    def __init__(self, ch, kernel=5):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(ch, ch, kernel, padding=pad, padding_mode="circular")
        self.conv2 = nn.Conv1d(ch, ch, kernel, padding=pad, padding_mode="circular")

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


def polar_grid(geometry, n_sectors, n_radii, size):
    """Normalized ``grid_sample`` coordinates ``(B, n_radii, N, 2)`` over the myocardium.

    ``geometry`` rows are ``(cx, cy, start_angle, r_inner, r_outer)`` in image
    pixels; column ``n`` of the grid sits at the angular centre of sector ``n``.
    """
    dtype = geometry.dtype
    cx, cy, start, r_in, r_out = (geometry[:, i].view(-1, 1, 1) for i in range(5))
    frac = (torch.arange(n_radii, dtype=dtype) + 0.5).view(1, -1, 1) / n_radii
    radius = r_in + (r_out - r_in) * frac
    angle = start + torch.arange(n_sectors, dtype=dtype).view(1, 1, -1) * (2 * np.pi / n_sectors)
    x = cx + radius * torch.cos(angle)
    y = cy - radius * torch.sin(angle)
    return torch.stack([(2 * x + 1) / size - 1, (2 * y + 1) / size - 1], dim=-1)


class StrainHead(nn.Module):
    """Residual conv encoder over one frame's latent map -> strain vector of N sectors.

    The encoded latent map is sampled on a polar grid through the myocardium
    (one column per sector), collapsed over the radius and refined by circular
    residual convolutions along the sector axis; a per-sector linear map gives
    the strain value.
    """

    out_scale = 0.1

    def __init__(self, latent_channels, n_sectors, grid_size, width=32, n_radii=3):
        super().__init__()
        self.n_sectors = n_sectors
        self.grid_size = grid_size
        self.n_radii = n_radii
        self.stem = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.block = _ResBlock(width)
        self.radial = nn.Conv2d(width, width, (n_radii, 1))
        self.angular1 = _ResBlock1d(width)
        self.angular2 = _ResBlock1d(width)
        self.out = nn.Conv1d(width, 1, 1)

    def forward(self, z, geometry):
        """``z`` is ``(B, T, C, h, w)``; returns the raw ``(B, N, T)`` strain matrix."""
        b, t = z.shape[:2]
        x = z.reshape(b * t, *z.shape[2:])
        x = self.block(self.stem(x))
        grid = polar_grid(geometry.to(x.dtype), self.n_sectors, self.n_radii, self.grid_size)
        grid = grid.repeat_interleave(t, dim=0)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
        x = F.silu(self.radial(x))[:, :, 0]
        x = self.angular2(self.angular1(x))
        out = self.out(F.silu(x))[:, 0] * self.out_scale
        return out.reshape(b, t, -1).transpose(1, 2)


class LmaHead(nn.Module):
    """Circular 1D conv regressor: ``(B, N, T)`` strain -> ``(B, N)`` TOS in ms.

    The regressor output is read in frame units (``frame_scale`` frames per unit)
    offset so that a zero output means activation at the first frame.
    """

    in_scale = 10.0
    frame_scale = 4.0

    def __init__(self, t_dense, dt_ms, hidden=32, kernel=5):
        super().__init__()
        self.dt_ms = float(dt_ms)
        pad = kernel // 2
        self.conv1 = nn.Conv1d(t_dense, hidden, kernel, padding=pad, padding_mode="circular")
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=pad, padding_mode="circular")
        self.out = nn.Conv1d(hidden, 1, 1)

    def forward(self, S):
        x = S.transpose(1, 2) * self.in_scale
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        return self.dt_ms * (1.0 + self.frame_scale * self.out(x)[:, 0])


class JointModel(nn.Module):
    def __init__(self, grid_size=64, n_sectors=128, t_dense=20, dt_ms=17.0,
                 widths=(16, 32, 64), svd_rank=6, svd_grad="tangent", head_width=32,
                 lma_hidden=32):
        super().__init__()
        self.config = dict(grid_size=grid_size, n_sectors=n_sectors, t_dense=t_dense,
                           dt_ms=dt_ms, widths=list(widths), svd_rank=svd_rank,
                           svd_grad=svd_grad, head_width=head_width, lma_hidden=lma_hidden)
        self.reg = RegistrationNet(widths)
        self.strain_head = StrainHead(self.reg.latent_channels, n_sectors, grid_size, head_width)
        self.lma_head = LmaHead(t_dense, dt_ms, lma_hidden)
        self.svd_rank = svd_rank
        self.svd_grad = svd_grad

    @property
    def dt_ms(self):
        return self.config["dt_ms"]

    def groups(self):
        return {"r": self.reg, "s": self.strain_head, "l": self.lma_head}

    def register(self, frames):
        """``frames`` ``(B, T, H, W)`` -> displacements ``(B, T, 2, H, W)``, latents ``(B, T, C, h, w)``."""
        b, t = frames.shape[:2]
        first = frames[:, :1].expand_as(frames)
        u, z = self.reg(first.reshape(b * t, *frames.shape[2:]), frames.reshape(b * t, *frames.shape[2:]))
        return u.reshape(b, t, *u.shape[1:]), z.reshape(b, t, *z.shape[1:])

    def strain(self, z, geometry):
        return low_rank(self.strain_head(z, geometry), self.svd_rank, self.svd_grad)

    def forward(self, frames, geometry):
        u, z = self.register(frames)
        S = self.strain(z, geometry)
        return {"u": u, "z": z, "strain": S, "tos": self.lma_head(S)}


def _sq_norm(module):
    return sum((p.to(torch.float64) ** 2).sum() for p in module.parameters())


def _as_tensor(x, like):
    return torch.as_tensor(np.asarray(x), dtype=like.dtype, device=like.device)


def mask_geometry(mask: MyocardiumMask):
    """``(cx, cy, sector-0 angle, inner radius, outer radius)`` of a myocardium mask."""
    x, y = pixel_grid(mask.mask.shape)
    r = np.hypot(x - mask.centroid[0], y - mask.centroid[1])[mask.mask]
    return np.array([mask.centroid[0], mask.centroid[1], insertion_midangle(mask), r.min(), r.max()])


def case_batch(cases, model):
    """Stack model inputs and targets ``(frames, geometry, strain, tos)`` for phantom cases."""
    like = next(model.parameters())
    frames = _as_tensor(np.stack([c.dense.frames for c in cases]), like)
    geometry = _as_tensor(np.stack([mask_geometry(c.myocardium) for c in cases]), like)
    strain = _as_tensor(np.stack([c.gt_strain.values for c in cases]), like)
    tos = _as_tensor(np.stack([c.gt_tos.values for c in cases]), like)
    return frames, geometry, strain, tos


# ---------------------------------------------------------------------------
# losses


def strain_components(model, frames, geometry, S_gt, w: LossWeights, reg_cfg=None, out=None):
    """Weighted components of the strain-network loss (batch means, float64)."""
    out = out if out is not None else model(frames, geometry)
    u, S_pred = out["u"], out["strain"]
    first = frames[:, :1].expand_as(frames)
    data = image_residual_term(first, frames, u, w.sigma).sum(dim=1).mean()
    reg = reg_term(u, reg_cfg).sum(dim=1).mean()
    sup = w.alpha * ((S_pred - S_gt) ** 2).mean(dim=(1, 2)).mean()
    return {
        "data": data.to(torch.float64),
        "reg": reg.to(torch.float64),
        "strain_sup": sup.to(torch.float64),
        "l2_r": w.lambda_r * _sq_norm(model.reg),
        "l2_s": w.mu * _sq_norm(model.strain_head),
    }


def tos_components(lma_head, S_pred, y, w: LossWeights):
    if S_pred.shape[-2] != y.shape[-1]:
        raise ValueError(f"strain matrix has {S_pred.shape[-2]} sectors, TOS has {y.shape[-1]}")
    pred = lma_head(S_pred)
    mse = w.beta * ((pred - y) ** 2).mean(dim=-1).mean()
    return {"tos_mse": mse.to(torch.float64), "l2_l": w.gamma * _sq_norm(lma_head)}


def loss_components(model, frames, geometry, S_gt, y, w: LossWeights, reg_cfg=None):
    out = model(frames, geometry)
    comps = strain_components(model, frames, geometry, S_gt, w, reg_cfg, out)
    comps.update(tos_components(model.lma_head, out["strain"], y, w))
    return {k: comps[k] for k in COMPONENTS}


def total(comps):
    t = comps[COMPONENTS[0]]
    for k in COMPONENTS[1:]:
        t = t + comps[k]
    return t


def strain_forward(model, z, geometry):
    """Low-rank-smoothed strain matrix from stacked latents ``(T, C, h, w)`` of one case."""
    z = torch.as_tensor(z)
    if z.ndim != 4:
        raise ValueError(f"expected (T, C, h, w) latents, got {tuple(z.shape)}")
    geometry = torch.as_tensor(np.asarray(geometry), dtype=z.dtype).reshape(1, 5)
    return model.strain(z[None], geometry)[0]


def strain_loss(model, case, w: LossWeights, reg_cfg=None):
    frames, geometry, S, _ = case_batch([case], model)
    return total_strain(strain_components(model, frames, geometry, S, w, reg_cfg))


def total_strain(comps):
    return comps["data"] + comps["reg"] + comps["strain_sup"] + comps["l2_r"] + comps["l2_s"]


def tos_loss(lma_head, S_pred, y, w: LossWeights):
    S_pred = torch.as_tensor(S_pred)
    y = torch.as_tensor(np.asarray(y), dtype=S_pred.dtype)
    if S_pred.ndim == 2:
        S_pred, y = S_pred[None], y[None]
    c = tos_components(lma_head, S_pred, y, w)
    return c["tos_mse"] + c["l2_l"]


def joint_loss(model, case, w: LossWeights, reg_cfg=None):
    frames, geometry, S, y = case_batch([case], model)
    return total(loss_components(model, frames, geometry, S, y, w, reg_cfg))


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def predict(model, case):
    """``(StrainMatrix, TOSCurve)`` predicted from the case's image sequence."""
    model.eval()
    frames, geometry, _, _ = case_batch([case], model)
    out = model(frames, geometry)
    S = StrainMatrix(out["strain"][0].double().numpy(), model.dt_ms)
    return S, TOSCurve(out["tos"][0].double().numpy())


def predict_tos(model, case):
    return predict(model, case)[1]


# ---------------------------------------------------------------------------
# training


def train_joint(train_cases, val_cases, w: LossWeights, cfg: TrainConfig,
                reg_cfg: RegOperatorConfig = None, model: JointModel = None):
    """Adam on the joint loss; returns ``(best model, history)``.

    ``history["epochs"]`` holds one dict of mean weighted components per epoch
    and ``history["steps"]`` every optimizer step.  The returned model is the
    checkpoint with the lowest validation TOS MSE.
    """
    if not train_cases:
        raise ValueError("empty training set")
    cfg.validate()
    reg_cfg = (reg_cfg or RegOperatorConfig()).validate()
    spec = train_cases[0].spec
    w.validate(spec.n_sectors, spec.t_dense)
    val_cases = list(val_cases) or list(train_cases)

    torch.manual_seed(cfg.seed)
    if model is None:
        model = JointModel(grid_size=spec.grid_size, n_sectors=spec.n_sectors,
                           t_dense=spec.t_dense, dt_ms=spec.dense_dt_ms, svd_rank=w.svd_rank)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    history = {"epochs": [], "steps": [], "val_tos_mse": []}
    best = (np.inf, None, -1)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_cases))
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_cases[i] for i in order[start:start + cfg.batch_size]]
            frames, geometry, S, y = case_batch(batch, model)
            comps = loss_components(model, frames, geometry, S, y, w, reg_cfg)
            for name, value in comps.items():
                if not torch.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite {name} component ({value.item()}) at epoch {epoch}")
            loss = total(comps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            row = {k: v.item() for k, v in comps.items()}
            row["total"] = loss.item()
            row["epoch"] = epoch
            history["steps"].append(row)
            for k in sums:
                sums[k] += row[k]
            n_steps += 1
        epoch_row = {k: v / n_steps for k, v in sums.items()}
        epoch_row["epoch"] = epoch
        history["epochs"].append(epoch_row)

        val_mse = float(np.mean([np.mean((predict_tos(model, c).values - c.gt_tos.values) ** 2)
                                 for c in val_cases]))
        history["val_tos_mse"].append(val_mse)
        if val_mse < best[0]:
            best = (val_mse, copy.deepcopy(model.state_dict()), epoch)
        log.info("epoch %d total %.4f val TOS MSE %.2f", epoch, epoch_row["total"], val_mse)

    model.load_state_dict(best[1])
    history["best_epoch"] = best[2]
    if cfg.checkpoint_dir:
        save_checkpoint(model, cfg.checkpoint_dir, w, cfg)
        write_loss_csv(os.path.join(cfg.checkpoint_dir, "losses.csv"), history["epochs"])
        write_history(os.path.join(cfg.checkpoint_dir, "history"), history)
    return model, history


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(model, path, w: LossWeights = None, cfg: TrainConfig = None):
    tensors = {name: t.detach().double().numpy() for name, t in model.state_dict().items()}
    meta = {"model": model.config}
    if w is not None:
        meta["loss_weights"] = asdict(w)
    if cfg is not None:
        meta["train"] = asdict(cfg)
    io.write_tensor_dir(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = io.read_tensor_dir(path)
    cfg = dict(meta["model"])
    cfg["widths"] = tuple(cfg["widths"])
    model = JointModel(**cfg)
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model


def write_loss_csv(path, epochs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch",) + COMPONENTS + ("total",))
        for row in epochs:
            writer.writerow([row["epoch"]] + [repr(row[k]) for k in COMPONENTS + ("total",)])


def write_history(path, history):
    cols = COMPONENTS + ("total",)
    arr = np.array([[row[k] for k in cols] for row in history["epochs"]])
    io.write_tensor_dir(path, {"epochs": arr, "val_tos_mse": np.array(history["val_tos_mse"])},
                        {"columns": list(cols), "best_epoch": history.get("best_epoch", -1)})
