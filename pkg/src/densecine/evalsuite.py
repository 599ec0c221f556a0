"""TOS / LMA metrics and the classical registration-based feature-tracking baseline."""

from dataclasses import asdict, dataclass, field
import csv
import io as _io
import json

import numpy as np
from scipy.fft import dctn, idctn
import torch

from .registration import RegOperatorConfig, image_residual_term, reg_term
from .strain import (
    LMA_THRESHOLD_MS,
    StrainMatrix,
    TOSCurve,
    build_partition,
    build_strain_matrix,
    classify_lma,
    extract_tos,
)


def _values(curve):
    return np.asarray(curve.values if isinstance(curve, TOSCurve) else curve, dtype=float)


def tos_mse(pred, gt):
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ValueError(f"TOS length mismatch: {p.shape} vs {g.shape}")
    return float(np.mean((p - g) ** 2))


def lma_accuracy(pred, gt, threshold_ms=LMA_THRESHOLD_MS):
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ValueError(f"TOS length mismatch: {p.shape} vs {g.shape}")
    return float(np.mean(classify_lma(TOSCurve(p), threshold_ms) == classify_lma(TOSCurve(g), threshold_ms)))


# ---------------------------------------------------------------------------
# classical baseline


@dataclass
class FTSettings:
    sigma: float = 0.03
    iters: int = 150
    step: float = 0.002


def sobolev_kernel(shape, cfg: RegOperatorConfig):
    """DCT-domain multiplier of ``(L^T L)^-1`` for ``L = -a Lap + b`` with zero-flux borders."""
    h, w = shape
    ky = 4 * np.sin(np.pi * np.arange(h) / (2 * h)) ** 2
    kx = 4 * np.sin(np.pi * np.arange(w) / (2 * w)) ** 2
    return 1.0 / (cfg.a * (ky[:, None] + kx[None, :]) + cfg.b) ** 2


def ft_register(frames, cfg: RegOperatorConfig = None, sigma=0.03, iters=150, step=0.002,
                history=False):
    """Register frame 1 to every frame by gradient descent on the displacement itself.

    Minimizes ``data + reg`` for each pair independently (the pair losses are
    summed only so that all pairs share one descent loop).  The descent
    direction is the gradient taken in the metric of the regularizer,
    ``(L^T L)^-1 grad`` scaled by ``H W / 2`` so that the regularizer's own
    Hessian becomes the identity; ``step`` is the fixed step in those units.
    Returns the ``(T, 2, H, W)`` displacements, with frame 1 the identity, and
    optionally the ``(iters + 1, T - 1)`` per-iteration per-pair losses.
    """
    cfg = (cfg or RegOperatorConfig()).validate()
    if iters < 0 or not step > 0:
        raise ValueError(f"need iters >= 0 and step > 0 (got {iters}, {step})")
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float64)
    T, h, w = frames.shape
    first = frames[:1].expand(T - 1, h, w)
    moving = frames[1:]
    kernel = sobolev_kernel((h, w), cfg) * (h * w / 2.0)
    u = torch.zeros(T - 1, 2, h, w, dtype=torch.float64, requires_grad=True)
    losses = []
    for it in range(iters + 1):
        per_pair = image_residual_term(first, moving, u, sigma) + reg_term(u, cfg)
        bad = ~torch.isfinite(per_pair)
        if bad.any():
            frame = int(torch.nonzero(bad)[0, 0]) + 2
            raise FloatingPointError(f"registration diverged at cine frame {frame} (iteration {it})")
        if history:
            losses.append(per_pair.detach().numpy().copy())
        if it == iters:
            break
        (grad,) = torch.autograd.grad(per_pair.sum(), u)
        direction = idctn(dctn(grad.numpy(), axes=(-2, -1), norm="ortho") * kernel,
                          axes=(-2, -1), norm="ortho")
        with torch.no_grad():
            u -= step * torch.from_numpy(direction)
    disp = torch.cat([torch.zeros(1, 2, h, w, dtype=torch.float64), u.detach()]).numpy()
    if history:
        return disp, np.array(losses)
    return disp


def classical_ft_strain(case, cfg: RegOperatorConfig = None, sigma=0.03, iters=150, step=0.002):
    disp = ft_register(case.cine.frames, cfg, sigma, iters, step)
    partition = build_partition(case.myocardium, case.spec.n_sectors)
    return build_strain_matrix(disp, case.myocardium, partition, dt_ms=case.cine.dt_ms)


def classical_ft_baseline(case, cfg: RegOperatorConfig = None, sigma=0.03, iters=150,
                          step=0.002) -> TOSCurve:
    """TOS from variational registration of the cine sequence (no learning)."""
    return extract_tos(classical_ft_strain(case, cfg, sigma, iters, step))


def oracle_dense_tos(case) -> TOSCurve:
    """Upper-bound arm: the TOS rule applied to the ground-truth DENSE strain."""
    return extract_tos(case.gt_strain)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    tos_mse: float
    lma_accuracy: float
    per_case: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def to_csv(self):
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "case_id", "tos_mse", "lma_accuracy"])
        for row in self.per_case:
            writer.writerow([self.method, row["case_id"], repr(row["tos_mse"]), repr(row["lma_accuracy"])])
        writer.writerow([self.method, "ALL", repr(self.tos_mse), repr(self.lma_accuracy)])
        return buf.getvalue()


def evaluate(preds, gts, threshold_ms=LMA_THRESHOLD_MS, method="", case_ids=None) -> EvalReport:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValueError(f"need equally many predictions and ground truths (got {len(preds)}, {len(gts)})")
    if case_ids is None:
        case_ids = [str(i) for i in range(len(preds))]
    if len(case_ids) != len(preds):
        raise ValueError("case_ids misaligned with predictions")
    rows = [{"case_id": cid, "tos_mse": tos_mse(p, g), "lma_accuracy": lma_accuracy(p, g, threshold_ms)}
            for cid, p, g in zip(case_ids, preds, gts)]
    return EvalReport(
        method=method,
        tos_mse=float(np.mean([r["tos_mse"] for r in rows])),
        lma_accuracy=float(np.mean([r["lma_accuracy"] for r in rows])),
        per_case=rows,
    )


def comparison_table(reports):
    lines = [f"{'method':<16}{'TOS MSE (ms^2)':>16}{'LMA accuracy':>14}"]
    lines.append("-" * len(lines[0]))
    for r in reports:
        lines.append(f"{r.method:<16}{r.tos_mse:>16.2f}{r.lma_accuracy:>14.3f}")
    return "\n".join(lines)
