"""``densecine`` command line: phantom, train, eval, render3d, plot."""

import argparse
import logging
import os
import sys

import numpy as np

from . import evalsuite, jointmodel, phantom, recon3d
from .config import RunConfig, apply_overrides
from .strain import TOSCurve, extract_tos

log = logging.getLogger("densecine")

OUT_ENV = "DENSECINE_OUT"
METHODS = ("gt", "oracle", "joint", "ft")


class CliError(Exception):
    pass


_handlers = []


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if args.out:
        cfg.out = args.out
    if os.environ.get(OUT_ENV):
        cfg.out = os.environ[OUT_ENV]
    return cfg.validate()


def prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CliError(f"output directory {path} is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)
    handler = logging.FileHandler(os.path.join(path, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)
    _handlers.append(handler)
    return path


def _need_dir(path, what):
    if not path or not os.path.isdir(path):
        raise CliError(f"{what} {path!r} does not exist")
    return path


def _dataset(cfg):
    path = _need_dir(cfg.dataset, "dataset")
    if not os.path.exists(os.path.join(path, phantom.MANIFEST_NAME)):
        raise CliError(f"dataset {path!r} has no {phantom.MANIFEST_NAME}")
    return path


def _model(cfg):
    return jointmodel.load_checkpoint(_need_dir(cfg.checkpoint, "checkpoint"))


def method_outputs(method, case, cfg, model=None):
    """``(strain matrix, TOS curve)`` of one arm on one case."""
    if method == "gt":
        return case.gt_strain, case.gt_tos
    if method == "oracle":
        return case.gt_strain, evalsuite.oracle_dense_tos(case)
    if method == "joint":
        return jointmodel.predict(model, case)
    if method == "ft":
        S = evalsuite.classical_ft_strain(case, cfg.reg, cfg.ft.sigma, cfg.ft.iters, cfg.ft.step)
        return S, extract_tos(S)
    raise CliError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def _methods(requested, cfg, default):
    methods = list(requested or default)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise CliError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    model = _model(cfg) if "joint" in methods else None
    return methods, model


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args, cfg):
    if args.count < 1:
        raise CliError(f"--count must be positive, got {args.count}")
    out = prepare_out(cfg.out, args.force)
    seed = args.seed if args.seed is not None else 0
    manifest = phantom.write_dataset(out, cfg.phantom, args.count, seed)
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.count} cases to {out} (train/val/test = "
          f"{sizes['train']}/{sizes['val']}/{sizes['test']})")


def cmd_train(args, cfg):
    data = _dataset(cfg)
    train = phantom.load_split(data, "train")
    val = phantom.load_split(data, "val")
    out = prepare_out(cfg.out, args.force)
    cfg.train.checkpoint_dir = out
    _, history = jointmodel.train_joint(train, val, cfg.loss, cfg.train, cfg.reg)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    print(f"checkpoint written to {out} (best epoch {history['best_epoch']}, "
          f"val TOS MSE {min(history['val_tos_mse']):.2f} ms^2)")


def cmd_eval(args, cfg):
    data = _dataset(cfg)
    default = ("oracle", "joint", "ft") if cfg.checkpoint else ("oracle", "ft")
    methods, model = _methods(args.methods, cfg, default)
    cases = phantom.load_split(data, cfg.eval.split)
    if not cases:
        raise CliError(f"split {cfg.eval.split!r} of {data} is empty")
    out = prepare_out(cfg.out, args.force)
    reports = []
    for method in methods:
        preds = [method_outputs(method, c, cfg, model)[1] for c in cases]
        report = evalsuite.evaluate(preds, [c.gt_tos for c in cases], cfg.eval.threshold_ms,
                                    method, [c.case_id for c in cases])
        with open(os.path.join(out, f"report_{method}.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(out, f"report_{method}.csv"), "w") as fh:
            fh.write(report.to_csv())
        reports.append(report)
    table = evalsuite.comparison_table(reports)
    with open(os.path.join(out, "comparison.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)


def cmd_render3d(args, cfg):
    data = _dataset(cfg)
    methods, model = _methods(args.methods, cfg, ("gt",))
    zs = [float(z) for z in cfg.render.slice_z_mm]
    cases = phantom.load_split(data, cfg.eval.split)
    if len(cases) < len(zs):
        raise CliError(f"split {cfg.eval.split!r} has {len(cases)} cases, need {len(zs)} slices")
    cases = cases[:len(zs)]
    out = prepare_out(cfg.out, args.force)
    for method in methods:
        slices = [recon3d.SliceTOS(z, c.myocardium, method_outputs(method, c, cfg, model)[1])
                  for z, c in zip(zs, cases)]
        study = recon3d.SlicedStudy(slices, cfg.render.pixel_spacing_mm)
        surface = recon3d.reconstruct_surface(study, cfg.render.angular_samples, cfg.render.z_samples)
        path = os.path.join(out, f"{method}.ply")
        recon3d.export_surface(surface, path, cfg.eval.threshold_ms)
        print(f"wrote {path}")


def plot_strain_tos(S, tos: TOSCurve, gt_tos: TOSCurve, path, width_in, height_in, dpi, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(S.values)
    fig = plt.figure(figsize=(width_in, height_in), dpi=dpi)
    ax = fig.add_axes([0.1, 0.12, 0.75, 0.78])
    n, t = values.shape
    extent = (-0.5, n - 0.5, S.dt_ms * 0.5, S.dt_ms * (t + 0.5))
    im = ax.imshow(values.T, origin="lower", aspect="auto", cmap="RdBu", vmin=-0.2, vmax=0.2,
                   extent=extent)
    sectors = np.arange(n)
    ax.plot(sectors, gt_tos.values, "k-", lw=1.5, label="ground truth")
    ax.plot(sectors, tos.values, "y--", lw=1.5, label="prediction")
    ax.set_xlabel("sector")
    ax.set_ylabel("time (ms)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize="small")
    cax = fig.add_axes([0.88, 0.12, 0.03, 0.78])
    fig.colorbar(im, cax=cax, label="E_cc")
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def cmd_plot(args, cfg):
    data = _dataset(cfg)
    methods, model = _methods([args.method], cfg, ())
    try:
        case = phantom.load_case(os.path.join(data, args.case))
    except FileNotFoundError as exc:
        raise CliError(f"case {args.case!r} not found in {data}") from exc
    out = prepare_out(cfg.out, args.force)
    S, tos = method_outputs(methods[0], case, cfg, model)
    path = os.path.join(out, f"{args.case}_{methods[0]}.png")
    plot_strain_tos(S, tos, case.gt_tos, path, cfg.plot.width_in, cfg.plot.height_in,
                    cfg.plot.dpi, f"{args.case} ({methods[0]})")
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help=f"output directory (overridden by ${OUT_ENV})")
    common.add_argument("--seed", type=int, help="base seed for generation and training")
    common.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=5 (repeatable)")

    parser = argparse.ArgumentParser(prog="densecine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[common], help="train the joint model")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="compare methods on a dataset split")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render3d", parents=[common], help="export 3D activation maps as PLY")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.set_defaults(func=cmd_render3d)

    p = sub.add_parser("plot", parents=[common], help="strain matrix with TOS overlay")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--case", required=True)
    p.add_argument("--method", default="gt", choices=METHODS)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"densecine: error: {msg}", file=sys.stderr)
        return 1
    finally:
        while _handlers:
            handler = _handlers.pop()
            logging.getLogger().removeHandler(handler)
            handler.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
