"""``epnp`` command-line tool.

Every subcommand writes the fully resolved configuration it ran with next
to its outputs, so a run can be repeated from that file alone.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numerical failure (descent violation, non-finite values, diverged
training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import ScoreNet
from .bench import SuiteConfig, run_benchmark
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dsm import TrainingDiverged
from .energy import EnergyModel
from .lipschitz import make_probes, pairwise_ascent
from .numerics import NonFiniteError, load_tensor, make_rng, save_pgm, save_tensor
from .operators import (SamplingMask, identity_op, mask_op, mri_op, simulate, synthetic_coil_maps,
                        variable_density_mask)
from .phantoms import magnitude, psnr
from .pipeline import (PipelineConfig, StageError, attach_lipschitz, end_to_end, load_models, train_baseline,
                       train_energy, write_config)
from .solver import DESCENT_VIOLATION, SolveConfig, epnp_gd, red_sd, score_pnp
from .verify import run_verify

logger = logging.getLogger("epnp")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _read_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p} is not valid JSON: {exc}") from exc


def _pipeline_config(args) -> PipelineConfig:
    d = _read_json(getattr(args, "config", None))
    cfg = PipelineConfig.from_dict(d)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.baseline_train.seed = args.seed
    if args.precision is not None:
        cfg.train.precision = args.precision
        cfg.baseline_train.precision = args.precision
    cfg.threads = args.threads
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
        cfg.baseline_train.epochs = args.epochs
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise StageError("load", exc) from exc


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# -------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    cfg = _pipeline_config(args)
    out = _out_dir(args.out_dir)
    write_config(out / "train.resolved.json", {**cfg.to_dict(), "model": args.model})
    dataset = cfg.data.dataset()
    try:
        if args.model == "energy":
            model = train_energy(cfg, dataset, out)
        else:
            model = train_baseline(cfg, dataset, spectral_norm=args.model == "score", out_dir=out)
    except (TrainingDiverged, NonFiniteError) as exc:
        raise StageError("train", exc) from exc
    name = {"energy": "energy.ckpt", "score": "score.ckpt", "red": "red.ckpt"}[args.model]
    save_checkpoint(out / name, model)
    _emit({"checkpoint": str(out / name), "final_loss": model.metadata["training"]["final_loss"]})
    return EXIT_OK


def cmd_estimate_lipschitz(args) -> int:
    model = _load(args.checkpoint)
    if not isinstance(model, EnergyModel):
        raise UsageError("estimate-lipschitz needs an energy checkpoint")
    cfg = _pipeline_config(args)
    lcfg = cfg.lipschitz
    if args.probes is not None:
        lcfg.n_probes = args.probes
    if args.iters is not None:
        lcfg.iters = args.iters
    if args.seed is not None:
        lcfg.seed = args.seed
    images = cfg.data.dataset().images
    attach_lipschitz(model, images, lcfg)
    if args.cross_check:
        probes = make_probes(images, 2 * args.cross_check, sigma=model.sigma, seed=lcfg.seed + 1)
        ratios = [pairwise_ascent(model, probes[2 * i], probes[2 * i + 1], seed=lcfg.seed + i)
                  for i in range(args.cross_check)]
        model.lipschitz["pairwise_max"] = max(ratios)
        if max(ratios) > model.lipschitz["L"]:
            logger.warning("pairwise ratio %.4g exceeds the estimate %.4g", max(ratios), model.lipschitz["L"])
    out_path = Path(args.out or args.checkpoint)
    save_checkpoint(out_path, model)
    write_config(out_path.with_suffix(".lipschitz.json"),
                 {"checkpoint": str(out_path), "data": cfg.data.to_dict(), "lipschitz": lcfg.to_dict(),
                  "cross_check": args.cross_check, "result": model.lipschitz})
    _emit(model.lipschitz)
    return EXIT_OK


def cmd_make_mask(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        mask = variable_density_mask(args.size, args.accel, seed=seed, width=args.width)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(out, mask.array.astype(np.float32))
    resolved = {"size": args.size, "width": mask.width, "accel": args.accel, "seed": seed,
                "num_lines": mask.num_lines, "out": str(out)}
    write_config(out.with_suffix(".json"), resolved)
    _emit(resolved)
    return EXIT_OK


def _build_operator(args, shape, rng):
    c, h, w = shape
    if args.operator == "denoise":
        return identity_op(shape)
    if args.operator == "inpaint":
        if args.mask:
            m = load_tensor(args.mask) != 0
            m = np.broadcast_to(m, shape)
        else:
            m = rng.random(shape) < args.keep
        return mask_op(m)
    if c != 2:
        raise UsageError("the mri operator needs a two-channel (real/imag) model")
    if args.mask:
        mask = SamplingMask.from_array(load_tensor(args.mask))
    else:
        mask = variable_density_mask(h, args.accel, seed=args.seed or 0, width=w)
    if args.csm:
        raw = load_tensor(args.csm)
        csm = raw[:, 0] + 1j * raw[:, 1]
    else:
        csm = synthetic_coil_maps(args.ncoils, h, w, seed=args.seed or 0)
    return mri_op(mask, csm)


def cmd_reconstruct(args) -> int:
    model = _load(args.checkpoint)
    shape = model.config.input_shape
    seed = args.seed if args.seed is not None else 0
    rng = make_rng(seed)
    op = _build_operator(args, shape, rng)
    truth = None
    if args.truth:
        truth = load_tensor(args.truth).astype(np.float64).reshape(shape)
    if args.measurements:
        b = load_tensor(args.measurements).astype(np.float64)
    elif truth is not None:
        b = simulate(op, truth, args.eta, make_rng(seed + 1))
    else:
        raise UsageError("reconstruct needs --measurements or --truth")
    gamma = args.gamma if args.gamma == "auto" else float(args.gamma)
    cfg = SolveConfig(eta=args.eta, sigma=model.sigma, gamma=gamma, max_iters=args.max_iters,
                      rel_tol=args.tol, init=args.init)
    algorithm = args.algorithm or ("epnp" if isinstance(model, EnergyModel) else
                                   "score" if model.config.spectral_norm else "red")
    if algorithm == "epnp":
        if not isinstance(model, EnergyModel):
            raise UsageError("epnp needs an energy checkpoint")
        if gamma == "auto" and model.L is None:
            raise UsageError("gamma=auto needs a checkpoint with a Lipschitz estimate (run estimate-lipschitz)")
        x, trace = epnp_gd(model, op, b, cfg, truth=truth)
    elif algorithm == "red":
        m = model.astype(np.float64)
        x, trace = red_sd(m.denoise, op, b, cfg, truth=truth)
    else:
        if not isinstance(model, ScoreNet):
            raise UsageError("score-pnp needs a plain score-net checkpoint")
        x, trace = score_pnp(model.astype(np.float64), op, b, cfg, truth=truth)
    out_image = Path(args.out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    if out_image.suffix == ".pgm":
        save_pgm(out_image, magnitude(x))
    else:
        save_tensor(out_image, x)
    if args.out_trace:
        trace.to_csv(args.out_trace)
    summary = {"algorithm": trace.algorithm, "status": trace.status, "iterations": trace.iterations,
               "gamma": trace.gamma}
    if truth is not None:
        summary["psnr"] = psnr(magnitude(x), magnitude(truth))
        summary["psnr_init"] = psnr(magnitude(op.adjoint(b)), magnitude(truth))
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved.update({"algorithm": algorithm, "seed": seed, "summary": summary})
    write_config(out_image.with_name(out_image.stem + ".resolved.json"), resolved)
    _emit(summary)
    return EXIT_NUMERIC if trace.status == DESCENT_VIOLATION else EXIT_OK


def cmd_verify(args) -> int:
    model = _load(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    report = run_verify(model, args.level, seed=seed)
    report["checkpoint"] = str(args.checkpoint)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"passed": report["passed"], "failed": [c["name"] for c in report["checks"]
                                                  if not c["passed"] and not c.get("informational")]})
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_bench(args) -> int:
    out = _out_dir(args.out_dir)
    suite = SuiteConfig.from_dict(_read_json(args.suite))
    paths = {"epnp": args.energy, "red": args.red, "score": args.score}
    paths = {k: v for k, v in paths.items() if k in suite.algorithms}
    missing = [k for k, v in paths.items() if v is None]
    if missing:
        raise UsageError(f"no checkpoint given for {missing}")
    models = load_models(paths)
    write_config(out / "suite.resolved.json", {"suite": suite.to_dict(), "checkpoints": paths,
                                               "threads": args.threads})
    report = run_benchmark(models, suite, out, threads=args.threads)
    print(report.table())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    report = end_to_end(cfg, args.out_dir)
    print(report.table())
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, default):
        # Global flags are accepted before or after the subcommand.
        parser.add_argument("--seed", type=int, default=default(None), help="override every seed in the config")
        parser.add_argument("--precision", choices=("f32", "f64"), default=default(None), help="training precision")
        parser.add_argument("--threads", type=int, default=default(1), help="worker threads (1 = reproducible)")
        parser.add_argument("-v", "--verbose", action="store_true", default=default(False))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="epnp", description="Energy-based plug-and-play image recovery.")
    global_flags(p, lambda v: v)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    t = sub.add_parser("train", help="train an energy model or a baseline by DSM")
    t.add_argument("--config", help="pipeline-style JSON config")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--model", choices=("energy", "score", "red"), default="energy")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate-lipschitz", help="estimate L and store it in the checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="pipeline-style JSON config (data and lipschitz sections)")
    e.add_argument("--probes", type=int)
    e.add_argument("--iters", type=int)
    e.add_argument("--cross-check", type=int, default=0, help="number of pairwise-ascent probe pairs")
    e.add_argument("--out", help="write the updated checkpoint here instead of in place")
    e.set_defaults(func=cmd_estimate_lipschitz)

    m = sub.add_parser("make-mask", help="write a variable-density Cartesian mask")
    m.add_argument("--size", type=int, required=True)
    m.add_argument("--width", type=int)
    m.add_argument("--accel", type=float, required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_mask)

    r = sub.add_parser("reconstruct", help="solve one inverse problem")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--operator", choices=("denoise", "inpaint", "mri"), default="mri")
    r.add_argument("--algorithm", choices=("epnp", "red", "score"))
    r.add_argument("--mask")
    r.add_argument("--csm", help="coil maps tensor [ncoils, 2, H, W]")
    r.add_argument("--ncoils", type=int, default=4)
    r.add_argument("--accel", type=float, default=2.0)
    r.add_argument("--keep", type=float, default=0.5, help="kept pixel fraction for a random inpainting mask")
    r.add_argument("--truth", help="ground-truth image tensor (measurements are simulated from it)")
    r.add_argument("--measurements", help="measurement tensor b")
    r.add_argument("--eta", type=float, default=0.01)
    r.add_argument("--gamma", default="auto")
    r.add_argument("--tol", type=float, default=1e-8)
    r.add_argument("--max-iters", type=int, default=10000)
    r.add_argument("--init", choices=("adjoint", "zeros"), default="adjoint")
    r.add_argument("--out-image", required=True)
    r.add_argument("--out-trace")
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("verify", help="run the property suites on a checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--level", choices=("quick", "full"), default="quick")
    v.add_argument("--out", help="JSON report path")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="run the reconstruction suite")
    b.add_argument("--suite", help="suite JSON (defaults fill missing keys)")
    b.add_argument("--out-dir", required=True)
    b.add_argument("--energy", help="energy checkpoint with L")
    b.add_argument("--red", help="RED denoiser checkpoint")
    b.add_argument("--score", help="spectrally normalised score-net checkpoint")
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("pipeline", help="train, estimate L and benchmark in one go")
    pl.add_argument("--config")
    pl.add_argument("--out-dir", required=True)
    pl.add_argument("--epochs", type=int)
    pl.set_defaults(func=cmd_pipeline)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.error)
    if isinstance(exc, (NonFiniteError, TrainingDiverged, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except (UsageError, StageError, CheckpointError, FileNotFoundError, ValueError, KeyError, TypeError,
            NonFiniteError, TrainingDiverged) as exc:
        msg = str(exc) if isinstance(exc, StageError) else f"{type(exc).__name__}: {exc}"
        print(f"epnp {args.command}: error: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
