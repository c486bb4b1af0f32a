"""Frozen reconstruction suite: phantoms x accelerations x algorithms.

Each case simulates multicoil k-space with noise ``eta`` from a phantom,
solves from ``x0 = A^H b`` and records PSNR of the magnitude image. The
report keeps one row per case; aggregates are always recomputed from the
rows so the two can never disagree.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NonFiniteError, make_rng, save_pgm
from .operators import mri_op, simulate, synthetic_coil_maps, variable_density_mask
from .phantoms import as_channels, magnitude, make_phantom, psnr
from .solver import SolveConfig, epnp_gd, red_sd, score_pnp

ALGORITHMS = ("epnp", "red", "score")
ADJOINT = "adjoint"
NON_FINITE = "non_finite"
ROW_FIELDS = ("phantom", "operator", "R", "algorithm", "psnr", "iters", "status", "wall_seconds")


@dataclass
class SuiteConfig:
    n_phantoms: int = 10
    kind: str = "piecewise-smooth"
    shape: tuple = (32, 32)
    accels: tuple = (2, 6)
    eta: float = 0.01
    ncoils: int = 4
    seed: int = 5000
    algorithms: tuple = ALGORITHMS
    max_iters: int = 5000
    rel_tol: float = 1e-8
    baseline_rel_tol: float = 1e-6
    save_images: bool = True
    save_traces: bool = True

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.accels = tuple(self.accels)
        self.algorithms = tuple(self.algorithms)
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms {sorted(unknown)}")
        if self.n_phantoms < 1:
            raise ValueError("n_phantoms must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("shape", "accels", "algorithms"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        return cls(**d)


@dataclass
class Case:
    phantom: int
    R: float
    truth: np.ndarray
    op: object
    b: np.ndarray


def make_case(suite: SuiteConfig, i: int, R) -> Case:
    """Deterministic problem ``i`` at acceleration ``R``; seeds derive from ``suite.seed``."""
    seed = suite.seed + i
    truth = as_channels(make_phantom(suite.kind, suite.shape, seed).image, 2)
    h, w = suite.shape
    mask = variable_density_mask(h, R, seed=seed, width=w)
    op = mri_op(mask, synthetic_coil_maps(suite.ncoils, h, w, seed=seed))
    b = simulate(op, truth, suite.eta, make_rng(seed * 1000 + int(round(10 * R))))
    return Case(i, R, truth, op, b)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    suite: dict = field(default_factory=dict)

    def aggregates(self) -> list[dict]:
        """Mean and population std of PSNR per algorithm x R, in first-seen order."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r["algorithm"], r["R"]), []).append(r)
        out = []
        for (alg, R), rows in groups.items():
            vals = np.array([r["psnr"] for r in rows], dtype=np.float64)
            out.append({
                "algorithm": alg, "R": R, "n": len(rows),
                "psnr_mean": float(np.mean(vals)), "psnr_std": float(np.std(vals)),
                "iters_mean": float(np.mean([r["iters"] for r in rows])),
                "converged": sum(r["status"] == "converged" for r in rows),
            })
        return out

    def aggregate(self, algorithm, R) -> dict:
        for a in self.aggregates():
            if a["algorithm"] == algorithm and a["R"] == R:
                return a
        raise KeyError((algorithm, R))

    def canonical(self) -> dict:
        """Everything except wall-clock timings; two runs of one config must match this exactly."""
        rows = [{k: v for k, v in r.items() if k != "wall_seconds"} for r in self.rows]
        return {"suite": self.suite, "rows": rows, "aggregates": self.aggregates()}

    def to_json(self) -> dict:
        return {"suite": self.suite, "rows": self.rows, "aggregates": self.aggregates(), "table": self.table()}

    def table(self) -> str:
        accels = list(dict.fromkeys(r["R"] for r in self.rows))
        algs = list(dict.fromkeys(r["algorithm"] for r in self.rows))
        head = "algorithm".ljust(10) + "".join(f"R={R:g}".rjust(20) for R in accels)
        lines = [head]
        for alg in algs:
            cells = []
            for R in accels:
                try:
                    a = self.aggregate(alg, R)
                    cells.append(f"{a['psnr_mean']:.2f} +/- {a['psnr_std']:.2f}".rjust(20))
                except KeyError:
                    cells.append("-".rjust(20))
            lines.append(alg.ljust(10) + "".join(cells))
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(ROW_FIELDS))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in ROW_FIELDS})
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        (out / "table.txt").write_text(self.table() + "\n")


def _solve(alg, models, case, suite):
    if alg == "epnp":
        model = models["epnp"]
        cfg = SolveConfig(eta=suite.eta, sigma=model.sigma, max_iters=suite.max_iters, rel_tol=suite.rel_tol)
        return epnp_gd(model, case.op, case.b, cfg, truth=case.truth)
    net = models[alg]
    cfg = SolveConfig(eta=suite.eta, sigma=net.sigma, max_iters=suite.max_iters, rel_tol=suite.baseline_rel_tol)
    if alg == "red":
        return red_sd(net.denoise, case.op, case.b, cfg, truth=case.truth)
    return score_pnp(net, case.op, case.b, cfg, truth=case.truth)


def _run_case(models, suite, i, R, out_dir):
    case = make_case(suite, i, R)
    ref = magnitude(case.truth)
    x0 = case.op.adjoint(case.b)
    rows = [{"phantom": i, "operator": "mri", "R": R, "algorithm": ADJOINT,
             "psnr": psnr(magnitude(x0), ref), "iters": 0, "status": "init", "wall_seconds": 0.0}]
    for alg in suite.algorithms:
        t0 = time.perf_counter()
        try:
            x, trace = _solve(alg, models, case, suite)
            status, iters, value = trace.status, trace.iterations, psnr(magnitude(x), ref)
        except NonFiniteError:
            x, trace, status, iters, value = None, None, NON_FINITE, -1, float("nan")
        rows.append({"phantom": i, "operator": "mri", "R": R, "algorithm": alg, "psnr": value,
                     "iters": iters, "status": status, "wall_seconds": time.perf_counter() - t0})
        if out_dir is not None:
            stem = f"p{i:02d}_R{R:g}_{alg}"
            if suite.save_traces and trace is not None:
                (out_dir / "traces").mkdir(parents=True, exist_ok=True)
                trace.to_csv(out_dir / "traces" / f"{stem}.csv")
            if suite.save_images and x is not None:
                (out_dir / "images").mkdir(parents=True, exist_ok=True)
                save_pgm(out_dir / "images" / f"{stem}.pgm", magnitude(x))
    if out_dir is not None and suite.save_images:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        save_pgm(out_dir / "images" / f"p{i:02d}_R{R:g}_adjoint.pgm", magnitude(x0))
        save_pgm(out_dir / "images" / f"p{i:02d}_truth.pgm", ref)
    return rows


def run_benchmark(models: dict, suite: SuiteConfig, out_dir=None, threads: int = 1) -> BenchReport:
    """Run every phantom x R x algorithm case; failed solves are recorded, not raised.

    ``models`` maps algorithm names to loaded models: ``"epnp"`` to an energy
    model carrying its Lipschitz estimate, ``"red"`` and ``"score"`` to
    noise-estimator nets. Cases may run on a thread pool; rows are assembled
    in case order so the report does not depend on ``threads``.
    """
    missing = [a for a in suite.algorithms if a not in models]
    if missing:
        raise ValueError(f"no model supplied for {missing}")
    models = {k: (v.astype(np.float64) if v.dtype != np.float64 else v) for k, v in models.items()}
    out_dir = None if out_dir is None else Path(out_dir)
    jobs = [(i, R) for R in suite.accels for i in range(suite.n_phantoms)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda job: _run_case(models, suite, *job, out_dir), jobs))
    else:
        results = [_run_case(models, suite, i, R, out_dir) for i, R in jobs]
    report = BenchReport([r for rows in results for r in rows], suite.to_dict())
    if out_dir is not None:
        report.write(out_dir)
    return report


def psnr_gain(report: BenchReport, R, algorithm: str = "epnp") -> float:
    """Mean PSNR of ``algorithm`` minus mean adjoint-initialisation PSNR at ``R``."""
    gain = report.aggregate(algorithm, R)["psnr_mean"] - report.aggregate(ADJOINT, R)["psnr_mean"]
    return gain if math.isfinite(gain) else float("nan")
