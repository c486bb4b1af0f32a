"""Train -> estimate Lipschitz -> benchmark, driven by one JSON-able config.

The defaults form the toy pipeline: 16 two-channel piecewise-smooth
phantoms at 32x32, a 5-layer softplus energy net with a summing head, the
two plain-CNN baselines, and the frozen 10-phantom MRI suite.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .baselines import ScoreNet, ScoreNetConfig
from .bench import BenchReport, SuiteConfig, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .dsm import TrainConfig, train, write_history_csv
from .energy import EnergyModel, EnergyNetConfig
from .lipschitz import estimate_L, make_probes
from .phantoms import phantom_dataset

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


@dataclass
class DataConfig:
    kind: str = "piecewise-smooth"
    n: int = 16
    shape: tuple = (32, 32)
    channels: int = 2
    ncomponents: int = 5
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    def dataset(self):
        return phantom_dataset(self.kind, tuple(self.shape), self.n, seed=self.seed,
                               channels=self.channels, ncomponents=self.ncomponents)


@dataclass
class LipschitzConfig:
    n_probes: int = 20
    iters: int = 50
    eps: float = 1e-4
    safety_factor: float = 1.1
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _toy_energy():
    return EnergyNetConfig(in_channels=2, num_conv_layers=5, channels=16, activation="softplus", head="sum")


def _toy_baseline():
    return ScoreNetConfig(in_channels=2, num_layers=10, channels=16)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    energy: EnergyNetConfig = field(default_factory=_toy_energy)
    head_scale: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, lr_final=3e-4, batch_size=4))
    baseline: ScoreNetConfig = field(default_factory=_toy_baseline)
    baseline_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, lr_final=1e-4, batch_size=4))
    lipschitz: LipschitzConfig = field(default_factory=LipschitzConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        h, w = self.data.shape
        for cfg in (self.energy, self.baseline):
            if (cfg.in_channels, cfg.height, cfg.width) != (self.data.channels, h, w):
                raise ValueError("network input shape must match the data shape")

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(), "energy": self.energy.to_dict(), "head_scale": self.head_scale,
            "train": self.train.to_dict(), "baseline": self.baseline.to_dict(),
            "baseline_train": self.baseline_train.to_dict(), "lipschitz": self.lipschitz.to_dict(),
            "suite": self.suite.to_dict(), "seed": self.seed, "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Missing keys take the toy defaults; nested sections merge key by key."""
        base = cls().to_dict()
        unknown = set(d) - set(base)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        merged = copy.deepcopy(base)
        for k, v in d.items():
            if isinstance(base[k], dict):
                if not isinstance(v, dict):
                    raise ValueError(f"config section {k!r} must be an object")
                merged[k].update(v)
                # resolved per-layer lists follow an overridden depth
                if "num_conv_layers" in v and "strides" in base[k] and "strides" not in v:
                    merged[k]["strides"] = []
            else:
                merged[k] = v
        return cls(
            data=DataConfig(**merged["data"]), energy=EnergyNetConfig.from_dict(merged["energy"]),
            head_scale=merged["head_scale"], train=TrainConfig(**merged["train"]),
            baseline=ScoreNetConfig.from_dict(merged["baseline"]),
            baseline_train=TrainConfig(**merged["baseline_train"]),
            lipschitz=LipschitzConfig(**merged["lipschitz"]), suite=SuiteConfig.from_dict(merged["suite"]),
            seed=merged["seed"], threads=merged["threads"],
        )


def write_config(path, cfg: dict) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def train_energy(cfg: PipelineConfig, dataset, out_dir=None) -> EnergyModel:
    model = EnergyModel.init(cfg.energy, cfg.train.sigma, seed=cfg.seed, head_scale=cfg.head_scale)
    model, history = train(model, dataset, cfg.train)
    if out_dir is not None:
        write_history_csv(Path(out_dir) / "energy_loss.csv", history)
    return model


def train_baseline(cfg: PipelineConfig, dataset, spectral_norm: bool, out_dir=None) -> ScoreNet:
    net_cfg = ScoreNetConfig.from_dict({**cfg.baseline.to_dict(), "spectral_norm": spectral_norm})
    net = ScoreNet.init(net_cfg, cfg.baseline_train.sigma, seed=cfg.seed + 1 + int(spectral_norm))
    net, history = train(net, dataset, cfg.baseline_train)
    if out_dir is not None:
        name = "score" if spectral_norm else "red"
        write_history_csv(Path(out_dir) / f"{name}_loss.csv", history)
    return net


def attach_lipschitz(model: EnergyModel, images, lcfg: LipschitzConfig) -> EnergyModel:
    probes = make_probes(images, lcfg.n_probes, sigma=model.sigma, seed=lcfg.seed)
    est = estimate_L(model, probes, iters=lcfg.iters, eps=lcfg.eps, safety_factor=lcfg.safety_factor,
                     seed=lcfg.seed)
    model.lipschitz = est.to_dict()
    return model


def end_to_end(cfg: PipelineConfig, out_dir) -> BenchReport:
    """Run every stage, writing checkpoints, loss curves, the report, traces and images.

    Errors are re-raised as :class:`StageError` naming the failing stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.json", cfg.to_dict())
    dataset = _stage("data", cfg.data.dataset)
    energy = _stage("train", train_energy, cfg, dataset, out)
    _stage("train", save_checkpoint, out / "energy.ckpt", energy)
    models = {"epnp": energy}
    if "red" in cfg.suite.algorithms:
        models["red"] = _stage("train-baselines", train_baseline, cfg, dataset, False, out)
        _stage("train-baselines", save_checkpoint, out / "red.ckpt", models["red"])
    if "score" in cfg.suite.algorithms:
        models["score"] = _stage("train-baselines", train_baseline, cfg, dataset, True, out)
        _stage("train-baselines", save_checkpoint, out / "score.ckpt", models["score"])
    _stage("estimate-lipschitz", attach_lipschitz, energy, dataset.images, cfg.lipschitz)
    _stage("estimate-lipschitz", save_checkpoint, out / "energy.ckpt", energy)
    report = _stage("bench", run_benchmark, models, cfg.suite, out / "bench", cfg.threads)
    logger.info("benchmark table\n%s", report.table())
    return report


def load_models(paths: dict) -> dict:
    """Load ``{algorithm: checkpoint path}``; a missing file raises a ``load`` StageError."""
    return {alg: _stage("load", load_checkpoint, p) for alg, p in paths.items()}
