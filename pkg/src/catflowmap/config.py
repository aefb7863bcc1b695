"""Run configuration: a YAML document with fixed sections.

Every section is optional except ``dataset``; omitted keys take the
defaults of the matching dataclass.  Unknown keys are rejected.  The
resolved form (:meth:`RunConfig.to_dict`) lists every effective value and,
written back as YAML, reproduces the run.

Example::

    seed: 0
    dataset: {name: parity, D: 4, K: 3}
    model: {width: 128, depth: 2, activation: relu}
    schedule: {kind: linear, clamp: 0.05}
    loss: {kind: ecld, label_smoothing: 0.1, diagonal_fraction: 0.75}
    train: {steps: 20000, batch_size: 256, lr: 3.0e-4}
    sample: {sampler: flowmap, nfe: 4, n: 10000}
    guidance: {particles: 16, steps: 16, lookahead: flowmap}
"""

from __future__ import annotations

import dataclasses
import inspect
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .data import DATASETS, CategoricalDataset
from .interpolant import CLAMP
from .losses import LossConfig
from .predictor import PredictorConfig
from .trainer import TrainConfig

SECTIONS = ("model", "schedule", "loss", "train", "sample", "guidance", "dataset", "seed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    clamp: float = CLAMP

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError("only the linear schedule is trainable")
        if not 0.0 <= self.clamp < 1.0:
            raise ValueError("clamp must be in [0, 1)")


@dataclass(frozen=True)
class SampleConfig:
    sampler: str = "flowmap"
    nfe: int = 4
    n: int = 10000
    mode: str = "argmax"
    sigma0: float = 1.0
    use_ema: bool = True

    def __post_init__(self):
        if self.sampler not in ("flowmap", "euler", "sde"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode not in ("argmax", "categorical"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class GuidanceConfig:
    particles: int = 16
    steps: int = 16
    n: int = 10000
    sigma0: float = 1.0
    lookahead: str = "flowmap"
    ste: bool = True
    ess_fraction: float = 0.5
    target: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.particles < 1 or self.steps < 1 or self.n < 1:
            raise ValueError("particles, steps and n must be >= 1")
        if self.lookahead not in ("flowmap", "denoiser", "none"):
            raise ValueError(f"unknown lookahead {self.lookahead!r}")
        if not 0.0 <= self.ess_fraction <= 1.0:
            raise ValueError("ess_fraction must be in [0, 1]")


def _build(cls, section: str, raw, exclude=(), **fixed):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
    kw = dict(raw)
    if "betas" in kw:
        kw["betas"] = tuple(kw["betas"])
    try:
        return cls(**kw, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: dict
    model: PredictorConfig
    schedule: ScheduleConfig
    loss: LossConfig
    train: TrainConfig
    sample: SampleConfig
    guidance: GuidanceConfig

    def make_dataset(self) -> CategoricalDataset:
        args = {k: v for k, v in self.dataset.items() if k != "name"}
        return DATASETS[self.dataset["name"]](**args)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        loss = asdict(self.loss)
        loss.pop("clamp")
        train = asdict(self.train)
        train.pop("seed")
        train["betas"] = list(train["betas"])
        return {"seed": self.seed, "dataset": dict(self.dataset), "model": model,
                "schedule": asdict(self.schedule), "loss": loss, "train": train,
                "sample": asdict(self.sample), "guidance": asdict(self.guidance)}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _resolve_dataset(raw) -> tuple[dict, CategoricalDataset]:
    if raw is None:
        raise ConfigError("missing required key 'dataset'")
    if not isinstance(raw, dict) or "name" not in raw:
        raise ConfigError("missing required key 'dataset.name'")
    name = raw["name"]
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset '{name}' (choose from {sorted(DATASETS)})")
    sig = inspect.signature(DATASETS[name])
    unknown = sorted(set(raw) - {"name"} - set(sig.parameters))
    if unknown:
        raise ConfigError(f"unknown key 'dataset.{unknown[0]}'")
    args = {p.name: raw.get(p.name, p.default) for p in sig.parameters.values()}
    missing = [k for k, v in args.items() if v is inspect.Parameter.empty]
    if missing:
        raise ConfigError(f"missing required key 'dataset.{missing[0]}'")
    try:
        ds = DATASETS[name](**args)
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    return {"name": name, **args}, ds


def resolve_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    dataset, ds = _resolve_dataset(raw.get("dataset"))
    model_raw = raw.get("model")
    if isinstance(model_raw, dict):
        # D and K come from the dataset; a snapshot may restate them
        model_raw = dict(model_raw)
        for key, want in (("D", ds.D), ("K", ds.K)):
            if key in model_raw and model_raw.pop(key) != want:
                raise ConfigError(f"model.{key} disagrees with the dataset ({want})")
    model = _build(PredictorConfig, "model", model_raw, exclude=("D", "K"), D=ds.D, K=ds.K)
    schedule = _build(ScheduleConfig, "schedule", raw.get("schedule"))
    loss = _build(LossConfig, "loss", raw.get("loss"), exclude=("clamp",), clamp=schedule.clamp)
    train = _build(TrainConfig, "train", raw.get("train"), exclude=("seed",), seed=seed)
    sample = _build(SampleConfig, "sample", raw.get("sample"))
    guidance = _build(GuidanceConfig, "guidance", raw.get("guidance"))
    return RunConfig(seed, dataset, model, schedule, loss, train, sample, guidance)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return resolve_config(raw)
