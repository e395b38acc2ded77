"""Experiment configuration: a versioned JSON document mapped onto frozen dataclasses.

Unknown keys anywhere in the document are rejected.  Every seed is an explicit
field; the hash used for caching covers everything except where outputs go
and how many threads run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from memextract import diffusion
from memextract.classifier import LABEL_KINDS, ClassifierConfig, DistillConfig, LabelSource
from memextract.harness.data import DATASET_KINDS, DatasetSpec
from memextract.metrics import SimilarityScorer, standard_tiers

SCHEMA = "memextract.experiment/1"
UNHASHED = ("out_dir", "threads")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_embed_dim: int = 64
    epochs: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def make_schedule(self) -> diffusion.NoiseSchedule:
        return diffusion.make_schedule(self.T, self.schedule, (self.beta_start, self.beta_end))

    def denoiser(self) -> diffusion.DenoiserConfig:
        return diffusion.DenoiserConfig(self.hidden, self.activation, self.time_embed_dim,
                                        self.epochs, self.batch_size, self.lr,
                                        self.weight_decay, self.seed)


@dataclass(frozen=True)
class SamplingSection:
    steps: int = 50
    eta: float = 0.0
    n_gen: int = 1024
    seed: int = 1
    clip: bool = False
    target_label: int | None = None


@dataclass(frozen=True)
class TierSection:
    low: float = 0.4
    mid: float = 0.5
    high: float = 0.6


@dataclass(frozen=True)
class EvaluationSection:
    tiers: TierSection = TierSection()
    scorer: str = "cosine_normalized"
    # inclusive lambda range averaged into the headline summary
    average_window: tuple[float, float] = (5.0, 9.0)

    def tier_list(self):
        return standard_tiers(self.tiers.low, self.tiers.mid, self.tiers.high)

    def make_scorer(self) -> SimilarityScorer:
        return SimilarityScorer(self.scorer)


@dataclass(frozen=True)
class ExperimentConfig:
    schema: str = SCHEMA
    dataset: DatasetSpec = DatasetSpec()
    diffusion: DiffusionSection = DiffusionSection()
    labels: LabelSource = LabelSource()
    teacher: ClassifierConfig = ClassifierConfig()
    distill: DistillConfig = DistillConfig()
    sampling: SamplingSection = SamplingSection()
    evaluation: EvaluationSection = EvaluationSection()
    lambda_set: tuple[float, ...] = (0.0, 1.0, 2.0, 5.0, 8.0, 13.0, 21.0)
    out_dir: str = "runs/default"
    threads: int = 1

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        d = self.to_dict()
        for key in UNHASHED:
            d.pop(key)
        return hash_json(d)

    def window_lambdas(self) -> tuple[float, ...]:
        lo, hi = self.evaluation.average_window
        return tuple(lam for lam in self.lambda_set if lo <= lam <= hi)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.schema != SCHEMA:
        raise ConfigError(f"unsupported schema {cfg.schema!r}; expected {SCHEMA!r}")
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
    if cfg.dataset.n < 2:
        raise ConfigError("dataset.n must be >= 2")
    if cfg.labels.kind not in LABEL_KINDS:
        raise ConfigError(f"labels.kind must be one of {LABEL_KINDS}")
    if cfg.diffusion.schedule not in ("linear", "cosine"):
        raise ConfigError("diffusion.schedule must be 'linear' or 'cosine'")
    if not cfg.lambda_set:
        raise ConfigError("lambda_set must not be empty")
    if 0.0 not in cfg.lambda_set:
        raise ConfigError("lambda_set must include 0 (the unguided baseline)")
    if any(lam < 0 for lam in cfg.lambda_set):
        raise ConfigError("guidance scales must be non-negative")
    if len(set(cfg.lambda_set)) != len(cfg.lambda_set):
        raise ConfigError("lambda_set has duplicates")
    t = cfg.evaluation.tiers
    if not 0.0 <= t.low < t.mid < t.high < 1.0:
        raise ConfigError("tier thresholds must satisfy 0 <= low < mid < high < 1")
    lo, hi = cfg.evaluation.average_window
    if lo > hi:
        raise ConfigError("average_window must be [lo, hi] with lo <= hi")
    if cfg.sampling.n_gen < 1 or cfg.sampling.steps < 1:
        raise ConfigError("sampling.n_gen and sampling.steps must be positive")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        cfg.evaluation.make_scorer()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def hash_json(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if "schema" not in data:
        raise ConfigError("missing 'schema' field")
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def with_overrides(cfg: ExperimentConfig, *, seed: int | None = None, out_dir: str | None = None,
                   threads: int | None = None) -> ExperimentConfig:
    """Apply command-line overrides; ``seed`` replaces every component seed."""
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            dataset=dataclasses.replace(cfg.dataset, seed=seed),
            diffusion=dataclasses.replace(cfg.diffusion, seed=seed),
            labels=dataclasses.replace(cfg.labels, seed=seed),
            teacher=dataclasses.replace(cfg.teacher, seed=seed),
            distill=dataclasses.replace(cfg.distill, seed=seed, pseudo_seed=seed),
            sampling=dataclasses.replace(cfg.sampling, seed=seed))
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    if threads is not None:
        cfg = dataclasses.replace(cfg, threads=threads)
    return cfg


def fixture_config(**overrides) -> ExperimentConfig:
    """The pinned desk-scale fixture used by the acceptance suite."""
    cfg = ExperimentConfig(
        dataset=DatasetSpec(kind="tiny_image_grid", n=64, dim=64, k=8, seed=0, spread=0.2,
                            max_freq=6),
        diffusion=DiffusionSection(),
        # one class per training point; a sharp teacher makes the guidance bite
        labels=LabelSource("random_per_sample"),
        teacher=ClassifierConfig(epochs=1000, weight_decay=0.0),
        distill=DistillConfig(epochs=300, lr=1e-3, weight_decay=0.0, synthetic_factor=16),
        sampling=SamplingSection(),
        evaluation=EvaluationSection(),
        out_dir="runs/fixture")
    return dataclasses.replace(cfg, **overrides) if overrides else cfg

