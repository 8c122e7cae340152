"""Flat run configuration shared by every CLI stage.

A config file is a single YAML mapping with the keys of :class:`RunConfig`.
Relative paths resolve against the config file's directory. Each stage
hashes only the keys it and its upstream stages read, so changing a model
setting never invalidates cached ingest or graph artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .agents import ExtractionConfig
from .fusionnet import ModelConfig
from .graphs import GraphBuildConfig
from .ingest import ColumnMapping, SplitSpec
from .irt import IrtConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # inputs
    interactions: str = "interactions.csv"
    kc_names: str | None = None
    gold: str | None = None
    output_dir: str = "out"
    # column mapping
    col_student: str = "user_id"
    col_question: str = "problem_id"
    col_kc: str = "skill_id"
    col_correct: str = "correct"
    col_timestamp: str | None = "timestamp"
    kc_delimiter: str = ";"
    delimiter: str = ","
    # filtering, splitting, windowing
    min_student: int = 10
    min_question: int = 10
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    seed: int = 0
    window: int = 100
    # IRT
    irt_l2_prior: float = 0.1
    irt_max_iters: int = 200
    irt_tol: float = 1e-6
    # graphs
    sigma_q: float | None = None
    sigma_s: float | None = None
    topk_q: int = 20
    topk_s: int = 20
    # relation extraction
    backend: str = "heuristic"
    live_endpoint: str | None = None
    live_model: str | None = None
    live_api_key_env: str = "MAGEKT_API_KEY"
    candidate_min_cooccurrence: int = 3
    candidate_min_overlap: float = 0.3
    doubt_threshold: float = 3.0
    max_in_flight: int = 4
    enable_completion: bool = True
    enable_correction: bool = True
    # retrieval
    retrieval_k: int = 2
    retrieval_n: int = 2
    budget: int = 512
    # model and training
    embed_dim: int = 128
    attn_heads: int = 4
    attn_layers: int = 3
    gru_hidden: int = 512
    dropout: float = 0.3
    batch: int = 64
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("full", "no_asyatt", "no_kc_graph", "no_sq_graph", "no_subgraph")
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.backend not in ("heuristic", "live"):
            raise ConfigError(f"backend must be 'heuristic' or 'live', got {self.backend!r}")
        if self.backend == "live" and not (self.live_endpoint and self.live_model):
            raise ConfigError("backend 'live' needs live_endpoint and live_model")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        # surface invalid sub-configs at load time
        try:
            self.columns(), self.split(), self.irt(), self.graph(), self.extraction(), self.model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- views ------------------------------------------------------------

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    def columns(self) -> ColumnMapping:
        return ColumnMapping(self.col_student, self.col_question, self.col_kc, self.col_correct,
                             self.col_timestamp, self.kc_delimiter, self.delimiter)

    def split(self) -> SplitSpec:
        return SplitSpec(self.train_ratio, self.val_ratio, self.test_ratio, self.seed)

    def irt(self) -> IrtConfig:
        return IrtConfig(l2_prior=self.irt_l2_prior, max_iters=self.irt_max_iters, tol=self.irt_tol)

    def graph(self) -> GraphBuildConfig:
        return GraphBuildConfig(self.sigma_q, self.sigma_s, self.topk_q, self.topk_s)

    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(self.candidate_min_cooccurrence, self.candidate_min_overlap, self.doubt_threshold,
                                max_in_flight=self.max_in_flight, enable_completion=self.enable_completion,
                                enable_correction=self.enable_correction)

    def model(self) -> ModelConfig:
        return ModelConfig(self.embed_dim, self.attn_heads, self.attn_layers, self.gru_hidden, self.dropout,
                           self.batch, self.max_epochs, self.patience, tuple(self.seeds), self.lr,
                           self.weight_decay)

    # -- hashing ----------------------------------------------------------

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("base_dir", "output_dir")}

    def hash(self, stage: str | None = None) -> str:
        keys = sorted(self.values()) if stage is None else sorted(STAGE_KEYS[stage])
        blob = json.dumps({k: _jsonable(getattr(self, k)) for k in keys}, sort_keys=True)
        if stage is not None:
            # input files count by content, not by location
            blob += "".join(_file_digest(self.path(p)) for p in self._inputs(stage))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _inputs(self, stage: str) -> list[str]:
        paths = [self.interactions]
        if stage not in ("ingest", "fit-irt") and self.kc_names:
            paths.append(self.kc_names)
        if stage == "relation-eval" and self.gold:
            paths.append(self.gold)
        return paths


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _file_digest(p: Path) -> str:
    try:
        return hashlib.sha256(p.read_bytes()).hexdigest()
    except OSError:
        return "missing"


_INGEST = {"col_student", "col_question", "col_kc", "col_correct", "col_timestamp",
           "kc_delimiter", "delimiter", "min_student", "min_question", "train_ratio", "val_ratio", "test_ratio",
           "seed", "window"}
_IRT = _INGEST | {"irt_l2_prior", "irt_max_iters", "irt_tol"}
_EXTRACT = _INGEST | {"backend", "live_endpoint", "live_model", "candidate_min_cooccurrence",
                      "candidate_min_overlap", "doubt_threshold", "enable_completion", "enable_correction"}
_GRAPHS = _IRT | _EXTRACT | {"sigma_q", "sigma_s", "topk_q", "topk_s"}
_TRAIN = _GRAPHS | {"retrieval_k", "retrieval_n", "budget", "embed_dim", "attn_heads", "attn_layers",
                    "gru_hidden", "dropout", "batch", "max_epochs", "patience", "lr", "weight_decay"}
STAGE_KEYS = {"ingest": _INGEST, "fit-irt": _IRT, "extract-kc": _EXTRACT, "build-graphs": _GRAPHS,
              "train": _TRAIN, "eval": _TRAIN, "ablate": _TRAIN, "relation-eval": _GRAPHS}

_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = _FIELD_TYPES[name].default
    if name in ("seeds", "variants"):
        if isinstance(value, (int, str)):
            value = [value]
        return tuple(int(v) if name == "seeds" else str(v) for v in value)
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, (int, float)) and isinstance(value, bool):
        raise ConfigError(f"{name} must be numeric")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {type(default).__name__}") from None


def from_mapping(data: dict, base_dir: str | Path = ".") -> RunConfig:
    unknown = sorted(set(data) - set(_FIELD_TYPES) - {"base_dir"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in data.items() if k != "base_dir"}
    return RunConfig(**kwargs, base_dir=str(base_dir))


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of keys to values")
    data.update(overrides or {})
    return from_mapping(data, path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump({k: _jsonable(v) for k, v in dataclasses.asdict(cfg).items() if k != "base_dir"},
                          sort_keys=False)
