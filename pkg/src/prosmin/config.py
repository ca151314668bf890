"""Flat ``key = value`` configuration files with sections.

Every section maps onto one dataclass.  Unknown sections or keys are hard
errors, and :func:`dump_config` writes every field so a resolved config
can be fed back verbatim.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields, replace

from .augment import AugmentConfig
from .data import DatasetSpec
from .model import ModelConfig
from .scoring import ConfigError, Family, ScoreConfig
from .train import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 5
    probe_epochs: int = 300
    probe_lr: float = 0.05
    ece_bins: int = 15
    ood_method: str = "sigma"
    ood_m: int = 5
    ood_clusters: tuple[int, ...] = ()
    severities: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)
    corruption_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    eval: EvalConfig

    @property
    def sections(self) -> dict:
        return {
            "train": self.train,
            "score": self.train.score,
            "model": self.train.model,
            "augment": self.train.augment,
            "dataset": self.train.dataset,
            "eval": self.eval,
        }


_NESTED = {"score", "model", "augment", "dataset"}
_RENAMES = {"score": {"lam": "lambda"}}
SECTIONS = ("train", "score", "model", "augment", "dataset", "eval")


def _key(section: str, name: str) -> str:
    return _RENAMES.get(section, {}).get(name, name)


def _fields(obj_or_cls, section: str):
    return [f for f in fields(obj_or_cls) if not (section == "train" and f.name in _NESTED)]


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Family):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, ftype: str, where: str):
    raw = raw.strip()
    optional = "None" in ftype
    if optional and raw.lower() in ("auto", "none", ""):
        return None
    try:
        if ftype.startswith("tuple"):
            elem = float if "float" in ftype else int
            return tuple(elem(p) for p in raw.replace(" ", "").split(",") if p)
        if ftype.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
        if ftype.startswith("Family"):
            return Family(raw.lower())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {ftype}") from exc


def _build(cls, section: str, items: dict, base):
    known = {_key(section, f.name): f for f in _fields(cls, section)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        f = known[key]
        updates[f.name] = _parse(raw, str(f.type), f"[{section}] {key}")
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    get = lambda s: dict(parser.items(s)) if parser.has_section(s) else {}  # noqa: E731
    score = _build(ScoreConfig, "score", get("score"), ScoreConfig())
    model = _build(ModelConfig, "model", get("model"), ModelConfig())
    augment = _build(AugmentConfig, "augment", get("augment"), AugmentConfig())
    dataset = _build(DatasetSpec, "dataset", get("dataset"), DatasetSpec())
    base = TrainConfig(score=score, model=model, augment=augment, dataset=dataset)
    train = _build(TrainConfig, "train", get("train"), base)
    if "r" in get("score") and score.r != train.pooled_r:
        raise ConfigError(
            f"[score] r = {score.r} conflicts with pooled r = {train.pooled_r} "
            "(2 + n_local) * samples_per_view")
    ev = _build(EvalConfig, "eval", get("eval"), EvalConfig())
    return RunConfig(train, ev)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def resolve(run: RunConfig) -> RunConfig:
    return RunConfig(run.train.resolved(), run.eval)


def dump_config(run: RunConfig) -> str:
    lines = []
    for name, obj in run.sections.items():
        lines.append(f"[{name}]")
        for f in _fields(obj, name):
            lines.append(f"{_key(name, f.name)} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(run: RunConfig) -> str:
    return hashlib.sha256(dump_config(run).encode()).hexdigest()[:16]


def default_config_text() -> str:
    return dump_config(RunConfig(TrainConfig(), EvalConfig()))


__all__ = ["EvalConfig", "RunConfig", "parse_config", "load_config", "resolve",
           "dump_config", "config_hash", "default_config_text"]
