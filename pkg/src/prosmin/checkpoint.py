"""Versioned ``.npz`` checkpoints with byte-stable output.

``numpy.savez`` stamps zip entries with the current time; entries are
written here with a fixed timestamp so identical states give identical
files.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EvalConfig, RunConfig, dump_config, parse_config
from .model import NetworkPair
from .optim import OptimizerState
from .scoring import Family, ScoreConfig
from .train import TrainConfig, TrainState

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(OSError):
    pass


@dataclass
class Checkpoint:
    state: TrainState
    run: RunConfig
    path: Path

    @property
    def pair(self) -> NetworkPair:
        return self.state.pair

    @property
    def checkpoint_id(self) -> str:
        return file_digest(self.path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), dtype=np.uint8)


def _untext(a: np.ndarray) -> str:
    return a.tobytes().decode()


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            arr = np.asarray(arrays[name])
            # ascontiguousarray would promote 0-d scalars to shape (1,)
            arr = arr if arr.flags.c_contiguous else arr.copy(order="C")
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, state: TrainState, cfg: TrainConfig | RunConfig) -> Path:
    run = cfg if isinstance(cfg, RunConfig) else RunConfig(cfg, EvalConfig())
    pair = state.pair
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array(FORMAT_VERSION),
        "step": np.array(state.step),
        "negative_flags": np.array(state.negative_flags),
        "center": pair.center,
        "opt/step": np.array(state.opt_state.step),
        "config": _text(dump_config(run)),
        "rng_state": _text(json.dumps(state.rng.bit_generator.state, sort_keys=True,
                                      default=lambda a: a.tolist())),
        "meta": _text(json.dumps({
            "alpha": pair.alpha,
            "center_momentum": pair.center_momentum,
            "gamma": None if state.score is None else state.score.gamma,
            "score_resolved": state.score is not None,
        }, sort_keys=True)),
    }
    for k, v in pair.theta.items():
        arrays[f"theta/{k}"] = v
    for k, v in pair.xi.items():
        arrays[f"xi/{k}"] = v
    for k, v in state.opt_state.m.items():
        arrays[f"opt/m/{k}"] = v
    for k, v in state.opt_state.v.items():
        arrays[f"opt/v/{k}"] = v
    path = Path(path)
    _write_npz(path, arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = int(data.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    run = parse_config(_untext(data["config"]))
    meta = json.loads(_untext(data["meta"]))

    def group(prefix):
        return {k[len(prefix):]: data[k] for k in sorted(data) if k.startswith(prefix)}

    pair = NetworkPair(run.train.model, group("theta/"), group("xi/"), data["center"],
                       meta["alpha"], meta["center_momentum"])
    opt = OptimizerState(group("opt/m/"), group("opt/v/"), int(data["opt/step"]))
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = _restore_ints(json.loads(_untext(data["rng_state"])))
    score = None
    if meta["score_resolved"]:
        s = run.train.score
        score = ScoreConfig(Family(s.family), s.beta, s.lam, meta["gamma"], s.r)
    state = TrainState(pair, opt, rng, int(data["step"]), score, int(data["negative_flags"]))
    return Checkpoint(state, run, path)


def _restore_ints(obj):
    """Philox state arrays come back from JSON as lists; numpy wants arrays."""
    if isinstance(obj, dict):
        return {k: _restore_ints(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return np.array(obj, dtype=np.uint64)
    return obj
