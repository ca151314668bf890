from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from prosmin.config import (
    EvalConfig,
    RunConfig,
    config_hash,
    default_config_text,
    dump_config,
    parse_config,
    resolve,
)
from prosmin.scoring import ConfigError, Family
from prosmin.train import TrainConfig

REFERENCE = Path(__file__).resolve().parents[1] / "config" / "defaults.ini"


def test_reference_file_matches_defaults():
    assert REFERENCE.read_text() == default_config_text()


def test_empty_text_gives_defaults():
    assert parse_config("") == RunConfig(TrainConfig(), EvalConfig())


def test_round_trip_defaults():
    run = RunConfig(TrainConfig(), EvalConfig())
    assert parse_config(dump_config(run)) == run


def test_round_trip_resolved():
    run = resolve(parse_config("[train]\nsteps = 50\n[augment]\nn_local = 3\n"))
    back = parse_config(dump_config(run))
    assert back == run
    assert back.train.warmup_steps == 5 and back.train.score.r == 5


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 5000), lam=st.floats(0.01, 0.5), beta=st.floats(0.05, 1.95),
       seed=st.integers(0, 2**31), sym=st.booleans())
def test_round_trip_property(steps, lam, beta, seed, sym):
    text = (f"[train]\nsteps = {steps}\nseed = {seed}\nsymmetric = {str(sym).lower()}\n"
            f"[score]\nbeta = {beta!r}\nlambda = {lam!r}\n")
    run = resolve(parse_config(text))
    assert parse_config(dump_config(run)) == run
    assert run.train.score.lam == lam


def test_lambda_key_and_family():
    run = parse_config("[score]\nfamily = kernel\nlambda = 0.25\ngamma = 2\n")
    assert run.train.score.family is Family.KERNEL
    assert run.train.score.lam == 0.25 and run.train.score.gamma == 2.0


def test_hash_changes_with_content():
    a = RunConfig(TrainConfig(), EvalConfig())
    b = RunConfig(replace(TrainConfig(), seed=1), EvalConfig())
    assert config_hash(a) == config_hash(a) and config_hash(a) != config_hash(b)


@pytest.mark.parametrize("text, fragment", [
    ("[train]\nstepz = 3\n", "unknown key [train] stepz"),
    ("[score]\nlam = 0.3\n", "unknown key [score] lam"),
    ("[trian]\nsteps = 3\n", "unknown section"),
    ("[train]\nsteps = many\n", "cannot parse"),
    ("[train]\nsymmetric = maybe\n", "cannot parse"),
    ("[score]\nfamily = cosine\n", "cannot parse"),
    ("steps = 3\n", "malformed"),
    ("[train]\nsteps = 1\nsteps = 2\n", "malformed"),
    ("[score]\nr = 7\n", "conflicts"),
])
def test_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_invalid_value_is_config_error():
    with pytest.raises(ConfigError):
        parse_config("[train]\nsteps = 0\n")


def test_matching_r_accepted():
    assert parse_config("[score]\nr = 4\n").train.score.r == 4
