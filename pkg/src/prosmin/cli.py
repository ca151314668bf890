"""Command-line entry points.

Every subcommand prints its resolved configuration first, writes a
pretty-printed JSON report (to ``--out-dir`` when given) and exits 0.
Failures exit nonzero with a one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import EvalConfig, RunConfig, config_hash, dump_config, load_config, resolve
from .data import Dataset, DatasetError, DatasetSpec, load_dataset, make_clusters, read_vector_csv, split
from .evaluation import (
    EmbeddingSet,
    LinearProbe,
    auroc,
    corruption_eval,
    embed,
    knn_accuracy,
    ood_scores,
)
from .numeric import ContractError
from .scoring import ConfigError, DomainError, Family, SampleSet, ScoreConfig, score_terms
from .train import TrainConfig, train

EXIT_USAGE = 2
EXIT_FAILURE = 1
EXIT_CHECK_FAILED = 3


class CliError(Exception):
    pass


def _print(text: str, quiet: bool = False) -> None:
    if not quiet:
        print(text, flush=True)


def _report(command: str, metrics: dict, run: RunConfig | None, checkpoint_id: str | None,
            out_dir: Path | None, extra: dict | None = None) -> dict:
    rep = {
        "command": command,
        "config_hash": config_hash(run) if run is not None else None,
        "checkpoint_id": checkpoint_id,
        "metrics": [{"metric": k, "value": v} for k, v in metrics.items()],
    }
    if extra:
        rep.update(extra)
    text = json.dumps(rep, indent=2, default=_plain)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{command}.json").write_text(text + "\n")
    print(text, flush=True)
    return rep


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _load_run(path: str | None, seed: int | None) -> RunConfig:
    run = load_config(path) if path else RunConfig(TrainConfig(), EvalConfig())
    if seed is not None:
        run = RunConfig(replace(run.train, seed=seed), run.eval)
    return resolve(run)


def _show_config(run: RunConfig) -> None:
    print("# resolved configuration", flush=True)
    print(dump_config(run), flush=True)


def _checkpoint(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def _dataset_from(path: str | None, spec: DatasetSpec) -> Dataset:
    if path:
        spec = replace(spec, modality="vector_csv", path=path)
    return load_dataset(spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    run = _load_run(args.config, args.seed)
    _show_config(run)
    out = Path(args.out_dir) if args.out_dir else Path("run")
    state, records = train(run.train, out, resume=args.resume, quiet=args.quiet)
    # re-save so the checkpoint carries the [eval] section as well
    ck = save_checkpoint(out / "checkpoint.npz", state, run)
    last = records[-1] if records else {}
    metrics = {k: last[k] for k in ("step", "loss", "sigma_mean", "eff_rank") if k in last}
    metrics["negative_flags"] = state.negative_flags
    _report("pretrain", metrics, run, file_digest(ck), out)
    return 0


def cmd_probe(args) -> int:
    ck = _checkpoint(args)
    run = ck.run
    _show_config(run)
    ds = _dataset_from(args.data, run.train.dataset)
    if ds.y_train is None or ds.y_test is None:
        raise CliError("probe needs a labelled dataset")
    train_set = EmbeddingSet(embed(ck.pair, ds.x_train), ds.y_train)
    test_set = EmbeddingSet(embed(ck.pair, ds.x_test), ds.y_test)
    ev = run.eval
    res = LinearProbe.fit(train_set, ev.probe_epochs, ev.probe_lr, run.train.seed).evaluate(
        test_set, ev.ece_bins)
    metrics = {
        "knn_accuracy": knn_accuracy(train_set, test_set, ev.knn_k),
        "probe_accuracy": res.accuracy,
        "nll": res.nll,
        "ece": res.ece,
    }
    _report("probe", metrics, run, ck.checkpoint_id, _out(args),
            {"reliability": res.reliability})
    return 0


def cmd_ood(args) -> int:
    ck = _checkpoint(args)
    run = ck.run
    _show_config(run)
    ev = run.eval
    spec = run.train.dataset
    ds = _dataset_from(args.in_data, spec)
    if args.out_data:
        x_out, _ = read_vector_csv(args.out_data)
    else:
        if spec.modality != "synthetic_clusters" or not ev.ood_clusters:
            raise CliError("give --out-data or set [eval] ood_clusters for a synthetic dataset")
        x_all, y_all = make_clusters(replace(spec, clusters=()))
        held = np.isin(y_all, ev.ood_clusters)
        x_out = split(x_all[held], None, spec).x_test
    train_set = EmbeddingSet(embed(ck.pair, ds.x_train), ds.y_train)
    metrics, medians = {}, {}
    for method in ("sigma", "distance"):
        s_in = ood_scores(ck.pair, ds.x_test, train_set, method, ev.ood_m)
        s_out = ood_scores(ck.pair, x_out, train_set, method, ev.ood_m)
        metrics[f"auroc_{method}"] = auroc(s_out, s_in)
        medians[method] = {"in": float(np.median(s_in)), "out": float(np.median(s_out))}
    metrics["auroc"] = metrics[f"auroc_{ev.ood_method}"]
    metrics["n_in"], metrics["n_out"] = len(ds.x_test), len(x_out)
    _report("ood", metrics, run, ck.checkpoint_id, _out(args),
            {"method": ev.ood_method, "median_score": medians})
    return 0


def cmd_corrupt(args) -> int:
    ck = _checkpoint(args)
    run = ck.run
    if args.severities:
        sev = tuple(float(s) for s in args.severities.split(","))
        run = RunConfig(run.train, replace(run.eval, severities=sev))
    _show_config(run)
    ds = _dataset_from(args.data, run.train.dataset)
    if ds.y_train is None:
        raise CliError("corruption evaluation needs labels")
    ev = run.eval
    probe = LinearProbe.fit(EmbeddingSet(embed(ck.pair, ds.x_train), ds.y_train),
                            ev.probe_epochs, ev.probe_lr, run.train.seed)
    baseline = None
    if args.baseline:
        base = json.loads(Path(args.baseline).read_text())
        baseline = {m["metric"]: m["value"] for m in base["metrics"]}
    rep = corruption_eval(ck.pair, probe, ds.x_test, ds.y_test, ev.severities,
                          data_std=float(ds.x_train.std()), baseline=baseline,
                          seed=ev.corruption_seed)
    metrics = {f"accuracy@{s:g}": a for s, a in zip(rep["severities"], rep["accuracy"])}
    metrics["area"] = rep["area"]
    if "relative_area" in rep:
        metrics["relative_area"] = rep["relative_area"]
    _report("corrupt", metrics, run, ck.checkpoint_id, _out(args))
    return 0


def _read_table(path: str) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise DatasetError(f"{path}: need a header and at least one row")
    try:
        return rows[0], np.array(rows[1:], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric entry") from exc


def load_sample_sets(samples_path: str, obs_path: str) -> list[SampleSet]:
    """Samples CSV: ``item, z0..z{K-1}`` with r rows per item.  Observations
    CSV: ``z0..z{K-1}`` (optionally led by an ``item`` column), one row per
    item in order of first appearance."""
    header, s = _read_table(samples_path)
    if header[0].strip().lower() != "item":
        raise DatasetError(f"{samples_path}: first column must be 'item'")
    oh, o = _read_table(obs_path)
    items, first = np.unique(s[:, 0], return_index=True)
    order = items[np.argsort(first)]
    obs_rows = o
    if oh[0].strip().lower() == "item":
        by_id = {row[0]: row[1:] for row in o}
        missing = [i for i in order if i not in by_id]
        if missing:
            raise DatasetError(f"observations missing for items {missing}")
        obs_rows = np.array([by_id[i] for i in order])
    if len(obs_rows) != len(order):
        raise DatasetError(f"{len(order)} items but {len(obs_rows)} observations")
    return [SampleSet(s[s[:, 0] == item, 1:], obs_rows[i]) for i, item in enumerate(order)]


def cmd_score(args) -> int:
    base = load_config(args.config).train.score if args.config else ScoreConfig()
    updates = {k: v for k, v in (("family", args.family), ("beta", args.beta),
                                 ("lam", args.lam), ("gamma", args.gamma)) if v is not None}
    sets = load_sample_sets(args.samples, args.observations)
    cfg = replace(base, r=sets[0].r, **updates)
    if cfg.family is Family.KERNEL and cfg.gamma is None:
        raise ConfigError("kernel family needs --gamma (or [score] gamma)")
    run = RunConfig(TrainConfig(score=cfg), EvalConfig())
    print("# resolved configuration", flush=True)
    print("[score]")
    for k in ("family", "beta", "lam", "gamma", "r"):
        v = getattr(cfg, k)
        v = v.value if isinstance(v, Family) else "auto" if v is None else v
        print(f"{'lambda' if k == 'lam' else k} = {v}")
    print(f"mode = {'adjusted' if args.adjusted else 'plain'}\n", flush=True)
    scores = []
    for s in sets:
        if s.r != cfg.r:
            raise ContractError("every item needs the same number of samples")
        s1, s2 = score_terms(s, cfg)
        scores.append(abs(cfg.lam * s1 + (1 - cfg.lam) * s2) if args.adjusted else s1 + s2)
    metrics = {"mean_score": float(np.mean(scores)), "n_items": len(scores)}
    _report("score", metrics, run, None, _out(args), {"per_item": [float(v) for v in scores]})
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    print("# resolved configuration", flush=True)
    print(f"[verify]\nquick = {str(args.quick).lower()}\nseed = {args.seed or 0}\n", flush=True)
    groups = run_all(quick=args.quick, seed=args.seed or 0)
    rows, ok = [], True
    for name, results, seconds in groups:
        _print(f"== {name} ({seconds:.1f} s)", args.quiet)
        for r in results:
            _print(r.line(), args.quiet)
            rows.append({"check": r.name, "passed": r.passed, "value": r.value,
                         "threshold": r.threshold})
            ok &= r.passed
    metrics = {"checks": len(rows), "passed": sum(r["passed"] for r in rows)}
    _report("verify", metrics, None, None, _out(args), {"table": rows})
    return 0 if ok else EXIT_CHECK_FAILED


def _out(args) -> Path | None:
    return Path(args.out_dir) if args.out_dir else None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (INI sections)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", help="directory for reports, logs and checkpoints")
    common.add_argument("--checkpoint", help="checkpoint file from a pretrain run")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="prosmin", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", parents=[common], help="self-distillation pretraining")
    sp.add_argument("--resume", action="store_true", help="continue from OUT_DIR/checkpoint.npz")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("probe", parents=[common], help="kNN and linear probe on frozen features")
    sp.add_argument("--data", help="labelled vector CSV instead of the checkpoint's dataset")
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("ood", parents=[common], help="OOD scores and AUROC")
    sp.add_argument("--in-data", help="in-distribution vector CSV")
    sp.add_argument("--out-data", help="out-of-distribution vector CSV")
    sp.set_defaults(fn=cmd_ood)

    sp = sub.add_parser("corrupt", parents=[common], help="accuracy under additive noise")
    sp.add_argument("--data", help="labelled vector CSV instead of the checkpoint's dataset")
    sp.add_argument("--severities", help="comma-separated noise levels in data-std units")
    sp.add_argument("--baseline", help="earlier corrupt report for the relative area")
    sp.set_defaults(fn=cmd_corrupt)

    sp = sub.add_parser("score", parents=[common], help="evaluate score estimators on CSV files")
    sp.add_argument("--samples", required=True, help="CSV with columns item, z0..")
    sp.add_argument("--observations", required=True, help="CSV with columns z0.. per item")
    sp.add_argument("--family", choices=[f.value for f in Family])
    sp.add_argument("--beta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--adjusted", action="store_true", help="report |λ S1 + (1-λ) S2| per item")
    sp.set_defaults(fn=cmd_score)

    sp = sub.add_parser("verify", parents=[common], help="propriety, unbiasedness, gradient checks")
    sp.add_argument("--quick", action="store_true", help="smaller Monte Carlo sizes")
    sp.set_defaults(fn=cmd_verify)
    return p


_USAGE_ERRORS = (ConfigError, CliError, ContractError, DomainError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("PROSMIN_THREADS")
    try:
        if threads is not None and (not threads.isdigit() or int(threads) < 1):
            raise ConfigError(f"PROSMIN_THREADS must be a positive integer, got {threads!r}")
        return args.fn(args)
    except Exception as exc:  # every failure leaves a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr, flush=True)
        return EXIT_USAGE if isinstance(exc, _USAGE_ERRORS) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
