"""Command-line front end.

    csa run <config.json>
    csa compare <config.json> --methods csa,sla,pl@0.9
    csa theory theorem1 <sweep.json>
    csa theory pacbayes <sweep.json>

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Seeds fan out
over ``CSA_WORKERS`` processes (default 1); a single aggregator writes outputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import theory
from .dataset import (DatasetError, Standardizer, TabularDataset, benchmark_mixture, load_csv, split,
                      subsample_unlabeled)
from .ensemble import fit_ensemble, sample_specs
from .pipeline import METHOD_NAMES, Method, RunConfig, RunResult, long_csv, run

WORKERS_ENV = "CSA_WORKERS"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"method", "seed"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Series:
    """One method run under a display name, e.g. ``pl@0.9`` for PL at threshold 0.9."""

    name: str
    method: str
    overrides: tuple = ()

    @classmethod
    def parse(cls, token: str) -> "Series":
        token = token.strip()
        method, _, gamma = token.partition("@")
        if method not in METHOD_NAMES:
            raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHOD_NAMES)}")
        if not gamma:
            return cls(token, method)
        try:
            value = float(gamma)
        except ValueError:
            raise ConfigError(f"bad threshold in {token!r}") from None
        return cls(token, method, (("threshold", value),))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    n_labeled: int
    n_test: int
    n_unlabeled: int | None
    run: dict
    method: str
    seeds: tuple[int, ...]
    output_dir: Path
    name: str

    def run_config(self, series: Series, seed: int) -> RunConfig:
        return RunConfig(method=series.method, seed=seed, **{**self.run, **dict(series.overrides)})


def _require(d: dict, key: str, kind, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    value = d[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{where}: {key!r} has the wrong type")
    return value


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _seed_list(value) -> tuple[int, ...]:
    if isinstance(value, int) and not isinstance(value, bool):
        seeds = tuple(range(value))
    elif isinstance(value, list) and all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        seeds = tuple(value)
    else:
        raise ConfigError("seeds must be a count or a list of integers")
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _check_dataset(ds: dict, base: Path) -> dict:
    if not isinstance(ds, dict):
        raise ConfigError("dataset must be an object")
    kind = ds.get("type")
    if kind == "csv":
        path = Path(_require(ds, "path", str, "dataset"))
        path = path if path.is_absolute() else base / path
        if not path.is_file():
            raise ConfigError(f"dataset: csv file not found: {path}")
        _require(ds, "label_column", str, "dataset")
        return {**ds, "path": str(path)}
    if kind == "gaussian_mixture":
        allowed = {"type", "n_per_class", "n_classes", "dim", "separation"}
        extra = set(ds) - allowed
        if extra:
            raise ConfigError(f"dataset: unknown keys {sorted(extra)}")
        _require(ds, "n_per_class", int, "dataset")
        return dict(ds)
    raise ConfigError("dataset.type must be 'csv' or 'gaussian_mixture'")


def load_config(path: str | Path, seeds=None, output_dir=None) -> ExperimentConfig:
    """Parse and validate an experiment file; flags may override seeds and output dir."""
    path = Path(path)
    doc = _read_json(path)
    allowed = {"name", "dataset", "split", "run", "method", "seeds", "output_dir"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    dataset = _check_dataset(_require(doc, "dataset", dict, "config"), path.parent)
    sp = _require(doc, "split", dict, "config")
    n_labeled = _require(sp, "n_labeled", int, "split")
    n_test = _require(sp, "n_test", int, "split")
    n_unlabeled = _require(sp, "n_unlabeled", int, "split") if "n_unlabeled" in sp else None
    run_fields = doc.get("run", {})
    if not isinstance(run_fields, dict):
        raise ConfigError("run must be an object")
    bad = set(run_fields) - RUN_FIELDS
    if bad:
        raise ConfigError(f"run: unknown fields {sorted(bad)}")
    method = doc.get("method", "csa")
    Series.parse(method)
    seed_list = _seed_list(seeds if seeds is not None else doc.get("seeds", [0]))
    out = Path(output_dir if output_dir is not None else doc.get("output_dir", "results"))
    out = out if out.is_absolute() else path.parent / out
    name = doc.get("name") or (Path(dataset["path"]).stem if dataset["type"] == "csv" else "gaussian_mixture")
    cfg = ExperimentConfig(dataset, n_labeled, n_test, n_unlabeled, run_fields, method, seed_list, out, str(name))
    try:
        cfg.run_config(Series.parse(method), seed_list[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run: {exc}") from None
    return cfg


# --------------------------------------------------------------------------
# execution

def make_dataset(spec: dict, seed: int) -> TabularDataset:
    if spec["type"] == "csv":
        return load_csv(spec["path"], spec["label_column"], spec.get("unlabeled_marker", "?"))
    kwargs = {k: spec[k] for k in ("n_classes", "dim", "separation") if k in spec}
    return benchmark_mixture(spec["n_per_class"], seed=seed, **kwargs)


def make_split(data: TabularDataset, n_labeled: int, n_test: int, n_unlabeled: int | None, seed: int):
    """Stratified split, with the unlabeled pool cut to ``n_unlabeled`` when given."""
    sp = split(data, n_labeled, n_test, seed)
    return sp if n_unlabeled is None else subsample_unlabeled(sp, n_unlabeled, seed)


def split_hash(sp) -> str:
    """Digest of the split's index lists and the labeled rows it hands to training."""
    h = hashlib.sha256(sp.to_json().encode("utf-8"))
    h.update(np.ascontiguousarray(sp.labeled.features).tobytes())
    h.update(np.ascontiguousarray(sp.labeled.labels).tobytes())
    h.update(np.ascontiguousarray(sp.unlabeled.features).tobytes())
    return h.hexdigest()


def _run_seed(args) -> tuple[int, str, list[tuple[str, RunResult]], str]:
    cfg, series, seed = args
    data = make_dataset(cfg.dataset, seed)
    sp = make_split(data, cfg.n_labeled, cfg.n_test, cfg.n_unlabeled, seed)
    before = split_hash(sp)
    results = [(s.name, run(cfg.run_config(s, seed), sp)) for s in series]
    return seed, before, results, split_hash(sp)


def execute(cfg: ExperimentConfig, series: list[Series], workers: int | None = None):
    """Run every series on every seed; returns results keyed by seed plus the split hashes.

    On Ctrl-C the seeds finished so far are returned with ``interrupted=True``.
    """
    workers = workers or worker_count()
    jobs = [(cfg, series, seed) for seed in cfg.seeds]
    done: dict[int, tuple[str, list]] = {}
    interrupted = False
    try:
        if workers <= 1:
            for job in jobs:
                seed, before, results, after = _run_seed(job)
                _audit_split(seed, before, after)
                done[seed] = (before, results)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for seed, before, results, after in pool.map(_run_seed, jobs):
                    _audit_split(seed, before, after)
                    done[seed] = (before, results)
    except KeyboardInterrupt:
        interrupted = True
    return done, interrupted


def _audit_split(seed: int, before: str, after: str) -> None:
    if before != after:
        raise RuntimeError(f"split for seed {seed} changed during the runs")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return value


# --------------------------------------------------------------------------
# outputs

def _std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def summarize(done: dict, series: list[Series]) -> dict:
    seeds = sorted(done)
    out = {"seeds": seeds, "split_hashes": {str(s): done[s][0] for s in seeds}, "methods": {}}
    for s in series:
        acc = [dict(done[seed][1])[s.name].final_accuracy for seed in seeds]
        out["methods"][s.name] = {"accuracies": acc, "mean": float(np.mean(acc)), "std": _std(acc)}
    return out


def long_rows(done: dict) -> list[tuple]:
    rows = []
    for seed in sorted(done):
        for name, result in done[seed][1]:
            rows.extend(result.long_rows(name))
    return rows


def wide_csv(dataset_name: str, summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(summary["methods"])
    writer.writerow(["dataset", *names])
    cells = [f"{100 * m['mean']:.2f} ± {100 * m['std']:.2f}" for m in summary["methods"].values()]
    writer.writerow([dataset_name, *cells])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_outputs(out_dir: Path, files: dict[str, str], command: str, config: dict) -> None:
    """Write payload files plus ``manifest.json``; only the manifest carries a timestamp."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text, encoding="utf-8")
    manifest = {
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "command": command,
        "config": config,
        "files": {name: hashlib.sha256(text.encode("utf-8")).hexdigest() for name, text in files.items()},
    }
    (out_dir / "manifest.json").write_text(_dump(manifest), encoding="utf-8")


def _config_record(cfg: ExperimentConfig) -> dict:
    split_doc = {"n_labeled": cfg.n_labeled, "n_test": cfg.n_test, "n_unlabeled": cfg.n_unlabeled}
    return {"name": cfg.name, "dataset": cfg.dataset, "split": split_doc,
            "run": cfg.run, "method": cfg.method, "seeds": list(cfg.seeds)}


def _experiment(cfg: ExperimentConfig, series: list[Series], command: str) -> int:
    done, interrupted = execute(cfg, series)
    if not done:
        print("interrupted before any seed finished", file=sys.stderr)
        return EXIT_RUNTIME
    summary = summarize(done, series)
    summary["interrupted"] = interrupted
    files = {"long.csv": long_csv(long_rows(done)), "summary.json": _dump(summary)}
    if command == "compare":
        files["wide.csv"] = wide_csv(cfg.name, summary)
    write_outputs(cfg.output_dir, files, command, _config_record(cfg))
    for name, m in summary["methods"].items():
        print(f"{name}: {100 * m['mean']:.2f} ± {100 * m['std']:.2f} over {len(summary['seeds'])} seed(s)")
    if interrupted:
        print(f"interrupted; wrote {len(done)} completed seed(s)", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, _flag_seeds(args.seeds), args.output_dir)
    return _experiment(cfg, [Series.parse(cfg.method)], "run")


def cmd_compare(args) -> int:
    cfg = load_config(args.config, _flag_seeds(args.seeds), args.output_dir)
    tokens = [t for t in args.methods.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("--methods is empty")
    series = [Series.parse(t) for t in tokens]
    if len({s.name for s in series}) != len(series):
        raise ConfigError("--methods lists a series twice")
    for s in series:
        try:
            cfg.run_config(s, cfg.seeds[0])
        except ValueError as exc:
            raise ConfigError(f"{s.name}: {exc}") from None
    return _experiment(cfg, series, "compare")


def _flag_seeds(text: str | None):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds must be a comma-separated list of integers") from None


# --------------------------------------------------------------------------
# theory sweeps

def _theorem1_setups(doc: dict) -> list[theory.Theorem1Setup]:
    trials = doc.get("trials", 10_000)
    base = doc.get("base")
    if not isinstance(base, dict):
        raise ConfigError("theorem1 sweep needs a 'base' setup object")
    vary = doc.get("vary", {})
    if not isinstance(vary, dict) or len(vary) > 1 or not all(isinstance(v, list) for v in vary.values()):
        raise ConfigError("'vary' must map one setup field to a list of values")
    grid = [{}] if not vary else [{key: v} for key, values in vary.items() for v in values]
    setups = []
    for point in grid:
        fields_ = {**base, **point}
        try:
            if "indicator_variances" in fields_:
                setups.append(theory.Theorem1Setup(trials=trials, **fields_))
            else:
                setups.append(theory.Theorem1Setup.bernoulli(trials=trials, **fields_))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"theorem1 setup {point or 'base'}: {exc}") from None
    return setups


def cmd_theory_theorem1(doc: dict) -> dict[str, str]:
    seed = doc.get("seed", 0)
    rows = theory.theorem1_sweep(_theorem1_setups(doc), seed)
    for i, r in enumerate(rows):
        print(f"setup {i}: bound {r.bound:.5f}  empirical {r.empirical:.5f} ± {r.stderr:.5f}")
    return {"theorem1.csv": theory.theorem1_csv(rows)}


def cmd_theory_pacbayes(doc: dict, base: Path) -> dict[str, str]:
    dataset = _check_dataset(doc.get("dataset"), base)
    sp_doc = doc.get("split")
    if not isinstance(sp_doc, dict):
        raise ConfigError("pacbayes sweep needs a 'split' object")
    seed = doc.get("seed", 0)
    delta = doc.get("delta", 0.05)
    run_fields = doc.get("run", {})
    try:
        cfg = RunConfig(method=Method.SUPERVISED, seed=seed, **run_fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run: {exc}") from None
    sp = split(make_dataset(dataset, seed), _require(sp_doc, "n_labeled", int, "split"),
               _require(sp_doc, "n_test", int, "split"), seed)
    scaler = Standardizer.fit(sp.labeled.features)
    model = fit_ensemble(sample_specs(cfg.n_models, cfg.ranges, seed), scaler.transform(sp.labeled.features),
                         sp.labeled.labels, sp.labeled.class_count)
    m = len(model.members)
    posterior = doc.get("posterior", "uniform")
    posterior = np.full(m, 1.0 / m) if posterior == "uniform" else np.asarray(posterior, dtype=np.float64)
    prior = np.full(m, 1.0 / m)
    lab_x = scaler.transform(sp.labeled.features)
    test_x = scaler.transform(sp.test.features.read("evaluate"))
    votes = lambda x: np.stack([mem.predict_proba(x).argmax(axis=1) for mem in model.members])
    try:
        report = theory.pac_bayes_report(votes(lab_x), sp.labeled.labels, votes(test_x),
                                         sp.test.labels.read("evaluate"), posterior, prior, delta,
                                         sp.labeled.class_count)
    except ValueError as exc:
        raise ConfigError(f"pacbayes: {exc}") from None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "models", "n_labeled", *theory.PACBAYES_FIELDS])
    writer.writerow([seed, m, sp.labeled.n_samples, *report.as_row()])
    print(f"MV loss {report.majority_vote_loss:.4f}  tandem {report.tandem_loss:.4f}  "
          f"TV RHS {report.rhs_tv:.4f}  KL RHS {report.rhs_kl:.4f}")
    return {"pacbayes.csv": buf.getvalue()}


def cmd_theory(args) -> int:
    doc = _read_json(args.sweep)
    base = Path(args.sweep).parent
    out = Path(args.output_dir or doc.get("output_dir", "results"))
    out = out if out.is_absolute() else base / out
    if args.kind == "theorem1":
        files = cmd_theory_theorem1(doc)
    else:
        files = cmd_theory_pacbayes(doc, base)
    write_outputs(out, files, f"theory {args.kind}", doc)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csa", description="Confident Sinkhorn Allocation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one method over all seeds"), ("compare", "run several methods on shared splits")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--seeds", help="comma-separated seeds overriding the config")
        p.add_argument("--output-dir", help="output directory overriding the config")
        if name == "compare":
            p.add_argument("--methods", required=True, help="comma-separated, e.g. csa,sla,pl@0.9")
    p = sub.add_parser("theory", help="bound-versus-simulation sweeps")
    p.add_argument("kind", choices=["theorem1", "pacbayes"])
    p.add_argument("sweep")
    p.add_argument("--output-dir")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    handler = {"run": cmd_run, "compare": cmd_compare, "theory": cmd_theory}[args.command]
    try:
        return handler(args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure contract: exit 1 with a message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
