"""Command-line entry point: ``checkscore run|sweep|synth|space|replay|compare``."""

from __future__ import annotations

import csv
import functools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import click
import yaml

from .assembly import card_from_json
from .data import FeatureCatalog, load_table
from .errors import CheckscoreError, ConfigError, DataError, EmptyPool, TransportError
from .evaluation import paired_comparison
from .grammar import estimate_rule_space
from .pipeline import RunSettings, Transcript, replay_run, run_cv, sweep_rule_budget
from .pool import PipelineConfig
from .proposal.remote import EndpointConfig
from .synth import SynthSpec, synth_gen

log = logging.getLogger("checkscore")

EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 2, 3, 4
SECONDS_PER_YEAR = 365.25 * 24 * 3600

RUN_KEYS = {"data", "schema", "label", "group", "missing", "task_description", "proposer", "plausibility",
            "ablation", "endpoint", "pipeline", "output"}


@dataclass
class RunConfig:
    data: Path
    schema: Path
    label: str = "label"
    group: str | None = None
    missing: tuple = ("", "NA")
    output: Path = Path("checkscore-out")
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    settings: RunSettings = field(default_factory=RunSettings)


def _set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a mapping")
    d[keys[-1]] = value


def load_config(path: str | Path, overrides: tuple = ()) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(raw, k.strip(), yaml.safe_load(v))
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("data", "schema"):
        if key not in raw:
            raise ConfigError(f"config needs {key!r}")
    base = path.parent

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    endpoint = EndpointConfig.from_mapping(raw["endpoint"]) if raw.get("endpoint") else None
    settings = RunSettings(
        proposer=raw.get("proposer", "heuristic"),
        plausibility=raw.get("plausibility", "accept_all"),
        ablation=raw.get("ablation", "full"),
        endpoint=endpoint,
        task_description=raw.get("task_description", ""),
    )
    return RunConfig(
        data=rel(raw["data"]),
        schema=rel(raw["schema"]),
        label=raw.get("label", "label"),
        group=raw.get("group"),
        missing=tuple(raw.get("missing", ("", "NA"))),
        output=rel(raw.get("output", "checkscore-out")),
        pipeline=PipelineConfig.from_mapping(raw.get("pipeline") or {}),
        settings=settings,
    )


def _load_data(rc: RunConfig):
    catalog = FeatureCatalog.load(rc.schema)
    return load_table(rc.data, catalog, rc.label, rc.group, rc.missing)


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_cards(report: dict, out: Path) -> None:
    for f in report["folds"]:
        payload = f["checklist"]
        (out / f"card_fold{f['fold']}.md").write_text(card_from_json(payload))
        (out / f"card_fold{f['fold']}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        )


def _guard(fn):
    """Map package errors to documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DataError, EmptyPool) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except TransportError as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(EXIT_TRANSPORT)
        except CheckscoreError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Learn unit-weighted N-of-M checklists from tabular cohorts."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, help="Override a config key, e.g. pipeline.max_rules=4.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@_guard
def run(config, overrides, out):
    """Cross-validated run; writes report.json, transcript.jsonl and checklist cards."""
    rc = load_config(config, overrides)
    out = Path(out) if out else rc.output
    out.mkdir(parents=True, exist_ok=True)
    d = _load_data(rc)
    transcript = Transcript(out / "transcript.jsonl")
    try:
        report = run_cv(d, rc.pipeline, rc.settings, transcript)
    finally:
        transcript.close()
    _dump(report, out / "report.json")
    _write_cards(report, out)
    agg = report["aggregate"]["test_auroc"]
    click.echo(f"test AUROC {agg['mean']:.4f} ± {agg['std']:.4f} over {agg['n']} folds; report in {out}")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--m", "m_values", default="1,2,3,4,5,6", show_default=True, help="Comma-separated rule budgets.")
@click.option("--set", "overrides", multiple=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@_guard
def sweep(config, m_values, overrides, out):
    """Held-out AUROC as a function of the rule budget M."""
    rc = load_config(config, overrides)
    try:
        ms = [int(x) for x in m_values.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--m must be comma-separated integers, got {m_values!r}") from None
    if not ms or min(ms) < 1:
        raise ConfigError("rule budgets must be positive")
    out = Path(out) if out else rc.output
    res = sweep_rule_budget(_load_data(rc), rc.pipeline, ms, rc.settings)
    _dump(res, out / "sweep.json")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "mean_auroc", "std_auroc"])
        for row in res["sweep"]:
            w.writerow([row["M"], f"{row['mean_auroc']:.6f}", f"{row['std_auroc']:.6f}"])
    for row in res["sweep"]:
        click.echo(f"M={row['M']}: {row['mean_auroc']:.4f} ± {row['std_auroc']:.4f}")


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--n", default=10_000, show_default=True)
@click.option("--prevalence", default=0.15, show_default=True)
@click.option("--noise", default=1.0, show_default=True, help="0 gives labels determined by the planted score.")
@click.option("--target-auroc", default=0.95, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guard
def synth(out, n, prevalence, noise, target_auroc, seed):
    """Generate a cohort with a planted checklist, plus schema, manifest and a ready-to-run config."""
    res = synth_gen(SynthSpec(n=n, prevalence=prevalence, noise=noise, target_auroc=target_auroc, seed=seed), out)
    cfg = {"data": "cohort.csv", "schema": "schema.json", "label": "label", "group": "group",
           "output": "run", "pipeline": {}}
    (Path(out) / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    m = res.manifest
    click.echo(f"wrote {n} rows to {out}: prevalence {m['prevalence']:.4f}, planted AUROC {m['achieved_auroc']:.4f}, K={m['K']}")


@main.command()
@click.option("--p", "p", type=click.IntRange(min=1), required=True, help="Number of variables.")
@click.option("--T", "T", type=click.IntRange(min=1), required=True, help="Thresholds per variable.")
@click.option("--N", "N", type=click.IntRange(min=1), required=True, help="Number of samples.")
@click.option("--seconds-per-rule", default=0.1, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def space(p, T, N, seconds_per_rule, as_json):
    """Order-of-magnitude size of the rule space and the cost of enumerating it."""
    r = estimate_rule_space(p, T, N)
    seconds = r.universe_order * seconds_per_rule
    out = dict(r.as_dict(), seconds=seconds, years=seconds / SECONDS_PER_YEAR, seconds_per_rule=seconds_per_rule)
    if as_json:
        click.echo(json.dumps(out, indent=2, sort_keys=True))
        return
    click.echo(f"primitive rules       {r.primitive:.4g}")
    click.echo(f"compositional rules   {r.compositional:.4g}")
    click.echo(f"rule universe         {r.universe_order:.4g}")
    click.echo(f"primitive matrix      {r.primitive_matrix_bytes} bytes (bit-packed)")
    click.echo(f"universe matrix       {r.universe_matrix_bytes:.4g} bytes (bit-packed)")
    click.echo(f"enumeration time      {seconds:.4g} s ({seconds / SECONDS_PER_YEAR:.4g} years at {seconds_per_rule} s/rule)")


@main.command()
@click.argument("transcript", type=click.Path(dir_okay=False, exists=True))
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Where to write the replayed report.")
@click.option("--expect", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Original report; exit 1 unless the replay matches it exactly.")
@_guard
def replay(transcript, config, out, expect):
    """Rebuild pools and checklists from a recorded transcript, without proposers."""
    rc = load_config(config)
    events = Transcript.load(transcript)
    report = replay_run(_load_data(rc), events)
    if out:
        _dump(report, Path(out))
    if expect:
        original = json.loads(Path(expect).read_text())
        same = [a["rules"] == b["rules"] and a["K"] == b["K"] and a["test_auroc"] == b["test_auroc"]
                for a, b in zip(original["folds"], report["folds"])]
        if not all(same) or len(original["folds"]) != len(report["folds"]):
            click.echo("replay differs from the original report", err=True)
            sys.exit(1)
        click.echo("replay matches the original report")
    else:
        agg = report["aggregate"]["test_auroc"]
        click.echo(f"replayed test AUROC {agg['mean']:.4f} ± {agg['std']:.4f}")


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--reference", default=None, help="Name of the reference report (default: the first).")
@click.option("--metric", default="test_auroc", show_default=True)
@click.option("--n-boot", default=10_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guard
def compare(reports, reference, metric, n_boot, seed):
    """Paired per-fold comparison of two or more run reports."""
    matrix = {}
    for path in reports:
        rep = json.loads(Path(path).read_text())
        name = Path(path).stem if Path(path).stem != "report" else Path(path).parent.name
        if name in matrix:
            name = str(path)
        matrix[name] = [f.get(metric) for f in rep["folds"]]
    res = paired_comparison(matrix, reference, n_boot=n_boot, seed=seed)
    click.echo(json.dumps(res.to_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":  # pragma: no cover
    main()
