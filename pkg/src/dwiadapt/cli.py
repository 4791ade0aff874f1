"""Command-line entry point wiring all modules.

Configuration can come from a JSON file (sections: phantom, fit, train,
scenario) with individual flags taking precedence over file values and
file values over built-in defaults. Every command writes a run.json
config echo into its output directory; re-running a command from the
echoed configuration reproduces the outputs byte for byte.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
Diagnostics go to standard error; data goes to files or standard output.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click

from . import __version__
from .adapt import adapt_stack, save_adapted_stack
from .core import Protocol, load_case, load_stack, subset_protocol
from .dki import FitConfig, fit_roi, load_maps, roi_mean_coefficients, save_maps
from .errors import DwiAdaptError, FormatError, IoError
from .network import (
    TrainConfig,
    e2e_architecture,
    f2e_architecture,
    input_from_maps,
    input_from_stack,
    load_network,
    make_splits,
    predict_case,
    save_network,
    train,
)
from .phantom import PhantomConfig, generate_dataset, load_dataset, save_dataset
from .report import emit_report
from .scenario import (
    MODES,
    ScenarioSpec,
    enumerate_scenarios,
    load_results,
    run_matrix,
    save_results,
)
from .stats import ScoredSet, auc, delong_test, holm_bonferroni

logger = logging.getLogger("dwiadapt")


def _parse_bvalues(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as e:
        raise FormatError(f"cannot parse b-values from {text!r}") from e


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise FormatError("config file must hold a JSON object")
    return data


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise FormatError(f"config section {name!r} must be an object")
    return dict(section)


def _fit_config(config: dict, **overrides) -> FitConfig:
    values = _section(config, "fit")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return FitConfig(**values)
    except TypeError as e:
        raise FormatError(f"bad fit config: {e}") from e


def _train_config(config: dict, **overrides) -> TrainConfig:
    values = _section(config, "train")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise FormatError(f"bad train config: {e}") from e


def _phantom_config(config: dict, **overrides) -> PhantomConfig:
    values = _section(config, "phantom")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PhantomConfig.from_dict(values)


def _write_run_echo(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_any_stack(path):
    """A stack directory, with or without case metadata in its manifest."""
    try:
        case = load_case(path)
        return case.stack, case.id
    except DwiAdaptError:
        return load_stack(path), Path(path).name


def _echo_json(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group(name="dwiadapt")
@click.version_option(version=__version__, prog_name="dwiadapt")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker pool size for scenario matrices (default: logical cores).")
@click.pass_context
def cli(ctx, verbose, threads):
    """Model-based adaptation of diffusion MRI inputs, desk-scale harness."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"threads": threads or os.cpu_count() or 1}


@cli.group()
def phantom():
    """Synthetic dataset generation."""


@phantom.command("generate")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--benign", type=click.IntRange(min=0), default=100, show_default=True)
@click.option("--malignant", type=click.IntRange(min=0), default=121, show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
def phantom_generate(out_dir, config_path, benign, malignant, seed):
    """Generate a labeled phantom dataset into a directory."""
    config = _phantom_config(_load_config_file(config_path), seed=seed)
    cases = generate_dataset(config, n_benign=benign, n_malignant=malignant)
    save_dataset(cases, out_dir, config)
    _write_run_echo(out_dir, {
        "command": "phantom generate",
        "phantom": config.to_dict(),
        "n_benign": benign,
        "n_malignant": malignant,
    })
    logger.info("wrote %d cases to %s", len(cases), out_dir)


@cli.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--constrain-akc-zero", is_flag=True, default=None,
              help="Freeze akc at 0 (mono-exponential fit).")
def fit(in_dir, out_dir, config_path, constrain_akc_zero):
    """Fit the signal model over a stack's lesion mask; write maps."""
    fit_config = _fit_config(_load_config_file(config_path),
                             constrain_akc_zero=constrain_akc_zero)
    stack, source_id = _load_any_stack(in_dir)
    maps = fit_roi(stack, fit_config)
    save_maps(maps, out_dir, source_id=source_id, fit_config=fit_config)
    _write_run_echo(out_dir, {
        "command": "fit",
        "input": str(in_dir),
        "fit": asdict(fit_config),
    })
    if maps.mask.any():
        adc_mean, akc_mean = roi_mean_coefficients(maps)
        _echo_json({"adc_mean": adc_mean, "akc_mean": akc_mean, "source": source_id})
    else:
        _echo_json({"adc_mean": None, "akc_mean": None, "source": source_id})


@cli.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--target-protocol", required=True,
              help="Comma-separated b-values the output stack must carry.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
def restore(in_dir, target_protocol, out_dir, config_path):
    """Adapt a stack to a target protocol, synthesizing missing channels."""
    fit_config = _fit_config(_load_config_file(config_path))
    target = Protocol(_parse_bvalues(target_protocol))
    stack, source_id = _load_any_stack(in_dir)
    adapted, adaptation = adapt_stack(stack, target, fit_config)
    save_adapted_stack(adapted, adaptation, out_dir,
                       case_id=source_id, config=fit_config)
    _write_run_echo(out_dir, {
        "command": "restore",
        "input": str(in_dir),
        "target_protocol": list(target.bvalues),
        "fit": asdict(fit_config),
    })
    _echo_json({
        "kept": list(adaptation.kept),
        "derived": list(adaptation.derived),
        "dropped": list(adaptation.dropped),
    })


@cli.command(name="train")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--arch", type=click.Choice(["e2e", "f2e"]), default="e2e", show_default=True)
@click.option("--bvalues", default=None,
              help="Training protocol subset (default: the dataset's full protocol).")
@click.option("--fold", type=click.IntRange(min=0, max=4), default=0, show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=None, help="Training seed override.")
@click.option("--epochs", type=click.IntRange(min=0), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
def train_command(dataset_dir, out_path, arch, bvalues, fold, split_seed, seed,
                  epochs, config_path):
    """Train a classifier on one cross-validation fold of a dataset."""
    config = _load_config_file(config_path)
    train_config = _train_config(config, seed=seed, max_epochs=epochs)
    fit_config = _fit_config(config)
    cases = load_dataset(dataset_dir)
    keep = _parse_bvalues(bvalues) if bvalues else cases[0].stack.protocol.bvalues
    plan = make_splits(cases, seed=split_seed)
    assignment = plan.folds[fold]
    by_id = {c.id: c for c in cases}

    def build_input(cid):
        case = by_id[cid]
        sub = subset_protocol(case.stack, keep)
        if arch == "e2e":
            return input_from_stack(sub, case_id=cid, label=case.label)
        constrained = len(keep) == 2
        cfg = FitConfig(**{**asdict(fit_config), "constrain_akc_zero":
                           constrained or fit_config.constrain_akc_zero})
        return input_from_maps(fit_roi(sub, cfg), case_id=cid, label=case.label,
                               fit_config=cfg)

    t_inputs = [build_input(cid) for cid in assignment.train_ids]
    v_inputs = [build_input(cid) for cid in assignment.val_ids]
    architecture = e2e_architecture(len(keep)) if arch == "e2e" else f2e_architecture()
    net = train(t_inputs, v_inputs, architecture, train_config)
    save_network(net, out_path)
    _write_run_echo(out_path.parent, {
        "command": "train",
        "dataset": str(dataset_dir),
        "arch": arch,
        "bvalues": list(keep),
        "fold": fold,
        "split_seed": split_seed,
        "train": asdict(train_config),
        "fit": asdict(fit_config),
    })
    _echo_json({"selected_epoch": net.selected_epoch, "epochs_run": net.epochs_run,
                "network": str(out_path)})


@cli.command()
@click.option("--network", "network_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--maps", "is_maps", is_flag=True,
              help="Input directory holds fitted maps, not a stack.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
def predict(network_path, in_dir, is_maps, config_path):
    """Score one case; prints the malignancy probability as JSON."""
    net = load_network(network_path)
    fit_config = _fit_config(_load_config_file(config_path))
    if is_maps:
        case = load_maps(in_dir)
    else:
        stack, _ = _load_any_stack(in_dir)
        if net.arch.is_e2e:
            case = stack
        else:
            constrained = len(stack.protocol) == 2 or fit_config.constrain_akc_zero
            cfg = FitConfig(**{**asdict(fit_config), "constrain_akc_zero": constrained})
            case = fit_roi(stack, cfg)
    score = predict_case(net, case, fit_config=fit_config)
    _echo_json({"score": score})


def _read_scores_csv(path) -> tuple[tuple[str, ...], ScoredSet]:
    """case_id,score,label rows; returned sorted by case id."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot read scores file {path}: {e}") from e
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["case_id", "score", "label"]:
        raise FormatError(f"{path}: expected header 'case_id,score,label'")
    body = sorted(rows[1:], key=lambda r: r[0])
    ids = tuple(r[0] for r in body)
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate case ids")
    try:
        scored = ScoredSet(tuple(float(r[1]) for r in body), tuple(r[2] for r in body))
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}: malformed row: {e}") from e
    return ids, scored


@cli.command()
@click.option("--scores", "score_paths", multiple=True, required=True,
              type=click.Path(exists=True, path_type=Path),
              help="Repeatable; the first file is the reference classifier.")
@click.option("--alpha", type=float, default=None,
              help="Rejection level (default 0.05; config section 'eval').")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
def evaluate(score_paths, alpha, config_path):
    """AUC per score file; DeLong against the first file, Holm-corrected."""
    eval_cfg = _section(_load_config_file(config_path), "eval")
    alpha = alpha if alpha is not None else float(eval_cfg.get("alpha", 0.05))
    loaded = [_read_scores_csv(p) for p in score_paths]
    out = {"alpha": alpha,
           "sets": [{"path": str(p), "auc": auc(s)}
                    for p, (_, s) in zip(score_paths, loaded)]}
    if len(loaded) > 1:
        ref_ids, ref = loaded[0]
        comparisons = []
        for path, (ids, scored) in zip(score_paths[1:], loaded[1:]):
            if ids != ref_ids:
                raise FormatError(f"{path}: case ids differ from the reference file")
            d = delong_test(ref, scored)
            comparisons.append({
                "path": str(path), "auc_a": d.auc_a, "auc_b": d.auc_b,
                "z": d.z, "p_two_sided": d.p_two_sided, "degenerate": d.degenerate,
            })
        holm = holm_bonferroni([c["p_two_sided"] for c in comparisons], alpha)
        for c, rejected in zip(comparisons, holm.reject):
            c["significant"] = rejected
        out["comparisons"] = comparisons
    _echo_json(out)


@cli.group()
def scenario():
    """Experiment matrices over protocol alterations."""


@scenario.command("enumerate")
@click.option("--kind", type=click.Choice(["shifted", "missing"]), required=True)
@click.option("--protocol", default="0,100,750,1500", show_default=True)
def scenario_enumerate(kind, protocol):
    """List every scenario for a full protocol as JSON."""
    specs = enumerate_scenarios(_parse_bvalues(protocol), kind)
    _echo_json([
        {"kind": s.kind,
         "training_bvalues": list(s.training_bvalues),
         "inference_bvalues": list(s.inference_bvalues)}
        for s in specs
    ])


@scenario.command("run")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--kind", type=click.Choice(["shifted", "missing"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--index", "indices", multiple=True, type=click.IntRange(min=0),
              help="Run only these scenario indices (repeatable; default all).")
@click.option("--modes", default=None,
              help="Comma-separated subset of modes (default: all five).")
@click.option("--fill", type=click.Choice(["nearest", "zero"]), default=None,
              help="Missing-channel fill for altered_e2e.")
@click.option("--alpha", type=float, default=None)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=None, help="Training seed override.")
@click.option("--epochs", type=click.IntRange(min=0), default=None)
@click.option("--no-figure", is_flag=True, help="Skip the summary figure.")
@click.pass_context
def scenario_run(ctx, dataset_dir, kind, out_dir, config_path, indices, modes,
                 fill, alpha, split_seed, seed, epochs, no_figure):
    """Run a scenario matrix over a dataset and emit the report files."""
    config = _load_config_file(config_path)
    scenario_cfg = _section(config, "scenario")
    fill = fill or scenario_cfg.get("fill", "nearest")
    alpha = alpha if alpha is not None else float(scenario_cfg.get("alpha", 0.05))
    mode_list = (tuple(modes.split(",")) if modes
                 else tuple(scenario_cfg.get("modes", MODES)))
    fit_config = _fit_config(config)
    train_config = _train_config(config, seed=seed, max_epochs=epochs)
    cases = load_dataset(dataset_dir)
    full_protocol = cases[0].stack.protocol.bvalues
    specs = enumerate_scenarios(full_protocol, kind)
    if indices:
        bad = [i for i in indices if i >= len(specs)]
        if bad:
            raise FormatError(f"scenario index out of range: {bad} (have {len(specs)})")
        specs = tuple(specs[i] for i in sorted(set(indices)))
    specs = tuple(
        ScenarioSpec(s.kind, s.training_bvalues, s.inference_bvalues, mode_list)
        for s in specs
    )
    plan = make_splits(cases, seed=split_seed)
    logger.info("running %d %s scenarios on %d cases", len(specs), kind, len(cases))
    results = run_matrix(specs, cases, plan, fit_config, train_config,
                         fill=fill, alpha=alpha, threads=ctx.obj["threads"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_results(results, out_dir / "results.json")
    paths = emit_report(results, out_dir, alpha=alpha, figure=not no_figure)
    _write_run_echo(out_dir, {
        "command": "scenario run",
        "dataset": str(dataset_dir),
        "kind": kind,
        "indices": sorted(set(indices)),
        "modes": list(mode_list),
        "fill": fill,
        "alpha": alpha,
        "split_seed": split_seed,
        "fit": asdict(fit_config),
        "train": asdict(train_config),
    })
    logger.info("report written to %s", paths["csv"].parent)


@cli.command(name="report")
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--no-figure", is_flag=True)
def report_command(results_path, out_dir, alpha, no_figure):
    """Re-render report files from stored scenario results."""
    results = load_results(results_path)
    emit_report(results, out_dir, alpha=alpha, figure=not no_figure)
    _write_run_echo(out_dir, {
        "command": "report",
        "results": str(results_path),
        "alpha": alpha,
    })


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except IoError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except DwiAdaptError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
