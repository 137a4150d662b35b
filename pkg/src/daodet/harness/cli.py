"""Command line entry point (``daodet``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from ..data import DataError, dataset_stats, save_coco
from ..detector import CheckpointError, NumericError
from ..eval import emit_report, load_report_json, save_detections
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from . import runner

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, CheckpointError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (DataError, FileNotFoundError) as exc:
            _fail(EXIT_DATA, str(exc))
        except NumericError as exc:
            _fail(EXIT_NUMERIC, str(exc))

    return wrapper


def _load(config_path, seed, out, device) -> ExperimentConfig:
    overrides = {"seed": seed, "out": out, "device": device}
    if config_path is None:
        raw = {k: v for k, v in overrides.items() if v is not None}
        raw.setdefault("data", {"kind": "synth"})
        return from_dict(raw)
    return load_config(config_path, overrides)


def common(fn):
    fn = click.option("--device", type=click.Choice(["cpu", "accelerator"]), default=None)(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the config seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML config file.")(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Domain-adaptive object detection: synthetic data, training and reports."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common
@_guarded
def synth(config_path, seed, out, device):
    """Write the synthetic corpus as COCO files under OUT/<domain>/<split>/."""
    cfg = _load(config_path, seed, out, device)
    if cfg.data.kind != "synth":
        raise ConfigError("the synth verb needs data.kind: synth")
    root = Path(cfg.out)
    for dom in cfg.data.domains:
        for split in runner.SPLITS:
            ds = runner.load_split(cfg, dom, split, "source")
            d = root / dom / split
            save_coco(ds, d / "annotations.json", d)
            click.echo(f"{dom}/{split}: {len(ds)} images -> {d}")


@main.command()
@common
@click.option("--split", type=click.Choice(runner.SPLITS), default="train")
@_guarded
def stats(config_path, seed, out, device, split):
    """Instances per category for every configured domain."""
    cfg = _load(config_path, seed, out, device)
    table = {dom: dataset_stats(runner.load_split(cfg, dom, split, "source")) for dom in cfg.data.domains}
    click.echo(json.dumps(table, indent=2, ensure_ascii=False))


@main.command("train-source")
@common
@_guarded
def train_source(config_path, seed, out, device):
    """Source-only baseline: train on data.source, evaluate on data.target."""
    cfg = _load(config_path, seed, out, device)
    res = runner.run_source_only(cfg)[cfg.data.target]
    click.echo(json.dumps(res.metrics(), indent=2, ensure_ascii=False))


@main.command()
@common
@click.option("--source-checkpoint", type=click.Path(dir_okay=False), default=None, help="Burn-in checkpoint to start from.")
@_guarded
def adapt(config_path, seed, out, device, source_checkpoint):
    """Burn-in then mean-teacher adaptation from data.source to data.target."""
    cfg = _load(config_path, seed, out, device)
    res = runner.run_adapt(cfg, source_checkpoint)
    click.echo(json.dumps(res.metrics(), indent=2, ensure_ascii=False))


@main.command("eval")
@common
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--domain", default=None, help="Domain to evaluate on (default data.target).")
@click.option("--model", type=click.Choice(["teacher", "student"]), default="teacher")
@click.option("--detections", type=click.Path(dir_okay=False), default=None, help="Also write detections JSON here.")
@_guarded
def eval_cmd(config_path, seed, out, device, checkpoint, domain, model, detections):
    """Evaluate a checkpoint on a domain's eval split."""
    from ..detector import load_checkpoint, predict_dataset

    cfg = _load(config_path, seed, out, device)
    dom = domain or cfg.data.target
    if detections:
        ck = load_checkpoint(checkpoint, expect_backbone=cfg.model.backbone)
        ds = runner.load_split(cfg, dom, "eval", "target")
        save_detections(predict_dataset(ck[model] or ck["student"], ds, cfg.eval.batch_size, cfg.eval.score_thresh, cfg.eval.nms_iou), detections)
    res = runner.evaluate_checkpoint(cfg, checkpoint, dom, model=model)
    click.echo(json.dumps(res.to_dict(), indent=2, ensure_ascii=False))


@main.command()
@common
@_guarded
def benchmark(config_path, seed, out, device):
    """All ordered domain pairs, source-only and adapted; writes the transfer report."""
    cfg = _load(config_path, seed, out, device)
    result = runner.run_benchmark(cfg)
    for p in result["files"]:
        click.echo(str(p))


@main.command()
@click.argument("report_json", type=click.Path(dir_okay=False, exists=True))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--format", "formats", multiple=True, type=click.Choice(["csv", "json", "plot"]), default=("csv", "json", "plot"))
def report(report_json, out, formats):
    """Re-emit a saved transfer report (JSON) in the requested formats."""
    try:
        reports = load_report_json(report_json)
    except (ValueError, KeyError) as exc:
        _fail(EXIT_DATA, f"cannot read report {report_json}: {exc}")
    for p in emit_report(reports, out, formats):
        click.echo(str(p))


if __name__ == "__main__":
    main()
