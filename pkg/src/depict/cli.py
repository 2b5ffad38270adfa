"""Command-line surface: dataset, training, generation, evaluation, ablation.

Every command resolves its RunConfig from defaults <- --config TOML <-
repeated --set section.key=value overrides, echoes the resolved config into
its output directory, and finishes with a checksums.json covering the
artifacts it wrote. Failures exit nonzero and print a machine-readable
error document {"error": {"type", "message"}} to stderr.
"""

from __future__ import annotations

import json
import sys
import traceback
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .checkpoint import CheckpointError, load_checkpoint, load_into_module, save_checkpoint
from .config import ConfigError, load_config, write_echo
from .diffusion import make_schedule
from .layout import LayoutError, parse_layout
from .synth import GeneratorConfig, read_shard, sample_corpus, write_shard
from .train import train_adapter, train_depth, train_rgb
from .unet import build_model

_CONFIG_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 default=None, help="TOML config file."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Override a config entry (repeatable), e.g. control.filter_rho=0.25."),
    click.option("--out", "out_dir", default=None, help="Output directory (overrides config)."),
]


def with_config(fn):
    for opt in reversed(_CONFIG_OPTIONS):
        fn = opt(fn)
    return fn


def _resolve(config_path, overrides, out_dir):
    cfg = load_config(config_path, list(overrides))
    if out_dir is not None:
        from dataclasses import replace

        cfg = replace(cfg, out_dir=out_dir)
    return cfg


def _fail(exc: BaseException) -> None:
    doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    click.echo(json.dumps(doc, sort_keys=True), err=True)
    sys.exit(1)


_EXPECTED = (
    ConfigError,
    LayoutError,
    CheckpointError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
    FloatingPointError,
)


def guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _EXPECTED as exc:
            _fail(exc)
        except Exception as exc:  # unexpected: keep the trace for bug reports
            traceback.print_exc()
            _fail(exc)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
def main():
    """Layout-conditioned two-stage image generation, desk scale."""


@main.command("make-dataset")
@with_config
@guarded
def make_dataset(config_path, overrides, out_dir):
    """Sample a synthetic scene corpus and write it as a shard directory."""
    cfg = _resolve(config_path, overrides, out_dir)
    gen = GeneratorConfig(
        min_instances=cfg.data.min_instances, max_instances=cfg.data.max_instances
    )
    samples = sample_corpus(cfg.data.seed, cfg.data.scenes, gen)
    out = Path(cfg.out_dir) / "dataset"
    write_shard(samples, out, gen)
    write_echo(cfg, out)
    pl.write_checksums(out)
    click.echo(f"wrote {len(samples)} scenes to {out}")


def _load_corpus(cfg):
    shard = Path(cfg.out_dir) / "dataset"
    if not shard.is_dir():
        raise FileNotFoundError(
            f"no dataset at {shard}; run make-dataset with the same --out first"
        )
    return read_shard(shard)


def _models_dir(cfg) -> Path:
    return Path(cfg.out_dir) / "models"


@main.command("train-depth")
@with_config
@guarded
def cmd_train_depth(config_path, overrides, out_dir):
    """Train the text-to-depth base model on the dataset shard."""
    cfg = _resolve(config_path, overrides, out_dir)
    corpus = _load_corpus(cfg)
    schedule = make_schedule()
    model, losses = train_depth(corpus, cfg.arch, cfg.train_depth, schedule, log=click.echo)
    save_checkpoint(
        _models_dir(cfg) / pl.CKPT_DEPTH, "depth", model.state_dict(),
        arch=model.cfg.table(), schedule=pl._schedule_dict(schedule),
        meta={"steps": cfg.train_depth.steps, "final_loss": losses[-1]},
    )
    write_echo(cfg, _models_dir(cfg))
    pl.write_checksums(_models_dir(cfg))
    click.echo(f"depth model saved; final loss {losses[-1]:.4f}")


@main.command("train-adapter")
@with_config
@guarded
def cmd_train_adapter(config_path, overrides, out_dir):
    """Train the layout adapter over the frozen depth model."""
    cfg = _resolve(config_path, overrides, out_dir)
    corpus = _load_corpus(cfg)
    state, header = load_checkpoint(_models_dir(cfg) / pl.CKPT_DEPTH, expected_kind="depth")
    base = build_model(pl._arch_from_table(header["arch"]), seed=0)
    load_into_module(base, state)
    sd = header["schedule"]
    schedule = make_schedule(sd["T"], sd["beta_min"], sd["beta_max"])
    adapter, losses = train_adapter(base, corpus, cfg.train_adapter, schedule, log=click.echo)
    save_checkpoint(
        _models_dir(cfg) / pl.CKPT_ADAPTER, "adapter", adapter.state_dict(),
        arch=header["arch"], schedule=sd,
        meta={"steps": cfg.train_adapter.steps, "final_loss": losses[-1]},
    )
    write_echo(cfg, _models_dir(cfg))
    pl.write_checksums(_models_dir(cfg))
    click.echo(f"adapter saved; final loss {losses[-1]:.4f}")


@main.command("train-rgb")
@with_config
@guarded
def cmd_train_rgb(config_path, overrides, out_dir):
    """Jointly train the RGB model and its depth control branch."""
    cfg = _resolve(config_path, overrides, out_dir)
    corpus = _load_corpus(cfg)
    schedule = make_schedule()
    model, branch, losses = train_rgb(corpus, cfg.arch, cfg.train_rgb, schedule, log=click.echo)
    state = {f"unet.{k}": v for k, v in model.state_dict().items()}
    state.update({f"control.{k}": v for k, v in branch.state_dict().items()})
    save_checkpoint(
        _models_dir(cfg) / pl.CKPT_RGB, "rgb", state,
        arch=model.cfg.table(), schedule=pl._schedule_dict(schedule),
        meta={"steps": cfg.train_rgb.steps, "final_loss": losses[-1]},
    )
    write_echo(cfg, _models_dir(cfg))
    pl.write_checksums(_models_dir(cfg))
    click.echo(f"rgb model saved; final loss {losses[-1]:.4f}")


def _read_layout(path) -> "Layout":
    return parse_layout(Path(path).read_text())


@main.command("gen-depth")
@click.option("--layout", "layout_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@with_config
@guarded
def gen_depth(layout_path, seed, config_path, overrides, out_dir):
    """Generate a scene depth map for one layout file."""
    cfg = _resolve(config_path, overrides, out_dir)
    layout = _read_layout(layout_path)
    bundle = pl.load_bundle(_models_dir(cfg))
    depth = pl.generate_depth(
        layout, bundle.depth_model, bundle.adapter, bundle.schedule, cfg, seed
    )
    out = Path(cfg.out_dir) / "gen"
    pl.write_png(depth, out / f"depth_{seed}.png")
    write_echo(cfg, out)
    pl.write_checksums(out)
    click.echo(str(out / f"depth_{seed}.png"))


@main.command("gen-image")
@click.option("--layout", "layout_path", required=True, type=click.Path(exists=True))
@click.option("--depth", "depth_path", required=True, type=click.Path(exists=True),
              help="Stage-1 depth map PNG.")
@click.option("--seed", default=0, show_default=True)
@with_config
@guarded
def gen_image(layout_path, depth_path, seed, config_path, overrides, out_dir):
    """Render an RGB image from a layout and an existing depth map."""
    cfg = _resolve(config_path, overrides, out_dir)
    layout = _read_layout(layout_path)
    depth = pl.read_png(depth_path)
    bundle = pl.load_bundle(_models_dir(cfg))
    image = pl.generate_image(
        layout, depth, bundle.rgb_model, bundle.control_branch, bundle.schedule, cfg, seed
    )
    out = Path(cfg.out_dir) / "gen"
    pl.write_png(image, out / f"image_{seed}.png")
    write_echo(cfg, out)
    pl.write_checksums(out)
    click.echo(str(out / f"image_{seed}.png"))


@main.command("run-pipeline")
@click.option("--layout", "layout_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@with_config
@guarded
def cmd_run_pipeline(layout_path, seed, config_path, overrides, out_dir):
    """Layout file -> depth map, image, and a per-instance report."""
    cfg = _resolve(config_path, overrides, out_dir)
    layout = _read_layout(layout_path)
    bundle = pl.load_bundle(_models_dir(cfg))
    depth, image = pl.run_pipeline(layout, bundle, cfg, seed)
    out = Path(cfg.out_dir) / "pipeline"
    pl.write_png(depth, out / f"depth_{seed}.png")
    pl.write_png(image, out / f"image_{seed}.png")
    agg = pl.evaluate_images([layout], [image])
    pl.write_json(pl.make_report(agg, cfg, corpus_checksum=""), out / f"report_{seed}.json")
    write_echo(cfg, out)
    pl.write_checksums(out)
    click.echo(str(out))


@main.command("eval")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True),
              help="EvalReport JSON to verify and summarize.")
@guarded
def cmd_eval(report_path):
    """Check a report's aggregates against its records and print them."""
    report = json.loads(Path(report_path).read_text())
    pl.check_report(report)
    summary = {k: report[k] for k in ("miou", "iasr", "isr") if report.get(k) is not None}
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("ablate")
@click.option("--count", default=64, show_default=True, help="Benchmark layout count.")
@with_config
@guarded
def cmd_ablate(count, config_path, overrides, out_dir):
    """Run the four filter x segmenter arms over the overlap benchmark."""
    cfg = _resolve(config_path, overrides, out_dir)
    bundle = pl.load_bundle(_models_dir(cfg))
    layouts = pl.overlap_benchmark(count, cfg.seed)
    reports = pl.ablate(layouts, bundle, cfg, log=click.echo)
    out = Path(cfg.out_dir) / "ablation"
    for name, report in reports.items():
        pl.write_json(report, out / f"report_{name}.json")
    write_echo(cfg, out)
    pl.write_checksums(out)
    click.echo(str(out))


if __name__ == "__main__":
    main()
