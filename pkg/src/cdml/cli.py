"""``cdml`` command-line front end.

Subcommands: synth, pretrain, train, eval, spectrum, export-filters. Every
subcommand accepts ``--config FILE`` holding ``key = value`` lines (``#``
starts a comment). Keys are option names with dashes or underscores.
Values given on the command line beat the file, which beats the built-in
defaults. The effective settings are written to ``run.cfg`` next to the
outputs.
"""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .data import (
    Dataset,
    DatasetError,
    LoadReport,
    SynthSpec,
    assign_splits,
    generate_synthetic,
    load_dataset,
    write_dataset,
)
from .evaluation import EvaluationError, evaluate, write_cmc_csv
from .extractor import BRANCH_NAMES, ExtractorConfig
from .metric import DEFAULT_LAMBDA, MetricLayer, spectrum, write_spectrum_csv
from .mining import MiningConfig, MiningError
from .model import CheckpointCorruptError, CheckpointFormatError, Model, load_checkpoint, save_checkpoint
from .training import DivergenceError, TrainConfig, fit, pretrain_softmax, write_loss_csv

RUNTIME_ERRORS = (
    DatasetError,
    EvaluationError,
    MiningError,
    CheckpointFormatError,
    CheckpointCorruptError,
    DivergenceError,
    FloatingPointError,
    OSError,
    ValueError,
)


class ConfigError(click.UsageError):
    pass


def parse_config(text: str, source: str = "config") -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("_", "-")
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _config_callback(ctx: click.Context, param: click.Parameter, value):
    if value is None:
        return None
    try:
        text = Path(value).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {value}: {exc.strerror}") from exc
    ctx.meta["cdml.config"] = parse_config(text, str(value))
    return value


def option_key(param: click.Parameter) -> str:
    """Config/run.cfg key of an option: its long name without dashes."""
    longs = [o for o in param.opts if o.startswith("--")]
    return longs[0][2:] if longs else param.name.replace("_", "-")


def _apply_config(ctx: click.Context, kwargs: dict) -> dict:
    """Fill options still at their default from the config file."""
    values = ctx.meta.get("cdml.config") or {}
    by_name = {option_key(p): p for p in ctx.command.params if isinstance(p, click.Option)}
    unknown = sorted(set(values) - set(by_name) - {"config"})
    if unknown:
        raise ConfigError(f"unknown config keys for '{ctx.command.name}': {', '.join(unknown)}")
    for key, raw in values.items():
        if key == "config":
            continue
        param = by_name[key]
        if ctx.get_parameter_source(param.name) is not click.core.ParameterSource.DEFAULT:
            continue
        try:
            if raw.lower() == "none" and not param.is_flag:
                kwargs[param.name] = None
            elif param.is_flag:
                kwargs[param.name] = click.BOOL.convert(raw, param, ctx)
            else:
                kwargs[param.name] = param.type_cast_value(ctx, raw)
        except click.BadParameter as exc:
            raise ConfigError(f"config key {key!r}: {exc.message}") from exc
    return kwargs


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def write_run_cfg(directory: Path, command: str, settings: dict[str, object]) -> Path:
    """Write ``key = value`` provenance lines, sorted, without timestamps."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.cfg"
    lines = [f"# effective settings for '{command}'"]
    keys = sorted(k for k in settings if k not in ("config", "workers"))
    lines += [f"{k} = {_format_value(settings[k])}" for k in keys]
    path.write_text("\n".join(lines) + "\n")
    return path


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def command(fn):
    """Shared plumbing: config merge, thread cap, runtime errors -> exit 1."""

    @functools.wraps(fn)
    @click.pass_context
    def wrapper(ctx, **kwargs):
        kwargs = _apply_config(ctx, kwargs)
        workers = kwargs.get("workers") or os.cpu_count() or 1
        kwargs["workers"] = workers
        try:
            with threadpool_limits(limits=workers):
                effective = fn(**kwargs) or {}
            settings = {**kwargs, **effective}
            keys = {p.name: option_key(p) for p in ctx.command.params}
            write_run_cfg(Path(kwargs["out"]), ctx.command.name, {keys[k]: v for k, v in settings.items()})
        except RUNTIME_ERRORS as exc:
            _fail(str(exc).splitlines()[0] if str(exc) else type(exc).__name__)

    wrapper = click.option(
        "--workers", type=click.IntRange(min=1), default=None, help="Cap on parallel workers (default: core count)."
    )(wrapper)
    wrapper = click.option(
        "--config",
        type=click.Path(dir_okay=False),
        default=None,
        is_eager=True,
        expose_value=True,
        callback=_config_callback,
        help="key = value file; command-line flags take precedence.",
    )(wrapper)
    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (repeat for debug output).")
def main(verbose: int) -> None:
    """Deep metric learning for person re-identification."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# shared option groups


def data_options(fn):
    fn = click.option("--split-seed", type=int, default=0, show_default=True, help="Seed of the identity split.")(fn)
    fn = click.option(
        "--test-ids",
        type=click.IntRange(min=0),
        default=None,
        help="Identities held out for testing (default: 30% of identities).",
    )(fn)
    fn = click.option("--data", type=click.Path(file_okay=False), required=True, help="Image directory.")(fn)
    return fn


def _load_split(data: str, test_ids: int | None, split_seed: int, workers: int) -> tuple[Dataset, int]:
    report = LoadReport()
    ds = load_dataset(data, report, workers=workers)
    if report.skipped or report.errors:
        click.echo(f"warning: {len(report.skipped)} files skipped, {len(report.errors)} undecodable", err=True)
    n = len(ds.identities())
    held = int(round(0.3 * n)) if test_ids is None else test_ids
    return assign_splits(ds, held, 0, seed=split_seed), held


def _extractor_config(preset: str, tied: bool) -> ExtractorConfig:
    base = ExtractorConfig.compact() if preset == "compact" else ExtractorConfig()
    return ExtractorConfig(**{**base.__dict__, "tied_branches": tied})


def _train_subset(ds: Dataset) -> Dataset:
    tr = ds.subset("train")
    if len(tr) == 0:
        raise DatasetError("training split is empty")
    return tr


# ---------------------------------------------------------------------------


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output image directory.")
@click.option("--ids", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--per-camera", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--cameras", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--tint", type=click.FloatRange(min=0), default=0.12, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0), default=0.02, show_default=True)
@click.option("--jitter", type=click.IntRange(min=0), default=3, show_default=True)
@click.option("--colour-jitter", type=click.FloatRange(min=0), default=0.04, show_default=True)
@click.option("--outlier-fraction", type=click.FloatRange(0, 1), default=0.0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["png", "ppm"]), default="png", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@command
def synth(out, ids, per_camera, cameras, tint, noise, jitter, colour_jitter, outlier_fraction, fmt, seed, **rest):
    """Write a procedural two-camera dataset."""
    spec = SynthSpec(
        identities=ids,
        per_camera=per_camera,
        cameras=cameras,
        tint=tint,
        noise=noise,
        jitter=jitter,
        colour_jitter=colour_jitter,
        outlier_fraction=outlier_fraction,
        seed=seed,
    )
    paths = write_dataset(generate_synthetic(spec), out, fmt=fmt)
    click.echo(f"wrote {len(paths)} images to {out}")


@main.command()
@data_options
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--epochs", type=click.IntRange(min=1), default=25, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=0.01, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--preset", type=click.Choice(["compact", "full"]), default="compact", show_default=True)
@click.option("--tied-branches", is_flag=True, default=False)
@click.option("--seed", type=int, default=0, show_default=True)
@command
def pretrain(data, test_ids, split_seed, out, epochs, lr, batch_size, preset, tied_branches, seed, workers, **rest):
    """Softmax identity pre-training; writes pretrain.ckpt."""
    ds, held = _load_split(data, test_ids, split_seed, workers)
    cfg = TrainConfig(seed=seed, pretrain_epochs=epochs, pretrain_lr=lr, pretrain_batch=batch_size,
                      tied_branches=tied_branches)
    params, hist = pretrain_softmax(_train_subset(ds), cfg, extractor_config=_extractor_config(preset, tied_branches))
    model = Model(params, MetricLayer.identity(params.config.out_dim), {"stage": "pretrain"})
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "pretrain.ckpt")
    click.echo(f"pretrain accuracy {hist.final_accuracy:.4f}")
    return {"test_ids": held}


@main.command()
@data_options
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--init", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Start from this checkpoint (e.g. pretrain.ckpt).")
@click.option("--lambda", "lam", type=click.FloatRange(min=0), default=DEFAULT_LAMBDA, show_default=True)
@click.option("--alpha", type=click.FloatRange(min=0), default=None, help="Fixed lower ratio bound.")
@click.option("--beta", type=float, default=None, help="Fixed upper ratio bound (inf allowed).")
@click.option("--adaptive-mining/--fixed-mining", default=True, show_default=True,
              help="Per-pool percentile bounds, or the fixed --alpha/--beta.")
@click.option("--no-positive-mining", is_flag=True, default=False)
@click.option("--no-negative-mining", is_flag=True, default=False)
@click.option("--tied-branches", is_flag=True, default=False)
@click.option("--margin", type=click.FloatRange(min=0), default=None, help="Hinge margin (default: none).")
@click.option("--epochs", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=TrainConfig.lr, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--pretrain-epochs", type=click.IntRange(min=0), default=0, show_default=True,
              help="Softmax pre-training before fine-tuning when no --init is given.")
@click.option("--preset", type=click.Choice(["compact", "full"]), default="compact", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@command
def train(data, test_ids, split_seed, out, init, lam, alpha, beta, adaptive_mining, no_positive_mining,
          no_negative_mining, tied_branches, margin, epochs, lr, batch_size, pretrain_epochs, preset, seed,
          workers, **rest):
    """Pairwise metric fine-tuning; writes model.ckpt and loss.csv."""
    if (alpha is not None or beta is not None) and adaptive_mining:
        adaptive_mining = False
    defaults = MiningConfig()
    mining = MiningConfig(
        alpha=defaults.alpha if alpha is None else alpha,
        beta=defaults.beta if beta is None else beta,
        adaptive=adaptive_mining,
        positive_mining=not no_positive_mining,
        negative_mining=not no_negative_mining,
    )
    cfg = TrainConfig(lr=lr, epochs=epochs, lam=lam, margin=margin, seed=seed, batch_size=batch_size,
                      tied_branches=tied_branches, pretrain_epochs=pretrain_epochs, mining=mining)
    ds, held = _load_split(data, test_ids, split_seed, workers)
    model = None
    if init is not None:
        model = load_checkpoint(init)
        if model.config.tied_branches != tied_branches:
            raise ValueError(f"--tied-branches={tied_branches} does not match the branch layout of {init}")
        model.info = {}
    result = fit(_train_subset(ds), cfg, _extractor_config(preset, tied_branches), model=model)
    result.model.info["stage"] = "train"
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out_dir / "model.ckpt")
    write_loss_csv(result.trace, out_dir / "loss.csv")
    last = result.trace[-1].mean_loss if result.trace else float("nan")
    click.echo(f"final mean loss {last:.6f}")
    return {"test_ids": held, "alpha": mining.alpha, "beta": mining.beta, "adaptive_mining": adaptive_mining}


@main.command(name="eval")
@data_options
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Model to evaluate (default: untrained identity-W model).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the gallery draw.")
@click.option("--all-ids", is_flag=True, default=False, help="Evaluate every identity, not just the test split.")
@command
def eval_cmd(data, test_ids, split_seed, checkpoint, out, seed, all_ids, workers, **rest):
    """Single-shot CMC on the held-out identities; prints rank-1."""
    ds, held = _load_split(data, test_ids, split_seed, workers)
    target = ds if all_ids else ds.subset("test")
    if len(target) == 0:
        raise DatasetError("test split is empty; pass --test-ids or --all-ids")
    model = load_checkpoint(checkpoint) if checkpoint else Model.initial(ExtractorConfig.compact(), seed=0)
    res = evaluate(target, model, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cmc_csv(res.curve, out_dir / "cmc.csv")
    click.echo(f"rank-1 {res.rank1:.4f}")
    return {"test_ids": held}


@main.command(name="spectrum")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@command
def spectrum_cmd(checkpoint, out, workers, **rest):
    """Singular values of M = W W^T, largest first."""
    values = spectrum(load_checkpoint(checkpoint).metric)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_spectrum_csv(values, out_dir / "spectrum.csv")
    click.echo(f"max {values.max():.6g} min {values.min():.6g}")


def filter_grid(filters: np.ndarray, scale: int = 8, gap: int = 1) -> np.ndarray:
    """Lay ``F x 3 x k x k`` filters side by side as one uint8 RGB strip.

    Each filter is stretched to the full 0..255 range on its own.
    """
    f, c, kh, kw = filters.shape
    if c != 3:
        raise ValueError(f"first-layer filters must have 3 input channels, got {c}")
    cell_h, cell_w = kh * scale, kw * scale
    strip = np.full((cell_h, f * (cell_w + gap) - gap, 3), 255, dtype=np.uint8)
    for i, w in enumerate(filters):
        lo, hi = w.min(), w.max()
        norm = (w - lo) / (hi - lo) if hi > lo else np.full_like(w, 0.5)
        img = np.kron(norm.transpose(1, 2, 0), np.ones((scale, scale, 1)))
        x0 = i * (cell_w + gap)
        strip[:, x0:x0 + cell_w] = np.round(img * 255).astype(np.uint8)
    return strip


@main.command(name="export-filters")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--scale", type=click.IntRange(min=1), default=8, show_default=True, help="Pixels per filter tap.")
@command
def export_filters(checkpoint, out, scale, workers, **rest):
    """First-layer filters: one PNG per branch plus a combined grid."""
    model = load_checkpoint(checkpoint)
    names = ("shared",) if model.config.tied_branches else BRANCH_NAMES
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    strips = []
    for name in names:
        strip = filter_grid(model.extractor.tensors[f"{name}.conv1.w"].data, scale)
        Image.fromarray(strip, "RGB").save(out_dir / f"conv1_{name}.png")
        strips.append(strip)
    gap = np.full((scale, strips[0].shape[1], 3), 255, dtype=np.uint8)
    grid = np.concatenate([x for s in strips for x in (s, gap)][:-1], axis=0)
    Image.fromarray(grid, "RGB").save(out_dir / "conv1_filters.png")
    click.echo(f"wrote {len(names) + 1} filter images to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
