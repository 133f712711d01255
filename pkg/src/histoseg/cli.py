"""Command-line interface.

Exit codes: 0 success, 1 usage errors, 2 data/contract errors (bad
files, malformed config, refused overwrite), 3 numerical failures.

Heavy modules are imported inside command bodies so the --threads cap
can be exported to the BLAS environment before numpy loads.
"""
from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                    "VECLIB_MAXIMUM_THREADS")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML run configuration file.")
@click.option("--seed", type=int, default=None,
              help="Override the global random seed.")
@click.option("--threads", type=int, default=None,
              help="Cap BLAS/OpenMP threads (1 gives bit-reproducible runs).")
@click.pass_context
def cli(ctx, config_path, seed, threads):
    """Dense histology segmentation: train, infer, score, and baselines."""
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be >= 1")
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(threads)
    ctx.obj = {"config_path": config_path, "seed": seed}


def _load_cfg(ctx, extra: dict | None = None):
    from .config import load_run_config
    overrides = {}
    if ctx.obj.get("seed") is not None:
        overrides[("seed",)] = ctx.obj["seed"]
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_run_config(ctx.obj.get("config_path"), overrides)


def _prepare_out(out, force: bool) -> Path:
    from .errors import ContractError
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(
            f"output directory {out} exists and is not empty; pass --force "
            f"to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_yaml(cfg) -> str:
    import yaml
    from .config import config_to_dict
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def _write_run_log(out_dir: Path, cfg, lines) -> None:
    body = "effective-config:\n"
    body += "".join(f"  {line}\n" for line in _config_yaml(cfg).splitlines())
    body += "".join(f"{line}\n" for line in lines)
    (out_dir / "run.log").write_text(body)


def _load_split(root, split: str, colormap) -> list:
    """Read (image, label) pairs from <root>/<split>/{images,labels}."""
    from .data import decode_image, labelmap_from_colors
    from .errors import ContractError
    root = Path(root)
    img_dir = root / split / "images"
    lab_dir = root / split / "labels"
    if not img_dir.is_dir():
        raise ContractError(f"no such data directory: {img_dir}")
    if not lab_dir.is_dir():
        raise ContractError(f"no such data directory: {lab_dir}")
    pairs = []
    names = sorted(p.name for p in img_dir.glob("*.png"))
    if not names:
        raise ContractError(f"no PNG images in {img_dir}")
    for name in names:
        lab_path = lab_dir / name
        if not lab_path.exists():
            raise ContractError(f"missing label image {lab_path}")
        img = decode_image(img_dir / name)
        labels = labelmap_from_colors(decode_image(lab_path), colormap)
        if labels.shape != img.shape[:2]:
            raise ContractError(
                f"{name}: label size {labels.shape} does not match image "
                f"{img.shape[:2]}"
            )
        pairs.append((img, labels))
    return pairs


def _fraction_line(name: str, fractions, class_names) -> str:
    parts = [f"{cls} {100.0 * f:.2f}%" for cls, f in zip(class_names, fractions)]
    total = 100.0 * float(sum(fractions))
    return f"{name}: " + ", ".join(parts) + f" (sum {total:.2f}%)"


def _print_score_table(title: str, table, class_names) -> None:
    click.echo(title)
    click.echo(f"  mean DSC {table.mean_dsc:.4f}  mean IoU {table.mean_iou:.4f}")
    for i, name in enumerate(class_names):
        click.echo(f"  {name}: DSC {table.class_dsc[i]:.4f}  "
                   f"IoU {table.class_iou[i]:.4f}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--count", default=12, show_default=True,
              help="Total image/label pairs.")
@click.option("--height", default=256, show_default=True)
@click.option("--width", default=256, show_default=True)
@click.option("--train-count", default=None, type=int,
              help="Pairs in the train split (default: two thirds).")
@click.option("--force", is_flag=True, help="Overwrite a nonempty directory.")
@click.pass_context
def synth(ctx, out, count, height, width, train_count, force):
    """Generate synthetic stained-tissue pairs, split into train and eval."""
    import dataclasses

    from .data import CLASS_NAMES, encode_image, labelmap_to_colors
    from .errors import ContractError
    from .synth import synth_generate

    cfg = _load_cfg(ctx)
    if train_count is None:
        train_count = int(round(count * 2.0 / 3.0))
    if not (1 <= train_count < count):
        raise ContractError(
            f"train count {train_count} must leave at least one eval pair "
            f"out of {count}"
        )
    out = _prepare_out(out, force)
    params = dataclasses.replace(cfg.synth, seed=cfg.seed)
    pairs = synth_generate(params, count, (height, width))
    colormap = cfg.resolved_colormap()
    splits = {"train": pairs[:train_count], "eval": pairs[train_count:]}
    for split, split_pairs in splits.items():
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        (out / split / "labels").mkdir(parents=True, exist_ok=True)
        for i, (img, labels) in enumerate(split_pairs):
            name = f"img_{i:03d}.png"
            encode_image(img, out / split / "images" / name)
            encode_image(labelmap_to_colors(labels, colormap),
                         out / split / "labels" / name)
    manifest = {
        "seed": cfg.seed,
        "count": count,
        "train_count": train_count,
        "eval_count": count - train_count,
        "height": height,
        "width": width,
        "fractions": list(params.fractions),
        "class_names": list(CLASS_NAMES),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_run_log(out, cfg, [f"wrote {train_count} train and "
                              f"{count - train_count} eval pairs"])
    click.echo(f"wrote {train_count} train + {count - train_count} eval "
               f"pairs ({height}x{width}) to {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True,
              file_okay=False), help="Dataset directory (synth layout).")
@click.option("--out", required=True, type=click.Path(), help="Run directory.")
@click.option("--epochs", default=None, type=int, help="Override max epochs.")
@click.option("--batch-size", default=None, type=int, help="Override batch size.")
@click.option("--lr", default=None, type=float, help="Override learning rate.")
@click.option("--patience", default=None, type=int, help="Override patience.")
@click.option("--balanced", is_flag=True,
              help="Resample patches toward the balance targets.")
@click.option("--color-augment", "color_augment", is_flag=True,
              help="Apply random red/blue channel shifts to patch subsets.")
@click.option("--eval-split", default="eval", show_default=True,
              help="Split used for per-epoch scoring and model selection.")
@click.option("--force", is_flag=True, help="Overwrite a nonempty directory.")
@click.pass_context
def train(ctx, data_dir, out, epochs, batch_size, lr, patience, balanced,
          color_augment, eval_split, force):
    """Train the 11-layer network on a dataset directory."""
    import dataclasses

    import numpy as np

    from .data import (apply_color_augmentation, build_balanced_training_set,
                       build_training_set, compute_channel_stats)
    from .network import build_network, default_manifest, save_model
    from .training import train as train_model

    cfg = _load_cfg(ctx, {
        ("train", "max_epochs"): epochs,
        ("train", "learning_rate"): lr,
        ("train", "patience_epochs"): patience,
        ("plan", "batch_size"): batch_size,
    })
    out = _prepare_out(out, force)
    colormap = cfg.resolved_colormap()
    train_pairs = _load_split(data_dir, "train", colormap)
    eval_pairs = _load_split(data_dir, eval_split, colormap)
    rng = np.random.default_rng(cfg.seed)
    lines = [f"loaded {len(train_pairs)} train / {len(eval_pairs)} eval pairs"]
    if balanced:
        patches, report = build_balanced_training_set(
            train_pairs, cfg.plan, rng, targets=cfg.balance.targets,
            tolerance=cfg.balance.tolerance, return_report=True)
    else:
        patches, report = build_training_set(train_pairs, cfg.plan, rng,
                                             return_report=True)
    if color_augment:
        patches = apply_color_augmentation(
            patches, rng, fraction=cfg.color_augment.fraction,
            max_slope=cfg.color_augment.max_slope,
            max_offset=cfg.color_augment.max_offset)
        lines.append("applied color augmentation")
    patch_manifest = {
        "seed": cfg.seed,
        "balanced": balanced,
        "color_augment": color_augment,
        "raw_count": report.raw_count,
        "excluded_count": report.excluded_count,
        "kept_count": report.kept_count,
        "discarded_count": report.discarded_count,
        "final_count": report.final_count,
        "batch_count": report.batch_count,
        "batch_size": cfg.plan.batch_size,
    }
    if report.class_fractions is not None:
        patch_manifest["class_fractions"] = list(report.class_fractions)
        lines.append(f"balanced pooled class fractions: "
                     f"{[round(v, 4) for v in report.class_fractions]}")
    (out / "patch_manifest.json").write_text(
        json.dumps(patch_manifest, indent=2) + "\n")
    lines.append(f"patch set: {report.final_count} patches in "
                 f"{report.batch_count} batches of {cfg.plan.batch_size}")
    stats = compute_channel_stats([img for img, _ in train_pairs])
    net = build_network(default_manifest(class_count=len(colormap)),
                        seed=cfg.seed)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed,
                               checkpoint_dir=str(out / "checkpoints"))
    best, history = train_model(net, patches, eval_pairs, stats, tcfg,
                                log=lines.append)
    save_model(best, out / "model.hsg", stats)
    history.to_csv(out / "history.csv")
    _write_run_log(out, cfg, lines)
    click.echo(f"trained {len(history)} epochs; best epoch "
               f"{history.best_epoch} with eval DSC {history.best_dsc:.4f}")
    click.echo(f"model written to {out / 'model.hsg'}")


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(),
              help="Directory for predicted label PNGs.")
@click.option("--force", is_flag=True)
@click.argument("images", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def infer(ctx, model_path, out, force, images):
    """Segment images with a trained model; print class-area fractions."""
    from .data import (CLASS_NAMES, decode_image, encode_image,
                       labelmap_to_colors, standardize)
    from .errors import ContractError
    from .metrics import class_area_fractions
    from .network import infer_logits, load_model

    cfg = _load_cfg(ctx)
    net, stats = load_model(model_path)
    if stats is None:
        raise ContractError(
            f"model {model_path} carries no channel statistics; retrain or "
            f"embed statistics to standardize inputs"
        )
    colormap = cfg.resolved_colormap()
    out_dir = _prepare_out(out, force) if out else None
    for path in images:
        img = decode_image(path)
        logits = infer_logits(net, standardize(img, stats))
        pred = logits.argmax(axis=2)
        fractions = class_area_fractions(pred, net.manifest.class_count)
        click.echo(_fraction_line(Path(path).name, fractions, CLASS_NAMES))
        if out_dir is not None:
            colored = labelmap_to_colors(pred.astype("uint8"), colormap)
            encode_image(colored, out_dir / f"{Path(path).stem}_pred.png")
    if out_dir is not None:
        _write_run_log(out_dir, cfg, [f"segmented {len(images)} images"])
        click.echo(f"predictions written to {out_dir}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@cli.command("eval")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="eval", show_default=True)
@click.option("--csv", "csv_path", default=None, type=click.Path(),
              help="Write a scores CSV here.")
@click.pass_context
def eval_cmd(ctx, model_path, data_dir, split, csv_path):
    """Score a model's full-image predictions against ground truth."""
    from .data import CLASS_NAMES
    from .errors import ContractError
    from .metrics import write_score_csv
    from .network import load_model
    from .training import evaluate_model

    cfg = _load_cfg(ctx)
    net, stats = load_model(model_path)
    if stats is None:
        raise ContractError(
            f"model {model_path} carries no channel statistics"
        )
    pairs = _load_split(data_dir, split, cfg.resolved_colormap())
    table = evaluate_model(net, pairs, stats)
    _print_score_table(f"network scores on {split} ({len(pairs)} images)",
                       table, CLASS_NAMES)
    if csv_path:
        write_score_csv(csv_path, [("cnn", table)], CLASS_NAMES)
        click.echo(f"scores written to {csv_path}")


# ---------------------------------------------------------------------------
# kmeans
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="eval", show_default=True)
@click.option("--space", default=None, type=click.Choice(["rgb", "lab"]),
              help="Feature space (default from config).")
@click.option("--pooled", is_flag=True, default=None,
              help="Cluster all images' pixels together.")
@click.option("--out", default=None, type=click.Path(),
              help="Directory for cluster label PNGs and scores.csv.")
@click.option("--force", is_flag=True)
@click.pass_context
def kmeans(ctx, data_dir, split, space, pooled, out, force):
    """Segment by k-means color clustering and score against ground truth."""
    import numpy as np

    from .baselines import run_kmeans_baseline
    from .data import CLASS_NAMES, encode_image, labelmap_to_colors
    from .metrics import write_score_csv

    cfg = _load_cfg(ctx)
    space = space or cfg.kmeans.space
    pooled = cfg.kmeans.pooled if pooled is None else pooled
    pairs = _load_split(data_dir, split, cfg.resolved_colormap())
    rng = np.random.default_rng(cfg.seed)
    result = run_kmeans_baseline(
        pairs, rng, space=space, k=cfg.kmeans.k, restarts=cfg.kmeans.restarts,
        max_iter=cfg.kmeans.max_iter, tol=cfg.kmeans.tol, pooled=pooled,
        objective=cfg.kmeans.objective)
    mode = "pooled" if pooled else "per-image"
    _print_score_table(f"k-means ({space}, {mode}) scores on {split} "
                       f"({len(pairs)} images)", result.table, CLASS_NAMES)
    if out:
        out_dir = _prepare_out(out, force)
        colormap = cfg.resolved_colormap()
        for i, label_map in enumerate(result.label_maps):
            colored = labelmap_to_colors(label_map.astype("uint8"), colormap)
            encode_image(colored, out_dir / f"kmeans_{space}_{i:03d}.png")
        write_score_csv(out_dir / "scores.csv",
                        [(f"kmeans_{space}", result.table)], CLASS_NAMES)
        _write_run_log(out_dir, cfg,
                       [f"k-means {space} {mode} mean DSC "
                        f"{result.table.mean_dsc:.4f}"])
        click.echo(f"cluster maps written to {out_dir}")


# ---------------------------------------------------------------------------
# threshold
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="eval", show_default=True)
@click.option("--out", default=None, type=click.Path())
@click.option("--force", is_flag=True)
@click.pass_context
def threshold(ctx, data_dir, split, out, force):
    """Segment by per-channel value ranges and score against ground truth."""
    from .baselines import default_threshold_rules, multiband_threshold
    from .data import CLASS_NAMES, encode_image, labelmap_to_colors
    from .metrics import score_predictions, write_score_csv

    cfg = _load_cfg(ctx)
    ruleset = cfg.threshold if cfg.threshold is not None \
        else default_threshold_rules()
    pairs = _load_split(data_dir, split, cfg.resolved_colormap())
    preds = [multiband_threshold(img, ruleset) for img, _ in pairs]
    table = score_predictions(preds, [lab for _, lab in pairs],
                              len(CLASS_NAMES))
    _print_score_table(f"threshold scores on {split} ({len(pairs)} images)",
                       table, CLASS_NAMES)
    if out:
        out_dir = _prepare_out(out, force)
        colormap = cfg.resolved_colormap()
        for i, pred in enumerate(preds):
            encode_image(labelmap_to_colors(pred, colormap),
                         out_dir / f"threshold_{i:03d}.png")
        write_score_csv(out_dir / "scores.csv", [("threshold", table)],
                        CLASS_NAMES)
        _write_run_log(out_dir, cfg,
                       [f"threshold mean DSC {table.mean_dsc:.4f}"])
        click.echo(f"threshold maps written to {out_dir}")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--height", default=2064, show_default=True)
@click.option("--width", default=1536, show_default=True)
@click.option("--extra-layers", default=0, show_default=True,
              help="Extra 3x3 trunk layers to include in the accounting.")
@click.pass_context
def analyze(ctx, height, width, extra_layers):
    """Print exact parameter and multiply-accumulate counts."""
    from .network import (count_macs, count_parameters, default_manifest,
                          manifest_with_extra_layers)

    manifest = default_manifest()
    if extra_layers:
        manifest = manifest_with_extra_layers(manifest, extra_layers)
    counts = count_parameters(manifest)
    macs = count_macs(manifest, height, width)
    click.echo(f"layers: {len(manifest.layers)}")
    click.echo(f"conv weights: {counts.conv_weights}")
    click.echo(f"batch-norm parameters: {counts.bn_params}")
    click.echo(f"total trainable parameters: {counts.total}")
    click.echo(f"multiply-accumulates for {height}x{width}: {macs}")


# ---------------------------------------------------------------------------
# quantify
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--group-a", "group_a", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of label PNGs (first group).")
@click.option("--group-b", "group_b", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of label PNGs (second group).")
@click.option("--cls", "cls_name", default="fibrosis", show_default=True,
              help="Class whose area fraction is compared.")
@click.pass_context
def quantify(ctx, group_a, group_b, cls_name):
    """Compare a class's area fraction between two groups (Welch's t-test)."""
    from .data import CLASS_NAMES, decode_image, labelmap_from_colors
    from .errors import ContractError
    from .metrics import class_area_fractions, welch_ttest

    cfg = _load_cfg(ctx)
    if cls_name not in CLASS_NAMES:
        raise ContractError(
            f"class must be one of {CLASS_NAMES}, got {cls_name!r}"
        )
    cls = CLASS_NAMES.index(cls_name)
    colormap = cfg.resolved_colormap()

    def group_fractions(path) -> list[float]:
        files = sorted(Path(path).glob("*.png"))
        if not files:
            raise ContractError(f"no label PNGs in {path}")
        out = []
        for f in files:
            labels = labelmap_from_colors(decode_image(f), colormap)
            out.append(float(class_area_fractions(labels,
                                                  len(CLASS_NAMES))[cls]))
        return out

    a = group_fractions(group_a)
    b = group_fractions(group_b)
    result = welch_ttest(a, b)
    click.echo(f"group A (n={result.n_a}): mean {cls_name} fraction "
               f"{result.mean_a:.4f}")
    click.echo(f"group B (n={result.n_b}): mean {cls_name} fraction "
               f"{result.mean_b:.4f}")
    if result.mean_a > 0:
        click.echo(f"ratio B/A: {result.mean_b / result.mean_a:.3f}")
    click.echo(f"Welch t = {result.t:.6f}, df = {result.df:.6f}, "
               f"two-sided p = {result.p_value:.3e}")


# ---------------------------------------------------------------------------
# augment-preview
# ---------------------------------------------------------------------------

@cli.command("augment-preview")
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", "labels_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.pass_context
def augment_preview(ctx, image_path, labels_path, out, force):
    """Write every geometric transform and sample color shifts for one pair."""
    from .data import (TRANSFORM_KINDS, color_adjust, decode_image,
                       encode_image, labelmap_from_colors, labelmap_to_colors,
                       transform)

    cfg = _load_cfg(ctx)
    colormap = cfg.resolved_colormap()
    img = decode_image(image_path)
    labels = labelmap_from_colors(decode_image(labels_path), colormap)
    out_dir = _prepare_out(out, force)
    plan = cfg.plan
    for kind in TRANSFORM_KINDS:
        timg, tlab = transform(img, labels, kind,
                               warp_amplitude=plan.warp_amplitude,
                               warp_period=plan.warp_period,
                               shear_factor=plan.shear_factor)
        encode_image(timg, out_dir / f"{kind}_image.png")
        encode_image(labelmap_to_colors(tlab, colormap),
                     out_dir / f"{kind}_labels.png")
    for channel in ("red", "blue"):
        for degree in (0.5, 1.0):
            shifted = color_adjust(img, channel, degree,
                                   max_slope=cfg.color_augment.max_slope,
                                   max_offset=cfg.color_augment.max_offset)
            encode_image(shifted,
                         out_dir / f"color_{channel}_{int(degree * 100)}.png")
    _write_run_log(out_dir, cfg, [f"previews for {Path(image_path).name}"])
    click.echo(f"previews written to {out_dir}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    """Run the CLI, mapping exceptions to documented exit codes."""
    from .errors import ContractError, NumericalError
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ContractError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 3
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
