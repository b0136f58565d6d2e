"""serst command line: dataset build, training, generation and evaluation.

Exit codes: 0 success, 1 input error, 2 internal error.
"""
import functools
import json
import logging
import os
import sys

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import numerics as nx
from dataset import build_dataset
from errors import InputError, SerstError
from fixtures import make_fixtures
from metrics import ReferenceEncoderEmbedder, build_embedder, evaluate_run
from pipeline import generate_files, load_models, sensitivity
from settings import initialize_config, load_config, require_paths
from trainer import load_diffusion, train_stage

logger = logging.getLogger("serst")
console = Console()

EXIT_INPUT = 1
EXIT_INTERNAL = 2
DEFAULT_CONFIG_PATH = "config/default.cfg"


# ======================================
# HELPER FUNCTIONS
# ======================================

def setup_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def guarded(fn):
    """Map the error families onto exit codes; messages go to stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_INPUT)
        except SerstError as e:
            click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_INTERNAL)
        except Exception as e:
            if nx.DEBUG:
                raise
            click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_INTERNAL)

    return wrapper


def get_config(ctx):
    """Load and validate the run config once per invocation, applying --seed."""
    obj = ctx.obj
    if "config" not in obj:
        overrides = {} if obj["seed"] is None else {"train.seed": str(obj["seed"])}
        cfg = load_config(obj["config_path"], overrides)
        if cfg.runtime.debug:
            nx.set_debug(True)
        obj["config"] = cfg
    return obj["config"]


def print_table(title, rows):
    table = Table(title=title)
    table.add_column("metric", style="cyan")
    table.add_column("value", justify="right")
    for key, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        table.add_row(str(key), "-" if value is None else str(value))
    console.print(table)


def write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# ======================================
# COMMANDS
# ======================================

@click.group()
@click.option("--config", "config_path", default=DEFAULT_CONFIG_PATH, show_default=True,
              help="key=value run configuration file.")
@click.option("--seed", type=int, default=None, help="Master seed (overrides train.seed).")
@click.option("--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, seed, verbose):
    """Dual-prompt latent-diffusion audio toolkit."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed)


@cli.command("init-config")
@click.pass_context
@guarded
def init_config_cmd(ctx):
    """Write the default configuration (or add keys missing from an existing one)."""
    path = ctx.obj["config_path"]
    changed = initialize_config(path)
    click.echo(f"{'wrote' if changed else 'unchanged'} {path}")


@cli.command("make-fixtures")
@click.option("--out", "out_dir", default="data/fixtures", show_default=True)
@click.pass_context
@guarded
def make_fixtures_cmd(ctx, out_dir):
    """Render the synthetic labelled-event corpus and its manifests."""
    seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else 0
    manifests = make_fixtures(out_dir, seed)
    print_table("fixtures", sorted(manifests.items()))


@cli.command("build-dataset")
@click.pass_context
@guarded
def build_dataset_cmd(ctx):
    """Segment, pad and energy-filter reference clips for every configured split."""
    cfg = get_config(ctx)
    splits = [(s, p) for s, p in (("train", cfg.paths.train_manifest), ("valid", cfg.paths.valid_manifest),
                                  ("test", cfg.paths.test_manifest)) if p]
    require_paths(*(p for _, p in splits))
    for split, manifest in splits:
        report = build_dataset(manifest, cfg.paths.dataset_dir, cfg, cfg.train.seed, split,
                               progress=cfg.runtime.progress)
        print_table(f"dataset: {split}", [
            ("entries", report["entries"]), ("segments", report["segments"]),
            ("clips kept", report["clips_kept"]), ("clips dropped", report["clips_dropped"]),
            ("events clamped", report["events_clamped"]), ("events skipped", report["events_skipped"]),
            ("entry errors", len(report["entry_errors"])),
        ] + [(f"label {k}", v) for k, v in report["label_histogram"].items()])


@cli.command("train")
@click.option("--stage", type=click.Choice(["codec", "diffusion"]), required=True)
@click.pass_context
@guarded
def train_cmd(ctx, stage):
    """Train one stage; the diffusion stage needs a trained codec."""
    cfg = get_config(ctx)
    require_paths(cfg.paths.train_manifest)
    result = train_stage(cfg, stage, cfg.train.seed)
    print_table(f"train: {stage}", [
        ("steps", result.steps), ("initial loss", result.initial_loss), ("final loss", result.final_loss),
        ("best checkpoint", result.best_checkpoint), ("best valid loss", result.best_valid_loss),
        ("log", result.log_path),
    ])


@cli.command("generate")
@click.option("--caption", required=True)
@click.option("--reference", "reference_path", required=True, help="2 s reference clip (16 kHz mono WAV).")
@click.option("--count", type=int, default=None, help="Number of samples (default generate.count).")
@click.option("--out", "out_dir", default=None, help="Output directory (default paths.output_dir).")
@click.pass_context
@guarded
def generate_cmd(ctx, caption, reference_path, count, out_dir):
    """Generate 10.24 s clips from a caption and a reference clip."""
    cfg = get_config(ctx)
    require_paths(reference_path)
    count = cfg.generate.count if count is None else count
    if count < 1:
        raise InputError(f"--count must be >= 1, got {count}")
    bundle = load_models(cfg)
    records = generate_files(bundle, caption, reference_path, count, cfg, cfg.train.seed,
                             out_dir or cfg.paths.output_dir)
    print_table("generate", [(r["file"], r["seed"]) for r in records])


@cli.command("evaluate")
@click.option("--generated", "generated_dir", default=None, help="Directory of generated WAVs.")
@click.option("--reference-index", default=None, help="index.jsonl of a built split (default: test, else valid).")
@click.option("--report", "report_path", default=None, help="Report path (default report_dir/metrics.json).")
@click.pass_context
@guarded
def evaluate_cmd(ctx, generated_dir, reference_index, report_path):
    """Score generated audio: FD, KL, Mel-Sim and embedding similarities."""
    cfg = get_config(ctx)
    generated_dir = generated_dir or cfg.paths.output_dir
    if reference_index is None:
        split = "test" if cfg.paths.test_manifest else "valid"
        reference_index = os.path.join(cfg.paths.dataset_dir, split, "index.jsonl")
    require_paths(generated_dir, reference_index)
    adapter = None
    if cfg.metrics.embedder == "reference_encoder":
        adapter, _ = load_diffusion(cfg)
    report_path = report_path or os.path.join(cfg.paths.report_dir, "metrics.json")
    report = evaluate_run(generated_dir, reference_index, cfg, build_embedder(cfg, adapter), report_path)
    print_table("evaluate", [(k, report[k]) for k in ("fd", "kl", "mel_sim_mean", "mel_sim_max",
                                                       "same_ref_cos_mean", "cross_ref_cos_mean")]
                + [("files", len(report["per_file"])), ("errors", len(report["errors"])), ("report", report_path)])


@cli.command("sensitivity")
@click.option("--caption", required=True)
@click.option("--reference", "reference_paths", multiple=True, required=True,
              help="Reference clip; pass at least two.")
@click.option("--repeats", type=int, default=2, show_default=True)
@click.option("--report", "report_path", default=None, help="Report path (default report_dir/sensitivity.json).")
@click.pass_context
@guarded
def sensitivity_cmd(ctx, caption, reference_paths, repeats, report_path):
    """Same- vs cross-reference similarity of style vectors and generated audio."""
    cfg = get_config(ctx)
    if len(reference_paths) < 2 or repeats < 2:
        raise InputError("sensitivity needs at least two references and --repeats >= 2")
    require_paths(*reference_paths)
    bundle = load_models(cfg)
    report = sensitivity(bundle, caption, list(reference_paths), repeats, cfg, cfg.train.seed,
                         ReferenceEncoderEmbedder(bundle.adapter))
    report_path = report_path or os.path.join(cfg.paths.report_dir, "sensitivity.json")
    write_json(report_path, report)
    print_table("sensitivity", [(k, v) for k, v in report.items() if k.endswith(("mean", "gap"))])


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
