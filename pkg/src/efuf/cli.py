"""Command-line entry points.

    efuf <generate|score|curate|train|eval|prelim> --config <path> [--out <dir>] [--seed <int>]

Stages write under ``<out_dir>/<stage>/`` unless --out overrides, and locate
upstream artifacts the same way. ``efuf make-corpus`` bootstraps the bundled
synthetic corpus so the whole pipeline runs offline.
"""

from __future__ import annotations

import sys

import click

from . import pipeline
from .config import RunConfig
from .corpus import generate_corpus


def _load_config(config_path: str, seed: int | None) -> RunConfig:
    overrides = {}
    if seed is not None:
        overrides["seed"] = str(seed)
    return RunConfig.load(config_path, overrides=overrides)


def _stage_command(name: str, runner, summary_keys: tuple[str, ...]):
    @click.command(name=name)
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
    @click.option("--out", "out", default=None, type=click.Path(file_okay=False))
    @click.option("--seed", "seed", default=None, type=int)
    def command(config_path: str, out: str | None, seed: int | None):
        config = _load_config(config_path, seed)
        result = runner(config, out)
        parts = [f"{k}={result[k]}" for k in summary_keys if k in result]
        click.echo(f"{name}: wrote {result['out']}" + (f" ({', '.join(parts)})" if parts else ""))

    return command


@click.group()
def main():
    """Caption-hallucination curation, unlearning, and evaluation pipeline."""


main.add_command(_stage_command("generate", pipeline.run_generate, ("n_captions", "n_errors")))
main.add_command(_stage_command("score", pipeline.run_score, ("n_mentions", "n_dropped")))
main.add_command(_stage_command("curate", pipeline.run_curate, ("d_pos", "d_neg", "d_sent")))
main.add_command(_stage_command("train", pipeline.run_train, ("steps",)))


@main.command(name="eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", default=None, type=click.Path(file_okay=False))
@click.option("--seed", "seed", default=None, type=int)
def eval_command(config_path: str, out: str | None, seed: int | None):
    config = _load_config(config_path, seed)
    result = pipeline.run_eval(config, out)
    report = result["report"]["model"]
    click.echo(
        f"eval: wrote {result['out']} "
        f"(chair_s={report['chair_s']:.3f}, chair_i={report['chair_i']:.3f}, bleu1={report['bleu1']:.3f})"
    )


@main.command(name="prelim")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", default=None, type=click.Path(file_okay=False))
@click.option("--seed", "seed", default=None, type=int)
def prelim_command(config_path: str, out: str | None, seed: int | None):
    config = _load_config(config_path, seed)
    result = pipeline.run_prelim(config, out)
    stats = result["stats"]
    click.echo(f"prelim: wrote {result['out']} (t={stats['t_statistic']:.3f}, p={stats['p_value']:.3e})")


@main.command(name="make-corpus")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--images", "n_images", default=50, type=int, show_default=True)
@click.option("--seed", "seed", default=1234, type=int, show_default=True)
@click.option("--feature-dim", "d_img", default=16, type=int, show_default=True)
@click.option("--hallucination-rate", default=0.35, type=float, show_default=True)
def make_corpus_command(out: str, n_images: int, seed: int, d_img: int, hallucination_rate: float):
    """Generate a synthetic corpus (captions, gold labels, gt objects, split)."""
    manifest = generate_corpus(
        out, n_images=n_images, seed=seed, d_img=d_img, hallucination_rate=hallucination_rate
    )
    click.echo(f"make-corpus: wrote {manifest.root} ({n_images} images)")


if __name__ == "__main__":
    sys.exit(main())
