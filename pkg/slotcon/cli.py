import sys
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import click

from slotcon._version import __version__
from slotcon.commands import add_config_commands
from slotcon.config import Settings, load_settings
from slotcon.errors import SlotconError
from slotcon.manifest import RunManifest
from slotcon.runs import run_detect, run_eval, run_report, run_synth, run_train
from slotcon.utils import COLORS, col_lengths, fmt_path, format_line, status


class AliasedGroup(click.Group):
    def get_command(self, ctx, cmd_name):
        aliases = {
            "c": "config",
            "d": "detect",
            "e": "eval",
            "g": "gradcheck",
            "r": "report",
            "s": "synth",
            "t": "train",
        }
        cmd_name = aliases.get(cmd_name, cmd_name)
        return click.Group.get_command(self, ctx, cmd_name)

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except SlotconError as e:
            click.secho(f"error: {e}", fg="red", file=sys.stderr)
            ctx.exit(1)
        except Exception as e:
            if ctx.obj and ctx.obj.get("debug"):
                traceback.print_exc()
            click.secho(f"internal error: {type(e).__name__}: {e}", fg="red", file=sys.stderr)
            ctx.exit(2)


def config_options(fn):
    options = [
        click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML configuration file"),
        click.option("-s", "--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a configuration key, e.g. -s train.epochs=5"),
        click.option("--workers", type=int, default=None, help="Threads for scene generation and augmentation"),
        click.option("--quiet", default=False, is_flag=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def resolve_settings(config_path: Optional[str], overrides: Sequence[str], workers: Optional[int] = None,
                     seed: Optional[int] = None) -> Settings:
    extra = list(overrides)
    if workers is not None:
        extra.append(f"train.workers={workers}")
    if seed is not None:
        extra.append(f"train.seed={seed}")
    return load_settings(config_path, extra)


@contextmanager
def recorded(command: str, out_dir: Path, inputs: Sequence[str] = (), settings: Optional[Settings] = None,
             config_path: Optional[str] = None, seed: Optional[int] = None,
             quiet: bool = False) -> Iterator[List[Path]]:
    """Yields a list the command fills with its outputs; the manifest is written on success."""
    manifest = RunManifest(command=command, config_path=config_path, seed=seed,
                           config_hash=settings.config_hash() if settings is not None else None,
                           inputs=[str(p) for p in inputs])
    outputs: List[Path] = []
    yield outputs
    path = manifest.write(out_dir, outputs)
    status("manifest", "wrote", fmt_path(path), quiet=quiet)


@click.group(cls=AliasedGroup)
@click.option("--debug", default=False, is_flag=True, help="Print tracebacks of internal errors")
@click.version_option(version=__version__)
@click.pass_context
def cli(ctx: click.Context, debug: bool):
    """
    Train and evaluate parking-slot junction detectors with balanced contrastive learning
    """
    ctx.obj = {"debug": debug}


@cli.command()
@config_options
@click.option("--seed", type=int, default=None, help="Dataset seed (defaults to train.seed)")
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), required=True)
def synth(config_path: Optional[str], overrides: Sequence[str], workers: Optional[int], quiet: bool,
          seed: Optional[int], out_dir: str):
    """
    Generate a synthetic train/test dataset with labels
    """
    settings = resolve_settings(config_path, overrides, workers, seed)
    seed = settings.train.seed
    with recorded("synth", Path(out_dir), [], settings, config_path, seed, quiet) as outputs:
        outputs.extend(run_synth(settings, out_dir, seed, workers=settings.train.workers, quiet=quiet))


@cli.command()
@config_options
@click.option("--seed", type=int, default=None, help="Training seed (defaults to train.seed)")
@click.option("-d", "--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a training checkpoint")
def train(config_path: Optional[str], overrides: Sequence[str], workers: Optional[int], quiet: bool,
          seed: Optional[int], data_dir: str, out_dir: str, resume: Optional[str]):
    """
    Train a model and write its checkpoint and per-epoch metrics
    """
    settings = resolve_settings(config_path, overrides, workers, seed)
    inputs = [data_dir] + ([resume] if resume else [])
    with recorded("train", Path(out_dir), inputs, settings, config_path, settings.train.seed, quiet) as outputs:
        outputs.extend(run_train(settings, data_dir, out_dir, resume=resume, quiet=quiet))


@cli.command()
@click.argument("images", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("-s", "--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override detection parameters, e.g. -s detect.conf_threshold=0.6")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True, help="Detections JSON file")
@click.option("--quiet", default=False, is_flag=True)
def detect(images: str, checkpoint: str, overrides: Sequence[str], out: str, quiet: bool):
    """
    Detect junctions and parking slots in images
    """
    out_path = Path(out)
    with recorded("detect", out_path.parent, [checkpoint, images], quiet=quiet) as outputs:
        outputs.extend(run_detect(checkpoint, images, out_path, overrides, quiet=quiet))


@cli.command("eval")
@click.argument("detections", type=click.Path(exists=True, dir_okay=False))
@click.argument("labels", type=click.Path(exists=True))
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Also report representation geometry of this model on the labeled images")
@click.option("--rmse-threshold", type=float, default=None,
              help="Match threshold in pixels (defaults to 10 px per 600 px of image size)")
@click.option("--quiet", default=False, is_flag=True)
def evaluate(detections: str, labels: str, out_dir: str, checkpoint: Optional[str], rmse_threshold: Optional[float],
             quiet: bool):
    """
    Compute slot precision and recall (and optionally embedding geometry)
    """
    inputs = [detections, labels] + ([checkpoint] if checkpoint else [])
    with recorded("eval", Path(out_dir), inputs, quiet=quiet) as outputs:
        written, metrics = run_eval(detections, labels, out_dir, checkpoint, rmse_threshold, quiet=quiet)
        outputs.extend(written)
    print(f"precision {metrics['precision']:.4f}  recall {metrics['recall']:.4f}")


@cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--configs", type=int, default=20, help="Random configurations per check")
def gradcheck(seed: int, configs: int):
    """
    Check every layer and loss gradient against central finite differences
    """
    from slotcon.gradcheck import run_gradchecks

    rows = run_gradchecks(seed, configs)
    table = [row.as_dict() for row in rows]
    cols = ["check", "kind", "configs", "max_rel_error", "status"]
    lengths = col_lengths(table, cols)
    print(format_line({c: c for c in cols}, lengths, bold=True))
    for row in table:
        print(format_line(row, lengths))
    failed = [row.name for row in rows if not row.passed]
    if failed:
        click.secho(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}", fg=COLORS["fail"],
                    file=sys.stderr)
        sys.exit(1)


@cli.command()
@click.argument("metrics", type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--quiet", default=False, is_flag=True)
def report(metrics: str, embeddings: Optional[str], out_dir: str, quiet: bool):
    """
    Write the metrics table and the unit-circle embedding scatter
    """
    inputs = [metrics] + ([embeddings] if embeddings else [])
    with recorded("report", Path(out_dir), inputs, quiet=quiet) as outputs:
        outputs.extend(run_report(metrics, embeddings, out_dir, quiet=quiet))


add_config_commands(cli)

if __name__ == "__main__":
    cli()
