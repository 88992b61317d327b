import sys
from pathlib import Path
from typing import Optional, Sequence

import click

from slotcon.config import ConfigFile, Settings, load_settings
from slotcon.utils import COLORS, col_lengths, format_line, status


@click.command("show")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("-s", "--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--hash", "show_hash", default=False, is_flag=True, help="Only print the configuration hash")
def config_show(config_path: Optional[str], overrides: Sequence[str], show_hash: bool):
    """
    Print the resolved configuration
    """
    settings = load_settings(config_path, overrides)
    if show_hash:
        return print(settings.config_hash())
    rows = [{"key": key, "value": value} for key, value in sorted(settings.to_flat().items())]
    lengths = col_lengths(rows, ["key", "value"])
    for row in rows:
        print(format_line(row, lengths))
    print(click.style("hash:", fg=COLORS["comment"]), settings.config_hash(), file=sys.stderr)


@click.command("init")
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("-s", "--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--force", default=False, is_flag=True)
def config_init(path: str, overrides: Sequence[str], force: bool):
    """
    Write a configuration file holding every key with its default value
    """
    if not force and Path(path).exists():
        click.secho(f"Configuration file `{path}` already exists", fg="red", file=sys.stderr)
        sys.exit(1)
    settings = load_settings(None, overrides) if overrides else Settings()
    ConfigFile(path).write(settings,
                           comment="slotcon configuration; `include: other.yml` layers this file over another")
    status("init", "Created", click.style(path, fg=COLORS["name"]))


def add_commands(cli: click.Group):
    cli.add_command(click.Group("config", [config_show, config_init], help="Inspect and create configuration files"))
