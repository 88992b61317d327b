import sys
from typing import Any, Dict, List

import click

COLORS = {
    "name": "green",
    "value": "blue",
    "error": "yellow",
    "path": "bright_white",
    "stage": "bright_white",
    "epoch": "magenta",
    "term": "cyan",
    "pass": "green",
    "fail": "red",
    "comment": "white",
}


def status(stage: str, *parts: Any, quiet: bool = False):
    if quiet:
        return
    print(click.style(f"{stage:>8}:", fg=COLORS["stage"]), *parts, file=sys.stderr)


def warn(message: str):
    click.secho(f"WARNING: {message}", fg="yellow", file=sys.stderr)


def fmt_path(path: Any) -> str:
    return click.style(f"[{path}]", fg=COLORS["path"])


def fmt_value(value: Any, key: str = "value") -> str:
    if isinstance(value, float):
        value = f"{value:.6g}"
    return click.style(str(value), fg=COLORS.get(key))


def _cell(value: Any) -> str:
    return "" if value is None else str(value)


def col_lengths(rows: List[Dict[str, Any]], cols: List[str]) -> Dict[str, int]:
    return {col: max([len(col)] + [len(_cell(row.get(col))) for row in rows]) for col in cols}


def format_line(row: Dict[str, Any], lengths: Dict[str, int], bold: bool = False) -> str:
    col_strs = []
    for col, width in lengths.items():
        if width == 0:
            continue
        text = _cell(row.get(col))
        if col == "status":
            fg = COLORS["pass"] if text == "PASS" else COLORS["fail"]
        else:
            fg = COLORS.get(col, None)
        col_strs.append(click.style(text.ljust(width), fg=fg, bold=bold))
    return "  ".join(col_strs)
