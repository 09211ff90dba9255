"""Human-readable key = value config files.

One setting per line, values in JSON (so lists and strings work), '#'
comments and blank lines ignored.  The same format configures corpus
generation, the model, and training; CLI flags override file values.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def format_config(values: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in values.items())


def save_config(path, values: dict) -> None:
    Path(path).write_text(format_config(values), encoding="utf-8")
