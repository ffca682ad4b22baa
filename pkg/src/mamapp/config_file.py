"""Plain-text run configuration: one ``key = value`` per line, ``#`` starts a comment.

Keys are the :class:`~mamapp.model.MamAppConfig` fields plus ``data``, ``out``
and ``workers``. Values are Python-style literals (``1e-3``, ``64, 64, 3``,
``true``, ``none``); anything else is kept as a string. Unknown keys are an
error and missing keys take their defaults.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import ConfigError, MamAppConfig

RUN_KEYS = ("data", "out", "workers")
_WORDS = {"true": True, "false": False, "none": None, "null": None}


@dataclass
class RunConfig:
    model: MamAppConfig = field(default_factory=MamAppConfig)
    data: Optional[str] = None
    out: Optional[str] = None
    workers: int = 1


def parse_value(text: str):
    text = text.strip()
    if text.lower() in _WORDS:
        return _WORDS[text.lower()]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(value)
    return values


def build_run_config(values: dict) -> RunConfig:
    """Split raw values into model fields and run fields, rejecting unknown keys."""
    model_keys = {f.name for f in dataclasses.fields(MamAppConfig)}
    unknown = sorted(set(values) - model_keys - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model_values = {k: v for k, v in values.items() if k in model_keys}
    try:
        model = MamAppConfig(**model_values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    run = RunConfig(model=model,
                    data=None if values.get("data") is None else str(values["data"]),
                    out=None if values.get("out") is None else str(values["out"]),
                    workers=int(values.get("workers", 1)))
    if run.workers < 1:
        raise ConfigError("workers must be >= 1")
    return run


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_run_config(parse_config_text(text, str(path)))


def dump_run_config(run: RunConfig) -> str:
    lines = []
    for k, v in run.model.to_dict().items():
        lines.append(f"{k} = {_format(v)}")
    for k in RUN_KEYS:
        v = getattr(run, k)
        if v is not None:
            lines.append(f"{k} = {_format(v)}")
    return "\n".join(lines) + "\n"


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, str):
        return repr(v)
    return repr(v)
