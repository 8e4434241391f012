# ranklab/cli/deps.py
"""
Shared command-line plumbing: every RunConfig leaf field becomes a
`--section.field` flag, applied on top of an optional `--config` JSON file
and validated as a whole.
"""
import argparse
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import BaseModel

from core.errors import ArtifactError
from schemas.config import RunConfig

_SEP = "__"


def _sections() -> Dict[str, type]:
    return {
        name: field.annotation
        for name, field in RunConfig.model_fields.items()
        if isinstance(field.annotation, type) and issubclass(field.annotation, BaseModel)
    }


def _scalars() -> Iterable[str]:
    return [name for name in RunConfig.model_fields if name not in _sections()]


def _parse_value(raw: str) -> Any:
    if "," in raw:
        return [part.strip() for part in raw.split(",")]
    if raw.lower() in ("none", "null"):
        return None
    return raw


def add_section_flags(parser: argparse.ArgumentParser, section: str) -> None:
    model = _sections()[section]
    group = parser.add_argument_group(f"{section} options")
    for name, field in model.model_fields.items():
        group.add_argument(
            f"--{section}.{name}",
            dest=f"{section}{_SEP}{name}",
            default=None,
            metavar=name.upper(),
            help=f"default: {field.default!r}" if field.default is not None else None,
        )


def add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration file")
    for name in _scalars():
        parser.add_argument(f"--{name}", dest=name, default=None)
    for section in _sections():
        add_section_flags(parser, section)


def flag_overrides(args: argparse.Namespace, sections: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """Nested dict of the flags the user actually passed."""
    wanted = set(sections) if sections is not None else None
    nested: Dict[str, Any] = {}
    for key, raw in vars(args).items():
        if raw is None or _SEP not in key:
            continue
        section, field = key.split(_SEP, 1)
        if wanted is not None and section not in wanted:
            continue
        nested.setdefault(section, {})[field] = _parse_value(raw)
    return nested


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(args: argparse.Namespace) -> RunConfig:
    base: Dict[str, Any] = {}
    if getattr(args, "config", None) is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ArtifactError(path, "config file not found")
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ArtifactError(path, f"invalid JSON ({e})") from e

    overrides = flag_overrides(args)
    for name in _scalars():
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = _parse_value(value)
    return RunConfig.model_validate(_merge(base, overrides))
