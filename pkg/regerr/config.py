"""Run configuration: defaults <- JSON config file <- command-line flags."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import click
from click.core import ParameterSource
from pydantic import BaseModel

from .errors import ConfigError
from .manifest import get_library_version
from .utils import is_deterministic_env

logger = logging.getLogger(__name__)

# Options that locate the config itself and are never read from it
_NOT_CONFIGURABLE = {"config"}


class RunConfig(BaseModel):
    """Fully resolved options of one command invocation."""

    command: str
    options: Dict[str, Any]
    deterministic: bool = False
    library_version: str = "unknown"

    def get(self, name: str, default: Any = None) -> Any:
        return self.options.get(name, default)


def _normalize_key(key: str) -> str:
    return key.lstrip("-").replace("-", "_")


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Load a JSON object whose keys mirror flag names (dashes or underscores)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return {_normalize_key(str(k)): v for k, v in data.items()}  # pyright: ignore[reportUnknownVariableType, reportUnknownArgumentType]


def _coerce(param: click.Parameter, value: Any, ctx: click.Context) -> Any:
    """Run a config-file value through the option's click type."""
    if value is None:
        return None
    try:
        if param.multiple or (param.nargs != 1 and isinstance(value, (list, tuple))):
            return tuple(param.type.convert(v, param, ctx) for v in value)  # pyright: ignore[reportUnknownVariableType]
        return param.type.convert(value, param, ctx)
    except click.BadParameter as e:
        raise ConfigError(f"Invalid value for {param.name!r} in config file: {e.message}") from e


def resolve_options(
    ctx: click.Context,
    params: Dict[str, Any],
    config_path: Optional[Union[str, Path]] = None,
    exclude: Iterable[str] = (),
) -> Dict[str, Any]:
    """Merge click parameters with a config file.

    A file value replaces a parameter only when that parameter was not given
    on the command line (click's parameter source is DEFAULT).
    """
    skipped = set(exclude) | _NOT_CONFIGURABLE
    resolved = {k: v for k, v in params.items() if k not in skipped}
    if config_path is None:
        return resolved

    by_name = {p.name: p for p in ctx.command.params if p.name}
    # "--report" and "report_path" both address the option stored as report_path
    aliases = {_normalize_key(opt): p.name for p in by_name.values() for opt in p.opts if p.name}
    file_values = {aliases.get(k, k): v for k, v in read_config_file(config_path).items()}
    unknown = sorted(set(file_values) - set(resolved))
    if unknown:
        raise ConfigError(f"Unknown option(s) in {config_path}: {', '.join(unknown)}")
    for name, value in file_values.items():
        source = ctx.get_parameter_source(name)
        if source in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP, None):
            resolved[name] = _coerce(by_name[name], value, ctx)
    return resolved


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]  # pyright: ignore[reportUnknownVariableType]
    return value


def make_run_config(command: str, options: Dict[str, Any]) -> RunConfig:
    return RunConfig(
        command=command,
        options={k: _jsonable(v) for k, v in options.items()},
        deterministic=is_deterministic_env(),
        library_version=get_library_version(),
    )


def write_run_config(run_config: RunConfig, out_dir: Union[str, Path], name: str = "config.json") -> Path:
    """Write the resolved config under ``out_dir``; called before any work starts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(run_config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("resolved config written to %s", path)
    return path
