"""Run configuration: a sectioned INI file validated into pydantic models.

Keys are exact-match and case-sensitive; unknown sections or keys are errors that
name their location (`engine.generations: ...`). Relative paths resolve against the
directory of the config file.
"""

import configparser
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ValidationError

from .errors import ConfigError
from .evaluation import ProblemSpec
from .engine import EngineConfig
from .expression import FitBudget
from .idea_tree import TreeConfig
from .llm_gateway import DEFAULT_API_KEY_ENV

logger = logging.getLogger(__name__)

Model = TypeVar("Model", bound=BaseModel)


class BackendConfig(BaseModel):
    mode: Literal["live", "scripted", "replay"] = "scripted"
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    embed_mode: Literal["local", "remote"] = "local"
    embed_model: str = "text-embedding-3-small"
    api_key_env: str = DEFAULT_API_KEY_ENV
    fixture: Optional[str] = None
    strict: bool = False
    timeout: float = 60.0
    retries: int = 3
    max_inflight: int = 4
    max_response_chars: int = 20000


class PromptsConfig(BaseModel):
    directory: Optional[str] = None


class OutputConfig(BaseModel):
    directory: str = "runs/latest"


class LibraryConfig(BaseModel):
    snapshot_eps: float = 0.3
    snapshot_min_pts: int = 2
    seed_from: Optional[str] = None


class ReportConfig(BaseModel):
    figures: bool = True


class RunConfig(BaseModel):
    problem: ProblemSpec
    engine: EngineConfig
    backend: BackendConfig
    prompts: PromptsConfig
    output: OutputConfig
    library: LibraryConfig
    report: ReportConfig
    source_path: Optional[str] = None


SECTIONS = ("problem", "engine", "tree", "fit", "library", "backend", "prompts", "output", "report")
LIST_KEYS = {("problem", "params"), ("problem", "initial_state"), ("tree", "widths")}
PATH_KEYS = {
    ("problem", "dataset_path"): "file",
    ("backend", "fixture"): "file",
    ("prompts", "directory"): "dir",
    ("library", "seed_from"): "dir",
    ("output", "directory"): None,
}


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _build(model: Type[Model], section: str, values: Dict[str, Any], **nested: Any) -> Model:
    """Validate one section, reporting errors as section.key."""
    unknown = [key for key in values if key not in model.model_fields or key in nested]
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")
    try:
        return model(**values, **nested)
    except ValidationError as error:
        first = error.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        where = f"{section}.{location}" if location else section
        raise ConfigError(f"{where}: {first['msg']}") from error


def _problem_values(items: Dict[str, str]) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    ranges: Dict[str, List[str]] = {}
    ood_ranges: Dict[str, List[str]] = {}
    for key, raw in items.items():
        if key.startswith("range."):
            ranges[key[len("range."):]] = _split_list(raw)
        elif key.startswith("ood_range."):
            ood_ranges[key[len("ood_range."):]] = _split_list(raw)
        elif ("problem", key) in LIST_KEYS:
            values[key] = _split_list(raw)
        else:
            values[key] = raw
    if ranges:
        values["ranges"] = ranges
    if ood_ranges:
        values["ood_ranges"] = ood_ranges
    return values


def _operator_mix(raw: str) -> Dict[str, str]:
    mix = {}
    for pair in _split_list(raw):
        name, separator, probability = pair.partition(":")
        if not separator:
            raise ConfigError(f"engine.operator_mix: expected name:probability pairs, got {pair!r}")
        mix[name.strip()] = probability.strip()
    return mix


def _resolve_paths(sections: Dict[str, Dict[str, Any]], base: Path):
    for (section, key), kind in PATH_KEYS.items():
        value = sections.get(section, {}).get(key)
        if not value:
            continue
        path = Path(value).expanduser()
        if not path.is_absolute():
            path = (base / path).resolve()
        if kind == "file" and not path.is_file():
            raise ConfigError(f"{section}.{key}: file not found: {path}")
        if kind == "dir" and not path.is_dir():
            raise ConfigError(f"{section}.{key}: directory not found: {path}")
        sections[section][key] = str(path)


def read_sections(config_path: str) -> Dict[str, Dict[str, Any]]:
    """Raw section -> key -> value mapping with list keys split and paths resolved."""
    path = Path(config_path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_file(f)
    except configparser.Error as error:
        raise ConfigError(f"{config_path}: {error}") from error

    sections: Dict[str, Dict[str, Any]] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{name}: unknown section")
        items = dict(parser.items(name))
        if name == "problem":
            sections[name] = _problem_values(items)
            continue
        values: Dict[str, Any] = {}
        for key, raw in items.items():
            if (name, key) in LIST_KEYS:
                values[key] = _split_list(raw)
            elif (name, key) == ("engine", "operator_mix"):
                values[key] = _operator_mix(raw)
            else:
                values[key] = raw
        sections[name] = values
    _resolve_paths(sections, path.parent.resolve())
    return sections


def load_config(config_path: str) -> RunConfig:
    sections = read_sections(config_path)
    section = lambda name: sections.get(name, {})  # noqa: E731

    tree = _build(TreeConfig, "tree", section("tree"))
    fit = _build(FitBudget, "fit", section("fit"))
    engine = _build(EngineConfig, "engine", section("engine"), tree=tree, fit=fit)
    backend = _build(BackendConfig, "backend", section("backend"))
    if backend.mode == "scripted" and not backend.fixture:
        raise ConfigError("backend.fixture: scripted mode needs a fixture file")

    config = RunConfig(
        problem=_build(ProblemSpec, "problem", section("problem")),
        engine=engine,
        backend=backend,
        prompts=_build(PromptsConfig, "prompts", section("prompts")),
        output=_build(OutputConfig, "output", section("output")),
        library=_build(LibraryConfig, "library", section("library")),
        report=_build(ReportConfig, "report", section("report")),
        source_path=str(Path(config_path).resolve()),
    )
    logger.info(f"Loaded configuration from {config_path}")
    return config


def load_report_settings(config_path: str) -> Tuple[LibraryConfig, ReportConfig]:
    """[library] and [report] of a config snapshot, without touching referenced paths."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(config_path, encoding='utf-8'):
        return LibraryConfig(), ReportConfig()
    library = dict(parser.items("library")) if parser.has_section("library") else {}
    report = dict(parser.items("report")) if parser.has_section("report") else {}
    return _build(LibraryConfig, "library", library), _build(ReportConfig, "report", report)


def write_resolved(config_path: str, destination: Path):
    """Config snapshot with every path made absolute, so a run directory stands alone."""
    path = Path(config_path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, 'r', encoding='utf-8') as f:
        parser.read_file(f)
    base = path.parent.resolve()
    for (section, key) in PATH_KEYS:
        if parser.has_option(section, key):
            value = Path(parser.get(section, key)).expanduser()
            if not value.is_absolute():
                parser.set(section, key, str((base / value).resolve()))
    with open(destination, 'w', encoding='utf-8') as f:
        parser.write(f)
