"""INI-style configuration with sections [phantom], [trainer], [shape_mae]
and [segmenter]. Values are Python literals (numbers, tuples, booleans);
anything else is kept as a string."""
import ast
import configparser
import dataclasses
from pathlib import Path

from .errors import ConfigError
from .phantom import AnatomyRanges, ViewConfig

SECTIONS = ("phantom", "trainer", "shape_mae", "segmenter")

_PHANTOM_EXTRA = {"n_subjects": 100, "seed": 0, "split_fraction": 0.8}


def _parse(value):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        low = value.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        if low in ("none", ""):
            return None
        return value.strip()


def load_config(path=None):
    """Read an INI file into {section: {key: value}}; missing file -> empty sections."""
    cfg = {s: {} for s in SECTIONS}
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}] (expected {', '.join(SECTIONS)})")
        cfg[section] = {k: _parse(v) for k, v in parser.items(section)}
    return cfg


def write_config(cfg, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in SECTIONS:
        values = cfg.get(section, {})
        parser[section] = {k: repr(v) if not isinstance(v, str) else v
                           for k, v in sorted(values.items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def phantom_settings(cfg):
    """(AnatomyRanges, ViewConfig, extras) from the [phantom] section."""
    section = dict(cfg.get("phantom", {}))
    range_keys = {f.name for f in dataclasses.fields(AnatomyRanges)}
    view_keys = {f.name for f in dataclasses.fields(ViewConfig)}
    unknown = set(section) - range_keys - view_keys - set(_PHANTOM_EXTRA)
    if unknown:
        raise ConfigError(f"[phantom]: unknown keys {sorted(unknown)}")
    ranges = AnatomyRanges(**{k: tuple(v) for k, v in section.items() if k in range_keys})
    view = ViewConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in section.items() if k in view_keys})
    extras = {k: section.get(k, v) for k, v in _PHANTOM_EXTRA.items()}
    return ranges.check(), view.check(), extras


def phantom_section(ranges, view, extras):
    out = dict(extras)
    out.update(dataclasses.asdict(ranges))
    out.update(dataclasses.asdict(view))
    return out
