"""Built-in module library and bundled agent definitions."""

from importlib import resources
from pathlib import Path

from .catalog import CATALOG, RECENT_ARITY, BuiltinCatalogEntry, BuiltModule, build_module, placeholder_violations
from .modules import MetaReport, current_autobiography, parse_cleaner_response, ring_successor

BUNDLED = ("plantbot", "alter3")


def data_path(name: str) -> Path:
    """Path of a bundled data file (agent definitions, scenarios, rules)."""
    return Path(str(resources.files(__package__) / "data" / name))


def bundled_agent(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"no bundled agent {name!r}; choose from {BUNDLED}")
    return data_path(f"{name}.json")


def bundled_scenario(name: str) -> Path:
    return data_path(f"{name}_scenario.json")


__all__ = [
    "CATALOG",
    "RECENT_ARITY",
    "BUNDLED",
    "BuiltinCatalogEntry",
    "BuiltModule",
    "MetaReport",
    "build_module",
    "bundled_agent",
    "bundled_scenario",
    "current_autobiography",
    "data_path",
    "parse_cleaner_response",
    "placeholder_violations",
    "ring_successor",
]
