"""Bundled run configs."""

from importlib import resources


def list_scenarios():
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def scenario_path(name: str):
    """Filesystem path of a bundled scenario; raises KeyError for unknown names."""
    if name not in list_scenarios():
        raise KeyError(f"unknown scenario {name!r}; bundled: {', '.join(list_scenarios())}")
    return resources.files(__name__) / f"{name}.json"
