"""Shipped experiment configs."""

from importlib import resources


def path(name):
    """Filesystem path of a shipped config, e.g. ``path("longtail_c4.toml")``."""
    return resources.files(__name__) / name
