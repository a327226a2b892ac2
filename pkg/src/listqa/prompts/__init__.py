"""Plain-text prompt templates with ``{{SLOT}}`` placeholders."""
from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

_SLOT_RE = re.compile(r"\{\{([A-Z_]+)\}\}")


class TemplateError(ValueError):
    pass


def load_template(name: str, directory: str | Path | None = None) -> str:
    """Load ``<name>.txt`` from ``directory`` if it has one, else the packaged default."""
    if directory is not None:
        path = Path(directory) / f"{name}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def slots(template: str) -> set[str]:
    return set(_SLOT_RE.findall(template))


def fill_template(template: str, **values: str) -> str:
    missing = slots(template) - values.keys()
    if missing:
        raise TemplateError(f"unfilled template slots: {sorted(missing)}")
    # single pass so slot-like text inside values is left alone
    return _SLOT_RE.sub(lambda m: str(values[m.group(1)]), template)
