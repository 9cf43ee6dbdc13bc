from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from string import Template

from ..errors import ConfigError

DEFAULT_DIR = Path(__file__).parent / "prompts"
REQUIRED = ("system", "caption", "extract", "refine")


@dataclass(frozen=True)
class PromptTemplates:
    """Prompt text files with ``$name`` placeholders, one file per stage."""

    texts: dict[str, str]

    @classmethod
    def load(cls, directory: str | os.PathLike | None = None) -> PromptTemplates:
        root = Path(directory) if directory is not None else DEFAULT_DIR
        if not root.is_dir():
            raise ConfigError(f"prompt template directory not found: {root}")
        texts = {}
        for name in REQUIRED:
            path = root / f"{name}.txt"
            if not path.is_file():
                raise ConfigError(f"missing prompt template: {path}")
            texts[name] = path.read_text(encoding="utf-8")
        return cls(texts)

    def render(self, name: str, **fields) -> str:
        try:
            return Template(self.texts[name]).substitute(**fields)
        except KeyError as exc:
            raise ConfigError(f"template {name!r} needs placeholder {exc.args[0]!r}") from None
