"""Instruction templates, loaded from editable text assets keyed by id.

The shipped defaults live in ``isorag/templates/*.txt``. Callers may point a
store at any directory to override wording; the template content is not
load-bearing for the security analysis (only the abstain phrase is, and that
is owned by :mod:`isorag.core`).
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict

DEFAULT_TEMPLATE_DIR = Path(__file__).parent / "templates"

KEYWORD_ANSWER_ID = "answer_with_keywords"
NO_RETRIEVAL_ID = "no_retrieval"


class TemplateStore:
    """Directory-backed instruction templates; ``<id>.txt`` maps to instruction_id."""

    def __init__(self, directory: Path | str = DEFAULT_TEMPLATE_DIR) -> None:
        self.directory = Path(directory)
        self._cache: Dict[str, str] = {}

    def get(self, instruction_id: str) -> str:
        if instruction_id not in self._cache:
            path = self.directory / f"{instruction_id}.txt"
            if not path.is_file():
                raise KeyError(f"no template named {instruction_id!r} in {self.directory}")
            self._cache[instruction_id] = path.read_text(encoding="utf-8").strip()
        return self._cache[instruction_id]


_default_store = TemplateStore()


def default_templates() -> TemplateStore:
    return _default_store
