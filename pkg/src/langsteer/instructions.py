"""Template grammar splitting an instruction into its pick and place phrases."""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass
from importlib import resources

ARTICLES = ("the", "a", "an")
_ARTICLE_RE = re.compile(r"^(?:(?:the|a|an)\s+)+", re.IGNORECASE)
_SLOT_RE = re.compile(r"\{(pick|place)\}")


class ParseError(ValueError):
    def __init__(self, raw: str, nearest: str, score: float):
        super().__init__(f"no template matches {raw!r}; nearest is {nearest!r} (similarity {score:.2f})")
        self.raw = raw
        self.nearest = nearest
        self.score = score


@dataclass(frozen=True)
class Instruction:
    raw: str
    pick: str
    place: str
    template_id: str


@dataclass(frozen=True)
class Template:
    id: str
    pattern: str
    pick_format: str = "{pick}"

    def regex(self) -> re.Pattern:
        parts = []
        for tok in _SLOT_RE.split(self.pattern):
            if tok in ("pick", "place"):
                parts.append(f"(?P<{tok}>.+?)")
                continue
            words = tok.split()
            lit = []
            for w in words:
                # any article may stand in for the one written in the template
                lit.append(r"(?:the|a|an)" if w in ARTICLES else re.escape(w))
            piece = r"\s+".join(lit)
            if tok.startswith(" "):
                piece = r"\s+" + piece
            if tok.endswith(" ") and words:
                piece = piece + r"\s+"
            parts.append(piece)
        return re.compile("^" + "".join(parts) + "$", re.IGNORECASE)

    def render(self, pick: str, place: str) -> str:
        return self.pattern.format(pick=pick, place=place)


def normalize(raw: str) -> str:
    return " ".join(raw.strip().rstrip(".!").split())


def trim_articles(phrase: str) -> str:
    return _ARTICLE_RE.sub("", phrase.strip()).strip()


class TemplateGrammar:
    def __init__(self, templates: list[Template], version: int = 1):
        if not templates:
            raise ValueError("grammar needs at least one template")
        self.templates = list(templates)
        self.version = version
        self._compiled = [(t, t.regex()) for t in self.templates]

    @classmethod
    def from_json(cls, text: str) -> "TemplateGrammar":
        d = json.loads(text)
        return cls([Template(**t) for t in d["templates"]], d.get("version", 1))

    @classmethod
    def default(cls) -> "TemplateGrammar":
        return cls.from_json(resources.files("langsteer").joinpath("data/grammar.json").read_text())

    def matches(self, raw: str) -> list[Instruction]:
        text = normalize(raw)
        out = []
        for t, rx in self._compiled:
            m = rx.match(text)
            if m:
                pick = trim_articles(m.group("pick"))
                place = trim_articles(m.group("place"))
                if pick and place:
                    out.append(Instruction(raw, t.pick_format.format(pick=pick), place, t.id))
        return out

    def parse(self, raw: str) -> Instruction:
        found = self.matches(raw)
        if found:
            return found[0]
        text = normalize(raw).lower()
        scored = [(difflib.SequenceMatcher(None, text, t.pattern).ratio(), t.pattern) for t in self.templates]
        score, nearest = max(scored)
        raise ParseError(raw, nearest, score)


_DEFAULT: TemplateGrammar | None = None


def parse(raw: str) -> Instruction:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TemplateGrammar.default()
    return _DEFAULT.parse(raw)
