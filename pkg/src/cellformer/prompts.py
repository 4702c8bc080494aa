"""Render table cells into natural-language sentences via per-feature
templates.

A template is literal text around exactly one "{value}" placeholder.
Rendering substitutes the canonical text of the cell value; a Missing
free-text cell renders to the empty sentence and is flagged absent so the
model can mask it at pooling time.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .data import CellValue, FeatureSpec, TableSchema, format_number
from .errors import DataError, TemplateError

PLACEHOLDER = "{value}"


@dataclass(frozen=True)
class Segment:
    """Either a literal run of text or the single value placeholder."""

    text: str | None = None  # None marks the placeholder

    @property
    def is_placeholder(self) -> bool:
        return self.text is None


PLACEHOLDER_SEGMENT = Segment(None)


@dataclass(frozen=True)
class Template:
    segments: tuple[Segment, ...]

    @property
    def source(self) -> str:
        return "".join(
            PLACEHOLDER if s.is_placeholder else s.text for s in self.segments
        )

    def fill(self, value_text: str) -> str:
        return "".join(
            value_text if s.is_placeholder else s.text for s in self.segments
        )


def parse_template(source: str) -> Template:
    """Split template source around its single "{value}" placeholder.

    Whitespace is preserved verbatim; empty literal runs are dropped, so
    parse(t.source) round-trips.
    """
    if not source:
        raise TemplateError("template source is empty")
    count = source.count(PLACEHOLDER)
    if count != 1:
        raise TemplateError(
            f"template must contain exactly one {PLACEHOLDER} placeholder, "
            f"found {count}: {source!r}"
        )
    before, after = source.split(PLACEHOLDER)
    segments: list[Segment] = []
    if before:
        segments.append(Segment(before))
    segments.append(PLACEHOLDER_SEGMENT)
    if after:
        segments.append(Segment(after))
    return Template(segments=tuple(segments))


def default_template(feature_name: str) -> str:
    return f"The {feature_name} of the patient is {PLACEHOLDER}."


@lru_cache(maxsize=4096)
def _template_for(source: str) -> Template:
    return parse_template(source)


def template_for(spec: FeatureSpec) -> Template:
    return _template_for(spec.template or default_template(spec.name))


def canonical_value_text(cell: CellValue) -> str:
    if cell.kind == "continuous":
        return format_number(cell.value)
    if cell.kind == "binary":
        return "yes" if cell.value else "no"
    return str(cell.value)


def render(spec: FeatureSpec, cell: CellValue) -> tuple[str, bool]:
    """One cell -> (sentence, present).

    Missing free-text renders to ("", False); Missing cells of any other
    modality must have been imputed before rendering and are an error.
    """
    if cell.is_missing:
        if spec.modality != "free_text":
            raise DataError(
                f"feature {spec.name!r}: missing {spec.modality} cell reached "
                "render; impute first"
            )
        return "", False
    if cell.kind != spec.modality:
        raise DataError(
            f"feature {spec.name!r}: cell modality {cell.kind!r} does not "
            f"match declared {spec.modality!r}"
        )
    return template_for(spec).fill(canonical_value_text(cell)), True


@dataclass(frozen=True)
class PromptedSample:
    """All m rendered sentences of one record plus their presence flags."""

    prompts: tuple[str, ...]
    presence: tuple[bool, ...]

    def __post_init__(self):
        if len(self.prompts) != len(self.presence):
            raise DataError("prompts and presence lengths differ")


def render_sample(schema: TableSchema, cells) -> PromptedSample:
    if len(cells) != schema.num_features:
        raise DataError(
            f"expected {schema.num_features} cells, got {len(cells)}"
        )
    prompts = []
    presence = []
    for spec, cell in zip(schema.features, cells):
        try:
            sentence, present = render(spec, cell)
        except DataError as exc:
            raise DataError(f"column {spec.name!r}: {exc}") from None
        prompts.append(sentence)
        presence.append(present)
    return PromptedSample(prompts=tuple(prompts), presence=tuple(presence))


# ---------------------------------------------------------------------------
# Prompt dump file: one prompt per line as "<row>\t<col>\t<escaped text>".
# Tabs, newlines and backslashes inside the prompt are backslash-escaped so
# the file stays line-oriented while round-tripping the text exactly.

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}


def escape_prompt(text: str) -> str:
    for raw, esc in _ESCAPES.items():
        text = text.replace(raw, esc)
    return text


def unescape_prompt(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
            if mapped is not None:
                out.append(mapped)
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def write_prompts(entries, path) -> None:
    """entries: iterable of (row_index, col_index, prompt_text); present
    (non-empty) prompts only."""
    with open(path, "w", encoding="utf-8") as fh:
        for row, col, text in entries:
            fh.write(f"{row}\t{col}\t{escape_prompt(text)}\n")


def read_prompts(path) -> list[tuple[int, int, str]]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            row, col, text = parts
            try:
                entries.append((int(row), int(col), unescape_prompt(text)))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad row/column index") from None
    return entries
