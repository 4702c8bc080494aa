"""Reader for the prompt dump format: one prompt per line as
"<row>\t<col>\t<text>", with backslash escapes for tab, newline, carriage
return and backslash inside the text."""

from __future__ import annotations

_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


class PromptFileError(Exception):
    pass


def unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) and text[i + 1] in _UNESCAPES:
            out.append(_UNESCAPES[text[i + 1]])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def read_prompt_file(path) -> list[tuple[int, int, str]]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise PromptFileError(
                    f"{path}: line {lineno}: expected row<TAB>col<TAB>text")
            row, col, text = parts
            try:
                entries.append((int(row), int(col), unescape(text)))
            except ValueError:
                raise PromptFileError(
                    f"{path}: line {lineno}: non-integer row/col") from None
    return entries
