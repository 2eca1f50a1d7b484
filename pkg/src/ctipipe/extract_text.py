"""Convert raw HTML into the plain text handed to the extractor and models."""

from __future__ import annotations

import codecs
import re
from html.parser import HTMLParser

__all__ = ["html_to_text"]

# Tags whose text content never reaches the output.
_SUPPRESS_TAGS = {"script", "style", "head", "noscript", "template"}

# Tags that force a line break around their content. Table cells are treated
# as blocks too, so adjacent IOC cells cannot fuse into one token.
_BLOCK_TAGS = {
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl",
    "dt", "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2",
    "h3", "h4", "h5", "h6", "header", "hr", "li", "main", "nav", "ol", "p",
    "pre", "section", "table", "tbody", "td", "tfoot", "th", "thead", "tr",
    "ul",
}

_CHARSET_RE = re.compile(
    rb"""<meta[^>]+charset\s*=\s*["']?([A-Za-z0-9_.:-]+)""", re.IGNORECASE
)


class _TextExtractor(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._suppress = 0
        self._href_stack: list[str | None] = []

    def handle_starttag(self, tag, attrs):
        if tag in _SUPPRESS_TAGS:
            self._suppress += 1
            return
        if self._suppress:
            return
        if tag == "a":
            href = next((v for k, v in attrs if k == "href" and v), None)
            self._href_stack.append(href)
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_startendtag(self, tag, attrs):
        if tag in _SUPPRESS_TAGS or self._suppress:
            return
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in _SUPPRESS_TAGS:
            self._suppress = max(0, self._suppress - 1)
            return
        if self._suppress:
            return
        if tag == "a" and self._href_stack:
            self._emit_href(self._href_stack.pop())
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._suppress:
            self.parts.append(data)

    def _emit_href(self, href: str | None) -> None:
        if href:
            self.parts.append(f" ({href})")

    def close(self):
        super().close()
        # Unclosed anchors still surface their targets.
        while self._href_stack:
            self._emit_href(self._href_stack.pop())


def _decode(raw_html: bytes) -> str:
    if raw_html.startswith(codecs.BOM_UTF8):
        return raw_html.decode("utf-8-sig", errors="replace")
    m = _CHARSET_RE.search(raw_html[:4096])
    if m:
        try:
            return raw_html.decode(m.group(1).decode("ascii"), errors="replace")
        except LookupError:
            pass
    return raw_html.decode("utf-8", errors="replace")


def html_to_text(raw_html: bytes) -> str:
    """Extract the visible text of an HTML document.

    Script, style, head, and noscript content is dropped, as are comments.
    Each anchor's href is appended in parentheses after the anchor text so
    link-only indicators survive. Block elements separate lines; runs of
    spaces and tabs collapse to a single space within a line. Invalid bytes
    decode lossily; a charset declared in a meta tag is honored.

    The result carries no markup and feeding it back in returns it unchanged.
    """
    parser = _TextExtractor()
    parser.feed(_decode(raw_html))
    parser.close()
    text = "".join(parser.parts)
    lines = []
    for line in text.split("\n"):
        line = re.sub(r"[ \t\r\f\v ]+", " ", line).strip()
        if line:
            lines.append(line)
    return "\n".join(lines)
