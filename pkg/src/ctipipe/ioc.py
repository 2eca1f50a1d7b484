"""Extract, refang, validate, and deduplicate Indicators of Compromise (IOCs).

The extractor scans the refanged view of a report's plain text but reports
spans as byte offsets into the original text, so every indicator can be
traced back to the exact bytes it came from.
"""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

__all__ = [
    "IndicatorKind",
    "Indicator",
    "RejectedCandidate",
    "DefangRule",
    "DefangTable",
    "load_default_table",
    "load_tlds",
    "refang",
    "extract_iocs",
    "validate_indicator",
    "dedupe",
    "is_reserved_ip",
    "span_text",
]


class IndicatorKind(str, Enum):
    IPV4 = "ipv4"
    IPV6 = "ipv6"
    DOMAIN = "domain"
    URL = "url"
    MD5 = "md5"
    SHA1 = "sha1"
    SHA256 = "sha256"
    CVE = "cve"
    YARA_RULE = "yara_rule"


# Hex-run length decides the hash kind.
HASH_KIND_BY_LENGTH = {
    32: IndicatorKind.MD5,
    40: IndicatorKind.SHA1,
    64: IndicatorKind.SHA256,
}

# Address ranges flagged is_reserved (still extracted, never dropped).
RESERVED_NETWORKS_V4 = [
    ipaddress.ip_network(n)
    for n in (
        "10.0.0.0/8",
        "127.0.0.0/8",
        "169.254.0.0/16",
        "172.16.0.0/12",
        "192.168.0.0/16",
        "198.51.100.0/24",
        "203.0.113.0/24",
    )
]
RESERVED_NETWORKS_V6 = [
    ipaddress.ip_network(n) for n in ("::1/128", "fe80::/10", "fc00::/7")
]


@dataclass(frozen=True)
class Indicator:
    """A validated, refanged IOC with byte-span provenance.

    ``span`` is (byte_start, byte_end) into the UTF-8 encoding of the text
    the indicator was extracted from; ``value`` equals the case-normalized
    refanged form of those bytes.
    """

    kind: IndicatorKind
    value: str
    report_id: str
    span: tuple[int, int]
    was_defanged: bool
    is_reserved: bool = False


@dataclass(frozen=True)
class RejectedCandidate:
    """Debug-trace record for a candidate that failed validation."""

    candidate: str
    kind_guess: str
    reason: str


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str | None = None


ACCEPT = Validation(True)


def _reject(reason: str) -> Validation:
    return Validation(False, reason)


# ---------------------------------------------------------------------------
# Defang table and refanging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DefangRule:
    pattern: str
    replacement: str
    case_insensitive: bool = False
    bounded: bool = False  # require alphanumeric context on both sides


class DefangTable:
    """Ordered rewrite rules mapping defanged spellings back to canonical text.

    Rules are tried longest-pattern-first at each position; the whole pass
    repeats until the text stops changing, which makes application idempotent
    for any table whose replacements do not grow without bound.
    """

    MAX_PASSES = 8

    def __init__(self, rules: list[DefangRule]):
        self.rules = list(rules)
        # Longest-first so "hxxps" wins over "hxxp"; file order breaks ties.
        self._ordered = sorted(
            range(len(self.rules)), key=lambda i: -len(self.rules[i].pattern)
        )
        branches = []
        for idx in self._ordered:
            rule = self.rules[idx]
            pat = re.escape(rule.pattern)
            if rule.case_insensitive:
                pat = f"(?i:{pat})"
            if rule.bounded:
                pat = f"(?<=[0-9A-Za-z]){pat}(?=[0-9A-Za-z])"
            branches.append(f"(?P<r{idx}>{pat})")
        self._regex = re.compile("|".join(branches)) if branches else None

    @classmethod
    def from_text(cls, text: str) -> "DefangTable":
        rules = []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ValueError(f"bad defang rule line: {line!r}")
            pattern, replacement = parts[0], parts[1]
            flags = parts[2] if len(parts) > 2 else ""
            if not pattern:
                raise ValueError("empty defang pattern")
            rules.append(
                DefangRule(
                    pattern=pattern,
                    replacement=replacement,
                    case_insensitive="i" in flags,
                    bounded="b" in flags,
                )
            )
        return cls(rules)

    def _apply_once(
        self, text: str, spans: list[tuple[int, int]]
    ) -> tuple[str, list[tuple[int, int]], bool]:
        if self._regex is None:
            return text, spans, False
        out: list[str] = []
        out_spans: list[tuple[int, int]] = []
        changed = False
        pos = 0
        for m in self._regex.finditer(text):
            start, end = m.start(), m.end()
            out.append(text[pos:start])
            out_spans.extend(spans[pos:start])
            rule = self.rules[int(m.lastgroup[1:])]
            ostart = spans[start][0]
            oend = spans[end - 1][1]
            out.append(rule.replacement)
            out_spans.extend([(ostart, oend)] * len(rule.replacement))
            changed = changed or m.group() != rule.replacement
            pos = end
        out.append(text[pos:])
        out_spans.extend(spans[pos:])
        return "".join(out), out_spans, changed

    def apply(self, text: str) -> str:
        return self.apply_with_map(text)[0]

    def apply_with_map(self, text: str) -> tuple[str, list[tuple[int, int]]]:
        """Rewrite ``text``; also return, per output char, the original
        character range it came from."""
        spans = [(i, i + 1) for i in range(len(text))]
        for _ in range(self.MAX_PASSES):
            text2, spans2, changed = self._apply_once(text, spans)
            if not changed and text2 == text:
                break
            text, spans = text2, spans2
        return text, spans


@lru_cache(maxsize=1)
def load_default_table() -> DefangTable:
    data = resources.files("ctipipe.data").joinpath("defang_rules.txt").read_text("utf-8")
    return DefangTable.from_text(data)


@lru_cache(maxsize=1)
def load_tlds() -> frozenset[str]:
    data = resources.files("ctipipe.data").joinpath("tlds.txt").read_text("utf-8")
    return frozenset(
        line.strip().lower()
        for line in data.splitlines()
        if line.strip() and not line.startswith("#")
    )


def refang(text: str, table: DefangTable | None = None) -> str:
    """Rewrite defanged spellings (hxxp, evil[.]com, ...) to canonical text."""
    return (table or load_default_table()).apply(text)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_HEX_RE = {
    IndicatorKind.MD5: re.compile(r"^[0-9a-f]{32}$"),
    IndicatorKind.SHA1: re.compile(r"^[0-9a-f]{40}$"),
    IndicatorKind.SHA256: re.compile(r"^[0-9a-f]{64}$"),
}
_CVE_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
_LABEL_RE = re.compile(r"^[a-z0-9-]{1,63}$")
_YARA_HEAD_RE = re.compile(r"^rule\s+[A-Za-z_]\w*")


def _validate_ipv4(candidate: str) -> Validation:
    parts = candidate.split(".")
    if len(parts) != 4:
        return _reject("not_four_octets")
    for part in parts:
        if not part or not part.isdigit():
            # also rejects "+1" / "-1" / empty octets
            return _reject("octet_not_decimal")
        if int(part) > 255:
            return _reject("octet_out_of_range")
    return ACCEPT


def _validate_ipv6(candidate: str) -> Validation:
    if candidate.count(":") < 2:
        return _reject("too_few_groups")
    if not any(c in "0123456789abcdefABCDEF" for c in candidate):
        return _reject("no_hex_digits")
    try:
        ipaddress.IPv6Address(candidate)
    except ValueError:
        return _reject("not_ipv6")
    return ACCEPT


def _validate_domain(candidate: str) -> Validation:
    if len(candidate) > 253:
        return _reject("domain_too_long")
    labels = candidate.split(".")
    if not 2 <= len(labels) <= 127:
        return _reject("bad_label_count")
    for label in labels:
        if not _LABEL_RE.match(label):
            return _reject("bad_label")
        if label.startswith("-") or label.endswith("-"):
            return _reject("edge_hyphen")
    if labels[-1] not in load_tlds():
        return _reject("unknown_tld")
    if all(label.isdigit() for label in labels):
        return _reject("all_numeric_labels")
    return ACCEPT


def _split_netloc(netloc: str) -> tuple[str, str | None] | None:
    """Split a netloc into (host, port); None when unparseable."""
    if "@" in netloc:
        netloc = netloc.rsplit("@", 1)[1]
    if not netloc:
        return None
    if netloc.startswith("["):
        close = netloc.find("]")
        if close < 0:
            return None
        host = netloc[1:close]
        rest = netloc[close + 1 :]
        if rest == "":
            return host, None
        if rest.startswith(":") and rest[1:].isdigit():
            return host, rest[1:]
        return None
    if ":" in netloc:
        host, port = netloc.rsplit(":", 1)
        if not port.isdigit():
            return None
        return host, port
    return netloc, None


_IPV4_SHAPE_RE = re.compile(r"^\d{1,3}(?:\.\d{1,3}){3}$")


def _validate_url(candidate: str) -> Validation:
    if "://" in candidate:
        scheme, rest = candidate.split("://", 1)
        if scheme.lower() not in ("http", "https", "ftp"):
            return _reject("bad_scheme")
    else:
        # Bare host/path form ("github.com/owner/repo"); only domain hosts
        # qualify, so CIDR notation like 10.0.0.0/8 never reads as a URL.
        rest = candidate
        if "/" not in rest:
            return _reject("no_path")
    netloc = re.split(r"[/?#]", rest, 1)[0]
    split = _split_netloc(netloc)
    if split is None:
        return _reject("invalid_host")
    host, port = split
    if not host:
        return _reject("invalid_host")
    if port is not None and (not port or int(port) > 65535):
        return _reject("invalid_port")
    if "://" not in candidate and _IPV4_SHAPE_RE.match(host):
        return _reject("bare_ip_path")
    if host.startswith("[") or ":" in host:
        return _validate_ipv6(host)
    if _IPV4_SHAPE_RE.match(host):
        return _validate_ipv4(host)
    return _validate_domain(host.lower())


def _validate_hash(kind: IndicatorKind, candidate: str) -> Validation:
    if not _HEX_RE[kind].match(candidate.lower()):
        return _reject("bad_hex")
    return ACCEPT


def _validate_cve(candidate: str) -> Validation:
    if not _CVE_RE.match(candidate.upper()):
        return _reject("bad_cve")
    return ACCEPT


def _validate_yara(candidate: str) -> Validation:
    if not _YARA_HEAD_RE.match(candidate):
        return _reject("no_rule_header")
    depth = 0
    seen_brace = False
    for ch in candidate:
        if ch == "{":
            depth += 1
            seen_brace = True
        elif ch == "}":
            depth -= 1
            if depth < 0:
                return _reject("unbalanced_braces")
    if not seen_brace or depth != 0:
        return _reject("unbalanced_braces")
    if "condition:" not in candidate:
        return _reject("no_condition")
    return ACCEPT


def validate_indicator(kind: IndicatorKind, candidate: str) -> Validation:
    """Validate an already-refanged candidate string for the given kind.

    Returns an accept/reject result with a machine-readable reason code.
    Any candidate containing angle brackets is rejected outright: those are
    placeholder templates (``<C2_IP>``-style), not real indicators.
    """
    if "<" in candidate or ">" in candidate:
        return _reject("placeholder_chars")
    if kind == IndicatorKind.IPV4:
        return _validate_ipv4(candidate)
    if kind == IndicatorKind.IPV6:
        return _validate_ipv6(candidate)
    if kind == IndicatorKind.DOMAIN:
        return _validate_domain(candidate.lower())
    if kind == IndicatorKind.URL:
        return _validate_url(candidate)
    if kind in _HEX_RE:
        return _validate_hash(kind, candidate)
    if kind == IndicatorKind.CVE:
        return _validate_cve(candidate)
    if kind == IndicatorKind.YARA_RULE:
        return _validate_yara(candidate)
    return _reject("unknown_kind")


def is_reserved_ip(kind: IndicatorKind, value: str) -> bool:
    try:
        addr = ipaddress.ip_address(value)
    except ValueError:
        return False
    nets = RESERVED_NETWORKS_V4 if kind == IndicatorKind.IPV4 else RESERVED_NETWORKS_V6
    return any(addr in net for net in nets)


def normalize_value(kind: IndicatorKind, text: str) -> str:
    """Case-normalize matched text into the canonical indicator value."""
    if kind in (IndicatorKind.DOMAIN, IndicatorKind.IPV6) or kind in _HEX_RE:
        return text.lower()
    if kind == IndicatorKind.CVE:
        return text.upper()
    if kind == IndicatorKind.URL:
        return _normalize_url(text)
    return text


def _normalize_url(text: str) -> str:
    # Lowercase the scheme and host; keep path/query case untouched.
    if "://" in text:
        scheme, rest = text.split("://", 1)
        scheme = scheme.lower() + "://"
    else:
        scheme, rest = "", text
    netloc_end = len(rest)
    for stop in "/?#":
        pos = rest.find(stop)
        if pos >= 0:
            netloc_end = min(netloc_end, pos)
    return scheme + rest[:netloc_end].lower() + rest[netloc_end:]


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

_HEX_RUN_RE = re.compile(r"[0-9A-Fa-f]+")
_URL_SCHEMED_RE = re.compile(r"\b(?:https?|ftp)://[^\s\"']+", re.IGNORECASE)
_URL_BARE_RE = re.compile(
    r"(?<![\w.@/-])(?:[A-Za-z0-9-]{1,63}\.)+[A-Za-z]{2,63}(?::\d{1,5})?/[^\s\"']*"
)
_DOMAIN_CAND_RE = re.compile(
    r"(?<![A-Za-z0-9._-])(?:[A-Za-z0-9_-]{1,63}\.)+[A-Za-z0-9_-]{2,63}(?![A-Za-z0-9_-])"
)
_IPV4_CAND_RE = re.compile(r"(?<![\d.])\d{1,3}(?:\.\d{1,3}){3}(?!\.?\d)")
_IPV6_CAND_RE = re.compile(r"(?<![A-Za-z0-9])[0-9A-Fa-f:.]*:[0-9A-Fa-f:.]*(?![A-Za-z0-9])")
_CVE_CAND_RE = re.compile(r"\bCVE-\d{4}-\d{4,}\b", re.IGNORECASE)
_YARA_START_RE = re.compile(r"(?:^|(?<=\s))rule\s+[A-Za-z_]\w*(?:\s*:[\w \t]+)?\s*\{")
_TRAILING_PUNCT = ".,;:!?)]}>\"'"


def _strip_trailing(text: str, start: int, end: int) -> int:
    while end > start and text[end - 1] in _TRAILING_PUNCT:
        end -= 1
    return end


class _Claims:
    """Byte ranges already claimed by hash matches."""

    def __init__(self) -> None:
        self.spans: list[tuple[int, int]] = []

    def add(self, start: int, end: int) -> None:
        self.spans.append((start, end))

    def partially_overlaps(self, start: int, end: int) -> bool:
        """True when [start, end) intersects a claim without containing it."""
        for cs, ce in self.spans:
            if start < ce and cs < end and not (start <= cs and ce <= end):
                return True
        return False


def span_text(text: str, span: tuple[int, int]) -> str:
    """Slice a byte span back out of a unicode text."""
    return text.encode("utf-8")[span[0] : span[1]].decode("utf-8")


def _byte_offsets(text: str) -> list[int]:
    offsets = [0]
    total = 0
    for ch in text:
        total += len(ch.encode("utf-8"))
        offsets.append(total)
    return offsets


def extract_iocs(
    text: str,
    report_id: str = "",
    table: DefangTable | None = None,
    trace: list[RejectedCandidate] | None = None,
) -> list[Indicator]:
    """Extract validated indicators from plain text, ordered by span start.

    Candidates are matched against the refanged view of ``text``; spans refer
    to the original text (byte offsets). Hash-length hex runs are claimed
    first so they cannot be misread as fragments of other kinds; a URL whose
    host parses as an address yields an ipv4/ipv6 indicator for the host,
    otherwise a domain indicator. Duplicate mentions survive here; apply
    :func:`dedupe` for per-report uniqueness.
    """
    table = table or load_default_table()
    refanged, char_map = table.apply_with_map(text)
    byte_of = _byte_offsets(text)

    def orig_span(rstart: int, rend: int) -> tuple[int, int]:
        cstart = char_map[rstart][0]
        cend = char_map[rend - 1][1]
        return byte_of[cstart], byte_of[cend]

    collected: list[tuple[int, int, Indicator]] = []
    seen: set[tuple[IndicatorKind, str, tuple[int, int]]] = set()

    def note_reject(candidate: str, kind_guess: str, reason: str) -> None:
        if trace is not None:
            trace.append(RejectedCandidate(candidate, kind_guess, reason))

    def emit(kind: IndicatorKind, matched: str, rstart: int, rend: int) -> bool:
        verdict = validate_indicator(kind, matched)
        if not verdict.ok:
            note_reject(matched, kind.value, verdict.reason or "rejected")
            return False
        value = normalize_value(kind, matched)
        span = orig_span(rstart, rend)
        key = (kind, value, span)
        if key in seen:
            return True
        seen.add(key)
        original = span_text(text, span)
        ind = Indicator(
            kind=kind,
            value=value,
            report_id=report_id,
            span=span,
            was_defanged=table.apply(original) != original,
            is_reserved=kind in (IndicatorKind.IPV4, IndicatorKind.IPV6)
            and is_reserved_ip(kind, value),
        )
        collected.append((rstart, rend, ind))
        return True

    claims = _Claims()

    # Hashes first: hash-length hex runs are claimed before anything else.
    for m in _HEX_RUN_RE.finditer(refanged):
        kind = HASH_KIND_BY_LENGTH.get(m.end() - m.start())
        if kind is None:
            continue
        if emit(kind, m.group(), m.start(), m.end()):
            claims.add(m.start(), m.end())

    def claimed(rstart: int, rend: int, candidate: str, guess: str) -> bool:
        if claims.partially_overlaps(rstart, rend):
            note_reject(candidate, guess, "overlaps_hash")
            return True
        return False

    def handle_url(rstart: int, rend: int) -> None:
        rend = _strip_trailing(refanged, rstart, rend)
        candidate = refanged[rstart:rend]
        if not candidate:
            return
        if claimed(rstart, rend, candidate, "url"):
            return
        if not emit(IndicatorKind.URL, candidate, rstart, rend):
            return
        # The host also stands alone as a domain or address indicator.
        if "://" in candidate:
            host_from = rstart + candidate.find("://") + 3
        else:
            host_from = rstart
        netloc = re.split(r"[/?#]", refanged[host_from:rend], 1)[0]
        split = _split_netloc(netloc)
        if split is None:
            return
        host = split[0]
        lowered = refanged.lower()
        hstart = lowered.find(host.lower(), host_from, rend)
        if hstart < 0:
            return
        hend = hstart + len(host)
        if ":" in host:
            emit(IndicatorKind.IPV6, host, hstart, hend)
        elif _IPV4_SHAPE_RE.match(host):
            emit(IndicatorKind.IPV4, host, hstart, hend)
        else:
            emit(IndicatorKind.DOMAIN, host, hstart, hend)

    url_spans: list[tuple[int, int]] = []
    for m in _URL_SCHEMED_RE.finditer(refanged):
        end = _strip_trailing(refanged, m.start(), m.end())
        url_spans.append((m.start(), end))
        handle_url(m.start(), m.end())
    for m in _URL_BARE_RE.finditer(refanged):
        inside = any(s <= m.start() < e for s, e in url_spans)
        if not inside:
            handle_url(m.start(), m.end())

    for m in _IPV4_CAND_RE.finditer(refanged):
        if not claimed(m.start(), m.end(), m.group(), "ipv4"):
            emit(IndicatorKind.IPV4, m.group(), m.start(), m.end())

    for m in _IPV6_CAND_RE.finditer(refanged):
        rstart, rend = m.start(), m.end()
        candidate = refanged[rstart:rend]
        while rend > rstart and refanged[rend - 1] == ".":
            rend -= 1
        candidate = refanged[rstart:rend]
        if candidate.count(":") < 2 or not re.search(r"[0-9A-Fa-f]", candidate):
            continue
        if claimed(rstart, rend, candidate, "ipv6"):
            continue
        if not validate_indicator(IndicatorKind.IPV6, candidate).ok and (
            candidate.endswith(":") and not candidate.endswith("::")
        ):
            rend -= 1
            candidate = refanged[rstart:rend]
        emit(IndicatorKind.IPV6, candidate, rstart, rend)

    for m in _DOMAIN_CAND_RE.finditer(refanged):
        if not claimed(m.start(), m.end(), m.group(), "domain"):
            emit(IndicatorKind.DOMAIN, m.group(), m.start(), m.end())

    for m in _CVE_CAND_RE.finditer(refanged):
        emit(IndicatorKind.CVE, m.group(), m.start(), m.end())

    for m in _YARA_START_RE.finditer(refanged):
        depth = 0
        end = None
        for i in range(m.end() - 1, len(refanged)):
            if refanged[i] == "{":
                depth += 1
            elif refanged[i] == "}":
                depth -= 1
                if depth == 0:
                    end = i + 1
                    break
        if end is None:
            note_reject(refanged[m.start() : m.end()], "yara_rule", "unbalanced_braces")
            continue
        emit(IndicatorKind.YARA_RULE, refanged[m.start() : end], m.start(), end)

    collected.sort(key=lambda item: (item[0], item[1], item[2].kind.value))
    return [ind for _, _, ind in collected]


def dedupe(indicators: list[Indicator]) -> list[Indicator]:
    """Collapse a single report's indicators to one per (kind, value).

    The retained element is the one with the smallest span start; output is
    ordered by span start.
    """
    best: dict[tuple[IndicatorKind, str], Indicator] = {}
    for ind in indicators:
        key = (ind.kind, ind.value.lower())
        cur = best.get(key)
        if cur is None or ind.span[0] < cur.span[0]:
            best[key] = ind
    return sorted(best.values(), key=lambda i: (i.span[0], i.span[1], i.kind.value))
