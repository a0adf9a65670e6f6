"""Manifest permission extraction, system-permission filtering and one-hot encoding."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from lxml import etree

from malkit.errors import DatasetError, ManifestParseError

log = logging.getLogger(__name__)

ANDROID_NS = "http://schemas.android.com/apk/res/android"
SYSTEM_PREFIX = "android.permission."
PERMISSION_TAGS = ("uses-permission", "uses-permission-sdk-23")
FEATURE_CATEGORY = "permission"

PermissionVector = np.ndarray  # 1-D uint8, values in {0, 1}


def is_permission_name(name: str) -> bool:
    return bool(name) and not any(c.isspace() for c in name)


def _unique_keep_order(values: Iterable[str]) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    for v in values:
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def parse_manifest(
    xml_text: str | bytes,
    *,
    include_sdk23: bool = True,
    warnings: list[str] | None = None,
) -> list[str]:
    """Return the requested permission names of a decoded AndroidManifest, in document order.

    Duplicates keep their first occurrence. Elements without a usable
    ``android:name`` are skipped and reported through ``warnings`` (and the log).
    """
    data = xml_text.encode("utf-8") if isinstance(xml_text, str) else xml_text
    parser = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=False)
    try:
        root = etree.fromstring(data, parser=parser)
    except etree.XMLSyntaxError as e:
        line, column = e.position if e.position else (e.lineno, None)
        raise ManifestParseError(f"malformed manifest XML: {e.msg}", line, column) from e

    tags = PERMISSION_TAGS if include_sdk23 else PERMISSION_TAGS[:1]
    names: list[str] = []
    for elem in root.iter(*tags):
        # Manifests without the xmlns:android declaration keep the raw prefixed key.
        raw = elem.get(f"{{{ANDROID_NS}}}name")
        if raw is None:
            raw = elem.get("android:name")
        name = (raw or "").strip()
        if not is_permission_name(name):
            msg = f"<{elem.tag}> at line {elem.sourceline} has no usable android:name; skipped"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        names.append(name)
    return _unique_keep_order(names)


def filter_system_permissions(names: Sequence[str]) -> list[str]:
    return [n for n in names if n.startswith(SYSTEM_PREFIX)]


def parse_permission_list(text: str) -> list[str]:
    """Plain-text permission list: one name per line, ``#`` starts a comment."""
    names: list[str] = []
    for line in text.splitlines():
        name = line.split("#", 1)[0].strip()
        if name:
            names.append(name)
    return _unique_keep_order(names)


def parse_feature_lines(text: str, source: str | Path = "<text>") -> list[str]:
    """Drebin feature file: ``category::value`` per line; returns the ``permission`` values."""
    names: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        category, sep, value = s.partition("::")
        if not sep or not category:
            raise DatasetError(f"malformed feature line {s!r} (expected category::value)", source, lineno)
        if category == FEATURE_CATEGORY:
            names.append(value.strip())
    return _unique_keep_order(n for n in names if n)


def read_permission_file(path: str | Path, *, include_sdk23: bool = True) -> list[str]:
    """Permissions requested by one input file, unfiltered.

    ``.xml`` files are decoded manifests; other files are Drebin feature files
    when any line carries ``::``, and plain permission lists otherwise.
    """
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read file: {e.strerror}", p) from e

    if p.suffix.lower() == ".xml":
        try:
            return parse_manifest(raw, include_sdk23=include_sdk23)
        except ManifestParseError as e:
            raise DatasetError(str(e), p, e.line) from e

    text = raw.decode("utf-8", errors="replace")
    if "::" in text:
        return parse_feature_lines(text, p)
    return parse_permission_list(text)


@dataclass(frozen=True)
class PermissionVocabulary:
    names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        ix = {n: i for i, n in enumerate(names)}
        if len(ix) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate permission names in vocabulary: {', '.join(dupes[:5])}")
        for n in names:
            if not is_permission_name(n):
                raise ValueError(f"invalid permission name in vocabulary: {n!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "index", ix)

    @property
    def P(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.index

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(f"{n}\n" for n in self.names), encoding="utf-8")
        return out

    @classmethod
    def load(cls, path: str | Path) -> PermissionVocabulary:
        p = Path(path)
        try:
            lines = p.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DatasetError(f"cannot read vocabulary: {e.strerror}", p) from e
        names = [ln.strip() for ln in lines if ln.strip()]
        try:
            return cls(tuple(names))
        except ValueError as e:
            raise DatasetError(str(e), p) from e


def build_vocabulary(permission_sets: Iterable[Iterable[str]]) -> PermissionVocabulary:
    union: set[str] = set()
    for names in permission_sets:
        union.update(names)
    return PermissionVocabulary(tuple(sorted(union)))


class Encoding(NamedTuple):
    vector: PermissionVector
    ignored: int


def encode(names: Iterable[str], vocab: PermissionVocabulary) -> Encoding:
    """One-hot encode ``names`` against ``vocab``; unknown names are dropped and counted once each."""
    bits = np.zeros(vocab.P, dtype=np.uint8)
    unknown: set[str] = set()
    for n in names:
        i = vocab.index.get(n)
        if i is None:
            unknown.add(n)
        else:
            bits[i] = 1
    return Encoding(bits, len(unknown))
