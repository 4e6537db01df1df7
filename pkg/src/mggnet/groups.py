"""Attribute catalog and part-based group assignments."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

ATTRIBUTE_NAMES = (
    "5 o'Clock shadow", "Arched eyebrows", "Attractive", "Bags under eyes",
    "Bald", "Bangs", "Big lips", "Big nose", "Black hair", "Blond hair",
    "Blurry", "Brown hair", "Bushy eyebrows", "Chubby", "Double chin",
    "Eye glasses", "Goatee", "Gray hair", "Heavy makeup", "High cheekbones",
    "Male", "Mouth slightly open", "Mustache", "Narrow eyes", "No beard",
    "Oval face", "Pale skin", "Pointy nose", "Receding hairline",
    "Rosy cheeks", "Sideburns", "Smiling", "Straight hair", "Wavy hair",
    "Wearing earrings", "Wearing hat", "Wearing lipstick",
    "Wearing necklace", "Wearing necktie", "Young",
)  # fmt: skip

# Short names used by the group table -> catalog names.
ALIASES = {
    "Lipstick": "Wearing lipstick",
    "Beard": "No beard",
    "Makeup": "Heavy makeup",
    "Oval": "Oval face",
    "Pale": "Pale skin",
    "Hat": "Wearing hat",
    "Eye bags": "Bags under eyes",
    "Earrings": "Wearing earrings",
    "Necklace": "Wearing necklace",
    "Necktie": "Wearing necktie",
    "5 o'clock shadow": "5 o'Clock shadow",
}

DEFAULT_GROUP_TABLE = (
    ("Mouth", ("Big lips", "Lipstick", "Mouth slightly open", "Smiling", "Goatee",
               "5 o'clock shadow", "Mustache", "Double chin", "Beard")),
    ("Eyes", ("Arched eyebrows", "Bushy eyebrows", "Eye glasses", "Narrow eyes")),
    ("Whole face", ("Attractive", "Blurry", "Makeup", "Oval", "Young", "Male", "Chubby", "Pale")),
    ("Hairline", ("Bald", "Bangs", "Receding hairline", "Hat")),
    ("Around head", ("Black hair", "Blond hair", "Brown hair", "Gray hair", "Straight hair", "Wavy hair")),
    ("Middle face", ("High cheekbones", "Rosy cheeks", "Eye bags", "Sideburns", "Earrings")),
    ("Nose", ("Big nose", "Pointy nose")),
    ("Neck", ("Necklace", "Necktie")),
)  # fmt: skip


class UnknownIndexError(KeyError):
    pass


@dataclass(frozen=True)
class AttributeCatalog:
    names: tuple[str, ...]

    @classmethod
    def default(cls) -> "AttributeCatalog":
        return cls(ATTRIBUTE_NAMES)

    @classmethod
    def generic(cls, n: int) -> "AttributeCatalog":
        return cls(tuple(f"attr{a:02d}" for a in range(1, n + 1)))

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def indices(self) -> range:
        return range(1, len(self.names) + 1)

    def name(self, index: int) -> str:
        if not 1 <= index <= len(self.names):
            raise UnknownIndexError(index)
        return self.names[index - 1]

    def index_of(self, name: str) -> int:
        name = ALIASES.get(name, name)
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise KeyError(f"unknown attribute name {name!r}") from None


@dataclass(frozen=True)
class Violation:
    kind: str  # "missing" | "duplicate" | "empty" | "unknown"
    detail: str
    attr: Optional[int] = None
    group: Optional[str] = None


@dataclass(frozen=True)
class GroupAssignment:
    """K named groups of 1-based attribute indices.

    Construct through :meth:`from_groups` to get validation; the lookup table
    is derived from ``groups``.
    """

    groups: tuple[tuple[str, tuple[int, ...]], ...]
    catalog: AttributeCatalog
    _lookup: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        for gid, (_, attrs) in enumerate(self.groups):
            for a in attrs:
                self._lookup.setdefault(a, gid)

    @classmethod
    def from_groups(
        cls,
        groups: Sequence[tuple[str, Iterable[int]]],
        catalog: AttributeCatalog,
        check: bool = True,
    ) -> "GroupAssignment":
        ga = cls(tuple((name, tuple(attrs)) for name, attrs in groups), catalog)
        if check:
            problems = validate(ga, catalog)
            if problems:
                raise ValueError("invalid group assignment: " + "; ".join(v.detail for v in problems))
        return ga

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def N(self) -> int:
        return len(self.catalog)

    @property
    def names(self) -> list[str]:
        return [g for g, _ in self.groups]

    def group_of(self, attr: int) -> int:
        try:
            return self._lookup[attr]
        except KeyError:
            raise UnknownIndexError(f"attribute index {attr} is not assigned") from None

    def group_name_of(self, attr: int) -> str:
        return self.groups[self.group_of(attr)][0]

    def attrs_of(self, group: int | str) -> tuple[int, ...]:
        if isinstance(group, str):
            for name, attrs in self.groups:
                if name == group:
                    return attrs
            raise KeyError(f"unknown group {group!r}")
        if not 0 <= group < self.K:
            raise KeyError(f"unknown group id {group}")
        return self.groups[group][1]

    def sizes(self) -> list[int]:
        return [len(a) for _, a in self.groups]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group_name", "attr_index"])
        for name, attrs in self.groups:
            for a in attrs:
                w.writerow([name, a])
        return buf.getvalue()


def validate(assignment: GroupAssignment, catalog: AttributeCatalog) -> list[Violation]:
    """Return every problem with ``assignment`` as data; an empty list means ok."""
    out: list[Violation] = []
    seen: dict[int, str] = {}
    for name, attrs in assignment.groups:
        if not attrs:
            out.append(Violation("empty", f"group {name!r} is empty", group=name))
        for a in attrs:
            if not 1 <= a <= len(catalog):
                out.append(Violation("unknown", f"attribute {a} is outside 1..{len(catalog)}", a, name))
            elif a in seen:
                out.append(Violation("duplicate", f"attribute {a} appears in {seen[a]!r} and {name!r}", a, name))
            else:
                seen[a] = name
    for a in catalog.indices:
        if a not in seen:
            out.append(Violation("missing", f"attribute {a} is not in any group", a))
    return out


def load_default_assignment() -> GroupAssignment:
    catalog = AttributeCatalog.default()
    groups = [(g, [catalog.index_of(n) for n in names]) for g, names in DEFAULT_GROUP_TABLE]
    return GroupAssignment.from_groups(groups, catalog)


def load_assignment_csv(path: os.PathLike, catalog: Optional[AttributeCatalog] = None) -> GroupAssignment:
    """Read ``group_name,attr_index`` rows; groups keep first-appearance order."""
    groups: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0].strip() == "group_name":
        rows = rows[1:]
    for lineno, row in enumerate(rows, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'group_name,attr_index'")
        try:
            idx = int(row[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: attribute index {row[1]!r} is not an integer") from None
        groups.setdefault(row[0].strip(), []).append(idx)
    if catalog is None:
        n = max((a for attrs in groups.values() for a in attrs), default=0)
        catalog = AttributeCatalog.default() if n == 40 else AttributeCatalog.generic(n)
    return GroupAssignment.from_groups(list(groups.items()), catalog)


def contiguous_assignment(sizes: Sequence[int], names: Optional[Sequence[str]] = None) -> GroupAssignment:
    """Groups of consecutive attribute indices, e.g. sizes (3,3) -> {1,2,3},{4,5,6}."""
    names = list(names) if names else [f"group{i}" for i in range(len(sizes))]
    groups, start = [], 1
    for name, s in zip(names, sizes):
        groups.append((name, range(start, start + s)))
        start += s
    return GroupAssignment.from_groups(groups, AttributeCatalog.generic(start - 1))
