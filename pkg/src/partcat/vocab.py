"""Object / part / object-specific-part taxonomies.

Object-specific part names like "bird's wing" are split at the last "'s "
into an object name and a generalized part name. Generalized parts are
shared across objects by exact string equality, so "cat's head" and
"dog's head" point at the same part index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

SEPARATOR = "'s "


class VocabError(ValueError):
    pass


def parse_class_name(name: str) -> tuple[str, str]:
    """Split "object's part" at the LAST possessive separator.

    Splitting at the last occurrence keeps multi-word objects intact,
    e.g. "chest of drawers's drawer" -> ("chest of drawers", "drawer").
    """
    idx = name.rfind(SEPARATOR)
    if idx < 0:
        raise VocabError(f"no {SEPARATOR!r} separator in class name {name!r}")
    obj = name[:idx].strip()
    part = name[idx + len(SEPARATOR):].strip()
    if not obj or not part:
        raise VocabError(f"empty object or part after splitting {name!r}")
    return obj, part


@dataclass(frozen=True)
class Vocabulary:
    """Immutable class taxonomy with the obj-part -> (object, part) mapping."""

    objects: tuple[str, ...]
    parts: tuple[str, ...]
    obj_parts: tuple[str, ...]
    obj_index: tuple[int, ...]    # obj-part q -> object index M(q)
    part_index: tuple[int, ...]   # obj-part q -> generalized-part index
    seen_mask: tuple[bool, ...]

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def n_obj_parts(self) -> int:
        return len(self.obj_parts)

    def object_of(self, q: int) -> int:
        return self.obj_index[q]

    def part_of(self, q: int) -> int:
        return self.part_index[q]

    def parts_of_object(self, o: int) -> list[int]:
        """Inverse mapping: obj-part indices belonging to object `o`."""
        return [q for q, oo in enumerate(self.obj_index) if oo == o]

    def seen_obj_parts(self) -> list[int]:
        return [q for q, s in enumerate(self.seen_mask) if s]

    def seen_view(self) -> tuple["Vocabulary", list[int]]:
        """Restriction of the obj-part axis to seen classes.

        Object and generalized-part lists are kept whole, so model
        parameters are interchangeable between the view and the full
        vocabulary. Returns the view plus the original indices.
        """
        idx = self.seen_obj_parts()
        view = Vocabulary(
            objects=self.objects,
            parts=self.parts,
            obj_parts=tuple(self.obj_parts[q] for q in idx),
            obj_index=tuple(self.obj_index[q] for q in idx),
            part_index=tuple(self.part_index[q] for q in idx),
            seen_mask=tuple(True for _ in idx),
        )
        return view, idx

    def novel_obj_parts(self) -> list[int]:
        return [q for q, s in enumerate(self.seen_mask) if not s]


def build_vocabulary(names: list[str], seen_flags: list[bool]) -> Vocabulary:
    """Build the taxonomy from ordered obj-part names.

    Objects and generalized parts are deduplicated preserving first
    appearance, so index assignment is a pure function of the input order.
    """
    if len(names) != len(seen_flags):
        raise VocabError("names and seen_flags have different lengths")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise VocabError(f"duplicate obj-part names: {dupes}")
    objects: list[str] = []
    parts: list[str] = []
    obj_idx: list[int] = []
    part_idx: list[int] = []
    for name in names:
        obj, part = parse_class_name(name)
        if obj not in objects:
            objects.append(obj)
        if part not in parts:
            parts.append(part)
        obj_idx.append(objects.index(obj))
        part_idx.append(parts.index(part))
    return Vocabulary(
        objects=tuple(objects),
        parts=tuple(parts),
        obj_parts=tuple(names),
        obj_index=tuple(obj_idx),
        part_index=tuple(part_idx),
        seen_mask=tuple(bool(f) for f in seen_flags),
    )


def load_class_list(path: str | Path) -> tuple[list[str], list[bool]]:
    """Read a class-list file: `<seen|novel> TAB <object's part>` per line."""
    names: list[str] = []
    flags: list[bool] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise VocabError(f"{path}:{lineno}: missing TAB separator")
            flag, name = line.split("\t", 1)
            if flag not in ("seen", "novel"):
                raise VocabError(f"{path}:{lineno}: bad flag {flag!r}")
            names.append(name.strip())
            flags.append(flag == "seen")
    return names, flags


def pascal_part_116() -> Vocabulary:
    """The bundled Pascal-Part-116 taxonomy (74 seen / 42 novel classes)."""
    ref = resources.files("partcat.resources").joinpath("pascal_part_116.txt")
    with resources.as_file(ref) as path:
        names, flags = load_class_list(path)
    return build_vocabulary(names, flags)
