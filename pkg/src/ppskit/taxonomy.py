"""Object/part class hierarchy and the object-to-part compatibility table.

Taxonomy documents are YAML (JSON is accepted too, being a YAML subset)::

    name: toy
    object_classes:
      - {id: 0, name: road, kind: stuff, parts: []}
      - {id: 1, name: car, kind: thing, parts: [1, 2]}
    part_classes:
      - {id: 1, name: car-wheel}
      - {id: 2, name: car-window}

On load, ids are canonicalized: object classes are renumbered densely to
``0..C-1`` and part classes to ``1..N_parts`` (both in order of their
original ids), and every part reference is rewritten accordingly.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

log = logging.getLogger(__name__)

THING = "thing"
STUFF = "stuff"

BUNDLED = {
    "cityscapes_pp": "cityscapes_pp.yaml",
    "pascal_pp": "pascal_pp.yaml",
    "pascal_pp_107": "pascal_pp_107.yaml",
}


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy documents.

    ``location`` is a path into the document, e.g. ``object_classes[3].parts[1]``.
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class DuplicateIdError(TaxonomyError):
    pass


class DanglingPartError(TaxonomyError):
    pass


class OrphanPartError(TaxonomyError):
    pass


class TaxonomyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ObjectClassDef:
    id: int
    name: str
    kind: str
    part_class_ids: tuple[int, ...] = ()

    @property
    def is_thing(self) -> bool:
        return self.kind == THING

    @property
    def has_parts(self) -> bool:
        return len(self.part_class_ids) > 0


@dataclass(frozen=True)
class PartClassDef:
    id: int
    name: str


@dataclass(frozen=True)
class Taxonomy:
    """Validated, immutable class hierarchy.

    Object class ids are dense (``0..num_object_classes-1``), so an object id
    doubles as its index into a class-score vector; index
    ``num_object_classes`` is the "no object" slot.
    """

    name: str
    object_classes: tuple[ObjectClassDef, ...]
    part_classes: tuple[PartClassDef, ...]
    _by_id: dict[int, ObjectClassDef] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {c.id: c for c in self.object_classes})

    @property
    def num_object_classes(self) -> int:
        return len(self.object_classes)

    @property
    def num_part_classes(self) -> int:
        return len(self.part_classes)

    @property
    def no_object_index(self) -> int:
        return len(self.object_classes)

    def object_class(self, class_id: int) -> ObjectClassDef:
        try:
            return self._by_id[int(class_id)]
        except KeyError:
            raise KeyError(f"unknown object class id {class_id}") from None

    def has_object_class(self, class_id: int) -> bool:
        return int(class_id) in self._by_id

    def has_part_class(self, part_id: int) -> bool:
        return 1 <= int(part_id) <= len(self.part_classes)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.object_classes if c.kind == THING)

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.object_classes if c.kind == STUFF)

    @property
    def part_bearing_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.object_classes if c.part_class_ids)


def compatible_parts(t: Taxonomy, class_id: int) -> tuple[int, ...]:
    """Part-class ids defined for ``class_id``, in declaration order."""
    return t.object_class(class_id).part_class_ids


def _require(entry: Any, key: str, loc: str):
    if not isinstance(entry, dict):
        raise TaxonomyError("expected a mapping", loc)
    if key not in entry:
        raise TaxonomyError(f"missing field {key!r}", loc)
    return entry[key]


def _as_id(value: Any, loc: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise TaxonomyError(f"id must be a non-negative integer, got {value!r}", loc)
    return value


def taxonomy_from_dict(doc: Any) -> Taxonomy:
    """Validate a parsed taxonomy document and canonicalize its ids."""
    if not isinstance(doc, dict):
        raise TaxonomyError("top level must be a mapping")
    name = str(doc.get("name", ""))
    raw_objects = _require(doc, "object_classes", "")
    raw_parts = doc.get("part_classes", []) or []
    if not isinstance(raw_objects, list):
        raise TaxonomyError("must be a list", "object_classes")
    if not isinstance(raw_parts, list):
        raise TaxonomyError("must be a list", "part_classes")

    parts: dict[int, str] = {}
    for i, entry in enumerate(raw_parts):
        loc = f"part_classes[{i}]"
        pid = _as_id(_require(entry, "id", loc), f"{loc}.id")
        if pid == 0:
            raise TaxonomyError("part id 0 is reserved for 'no part'", f"{loc}.id")
        if pid in parts:
            raise DuplicateIdError(f"duplicate part id {pid}", f"{loc}.id")
        parts[pid] = str(_require(entry, "name", loc))

    objects: dict[int, tuple[str, str, list[int]]] = {}
    referenced: set[int] = set()
    for i, entry in enumerate(raw_objects):
        loc = f"object_classes[{i}]"
        oid = _as_id(_require(entry, "id", loc), f"{loc}.id")
        if oid in objects:
            raise DuplicateIdError(f"duplicate object id {oid}", f"{loc}.id")
        kind = _require(entry, "kind", loc)
        if kind not in (THING, STUFF):
            raise TaxonomyError(f"kind must be 'thing' or 'stuff', got {kind!r}", f"{loc}.kind")
        plist = entry.get("parts", []) or []
        if not isinstance(plist, list):
            raise TaxonomyError("must be a list", f"{loc}.parts")
        seen: set[int] = set()
        for j, pid in enumerate(plist):
            ploc = f"{loc}.parts[{j}]"
            pid = _as_id(pid, ploc)
            if pid not in parts:
                raise DanglingPartError(f"part id {pid} is not declared", ploc)
            if pid in seen:
                raise DuplicateIdError(f"part id {pid} listed twice", ploc)
            seen.add(pid)
        if kind == STUFF and plist:
            warnings.warn(
                f"stuff class {entry.get('name', oid)!r} declares parts", TaxonomyWarning, stacklevel=3
            )
        referenced |= seen
        objects[oid] = (str(_require(entry, "name", loc)), kind, list(plist))

    orphans = sorted(set(parts) - referenced)
    if orphans:
        raise OrphanPartError(f"orphan part class(es) {orphans}: not referenced by any object class",
                              "part_classes")
    if len(objects) >= 4095:
        raise TaxonomyError("too many object classes for the uid layout", "object_classes")
    if len(parts) >= 255:
        raise TaxonomyError("too many part classes for the uid layout", "part_classes")

    part_map = {old: new for new, old in enumerate(sorted(parts), start=1)}
    part_defs = tuple(PartClassDef(part_map[old], parts[old]) for old in sorted(parts))
    object_defs = tuple(
        ObjectClassDef(new, nm, kind, tuple(part_map[p] for p in plist))
        for new, (nm, kind, plist) in enumerate(objects[old] for old in sorted(objects))
    )
    return Taxonomy(name=name, object_classes=object_defs, part_classes=part_defs)


def load_taxonomy(document: str | bytes) -> Taxonomy:
    """Parse and validate a taxonomy document given as text."""
    try:
        doc = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise TaxonomyError(f"parse failure: {exc}", loc) from exc
    return taxonomy_from_dict(doc)


def load_taxonomy_file(path: str | Path) -> Taxonomy:
    """Load a taxonomy from a file path or a bundled name (``cityscapes_pp``...)."""
    if str(path) in BUNDLED:
        return bundled_taxonomy(str(path))
    return load_taxonomy(Path(path).read_text())


def bundled_taxonomy(name: str) -> Taxonomy:
    text = resources.files("ppskit.data").joinpath(BUNDLED[name]).read_text()
    return load_taxonomy(text)


def taxonomy_to_dict(t: Taxonomy) -> dict:
    return {
        "name": t.name,
        "object_classes": [
            {"id": c.id, "name": c.name, "kind": c.kind, "parts": list(c.part_class_ids)}
            for c in t.object_classes
        ],
        "part_classes": [{"id": p.id, "name": p.name} for p in t.part_classes],
    }


def dump_taxonomy(t: Taxonomy) -> str:
    return yaml.safe_dump(taxonomy_to_dict(t), sort_keys=False)


def make_taxonomy(
    things: Sequence[Iterable[int]] = (),
    stuff: int = 0,
    name: str = "synthetic",
) -> Taxonomy:
    """Build a small taxonomy: ``stuff`` stuff classes followed by thing classes.

    ``things`` gives the part ids for each thing class; part ids must form
    ``1..N`` between them.
    """
    objects = [{"id": i, "name": f"stuff{i}", "kind": STUFF, "parts": []} for i in range(stuff)]
    all_parts: set[int] = set()
    for k, plist in enumerate(things):
        plist = list(plist)
        all_parts |= set(plist)
        objects.append({"id": stuff + k, "name": f"thing{k}", "kind": THING, "parts": plist})
    parts = [{"id": p, "name": f"part{p}"} for p in sorted(all_parts)]
    return taxonomy_from_dict({"name": name, "object_classes": objects, "part_classes": parts})
