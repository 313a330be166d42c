"""Closed label spaces: phases, instruments, verbs, targets, valid triplets.

A :class:`LabelSpace` is loaded from a JSON config and is immutable after
load, so it can be shared freely across workers.  Name matching is
case-insensitive everywhere; ids are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

Triplet = tuple[int, int, int]

_COMPONENT_KEYS = ("phases", "instruments", "verbs", "targets")


class LabelSpaceError(ValueError):
    """A label-space config violates the schema or its own declared counts."""


@dataclass(frozen=True)
class LabelSpace:
    """Validated, immutable label space.

    ``valid_triplets`` is the ordered catalog of allowed
    (instrument_id, verb_id, target_id) combinations; a triplet class id is
    an index into it.
    """

    phases: tuple[str, ...]
    instruments: tuple[str, ...]
    verbs: tuple[str, ...]
    targets: tuple[str, ...]
    valid_triplets: tuple[Triplet, ...]

    def __post_init__(self) -> None:
        lookup = {}
        for kind in _COMPONENT_KEYS:
            names = getattr(self, kind)
            lookup[kind] = {name.lower(): i for i, name in enumerate(names)}
        object.__setattr__(self, "_name_to_id", lookup)
        object.__setattr__(
            self, "_triplet_to_id", {t: k for k, t in enumerate(self.valid_triplets)}
        )

    # -- name/id lookups -------------------------------------------------

    def _lookup(self, kind: str, name: str) -> int:
        table = self._name_to_id[kind]
        key = name.lower()
        if key not in table:
            raise KeyError(f"unknown {kind[:-1]} name: {name!r}")
        return table[key]

    def phase_id(self, name: str) -> int:
        return self._lookup("phases", name)

    def instrument_id(self, name: str) -> int:
        return self._lookup("instruments", name)

    def verb_id(self, name: str) -> int:
        return self._lookup("verbs", name)

    def target_id(self, name: str) -> int:
        return self._lookup("targets", name)

    def triplet_id(self, components: Triplet) -> int:
        """Index of ``components`` in the valid-triplet catalog."""
        components = tuple(int(c) for c in components)
        if components not in self._triplet_to_id:
            raise KeyError(f"triplet {components} not in valid_triplets")
        return self._triplet_to_id[components]

    def has_triplet(self, components: Triplet) -> bool:
        return tuple(int(c) for c in components) in self._triplet_to_id

    # -- derived structure -----------------------------------------------

    @property
    def num_triplets(self) -> int:
        return len(self.valid_triplets)

    def iv_pairs(self) -> tuple[tuple[int, int], ...]:
        """Distinct (instrument, verb) pairs, in catalog order of first use."""
        seen: dict[tuple[int, int], None] = {}
        for i, v, _ in self.valid_triplets:
            seen.setdefault((i, v))
        return tuple(seen)

    def it_pairs(self) -> tuple[tuple[int, int], ...]:
        """Distinct (instrument, target) pairs, in catalog order of first use."""
        seen: dict[tuple[int, int], None] = {}
        for i, _, o in self.valid_triplets:
            seen.setdefault((i, o))
        return tuple(seen)


@dataclass(frozen=True)
class TripletClass:
    """One catalog entry: class id plus its component ids."""

    id: int
    components: Triplet

    @classmethod
    def from_id(cls, space: LabelSpace, class_id: int) -> "TripletClass":
        return cls(id=class_id, components=triplet_components(space, class_id))


def triplet_components(space: LabelSpace, class_id: int) -> Triplet:
    """Component tuple for a triplet class id; inverse of ``triplet_id``."""
    if not 0 <= class_id < space.num_triplets:
        raise IndexError(
            f"triplet id {class_id} out of range [0, {space.num_triplets})"
        )
    return space.valid_triplets[class_id]


def triplet_id(space: LabelSpace, components: Triplet) -> int:
    return space.triplet_id(components)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise LabelSpaceError(message)


def label_space_from_dict(raw: dict) -> LabelSpace:
    """Validate a parsed config dict and build a :class:`LabelSpace`."""
    _require(isinstance(raw, dict), "config root must be a JSON object")
    for key in _COMPONENT_KEYS + ("valid_triplets",):
        _require(key in raw, f"missing key {key!r}")

    lists: dict[str, tuple[str, ...]] = {}
    for key in _COMPONENT_KEYS:
        value = raw[key]
        _require(
            isinstance(value, list) and all(isinstance(x, str) for x in value),
            f"{key!r} must be an array of strings",
        )
        _require(len(value) > 0, f"{key!r} must be non-empty")
        for name in value:
            _require(name != "" and not any(c.isspace() for c in name),
                     f"label name {name!r} in {key!r} must be non-empty and "
                     "contain no whitespace")
        lowered = [x.lower() for x in value]
        _require(len(set(lowered)) == len(lowered), f"duplicate names in {key!r}")
        lists[key] = tuple(value)

    sizes = {
        "phases": len(lists["phases"]),
        "instruments": len(lists["instruments"]),
        "verbs": len(lists["verbs"]),
        "targets": len(lists["targets"]),
    }
    declared = raw.get("counts", {})
    _require(isinstance(declared, dict), "'counts' must be an object")
    for key, expected in declared.items():
        _require(key in sizes, f"'counts' has unknown key {key!r}")
        _require(
            sizes[key] == expected,
            f"{key}: declared count {expected} != actual {sizes[key]}",
        )

    triplets: list[Triplet] = []
    bounds = (sizes["instruments"], sizes["verbs"], sizes["targets"])
    for row in raw["valid_triplets"]:
        _require(
            isinstance(row, list) and len(row) == 3
            and all(isinstance(x, int) and not isinstance(x, bool) for x in row),
            f"valid_triplets entry {row!r} must be a 3-integer array",
        )
        for component, bound, kind in zip(row, bounds, ("instrument", "verb", "target")):
            _require(
                0 <= component < bound,
                f"triplet {row} has {kind} id {component} out of range [0, {bound})",
            )
        triplets.append((row[0], row[1], row[2]))
    _require(len(triplets) > 0, "'valid_triplets' must be non-empty")
    _require(
        len(set(triplets)) == len(triplets), "duplicate entries in 'valid_triplets'"
    )

    return LabelSpace(valid_triplets=tuple(triplets), **lists)


def load_label_space(config_path: str | Path) -> LabelSpace:
    """Load and validate a label-space JSON config file."""
    path = Path(config_path)
    if not path.is_file():
        raise FileNotFoundError(f"label-space config not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LabelSpaceError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return label_space_from_dict(raw)
    except LabelSpaceError as exc:
        raise LabelSpaceError(f"{path}: {exc}") from exc


def packaged_config_path(name: str) -> Path:
    """Path of a config shipped inside the package (e.g. 'cholect45_label_space.json')."""
    return Path(str(resources.files("surgscene").joinpath("configs", name)))


def cholect45_label_space() -> LabelSpace:
    """The shipped cholecystectomy label space (7/6/10/15 + triplet catalog)."""
    return load_label_space(packaged_config_path("cholect45_label_space.json"))
