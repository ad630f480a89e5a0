"""Three-level fault hierarchy (loop -> system -> component fault).

The tree is configuration-driven: it is loaded from a JSON document and never
hard-coded by consumers, so alternate plants are expressible. All labels,
losses, and decoders reference the same tree object.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

__all__ = [
    "LabelPath",
    "TaxonomyTree",
    "load_taxonomy",
    "serialize_taxonomy",
    "taxonomy_from_doc",
    "taxonomy_to_doc",
    "validate_path",
    "enumerate_paths",
    "ancestors",
    "taxonomy_digest",
    "default_taxonomy_doc",
    "default_taxonomy",
]


@dataclass(frozen=True)
class LabelPath:
    """A root-to-leaf label: one index per level, each local to its level."""

    loop_idx: int
    system_idx: int
    fault_idx: int


@dataclass(frozen=True)
class TaxonomyTree:
    """Validated three-level hierarchy.

    loops:   level-0 node names.
    systems: (name, parent loop index) per level-1 node.
    faults:  (name, parent system index) per level-2 node.

    Immutable after construction; safe for unrestricted concurrent reads.
    """

    loops: tuple[str, ...]
    systems: tuple[tuple[str, int], ...]
    faults: tuple[tuple[str, int], ...]

    def __post_init__(self):
        _validate_tree(self)

    @property
    def level_sizes(self) -> tuple[int, int, int]:
        return (len(self.loops), len(self.systems), len(self.faults))

    @property
    def loop_names(self) -> tuple[str, ...]:
        return self.loops

    @property
    def system_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.systems)

    @property
    def fault_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.faults)

    def fault_index(self, name: str) -> int:
        return self.fault_names.index(name)

    def path_for_fault(self, fault_idx: int) -> LabelPath:
        system_idx, loop_idx = ancestors(self, fault_idx)
        return LabelPath(loop_idx, system_idx, fault_idx)

    def path_from_names(self, loop: str, system: str, fault: str) -> LabelPath:
        return LabelPath(
            self.loops.index(loop),
            self.system_names.index(system),
            self.fault_names.index(fault),
        )


def _validate_tree(tree: TaxonomyTree) -> None:
    for level, names in (
        ("loop", tree.loops),
        ("system", tree.system_names),
        ("fault", tree.fault_names),
    ):
        if not names:
            raise ConfigError(f"empty level: no {level} nodes defined")
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ConfigError(f"duplicate name at {level} level: {dup!r}")
    for name, loop_idx in tree.systems:
        if not 0 <= loop_idx < len(tree.loops):
            raise ConfigError(
                f"dangling parent: system {name!r} references loop index {loop_idx}"
            )
    for name, system_idx in tree.faults:
        if not 0 <= system_idx < len(tree.systems):
            raise ConfigError(
                f"dangling parent: fault {name!r} references system index {system_idx}"
            )


def taxonomy_from_doc(doc: dict) -> TaxonomyTree:
    """Build a tree from a parsed config document (see README for the schema)."""
    try:
        loops = tuple(str(n) for n in doc["loops"])
        systems = tuple((str(s["name"]), int(s["loop"])) for s in doc["systems"])
        faults = tuple((str(f["name"]), int(f["system"])) for f in doc["faults"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed taxonomy document: {exc}") from exc
    return TaxonomyTree(loops=loops, systems=systems, faults=faults)


def taxonomy_to_doc(tree: TaxonomyTree) -> dict:
    return {
        "loops": list(tree.loops),
        "systems": [{"name": n, "loop": p} for n, p in tree.systems],
        "faults": [{"name": n, "system": p} for n, p in tree.faults],
    }


def load_taxonomy(config_document: str) -> TaxonomyTree:
    """Parse and validate a taxonomy from JSON text."""
    try:
        doc = json.loads(config_document)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"taxonomy document is not valid JSON: {exc}") from exc
    return taxonomy_from_doc(doc)


def serialize_taxonomy(tree: TaxonomyTree) -> str:
    """Inverse of load_taxonomy: load_taxonomy(serialize_taxonomy(t)) == t."""
    return json.dumps(taxonomy_to_doc(tree), indent=2)


def taxonomy_digest(tree: TaxonomyTree) -> str:
    """Stable content hash used to pair model files with the tree they were trained on."""
    canonical = json.dumps(taxonomy_to_doc(tree), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_path(tree: TaxonomyTree, path: LabelPath) -> bool:
    """True iff the fault's parent is the system and the system's parent is the loop."""
    n_loops, n_systems, n_faults = tree.level_sizes
    if not 0 <= path.loop_idx < n_loops:
        raise IndexError(f"loop index {path.loop_idx} out of range")
    if not 0 <= path.system_idx < n_systems:
        raise IndexError(f"system index {path.system_idx} out of range")
    if not 0 <= path.fault_idx < n_faults:
        raise IndexError(f"fault index {path.fault_idx} out of range")
    fault_parent = tree.faults[path.fault_idx][1]
    system_parent = tree.systems[path.system_idx][1]
    return fault_parent == path.system_idx and system_parent == path.loop_idx


def enumerate_paths(tree: TaxonomyTree) -> list[LabelPath]:
    """One valid path per fault, ordered by fault index."""
    return [tree.path_for_fault(f) for f in range(len(tree.faults))]


def ancestors(tree: TaxonomyTree, fault_idx: int) -> tuple[int, int]:
    """Parent chain of a fault: (system index, loop index)."""
    if not 0 <= fault_idx < len(tree.faults):
        raise IndexError(f"fault index {fault_idx} out of range")
    system_idx = tree.faults[fault_idx][1]
    loop_idx = tree.systems[system_idx][1]
    return system_idx, loop_idx


def default_taxonomy_doc() -> dict:
    """Default plant hierarchy: 2 loops, 4 systems, 16 faults.

    Six faults carry their real designations; the other ten are placeholders
    that complete the count, distributed so every system has at least three
    faults.
    """
    return {
        "loops": ["Loop1", "Loop2"],
        "systems": [
            {"name": "reactor coolant system", "loop": 0},
            {"name": "main steam system", "loop": 1},
            {"name": "condensate system", "loop": 1},
            {"name": "main feed water system", "loop": 1},
        ],
        "faults": [
            {"name": "large break in CL1 cold pipe section", "system": 0},
            {"name": "misstart of safety injection system", "system": 0},
            {"name": "break in SG1 steam pipe", "system": 1},
            {"name": "break in SG1 feed pipe", "system": 3},
            {"name": "drop of control rod H08", "system": 0},
            {"name": "frequency conversion failure of main pump MP01A", "system": 0},
            {"name": "stuck-open pressurizer relief valve PZR01", "system": 0},
            {"name": "spurious closure of main steam isolation valve MSIV2", "system": 1},
            {"name": "steam header pressure sensor PT21 drift", "system": 1},
            {"name": "trip of condensate pump CEP01A", "system": 2},
            {"name": "condenser vacuum degradation", "system": 2},
            {"name": "condensate polisher inlet valve blockage", "system": 2},
            {"name": "hotwell level controller LC05 failure", "system": 2},
            {"name": "cavitation of feed water pump FWP02B", "system": 3},
            {"name": "oscillation of feed water regulating valve FRV1", "system": 3},
            {"name": "tube leak in feed water heater FWH3", "system": 3},
        ],
    }


def default_taxonomy() -> TaxonomyTree:
    return taxonomy_from_doc(default_taxonomy_doc())
