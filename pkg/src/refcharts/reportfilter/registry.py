"""Canonical anatomical target registry.

Free-form structure names coming back from text models drift and
hallucinate; stable integer identifiers over a fixed merged target list
make voting, verification, and auditing deterministic. The bundled
registry merges the segmentation label space (left/right counterparts,
individual vertebrae and ribs, lung lobes) into broader targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

from ..errors import ContractError

BUNDLED_TARGETS = 39
BUNDLED_MEMBERS = 106


@dataclass(frozen=True)
class CanonicalTarget:
    """One merged anatomical target and the segmentation labels it covers."""

    target_id: int
    canonical_name: str
    group: str
    member_structures: tuple


@dataclass(frozen=True)
class TargetRegistry:
    """Immutable target table with id and member lookups."""

    targets: tuple

    @cached_property
    def by_id(self) -> dict:
        return {t.target_id: t for t in self.targets}

    @cached_property
    def member_to_target(self) -> dict:
        out = {}
        for t in self.targets:
            for m in t.member_structures:
                out[m] = t.target_id
        return out

    @property
    def ids(self) -> tuple:
        return tuple(t.target_id for t in self.targets)

    def __len__(self) -> int:
        return len(self.targets)

    def __contains__(self, target_id) -> bool:
        return target_id in self.by_id

    def get(self, target_id: int) -> CanonicalTarget:
        try:
            return self.by_id[target_id]
        except KeyError:
            raise ContractError(f"unknown target id {target_id!r}") from None

    def target_of(self, member: str) -> int:
        try:
            return self.member_to_target[member]
        except KeyError:
            raise ContractError(
                f"structure {member!r} is not a member of any target"
            ) from None

    def validate(self, *, expect_targets=None, expect_members=None) -> None:
        ids = [t.target_id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise ContractError("target ids must be unique")
        names = [t.canonical_name for t in self.targets]
        if len(set(names)) != len(names):
            raise ContractError("target names must be unique")
        members = [m for t in self.targets for m in t.member_structures]
        if len(set(members)) != len(members):
            raise ContractError(
                "each structure must map to exactly one target")
        for t in self.targets:
            if not t.member_structures:
                raise ContractError(
                    f"target {t.canonical_name!r} has no member structures")
        if expect_targets is not None and len(self.targets) != expect_targets:
            raise ContractError(
                f"expected {expect_targets} targets, found {len(self.targets)}")
        if expect_members is not None and len(members) != expect_members:
            raise ContractError(
                f"expected {expect_members} member structures, found "
                f"{len(members)}")


def registry_from_obj(obj: dict) -> TargetRegistry:
    if obj.get("format_version") != 1:
        raise ContractError(
            f"unsupported registry format_version {obj.get('format_version')!r}")
    targets = tuple(
        CanonicalTarget(target_id=int(t["target_id"]),
                        canonical_name=str(t["canonical_name"]),
                        group=str(t.get("group", "")),
                        member_structures=tuple(t["member_structures"]))
        for t in obj["targets"])
    return TargetRegistry(targets)


def load_registry() -> TargetRegistry:
    """Load and validate the bundled canonical target registry."""
    path = resources.files(__package__).joinpath("canonical_targets.json")
    registry = registry_from_obj(json.loads(path.read_text()))
    registry.validate(expect_targets=BUNDLED_TARGETS,
                      expect_members=BUNDLED_MEMBERS)
    return registry
