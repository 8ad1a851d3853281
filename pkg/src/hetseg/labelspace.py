"""Label taxonomies with super labels, and the validity mask derived from them.

Base labels are ``0 .. num_base_labels - 1`` with background at 0. A super
label gets its own integer id above the base range and stands for the union
of its member base labels. A label map stores one integer per pixel; pixels
holding a super id are the ones where only coarse information exists.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class SchemeError(ValueError):
    """Raised when a scheme is malformed or a label map violates it."""


@dataclass(frozen=True)
class SuperLabel:
    id: int
    members: frozenset
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "members", frozenset(int(m) for m in self.members))


@dataclass(frozen=True)
class LabelScheme:
    """Full label set plus zero or more disjoint super labels.

    Parameters
    ----------
    num_base_labels : int
        Size of the full label set, background included.
    super_labels : sequence of SuperLabel
        Coarse labels; member sets must be pairwise disjoint.
    names : sequence of str, optional
        Human readable name per base id.
    """

    num_base_labels: int
    super_labels: tuple = ()
    names: tuple = field(default=())

    def __post_init__(self):
        n = int(self.num_base_labels)
        object.__setattr__(self, "num_base_labels", n)
        supers = tuple(
            s if isinstance(s, SuperLabel) else SuperLabel(**s) for s in self.super_labels
        )
        object.__setattr__(self, "super_labels", supers)
        object.__setattr__(self, "names", tuple(self.names))
        if n < 1:
            raise SchemeError("num_base_labels must be positive")
        if self.names and len(self.names) != n:
            raise SchemeError(f"expected {n} names, got {len(self.names)}")
        seen_ids = set()
        seen_members = set()
        for s in supers:
            if s.id < n:
                raise SchemeError(f"super id {s.id} collides with base id range 0..{n - 1}")
            if s.id > 255:
                raise SchemeError(f"super id {s.id} does not fit the 8-bit label format")
            if s.id in seen_ids:
                raise SchemeError(f"duplicate super id {s.id}")
            if not s.members:
                raise SchemeError(f"super label {s.id} has no members")
            bad = [m for m in s.members if not 0 <= m < n]
            if bad:
                raise SchemeError(f"super label {s.id} has invalid members {sorted(bad)}")
            overlap = seen_members & s.members
            if overlap:
                raise SchemeError(f"super label {s.id} overlaps another on {sorted(overlap)}")
            seen_ids.add(s.id)
            seen_members |= s.members

    @property
    def super_ids(self) -> list:
        return [s.id for s in self.super_labels]

    @property
    def max_id(self) -> int:
        return max([self.num_base_labels - 1, *self.super_ids])

    def get_super(self, super_id: int) -> SuperLabel:
        for s in self.super_labels:
            if s.id == super_id:
                return s
        raise SchemeError(f"super id {super_id} is not defined in scheme")

    def is_valid_id(self, label_id: int) -> bool:
        return 0 <= label_id < self.num_base_labels or label_id in self.super_ids

    def member_table(self) -> np.ndarray:
        """Boolean ``(max_id + 1, C)`` table: row ``v`` flags the base labels id ``v`` admits.

        A base id admits only itself; a super id admits its members; unused ids
        admit nothing.
        """
        table = np.zeros((self.max_id + 1, self.num_base_labels), dtype=bool)
        table[np.arange(self.num_base_labels), np.arange(self.num_base_labels)] = True
        for s in self.super_labels:
            table[s.id, sorted(s.members)] = True
        return table

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "num_base_labels": self.num_base_labels,
            "super_labels": [
                {"id": s.id, "members": sorted(s.members), "name": s.name}
                for s in self.super_labels
            ],
        }
        if self.names:
            d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelScheme":
        unknown = set(d) - {"num_base_labels", "super_labels", "names"}
        if unknown:
            raise SchemeError(f"unknown scheme keys: {sorted(unknown)}")
        supers = tuple(
            SuperLabel(id=s["id"], members=s["members"], name=s.get("name", ""))
            for s in d.get("super_labels", [])
        )
        return cls(int(d["num_base_labels"]), supers, tuple(d.get("names", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelScheme":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelScheme":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def check_labels(labels, scheme: LabelScheme) -> np.ndarray:
    """Return ``labels`` as an integer array, raising if any id is unknown to ``scheme``."""
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        if labels.size and not np.all(np.mod(labels, 1) == 0):
            raise SchemeError("label maps must hold integer ids")
        labels = labels.astype(np.int64)
    valid = np.zeros(max(scheme.max_id + 1, 1), dtype=bool)
    valid[: scheme.num_base_labels] = True
    valid[scheme.super_ids] = True
    flat = labels.ravel()
    out_of_range = (flat < 0) | (flat > scheme.max_id)
    if out_of_range.any():
        raise SchemeError(f"unknown label id {int(flat[out_of_range][0])}")
    if not valid[flat].all():
        raise SchemeError(f"unknown label id {int(flat[~valid[flat]][0])}")
    return labels


def mask_from_labels(labels, scheme: LabelScheme) -> np.ndarray:
    """Validity mask: 0 where a pixel carries a super id, 1 elsewhere (uint8, same shape)."""
    labels = check_labels(labels, scheme)
    return (labels < scheme.num_base_labels).astype(np.uint8)


def merge_labels(labels, scheme: LabelScheme, super_id: int) -> np.ndarray:
    """Rewrite every pixel holding a member of ``super_id`` to ``super_id``."""
    sup = scheme.get_super(super_id)
    labels = check_labels(labels, scheme)
    if (labels >= scheme.num_base_labels).any():
        raise SchemeError("merge_labels expects a map of base ids only")
    out = labels.copy()
    out[np.isin(labels, sorted(sup.members))] = super_id
    return out


def _check_permutation(perm: Sequence[int], n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(n)):
        raise SchemeError(f"permutation must be a bijection on 0..{n - 1}")
    if perm[0] != 0:
        raise SchemeError("permutation must keep background at 0")
    return perm


def relabel_permute(scheme: LabelScheme, labels, permutation: Iterable[int]):
    """Rename base ids by ``permutation`` (old id -> new id) in both scheme and map.

    Super ids keep their value; their member sets are renamed.
    """
    perm = _check_permutation(list(permutation), scheme.num_base_labels)
    labels = check_labels(labels, scheme)
    lut = np.arange(scheme.max_id + 1, dtype=np.int64)
    lut[: scheme.num_base_labels] = perm
    new_labels = lut[labels].astype(labels.dtype)
    supers = tuple(
        SuperLabel(s.id, frozenset(int(perm[m]) for m in s.members), s.name)
        for s in scheme.super_labels
    )
    names = ()
    if scheme.names:
        renamed = [""] * scheme.num_base_labels
        for old, new in enumerate(perm):
            renamed[new] = scheme.names[old]
        names = tuple(renamed)
    return LabelScheme(scheme.num_base_labels, supers, names), new_labels


def inverse_permutation(permutation: Sequence[int]) -> np.ndarray:
    perm = np.asarray(permutation, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv
