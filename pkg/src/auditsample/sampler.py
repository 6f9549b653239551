"""Turn an integer audit plan into concrete unit-level selections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import AuditPlan, _SEED_MASK

ADD = "add"
REMOVE = "remove"
KEEP_IN = "keep-in"
KEEP_OUT = "keep-out"


class StratumMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class UnitRecord:
    """One unit of the observed sample; ``x`` and ``y`` are 0-based category indices."""

    unit_id: str
    x: int
    y: int
    z_initial: int


@dataclass(frozen=True)
class Units:
    """Column-oriented unit data, the form used internally for large samples."""

    unit_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        n = len(self.unit_id)
        ids = np.asarray(self.unit_id).astype(str)
        cols = {}
        for name in ("x", "y", "z"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise ValueError(f"column {name} has length {arr.size}, expected {n}")
            if np.any(arr < 0):
                raise ValueError(f"column {name} has negative category indices")
            cols[name] = arr
        if np.any((cols["z"] != 0) & (cols["z"] != 1)):
            raise ValueError("z must be 0 or 1")
        if np.unique(ids).size != n:
            raise ValueError("unit ids must be unique")
        object.__setattr__(self, "unit_id", ids)
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls(
            unit_id=np.array([str(r.unit_id) for r in records], dtype=str),
            x=np.array([r.x for r in records], dtype=np.int64),
            y=np.array([r.y for r in records], dtype=np.int64),
            z=np.array([r.z_initial for r in records], dtype=np.int64),
        )

    def __len__(self):
        return len(self.unit_id)

    def counts(self, I, J) -> np.ndarray:
        if len(self) and (self.x.max() >= I or self.y.max() >= J):
            raise ValueError(f"category index out of range for a {I} x {J} table")
        flat = np.bincount((self.x * J + self.y) * 2 + self.z, minlength=I * J * 2)
        return flat.reshape(I, J, 2)


@dataclass(frozen=True)
class SampleSelection:
    added: frozenset
    removed: frozenset
    final_sample: frozenset
    per_stratum_inclusion: np.ndarray
    seed: int

    def action(self, unit_id, z_initial):
        if unit_id in self.added:
            return ADD
        if unit_id in self.removed:
            return REMOVE
        return KEEP_IN if z_initial == 1 else KEEP_OUT


def stratum_rng(seed: int, i: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _SEED_MASK, int(i), int(j)]))


def partial_shuffle(rng: np.random.Generator, items, k: int) -> list:
    """First ``k`` items of a Fisher-Yates shuffle of ``items``."""
    items = list(items)
    n = len(items)
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n} items")
    for a in range(k):
        b = int(rng.integers(a, n))
        items[a], items[b] = items[b], items[a]
    return items[:k]


def realize(plan: AuditPlan, units, seed: int) -> SampleSelection:
    """Draw the plan's additions and removals by stratified SRS without replacement.

    Within stratum (i, j) the additions come from the units with Z = 0 and
    the removals from the units with Z = 1.  Units are sorted by id before
    drawing, so the result does not depend on input order.
    """
    if not isinstance(units, Units):
        units = Units.from_records(units)
    n = plan.table.counts
    I, J = plan.table.I, plan.table.J
    got = units.counts(I, J)
    if not np.array_equal(got, n):
        bad = [(int(i), int(j)) for i, j in zip(*np.nonzero(np.any(got != n, axis=2)))]
        detail = ", ".join(
            f"(i={i}, j={j}): plan has {n[i, j].tolist()}, units have {got[i, j].tolist()}" for i, j in bad[:10]
        )
        raise StratumMismatchError(f"unit counts disagree with the plan in {len(bad)} strata: {detail}")

    order = np.lexsort((units.unit_id, units.z, units.y, units.x))
    sorted_ids = units.unit_id[order]
    bounds = np.concatenate([[0], np.cumsum(n.ravel())])

    added, removed = [], []
    for i in range(I):
        for j in range(J):
            dp = int(plan.delta_plus[i, j])
            dm = int(plan.delta_minus[i, j])
            if dp == 0 and dm == 0:
                continue
            rng = stratum_rng(seed, i, j)
            k0 = (i * J + j) * 2
            pool0 = sorted_ids[bounds[k0]:bounds[k0 + 1]]
            pool1 = sorted_ids[bounds[k0 + 1]:bounds[k0 + 2]]
            if dp:
                added.extend(partial_shuffle(rng, pool0, dp))
            if dm:
                removed.extend(partial_shuffle(rng, pool1, dm))

    initial = set(units.unit_id[units.z == 1].tolist())
    added_set = frozenset(str(u) for u in added)
    removed_set = frozenset(str(u) for u in removed)
    final = frozenset((initial - removed_set) | added_set)
    with np.errstate(divide="ignore", invalid="ignore"):
        incl = np.where(n[:, :, 0] > 0, plan.delta_plus / np.where(n[:, :, 0] > 0, n[:, :, 0], 1), np.nan)
    return SampleSelection(added_set, removed_set, final, incl, int(seed))


def final_flags(units: Units, selection: SampleSelection) -> np.ndarray:
    """Final Z for every unit, in the order of ``units``."""
    z = units.z.copy()
    if selection.added:
        z[np.isin(units.unit_id, list(selection.added))] = 1
    if selection.removed:
        z[np.isin(units.unit_id, list(selection.removed))] = 0
    return z


def actions(units: Units, selection: SampleSelection) -> list:
    """``(unit_id, action)`` pairs sorted by unit id."""
    z_final = final_flags(units, selection)
    out = []
    for uid, z0, z1 in zip(units.unit_id.tolist(), units.z.tolist(), z_final.tolist()):
        if z0 == 0 and z1 == 1:
            act = ADD
        elif z0 == 1 and z1 == 0:
            act = REMOVE
        else:
            act = KEEP_IN if z0 == 1 else KEEP_OUT
        out.append((uid, act))
    out.sort(key=lambda r: r[0])
    return out
