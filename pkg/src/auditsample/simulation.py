"""Monte Carlo study of the audit-sample procedure.

Populations of (W, X, Y, Z) are drawn from a joint density built as the
product of three bivariate blocks (X-Z, W-X and W-Y), which gives the
log-linear model (WX)(WY)(XZ).  Each replicate runs the optimizer, realizes
the new audit sample and compares the estimates before and after.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import AuditedData, PopulationMargins, estimate
from .sampler import Units, final_flags, realize
from .solver import SolverConfig, _SEED_MASK, optimize
from .table import ContingencyTable3, deviance

# rows Z = 0, 1; columns X = 1..3
XZ_BLOCKS = {
    1: [[.323, .323, .323], [.010, .010, .010]],
    2: [[.323, .323, .323], [.012, .010, .008]],
    3: [[.323, .323, .323], [.015, .010, .005]],
    4: [[.323, .323, .323], [.018, .010, .002]],
}
# rows X = 1..3; columns W = 1..3
WX_BLOCKS = {
    1: [[.333, 0, 0], [0, .333, 0], [0, 0, .333]],
    2: [[.267, .033, .033], [.033, .267, .033], [.033, .033, .267]],
    3: [[.333, 0, 0], [.017, .300, .017], [.033, .033, .267]],
    4: [[.300, .017, .017], [.033, .267, .033], [.050, .050, .233]],
}
# rows Y = 1..3; columns W = 1..3
WY_BLOCKS = {
    1: [[.267, .033, .033], [.033, .267, .033], [.033, .033, .267]],
    2: [[.200, .067, .067], [.067, .200, .067], [.067, .067, .267]],
    3: [[.300, .017, .017], [.033, .267, .033], [.050, .050, .233]],
    4: [[.267, .033, .033], [.067, .200, .067], [.100, .100, .133]],
}

DESK = {"n_replicates": 100, "n_attempts": 50}
PAPER = {"n_replicates": 1000, "n_attempts": 200}


class SimulationError(RuntimeError):
    def __init__(self, replicate, exc):
        super().__init__(f"replicate {replicate}: {exc}")
        self.replicate = replicate


def _block(table, key):
    if isinstance(key, (int, np.integer)):
        return np.asarray(table[int(key)], dtype=np.float64)
    return np.asarray(key, dtype=np.float64)


@dataclass(frozen=True)
class ConditionSpec:
    """One simulation condition.

    ``wx``, ``wy`` and ``xz`` are condition numbers 1-4 or explicit blocks
    (``xz`` as Z x X, ``wx`` as X x W, ``wy`` as Y x W).
    """

    wx: object = 1
    wy: object = 1
    xz: object = 1
    n_pop: int = 10_000
    n_replicates: int = DESK["n_replicates"]
    m_plus: int = 100
    m_minus: int = 10
    n_attempts: int = DESK["n_attempts"]
    optimize: bool = True
    solver_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, blocks in (("wx", WX_BLOCKS), ("wy", WY_BLOCKS), ("xz", XZ_BLOCKS)):
            key = getattr(self, name)
            if isinstance(key, (int, np.integer)) and int(key) not in blocks:
                raise ValueError(f"{name} condition must be 1-4, got {key!r}")
            b = _block(blocks, key)
            if np.any(b < 0):
                raise ValueError(f"{name} block has negative entries")
        if self.n_pop < 1 or self.n_replicates < 0:
            raise ValueError("n_pop must be positive and n_replicates nonnegative")

    @property
    def name(self):
        def part(tag, key):
            return f"{tag}{key}" if isinstance(key, (int, np.integer)) else f"{tag}*"
        star = "" if self.optimize else "*"
        return f"{part('WX', self.wx)},{part('WY', self.wy)},{part('XZ', self.xz)}{star}"

    @classmethod
    def parse(cls, text, **kwargs):
        """Build from a label such as ``"WX1,WY1,XZ4"`` (a trailing ``*`` disables optimization)."""
        label = text.strip()
        opt = not label.endswith("*")
        keys = {}
        for token in label.rstrip("*").split(","):
            token = token.strip().upper()
            for tag in ("WX", "WY", "XZ"):
                if token.startswith(tag):
                    keys[tag.lower()] = int(token[len(tag):])
                    break
            else:
                raise ValueError(f"cannot parse condition component {token!r}")
        if set(keys) != {"wx", "wy", "xz"}:
            raise ValueError(f"condition {text!r} must name WX, WY and XZ")
        kwargs.setdefault("optimize", opt)
        return cls(**keys, **kwargs)

    def solver_config(self, seed) -> SolverConfig:
        return SolverConfig(m_plus=self.m_plus, m_minus=self.m_minus, n_attempts=self.n_attempts,
                            master_seed=seed, **self.solver_overrides)


def build_joint(condition: ConditionSpec) -> np.ndarray:
    """Joint probabilities ``p[w, x, y, z]`` proportional to the block product."""
    a = _block(XZ_BLOCKS, condition.xz)  # z, x
    b = _block(WX_BLOCKS, condition.wx)  # x, w
    c = _block(WY_BLOCKS, condition.wy)  # y, w
    joint = np.einsum("zx,xw,yw->wxyz", a, b, c)
    total = joint.sum()
    if not total > 0:
        raise ValueError("condition has zero total mass")
    return joint / total


def _seed(*parts):
    return np.random.SeedSequence([int(p) & _SEED_MASK for p in parts])


def draw_population(joint: np.ndarray, n: int, rng: np.random.Generator):
    """``n`` i.i.d. units as arrays (w, x, y, z)."""
    flat = rng.choice(joint.size, size=n, p=joint.ravel())
    return np.unravel_index(flat, joint.shape)


def population_truth(w, x, n_w, n_x):
    """Finite-population ``P^W`` (H,) and ``P^{X|W}`` (I, H)."""
    c = np.bincount(x * n_w + w, minlength=n_x * n_w).reshape(n_x, n_w).astype(np.float64)
    pw = c.sum(axis=0) / c.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        pxw = c / c.sum(axis=0, keepdims=True)
    return pw, pxw


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    seed: int
    deviance_before: float
    deviance_after: float
    n_before: int
    n_after: int
    pw_true: np.ndarray
    pxw_true: np.ndarray
    pw_before: np.ndarray
    pw_after: np.ndarray
    se_pw_before: np.ndarray
    se_pw_after: np.ndarray
    pxw_before: np.ndarray
    pxw_after: np.ndarray
    se_pxw_before: np.ndarray
    se_pxw_after: np.ndarray

    @property
    def relative_deviance(self) -> float:
        if not self.deviance_before > 0:
            return float("nan")
        return self.deviance_after / self.deviance_before

    @property
    def bias_pw_before(self):
        return self.pw_before - self.pw_true

    @property
    def bias_pw_after(self):
        return self.pw_after - self.pw_true

    @property
    def bias_pxw_before(self):
        return self.pxw_before - self.pxw_true

    @property
    def bias_pxw_after(self):
        return self.pxw_after - self.pxw_true


def _estimate(w, x, y, mask, margins, n_w, n_x):
    data = AuditedData(w[mask], x[mask], y[mask], n_w=n_w, n_x=n_x)
    return estimate(data, margins)


def run_replicate(condition: ConditionSpec, joint, master_seed, r) -> ReplicateResult:
    rng = np.random.default_rng(_seed(master_seed, r, 0))
    H, I, J, _ = joint.shape
    w, x, y, z = draw_population(joint, condition.n_pop, rng)
    margins = PopulationMargins.from_counts(np.bincount(y, minlength=J))
    pw_true, pxw_true = population_truth(w, x, H, I)
    counts = np.bincount((x * J + y) * 2 + z, minlength=I * J * 2).reshape(I, J, 2)
    table = ContingencyTable3(counts)

    before = _estimate(w, x, y, z == 1, margins, H, I)
    solve_seed = int(_seed(master_seed, r, 1).generate_state(1, np.uint64)[0])
    sample_seed = int(_seed(master_seed, r, 2).generate_state(1, np.uint64)[0])
    if condition.optimize:
        plan = optimize(table, condition.solver_config(solve_seed))
        units = Units(np.char.zfill(np.arange(condition.n_pop).astype(str), 8), x, y, z)
        sel = realize(plan, units, sample_seed)
        z_after = final_flags(units, sel)
        d_after = plan.achieved_deviance
        d_before = plan.deviance_before
    else:
        z_after = z
        d_before = d_after = deviance(table)
    after = _estimate(w, x, y, z_after == 1, margins, H, I)
    return ReplicateResult(
        replicate=r, seed=int(master_seed), deviance_before=d_before, deviance_after=d_after,
        n_before=int(z.sum()), n_after=int(z_after.sum()),
        pw_true=pw_true, pxw_true=pxw_true,
        pw_before=before.p_w, pw_after=after.p_w,
        se_pw_before=before.se_w, se_pw_after=after.se_w,
        pxw_before=before.p_x_given_w, pxw_after=after.p_x_given_w,
        se_pxw_before=before.se_x_given_w, se_pxw_after=after.se_x_given_w,
    )


def run_condition(condition: ConditionSpec, master_seed: int) -> list:
    """All replicates of one condition; replicate ``r`` is seeded by ``(master_seed, r)``."""
    joint = build_joint(condition)
    out = []
    for r in range(condition.n_replicates):
        try:
            out.append(run_replicate(condition, joint, master_seed, r))
        except Exception as exc:  # noqa: BLE001 - re-raised with the replicate index
            raise SimulationError(r, exc) from exc
    return out


@dataclass(frozen=True)
class VarianceSummary:
    condition: str
    n_samples: int
    sd_pw: np.ndarray
    mean_se_pw: np.ndarray
    sd_pxw: np.ndarray
    mean_se_pxw: np.ndarray

    @property
    def ratio_pw(self):
        return self.mean_se_pw / self.sd_pw

    @property
    def ratio_pxw(self):
        return self.mean_se_pxw / self.sd_pxw


def variance_conditions(n_samples=200, n_attempts=DESK["n_attempts"]):
    """The four selective conditions plus the unoptimized benchmark."""
    common = dict(n_replicates=n_samples, n_attempts=n_attempts)
    conds = [ConditionSpec(wx=4, wy=k, xz=4, **common) for k in (1, 2, 3, 4)]
    conds.append(ConditionSpec(wx=4, wy=1, xz=1, optimize=False, **common))
    return conds


def run_variance_condition(condition: ConditionSpec, master_seed: int) -> VarianceSummary:
    """Fixed population, repeated initial audits drawn through the X-Z block."""
    joint = build_joint(condition)
    H, I, J, _ = joint.shape
    rng = np.random.default_rng(_seed(master_seed, 0))
    pop = joint.sum(axis=3)
    flat = rng.choice(pop.size, size=condition.n_pop, p=pop.ravel())
    w, x, y = np.unravel_index(flat, pop.shape)
    a = _block(XZ_BLOCKS, condition.xz)
    p_audit = a[1] / a.sum(axis=0)
    margins = PopulationMargins.from_counts(np.bincount(y, minlength=J))
    ids = np.char.zfill(np.arange(condition.n_pop).astype(str), 8)

    pw, se_pw, pxw, se_pxw = [], [], [], []
    for r in range(condition.n_replicates):
        try:
            srng = np.random.default_rng(_seed(master_seed, r, 1))
            z = (srng.uniform(size=condition.n_pop) < p_audit[x]).astype(np.int64)
            if condition.optimize:
                counts = np.bincount((x * J + y) * 2 + z, minlength=I * J * 2).reshape(I, J, 2)
                solve_seed = int(_seed(master_seed, r, 2).generate_state(1, np.uint64)[0])
                plan = optimize(ContingencyTable3(counts), condition.solver_config(solve_seed))
                units = Units(ids, x, y, z)
                sel = realize(plan, units, int(_seed(master_seed, r, 3).generate_state(1, np.uint64)[0]))
                z = final_flags(units, sel)
            rep = _estimate(w, x, y, z == 1, margins, H, I)
        except Exception as exc:  # noqa: BLE001
            raise SimulationError(r, exc) from exc
        pw.append(rep.p_w)
        se_pw.append(rep.se_w)
        pxw.append(rep.p_x_given_w)
        se_pxw.append(rep.se_x_given_w)
    pw, se_pw, pxw, se_pxw = map(np.asarray, (pw, se_pw, pxw, se_pxw))
    return VarianceSummary(
        condition=condition.name,
        n_samples=condition.n_replicates,
        sd_pw=pw.std(axis=0, ddof=1),
        mean_se_pw=se_pw.mean(axis=0),
        sd_pxw=np.nanstd(pxw, axis=0, ddof=1),
        mean_se_pxw=np.nanmean(se_pxw, axis=0),
    )


def run_variance_study(conditions, master_seed: int) -> list:
    return [run_variance_condition(c, master_seed) for c in conditions]


def scaled(condition: ConditionSpec, scale: str) -> ConditionSpec:
    preset = {"desk": DESK, "paper": PAPER}[scale]
    return replace(condition, **preset)
