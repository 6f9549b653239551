"""Command-line interface: ``auditsample {plan,sweep,realize,estimate,simulate}``.

Exit codes: 0 for success (and an accepted plan), 2 when the best plan is
still above the chi-square cutoff, 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import csvio
from .estimators import AuditedData, PopulationMargins, estimate
from .sampler import StratumMismatchError, Units, actions, realize
from .simulation import (ConditionSpec, run_condition, run_variance_condition, scaled,
                         variance_conditions)
from .solver import AuditPlan, Objective, SolverConfig, SolverError, optimize, with_bounds
from .table import ContingencyTable3

log = logging.getLogger("auditsample")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ABOVE_CUTOFF = 2

_OBJECTIVES = {"d": "deviance", "f1": "f1", "f2": "f2"}


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"--{field_name.replace('_', '-')}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    command: str
    out: str
    seed: int | None = None
    units: str | None = None
    counts: str | None = None
    plan: str | None = None
    audited: str | None = None
    margins: str | None = None
    m_plus: int | None = None
    m_minus: int | None = None
    objective: str = "d"
    lam: float | None = None
    kappa: float | None = None
    alpha: float = 0.05
    attempts: int = 50
    sweep_m_plus: list = field(default_factory=list)
    sweep_m_minus_factor: list = field(default_factory=list)
    sweep_m_minus: list = field(default_factory=list)
    study: str = "bias"
    conditions: list = field(default_factory=list)
    scale: str = "desk"
    replicates: int | None = None

    def validate(self):
        c = self.command
        if self.seed is not None and self.seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha}")
        if self.attempts < 0:
            raise ConfigError("attempts", "must be nonnegative")
        if self.lam is not None and self.objective != "f1":
            raise ConfigError("lambda", "only applies to --objective f1")
        if self.kappa is not None and self.objective != "f2":
            raise ConfigError("kappa", "only applies to --objective f2")
        for name in ("lam", "kappa"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError("lambda" if name == "lam" else name, "must be positive")
        if c in ("plan", "sweep"):
            if (self.units is None) == (self.counts is None):
                raise ConfigError("units", "give exactly one of --units and --counts")
        if c == "plan":
            for name in ("m_plus", "m_minus"):
                v = getattr(self, name)
                if v is None:
                    raise ConfigError(name, "is required")
                if v < 0:
                    raise ConfigError(name, "must be nonnegative")
        if c == "sweep":
            if not self.sweep_m_plus:
                raise ConfigError("sweep_m_plus", "is required")
            if any(v < 0 for v in self.sweep_m_plus):
                raise ConfigError("sweep_m_plus", "values must be nonnegative")
            if bool(self.sweep_m_minus_factor) == bool(self.sweep_m_minus):
                raise ConfigError("sweep_m_minus_factor", "give exactly one of --sweep-m-minus-factor and --sweep-m-minus")
            if any(v < 0 for v in self.sweep_m_minus_factor):
                raise ConfigError("sweep_m_minus_factor", "values must be nonnegative")
            if any(v < 0 for v in self.sweep_m_minus):
                raise ConfigError("sweep_m_minus", "values must be nonnegative")
        if c == "realize":
            if self.plan is None or self.units is None:
                raise ConfigError("plan", "realize needs --plan and --units")
        if c == "estimate":
            if self.audited is None or self.margins is None:
                raise ConfigError("audited", "estimate needs --audited and --margins")
        if c == "simulate":
            if self.study not in ("bias", "variance"):
                raise ConfigError("study", "must be bias or variance")
            if self.scale not in ("desk", "paper"):
                raise ConfigError("scale", "must be desk or paper")
            if self.replicates is not None and self.replicates < 1:
                raise ConfigError("replicates", "must be positive")
            for label in self.conditions:
                try:
                    ConditionSpec.parse(label)
                except ValueError as exc:
                    raise ConfigError("condition", str(exc)) from None
        return self

    def objective_spec(self) -> Objective:
        kind = _OBJECTIVES[self.objective]
        if kind == "f1":
            return Objective.f1(self.lam if self.lam is not None else 0.01)
        if kind == "f2":
            return Objective.f2(self.kappa)
        return Objective.deviance()

    def solver_config(self, m_plus, m_minus) -> SolverConfig:
        return SolverConfig(m_plus=int(m_plus), m_minus=int(m_minus), n_attempts=self.attempts,
                            objective=self.objective_spec(), alpha=self.alpha, master_seed=self.seed)


def _versions():
    import scipy

    return {"auditsample": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out: Path, config: RunConfig, outputs, extra=None):
    cfg = asdict(config)
    body = {"config": cfg, "seed": config.seed, "outputs": sorted(outputs), "versions": _versions()}
    if extra:
        body.update(extra)
    csvio.write_json(out / "manifest.json", body)


def _load_table(config: RunConfig):
    if config.units is not None:
        units, xi, yi = csvio.read_units(config.units)
        counts = units.counts(len(xi), len(yi))
    else:
        counts, xi, yi = csvio.read_counts(config.counts)
    return ContingencyTable3(counts), xi.labels, yi.labels


def _plan_summary(plan: AuditPlan, seed):
    return {
        "D_before": plan.deviance_before,
        "D_after": plan.achieved_deviance,
        "relative_deviance": plan.relative_deviance,
        "cutoff": plan.cutoff,
        "accepted": plan.accepted,
        "seed": seed,
        "m_plus": plan.m_plus,
        "m_minus": plan.m_minus,
        "added": int(plan.delta_plus.sum()),
        "removed": int(plan.delta_minus.sum()),
        "audit_size_before": plan.table.n_audited,
        "audit_size_after": int(plan.final_counts[:, :, 1].sum()),
        "objective": str(plan.objective),
        "objective_value": plan.objective_value,
        "attempts": plan.attempts_run,
        "best_attempt": plan.best_attempt_index,
    }


def _summary_text(summary):
    verdict = "accepted" if summary["accepted"] else "NOT accepted (above cutoff)"
    lines = [
        f"deviance before : {summary['D_before']:.6f}",
        f"deviance after  : {summary['D_after']:.6f}",
        f"cutoff          : {summary['cutoff']:.6f}",
        f"plan            : {verdict}",
        f"added / removed : {summary['added']} / {summary['removed']}",
        f"audit size      : {summary['audit_size_before']} -> {summary['audit_size_after']}",
        f"objective       : {summary['objective']}",
        f"seed            : {summary['seed']}",
    ]
    return "\n".join(lines) + "\n"


def _write_labels(out: Path, x_labels, y_labels):
    csvio.write_json(out / "labels.json", {"x": list(x_labels), "y": list(y_labels)})


def cmd_plan(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    table, xl, yl = _load_table(config)
    plan = optimize(table, config.solver_config(config.m_plus, config.m_minus))
    summary = _plan_summary(plan, config.seed)
    csvio.write_plan(out / "plan.csv", plan, xl, yl)
    csvio.write_json(out / "summary.json", summary)
    (out / "summary.txt").write_text(_summary_text(summary), encoding="utf-8")
    _write_labels(out, xl, yl)
    write_manifest(out, config, ["plan.csv", "summary.json", "summary.txt", "labels.json"])
    sys.stdout.write(_summary_text(summary))
    return EXIT_OK if plan.accepted else EXIT_ABOVE_CUTOFF


SWEEP_COLUMNS = ("m_plus", "m_minus", "m_minus_factor", "m_minus_capped", "D_before", "D_after",
                 "relative_deviance", "cutoff", "accepted", "added", "removed", "plan_file")


def sweep_grid(config: RunConfig, n_audited: int, n_unaudited: int):
    """(m_plus, m_minus, factor, capped) combinations.

    With factors, ``m_minus = factor * m_plus``; both caps are clipped to
    the number of units available and the clipping is reported.
    """
    grid = []
    for mp in config.sweep_m_plus:
        if mp > n_unaudited:
            raise ConfigError("sweep_m_plus", f"{mp} exceeds the {n_unaudited} unaudited units")
        if config.sweep_m_minus_factor:
            for f in config.sweep_m_minus_factor:
                raw = int(round(f * mp))
                grid.append((int(mp), min(raw, n_audited), f, raw > n_audited))
        else:
            for mm in config.sweep_m_minus:
                grid.append((int(mp), min(int(mm), n_audited), "", mm > n_audited))
    return grid


def cmd_sweep(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    table, xl, yl = _load_table(config)
    base = config.solver_config(0, 0)
    n_unaudited = int(table.counts[:, :, 0].sum())
    rows, outputs = [], ["sweep.csv", "sweep.txt", "labels.json"]
    for mp, mm, factor, capped in sweep_grid(config, table.n_audited, n_unaudited):
        plan = optimize(table, with_bounds(base, mp, mm))
        name = f"plan_mp{mp}_mm{mm}.csv"
        csvio.write_plan(out / name, plan, xl, yl)
        outputs.append(name)
        rows.append({"m_plus": mp, "m_minus": mm, "m_minus_factor": factor, "m_minus_capped": capped,
                     "D_before": plan.deviance_before, "D_after": plan.achieved_deviance,
                     "relative_deviance": plan.relative_deviance, "cutoff": plan.cutoff,
                     "accepted": plan.accepted, "added": int(plan.delta_plus.sum()),
                     "removed": int(plan.delta_minus.sum()), "plan_file": name})
    csvio.write_rows(out / "sweep.csv", rows, SWEEP_COLUMNS)
    lines = [f"{'M+':>8} {'M-':>8} {'D after':>14} {'cutoff':>10}  status"]
    for r in rows:
        lines.append(f"{r['m_plus']:>8} {r['m_minus']:>8} {r['D_after']:>14.4f} {r['cutoff']:>10.4f}  "
                     + ("accepted" if r["accepted"] else "above cutoff"))
    text = "\n".join(lines) + "\n"
    (out / "sweep.txt").write_text(text, encoding="utf-8")
    _write_labels(out, xl, yl)
    write_manifest(out, config, outputs)
    sys.stdout.write(text)
    return EXIT_OK if any(r["accepted"] for r in rows) else EXIT_ABOVE_CUTOFF


def cmd_realize(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    counts, dp, dm, xl, yl = csvio.read_plan(config.plan)
    units, _, _ = csvio.read_units(config.units, x_labels=xl, y_labels=yl)
    table = ContingencyTable3(counts)
    plan = AuditPlan(table=table, delta_plus=dp, delta_minus=dm, achieved_deviance=float("nan"),
                     deviance_before=float("nan"), cutoff=float("nan"), accepted=False, attempts_run=0,
                     best_attempt_index=-1, objective=Objective(), objective_value=float("nan"),
                     continuous_deviance=float("nan"), m_plus=int(dp.sum()), m_minus=int(dm.sum()))
    _check_plan_bounds(counts, dp, dm)
    sel = realize(plan, units, config.seed)
    rows = actions(units, sel)
    csvio.write_selection(out / "selection.csv", rows)

    final_z = np.array([1 if a in ("add", "keep-in") else 0 for _, a in rows])
    order = np.argsort(units.unit_id, kind="stable")
    recount = Units(units.unit_id[order], units.x[order], units.y[order], final_z).counts(len(xl), len(yl))
    if not np.array_equal(recount, plan.final_counts):
        raise StratumMismatchError("realized selection does not reproduce the planned counts")
    write_manifest(out, config, ["selection.csv"],
                   {"added": len(sel.added), "removed": len(sel.removed), "final_sample": len(sel.final_sample)})
    sys.stdout.write(f"added {len(sel.added)}, removed {len(sel.removed)}, final audit size "
                     f"{len(sel.final_sample)}\n")
    return EXIT_OK


def _check_plan_bounds(counts, dp, dm):
    if np.any(dp < 0) or np.any(dm < 0):
        raise ValueError("plan has negative delta values")
    over_p = np.argwhere(dp > counts[:, :, 0])
    over_m = np.argwhere(dm > counts[:, :, 1])
    if over_p.size or over_m.size:
        cells = [f"(i={i + 1}, j={j + 1})" for i, j in np.concatenate([over_p, over_m])]
        raise ValueError(f"plan exceeds the available units in strata {', '.join(cells)}")


ESTIMATE_COLUMNS = ("parameter", "w", "x", "estimate", "se")


def cmd_estimate(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    y_labels, p = csvio.read_margins(config.margins)
    w, x, y, wi, xi, _ = csvio.read_audited(config.audited, y_labels=y_labels)
    margins = PopulationMargins(p)
    data = AuditedData(w, x, y, n_w=len(wi), n_x=len(xi))
    report = estimate(data, margins, labels={"w": wi.labels, "x": xi.labels})
    csvio.write_rows(out / "estimates.csv", report.rows(), ESTIMATE_COLUMNS)
    lines = ["P(W = w)"]
    for h, lab in enumerate(wi.labels):
        lines.append(f"  {lab:<16} {report.p_w[h]:.6f}  (se {report.se_w[h]:.6f})")
    lines.append("P(X = x | W = w)")
    for h, wl in enumerate(wi.labels):
        for i, xlab in enumerate(xi.labels):
            lines.append(f"  x={xlab:<8} w={wl:<8} {report.p_x_given_w[i, h]:.6f}  "
                         f"(se {report.se_x_given_w[i, h]:.6f})")
    if report.small_strata:
        lines.append("strata with a single audited unit (variance term is 0): "
                     + ", ".join(y_labels[j] for j in report.small_strata))
    text = "\n".join(lines) + "\n"
    (out / "estimates.txt").write_text(text, encoding="utf-8")
    write_manifest(out, config, ["estimates.csv", "estimates.txt"])
    sys.stdout.write(text)
    return EXIT_OK


REPLICATE_COLUMNS = ("condition", "replicate", "deviance_before", "deviance_after", "relative_deviance",
                     "n_before", "n_after")
BIAS_COLUMNS = ("condition", "parameter", "x", "w", "mean_bias_before", "mcse_before",
                "mean_bias_after", "mcse_after")
VARIANCE_COLUMNS = ("condition", "parameter", "x", "w", "sd", "mean_se", "ratio")


def _mean_mcse(a):
    a = np.asarray(a, dtype=np.float64)
    n = np.sum(~np.isnan(a), axis=0)
    mean = np.nanmean(a, axis=0)
    sd = np.nanstd(a, axis=0, ddof=1) if a.shape[0] > 1 else np.full(mean.shape, np.nan)
    return mean, sd / np.sqrt(np.maximum(n, 1))


def bias_rows(name, results):
    rows = []
    mb, sb = _mean_mcse([r.bias_pw_before for r in results])
    ma, sa = _mean_mcse([r.bias_pw_after for r in results])
    for h in range(mb.size):
        rows.append({"condition": name, "parameter": "P_W", "x": "", "w": h + 1, "mean_bias_before": mb[h],
                     "mcse_before": sb[h], "mean_bias_after": ma[h], "mcse_after": sa[h]})
    mb, sb = _mean_mcse([r.bias_pxw_before for r in results])
    ma, sa = _mean_mcse([r.bias_pxw_after for r in results])
    for h in range(mb.shape[1]):
        for i in range(mb.shape[0]):
            rows.append({"condition": name, "parameter": "P_X_given_W", "x": i + 1, "w": h + 1,
                         "mean_bias_before": mb[i, h], "mcse_before": sb[i, h],
                         "mean_bias_after": ma[i, h], "mcse_after": sa[i, h]})
    return rows


def variance_rows(summary):
    rows = []
    for h in range(summary.sd_pw.size):
        rows.append({"condition": summary.condition, "parameter": "P_W", "x": "", "w": h + 1,
                     "sd": summary.sd_pw[h], "mean_se": summary.mean_se_pw[h], "ratio": summary.ratio_pw[h]})
    for h in range(summary.sd_pxw.shape[1]):
        for i in range(summary.sd_pxw.shape[0]):
            rows.append({"condition": summary.condition, "parameter": "P_X_given_W", "x": i + 1, "w": h + 1,
                         "sd": summary.sd_pxw[i, h], "mean_se": summary.mean_se_pxw[i, h],
                         "ratio": summary.ratio_pxw[i, h]})
    return rows


def _file_tag(name):
    return name.replace(",", "_").replace("*", "_noopt")


def cmd_simulate(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if config.study == "bias":
        labels = config.conditions or ["WX1,WY1,XZ1", "WX1,WY1,XZ4"]
        all_rows = []
        for label in labels:
            cond = scaled(ConditionSpec.parse(label), config.scale)
            if config.replicates is not None:
                cond = type(cond)(**{**cond.__dict__, "n_replicates": config.replicates})
            results = run_condition(cond, config.seed)
            rep_rows = [{"condition": cond.name, "replicate": r.replicate, "deviance_before": r.deviance_before,
                         "deviance_after": r.deviance_after, "relative_deviance": r.relative_deviance,
                         "n_before": r.n_before, "n_after": r.n_after} for r in results]
            fname = f"replicates_{_file_tag(cond.name)}.csv"
            csvio.write_rows(out / fname, rep_rows, REPLICATE_COLUMNS)
            outputs.append(fname)
            all_rows.extend(bias_rows(cond.name, results))
            rel = np.array([r.relative_deviance for r in results])
            sys.stdout.write(f"{cond.name}: {len(results)} replicates, median relative deviance "
                             f"{np.nanmedian(rel):.4f}\n")
        csvio.write_rows(out / "bias_summary.csv", all_rows, BIAS_COLUMNS)
        outputs.append("bias_summary.csv")
    else:
        n = config.replicates or (200 if config.scale == "desk" else 1000)
        attempts = 50 if config.scale == "desk" else 200
        conds = variance_conditions(n_samples=n, n_attempts=attempts)
        if config.conditions:
            wanted = {ConditionSpec.parse(c).name for c in config.conditions}
            conds = [c for c in conds if c.name in wanted]
        rows = []
        for cond in conds:
            summary = run_variance_condition(cond, config.seed)
            rows.extend(variance_rows(summary))
            sys.stdout.write(f"{summary.condition}: se/sd for P_W = "
                             + ", ".join(f"{v:.3f}" for v in summary.ratio_pw) + "\n")
        csvio.write_rows(out / "variance_summary.csv", rows, VARIANCE_COLUMNS)
        outputs.append("variance_summary.csv")
    write_manifest(out, config, outputs)
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "sweep": cmd_sweep, "realize": cmd_realize, "estimate": cmd_estimate,
            "simulate": cmd_simulate}


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auditsample", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed; generated and printed when omitted")

    def solver_flags(sp):
        sp.add_argument("--objective", choices=sorted(_OBJECTIVES), default="d")
        sp.add_argument("--lambda", dest="lam", type=float, help="penalty weight for f1 (default 0.01)")
        sp.add_argument("--kappa", type=float, help="scale for f2 (default: cutoff / 10)")
        sp.add_argument("--alpha", type=float, default=0.05, help="significance level of the cutoff")
        sp.add_argument("--attempts", type=int, default=50, help="number of random starts")

    def table_input(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--units", help="unit CSV with header unit_id,x,y,z")
        g.add_argument("--counts", help="aggregated CSV with header x,y,z,count")

    sp = sub.add_parser("plan", help="optimize one audit plan")
    table_input(sp)
    sp.add_argument("--m-plus", type=int, required=True, help="maximum number of units to add")
    sp.add_argument("--m-minus", type=int, required=True, help="maximum number of units to remove")
    solver_flags(sp)
    common(sp)

    sp = sub.add_parser("sweep", help="optimize over a grid of add/remove caps")
    table_input(sp)
    sp.add_argument("--sweep-m-plus", type=_int_list, required=True, help="comma-separated M+ values")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--sweep-m-minus-factor", type=_float_list, default=[],
                   help="comma-separated factors, M- = factor * M+ (capped at the audit size)")
    g.add_argument("--sweep-m-minus", type=_int_list, default=[], help="comma-separated explicit M- values")
    solver_flags(sp)
    common(sp)

    sp = sub.add_parser("realize", help="draw units for a plan")
    sp.add_argument("--plan", required=True, help="plan CSV written by 'plan' or 'sweep'")
    sp.add_argument("--units", required=True, help="unit CSV with header unit_id,x,y,z")
    common(sp)

    sp = sub.add_parser("estimate", help="stratified estimates from an audited sample")
    sp.add_argument("--audited", required=True, help="CSV with header w,x,y")
    sp.add_argument("--margins", required=True, help="CSV with header y,p")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="run the simulation study")
    sp.add_argument("--study", choices=("bias", "variance"), default="bias")
    sp.add_argument("--condition", dest="conditions", action="append", default=[],
                    help="condition label such as WX1,WY1,XZ4 (repeatable)")
    sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
    sp.add_argument("--replicates", type=int, help="override the number of replicates")
    common(sp)
    return p


def config_from_args(ns) -> RunConfig:
    fields = {k: v for k, v in vars(ns).items() if k in RunConfig.__dataclass_fields__ and v is not None}
    return RunConfig(**fields).validate()


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(ns)
        if config.command != "estimate" and config.seed is None:
            config.seed = int(np.random.SeedSequence().generate_state(1, np.uint32)[0])
            sys.stderr.write(f"seed: {config.seed}\n")
        return COMMANDS[config.command](config)
    except (ValueError, OSError, SolverError, ArithmeticError, RuntimeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
