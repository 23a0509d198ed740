"""Command-line harness: run, sweep-gamma and compare.

Each run writes ``<stem>.csv`` (one row per iteration) and ``<stem>.json``
(spec echo, seed, final moments, reference deltas, status) into ``--out``.
MCMC summaries double as reference fixtures for ``--reference PATH``.

Exit codes: 0 success, 2 invalid spec or mismatched artifacts, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mfkinv.baselines import TRANSPORT_VARIANTS, TransportConfig, run_transport
from mfkinv.core import GaussianBelief, InverseProblem, gaussian_posterior_linear, relative_error
from mfkinv.darcy import darcy_instance
from mfkinv.errors import (
    InvalidConfig,
    InvalidGamma,
    InvalidStep,
    KalmanInversionError,
    MismatchedProblem,
    RankDeficient,
    RankExceeded,
    ShapeMismatch,
)
from mfkinv.mcmc import ChainConfig, pcn_sample, rwm_sample
from mfkinv.methods import ENSEMBLE_METHODS, METHODS, UKI_VARIANTS, RunConfig, run
from mfkinv.problems import elliptic_problem, hilbert_problem, linear_problem
from mfkinv.strategies import BoxTransform, bifidelity_wrap, box_wrap, lowrank_wrap

CSV_COLUMNS = ("iter", "mean_rel_err", "cov_rel_err", "opt_err", "fwd_evals", "wall_ms")
MCMC_METHODS = ("rwm", "pcn")
ALL_METHODS = METHODS + TRANSPORT_VARIANTS + MCMC_METHODS
PROBLEMS = ("linear-over", "linear-under", "elliptic-well", "elliptic-under", "hilbert", "darcy")
LINEAR_PROBLEMS = ("linear-over", "linear-under", "hilbert")
DEFAULT_GAMMAS = (0.25, 0.5, 1.0, 2.0, 3.0)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
INVALID_ERRORS = (
    InvalidConfig,
    InvalidGamma,
    InvalidStep,
    RankExceeded,
    RankDeficient,
    ShapeMismatch,
    MismatchedProblem,
)


@dataclass
class RunSpec:
    method: str
    problem: str
    gamma: float = 1.0
    iterations: int = 30
    J: Optional[int] = None
    dt: Optional[float] = None
    seed: int = 0
    reference: str = "none"
    lowrank: Optional[int] = None
    box: Optional[str] = None
    bifidelity_grid: Optional[int] = None
    bifidelity_center: str = "high"
    grid: int = 32
    modes: int = 32
    data_seed: int = 0
    dim: int = 100
    samples: int = 100000
    burnin: int = 0
    step: Optional[float] = None
    init: Optional[str] = None
    jobs: int = 1

    @property
    def stem(self) -> str:
        return f"{self.problem}_{self.method}_g{self.gamma:g}_s{self.seed}"

    def problem_key(self) -> dict:
        """Fields that pin down the problem instance (for artifact comparison)."""
        key = {"problem": self.problem, "lowrank": self.lowrank, "box": self.box}
        if self.problem == "darcy":
            key.update(grid=self.grid, modes=self.modes, data_seed=self.data_seed)
        if self.problem == "hilbert":
            key.update(dim=self.dim)
        return key


def validate(spec: RunSpec) -> None:
    """Reject incompatible method/problem/strategy combinations before any work."""
    if spec.method not in ALL_METHODS:
        raise InvalidConfig(f"unknown method {spec.method!r}")
    if spec.problem not in PROBLEMS:
        raise InvalidConfig(f"unknown problem {spec.problem!r}")
    if not spec.gamma > 0:
        raise InvalidGamma("gamma must be positive")
    if spec.iterations < 0:
        raise InvalidConfig("iterations must be >= 0")
    if spec.jobs < 1:
        raise InvalidConfig("jobs must be >= 1")
    if spec.bifidelity_grid is not None:
        if spec.method not in UKI_VARIANTS:
            raise InvalidConfig("bi-fidelity evaluation is only defined for uki1/uki2")
        if spec.problem != "darcy":
            raise InvalidConfig("bi-fidelity needs a problem with a grid (darcy)")
    if spec.method in ENSEMBLE_METHODS + ("ienkf", "ieakf", "ietkf") and (spec.J is None or spec.J < 2):
        raise InvalidConfig(f"{spec.method} needs --J >= 2")
    if spec.init not in (None, "sampled", "exact"):
        raise InvalidConfig("--init must be 'sampled' or 'exact'")
    if spec.method in MCMC_METHODS:
        if spec.samples < 1 or not 0 <= spec.burnin < spec.samples:
            raise InvalidConfig("need samples >= 1 and 0 <= burnin < samples")
        if spec.method == "pcn" and spec.step is not None and not 0 < spec.step < 1:
            raise InvalidStep("pCN step must lie in (0, 1)")
    if spec.reference == "analytic":
        if spec.problem not in LINEAR_PROBLEMS:
            raise InvalidConfig(f"no analytic posterior for {spec.problem}")
        if spec.box is not None:
            raise InvalidConfig("analytic reference is not available under a box transform")
    if spec.problem == "darcy" and spec.grid < 16:
        raise InvalidConfig("darcy grid must be >= 16")


def parse_box(text: str, n_theta: int) -> BoxTransform:
    """``positive``, ``interval:LO:HI``, optionally suffixed ``@i,j`` to pick coordinates."""
    body, _, idx = text.partition("@")
    parts = body.split(":")
    mask = None
    if idx:
        try:
            picks = [int(i) for i in idx.split(",")]
        except ValueError as exc:
            raise InvalidConfig(f"bad coordinate list in --box {text!r}") from exc
        if any(not 0 <= i < n_theta for i in picks):
            raise InvalidConfig(f"--box coordinate out of range for N_theta={n_theta}")
        mask = np.zeros(n_theta, dtype=bool)
        mask[picks] = True
    if parts[0] == "positive" and len(parts) == 1:
        return BoxTransform("positive", mask=mask)
    if parts[0] == "interval" and len(parts) == 3:
        try:
            lo, hi = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise InvalidConfig(f"bad bounds in --box {text!r}") from exc
        return BoxTransform("interval", lower=lo, upper=hi, mask=mask)
    raise InvalidConfig(f"cannot parse --box {text!r}")


@dataclass
class BuiltProblem:
    problem: InverseProblem
    base: InverseProblem
    to_base: Optional[Callable[[GaussianBelief], GaussianBelief]] = None
    truth: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def build_problem(spec: RunSpec) -> BuiltProblem:
    truth, inst = None, None
    if spec.problem.startswith("linear-"):
        base = linear_problem(spec.problem.split("-", 1)[1])
    elif spec.problem.startswith("elliptic-"):
        base = elliptic_problem(spec.problem.split("-", 1)[1])
    elif spec.problem == "hilbert":
        base = hilbert_problem(spec.dim)
    else:
        inst = darcy_instance(grid_n=spec.grid, n_modes=spec.modes, seed=spec.data_seed)
        base = inst.problem()
        truth = inst.theta_ref
    problem, to_base = base, None
    if spec.bifidelity_grid is not None:
        problem = bifidelity_wrap(
            problem, inst.problem(grid_n=spec.bifidelity_grid), center=spec.bifidelity_center
        )
    if spec.lowrank is not None:
        problem = lowrank_wrap(problem, spec.lowrank)
        to_base = problem.metadata["lowrank"].lift_belief
    if spec.box is not None:
        problem = box_wrap(problem, parse_box(spec.box, problem.n_theta))
    return BuiltProblem(problem, base, to_base, truth)


def load_reference(spec: RunSpec, built: BuiltProblem):
    """Reference belief and the map taking iterates into its space, or ``(None, None)``."""
    if spec.reference in ("none", None):
        return None, None
    if spec.reference == "analytic":
        return gaussian_posterior_linear(built.base.metadata["G"], built.base), built.to_base
    path = Path(spec.reference)
    if not path.is_file():
        raise InvalidConfig(f"reference fixture {path} not found")
    data = json.loads(path.read_text())
    other = RunSpec(**data["spec"])
    mine, theirs = spec.problem_key(), other.problem_key()
    # fixtures are compared in the unreduced space, so a low-rank run may use a full-rank fixture
    mine.pop("lowrank")
    theirs_lowrank = theirs.pop("lowrank")
    if mine != theirs or theirs_lowrank is not None:
        raise MismatchedProblem(f"fixture {path} was produced for {theirs}, not {mine}")
    n = data["final"]["n_theta"]
    ref = GaussianBelief(
        np.array(data["final"]["mean"], dtype=float),
        np.array(data["final"]["covariance"], dtype=float).reshape(n, n),
    )
    return ref, built.to_base


def execute(spec: RunSpec):
    """Run one spec; returns ``(rows, summary)`` without touching the filesystem."""
    validate(spec)
    built = build_problem(spec)
    problem = built.problem
    reference, to_ref = load_reference(spec, built)
    if reference is not None:
        probe = problem.prior if to_ref is None else to_ref(problem.prior)
        if probe.dim != reference.dim:
            raise MismatchedProblem(f"reference has dimension {reference.dim}, problem has {probe.dim}")
    t0 = time.perf_counter()
    extra = {}
    if spec.method in MCMC_METHODS:
        step = spec.step if spec.step is not None else (1.0 if spec.method == "rwm" else 0.04)
        cfg = ChainConfig(spec.samples, spec.burnin, step, spec.seed)
        chain = (rwm_sample if spec.method == "rwm" else pcn_sample)(problem, cfg)
        belief = chain.belief()
        wall_ms = 1e3 * (time.perf_counter() - t0)
        shown = to_ref(belief) if to_ref else belief
        errs = _errors(shown, reference)
        rows = [dict(zip(CSV_COLUMNS, (spec.samples, *errs, problem.regularized_misfit(belief.mean), spec.samples + 1, wall_ms)))]
        diverged, message = False, ""
        fwd = {"total": spec.samples + 1, "hi": spec.samples + 1, "lo": 0}
        extra = {"acceptance_rate": chain.acceptance_rate, "n_kept": chain.n_kept, "step_size": step}
        iterations_run = spec.samples
    else:
        exact = spec.init == "exact" or (
            spec.init is None and spec.method in TRANSPORT_VARIANTS and spec.J is not None and spec.J >= problem.n_theta + 1
        )
        if spec.method in TRANSPORT_VARIANTS:
            tcfg = TransportConfig(
                dt=spec.dt if spec.dt is not None else 1.0 / 30.0,
                variant=spec.method,
                J=spec.J,
                exact_init=exact and spec.method not in ("iukf1", "iukf2"),
                jobs=spec.jobs,
            )
            state, history = run_transport(spec.method, problem, tcfg, seed=spec.seed, reference=reference)
            if to_ref is not None and reference is not None:
                history = _rescore(history, to_ref, reference)
        else:
            cfg = RunConfig(
                gamma=spec.gamma,
                iterations=spec.iterations,
                J=spec.J,
                seed=spec.seed,
                exact_init=exact,
                reference=reference,
                jobs=spec.jobs,
                to_reference=to_ref,
            )
            state, history = run(spec.method, problem, cfg)
        belief = state.moments()
        rows = [{k: getattr(rec, k) for k in CSV_COLUMNS} for rec in history]
        diverged, message = state.diverged, state.message
        fwd = {"total": state.fwd_evals, "hi": state.fwd_evals_hi, "lo": state.fwd_evals_lo}
        iterations_run = len(history)
    shown = to_ref(belief) if to_ref else belief
    mean_err, cov_err = _errors(shown, reference)
    summary = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "status": "diverged" if diverged else "ok",
        "message": message,
        "problem_name": problem.name,
        "iterations_run": iterations_run,
        "final": _moments(belief),
        "reference": {"source": spec.reference, "mean_rel_err": mean_err, "cov_rel_err": cov_err},
        "fwd_evals": fwd,
        **extra,
    }
    if to_ref is not None:
        summary["final_lifted"] = _moments(shown)
    if built.truth is not None:
        summary["truth"] = [float(v) for v in built.truth]
    return rows, summary


def _rescore(history, to_ref, reference):
    for rec in history:
        shown = to_ref(GaussianBelief(rec.mean, rec.covariance))
        rec.mean_rel_err = relative_error(shown.mean, reference.mean)
        rec.cov_rel_err = relative_error(shown.covariance, reference.covariance)
    return history


def _errors(belief: GaussianBelief, reference: Optional[GaussianBelief]):
    if reference is None:
        return float("nan"), float("nan")
    return relative_error(belief.mean, reference.mean), relative_error(belief.covariance, reference.covariance)


def _moments(belief: GaussianBelief) -> dict:
    return {
        "n_theta": belief.dim,
        "mean": [float(v) for v in belief.mean],
        "covariance": [float(v) for v in np.asarray(belief.covariance).ravel()],
    }


def _clean(obj):
    """Replace non-finite floats with None so the summary is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, rows, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])


def write_summary(path: Path, summary: dict) -> None:
    path.write_text(json.dumps(_clean(summary), indent=2))


def run_and_write(spec: RunSpec, out: Path) -> tuple[int, dict]:
    out.mkdir(parents=True, exist_ok=True)
    stem = spec.stem
    try:
        rows, summary = execute(spec)
    except INVALID_ERRORS as exc:
        summary = {"spec": asdict(spec), "seed": spec.seed, "status": "invalid", "message": f"{type(exc).__name__}: {exc}"}
        write_summary(out / f"{stem}.json", summary)
        return EXIT_INVALID, summary
    except KalmanInversionError as exc:
        summary = {"spec": asdict(spec), "seed": spec.seed, "status": "diverged", "message": f"{type(exc).__name__}: {exc}"}
        write_summary(out / f"{stem}.json", summary)
        return EXIT_DIVERGED, summary
    write_csv(out / f"{stem}.csv", rows)
    summary["csv"] = f"{stem}.csv"
    write_summary(out / f"{stem}.json", summary)
    return (EXIT_DIVERGED if summary["status"] == "diverged" else EXIT_OK), summary


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def spec_from_args(args, **overrides) -> RunSpec:
    fields = {k: getattr(args, k) for k in RunSpec.__dataclass_fields__ if hasattr(args, k)}
    fields.update(overrides)
    return RunSpec(**fields)


def cmd_run(args) -> int:
    spec = spec_from_args(args)
    code, summary = run_and_write(spec, Path(args.out))
    _report(summary)
    return code


def cmd_sweep_gamma(args) -> int:
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError:
        print("error: --gammas must be a comma-separated list of numbers", file=sys.stderr)
        return EXIT_INVALID
    if not gammas:
        print("error: empty --gammas", file=sys.stderr)
        return EXIT_INVALID
    if args.method not in METHODS:
        print(f"error: sweep-gamma needs a mean-field method, got {args.method!r}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    codes, merged, finals = [], [], {}
    for g in gammas:
        spec = spec_from_args(args, gamma=g)
        code, summary = run_and_write(spec, out)
        codes.append(code)
        _report(summary)
        if code == EXIT_INVALID:
            return code
        csv_path = out / f"{spec.stem}.csv"
        if csv_path.exists():
            with open(csv_path) as fh:
                for row in csv.DictReader(fh):
                    merged.append({"gamma": g, **row})
        if "final" in summary:
            finals[g] = np.array(summary["final"]["mean"])
    if merged:
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("gamma",) + CSV_COLUMNS)
            w.writeheader()
            w.writerows(merged)
    spread = 0.0
    for a in finals.values():
        for b in finals.values():
            spread = max(spread, relative_error(a, b))
    report = {
        "gammas": gammas,
        "final_means": {str(g): [float(v) for v in m] for g, m in finals.items()},
        "max_pairwise_mean_rel_diff": spread,
        "exit_codes": codes,
    }
    write_summary(out / "sweep.json", report)
    print(f"max pairwise relative mean difference: {spread:.3e}")
    return max(codes)


def cmd_compare(args) -> int:
    summaries = []
    for p in args.artifacts:
        path = Path(p)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read {path}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        summaries.append((path, data))
    try:
        table, ranking = compare_summaries(summaries)
    except MismatchedProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if table:
        cols = list(table[0].keys())
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(table)
    write_summary(out / "compare.json", {"ranking": ranking})
    print(f"{'rank':>4}  {'label':<32} {'mean_rel_err':>14} {'cov_rel_err':>14}")
    for i, r in enumerate(ranking, 1):
        print(f"{i:>4}  {r['label']:<32} {_show(r['mean_rel_err']):>14} {_show(r['cov_rel_err']):>14}")
    return EXIT_OK


def compare_summaries(summaries):
    """Merge run artifacts into a wide table and rank by final errors.

    Raises MismatchedProblem if artifacts disagree on problem identity or reference.
    """
    if not summaries:
        raise MismatchedProblem("nothing to compare")
    keys = [RunSpec(**d["spec"]).problem_key() for _, d in summaries]
    refs = [d["spec"]["reference"] for _, d in summaries]
    if any(k != keys[0] for k in keys) or any(r != refs[0] for r in refs):
        raise MismatchedProblem("artifacts disagree on problem or reference")
    labels, seen = [], {}
    for path, d in summaries:
        base = f"{d['spec']['method']}_s{d['seed']}"
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    by_iter: dict = {}
    for label, (path, d) in zip(labels, summaries):
        csv_name = d.get("csv")
        if not csv_name:
            continue
        with open(path.parent / csv_name) as fh:
            for row in csv.DictReader(fh):
                it = int(row["iter"])
                entry = by_iter.setdefault(it, {"iter": it})
                for c in CSV_COLUMNS[1:]:
                    entry[f"{label}:{c}"] = row[c]
    columns = ["iter"] + [f"{l}:{c}" for l in labels for c in CSV_COLUMNS[1:]]
    table = [{c: by_iter[it].get(c, "") for c in columns} for it in sorted(by_iter)]
    ranking = []
    for label, (_, d) in zip(labels, summaries):
        ref = d.get("reference", {})
        ranking.append(
            {
                "label": label,
                "method": d["spec"]["method"],
                "status": d.get("status"),
                "mean_rel_err": _num(ref.get("mean_rel_err")),
                "cov_rel_err": _num(ref.get("cov_rel_err")),
            }
        )
    ranking.sort(key=lambda r: (_rank_key(r["mean_rel_err"]), _rank_key(r["cov_rel_err"])))
    return table, ranking


def _num(v):
    return float("nan") if v is None else float(v)


def _rank_key(v):
    return v if math.isfinite(v) else math.inf


def _show(v):
    return f"{v:.3e}" if math.isfinite(v) else "n/a"


def _report(summary: dict) -> None:
    spec = summary["spec"]
    line = f"{spec['method']} on {spec['problem']}: {summary['status']}"
    ref = summary.get("reference")
    if ref and ref.get("mean_rel_err") is not None and math.isfinite(ref["mean_rel_err"]):
        line += f", mean_rel_err={ref['mean_rel_err']:.3e}, cov_rel_err={ref['cov_rel_err']:.3e}"
    if summary.get("message"):
        line += f" ({summary['message']})"
    print(line)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--method", required=True, choices=METHODS if sweep else ALL_METHODS)
    p.add_argument("--problem", required=True, choices=PROBLEMS)
    if not sweep:
        p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--J", type=int, default=None, help="ensemble size")
    p.add_argument("--dt", type=float, default=None, help="transport step (1/N); default 1/30")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", default="none", help="none | analytic | path to a summary JSON")
    p.add_argument("--lowrank", type=int, default=None, metavar="N_R")
    p.add_argument("--box", default=None, help="positive | interval:LO:HI, optional @i,j coordinate list")
    p.add_argument("--bifidelity-grid", type=int, default=None, help="low-fidelity darcy grid")
    p.add_argument(
        "--bifidelity-center",
        choices=("high", "low"),
        default="high",
        help="reference for low-fidelity output deviations",
    )
    p.add_argument("--grid", type=int, default=32, help="darcy grid cells per side")
    p.add_argument("--modes", type=int, default=32, help="darcy KL modes")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic darcy truth")
    p.add_argument("--dim", type=int, default=100, help="hilbert problem dimension")
    p.add_argument("--samples", type=int, default=100000, help="MCMC steps including burn-in")
    p.add_argument("--burnin", type=int, default=0)
    p.add_argument("--step", type=float, default=None, help="RWM step (default 1.0) or pCN beta (default 0.04)")
    p.add_argument("--init", choices=("sampled", "exact"), default=None, help="ensemble initialization")
    p.add_argument("--out", default="mfkinv-out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel forward evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfkinv", description="Mean-field Kalman inversion experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one method on one problem")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)
    p_sweep = sub.add_parser("sweep-gamma", help="repeat a mean-field run over several gamma values")
    _add_run_flags(p_sweep, sweep=True)
    p_sweep.add_argument("--gammas", default=",".join(f"{g:g}" for g in DEFAULT_GAMMAS))
    p_sweep.set_defaults(func=cmd_sweep_gamma)
    p_cmp = sub.add_parser("compare", help="merge run summaries and rank them")
    p_cmp.add_argument("artifacts", nargs="+", help="summary JSON files")
    p_cmp.add_argument("--out", default="mfkinv-out")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
