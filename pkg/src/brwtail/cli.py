"""Command-line runner for the tail experiments.

Every command writes one CSV (grids and series) or JSON (scalar reports)
document.  Each document carries the fully resolved experiment spec, seed
included, so a file on its own is enough to rerun it.  The worker count is
left out of the spec on purpose: results do not depend on it.

Exit codes: 0 ok, 1 other numerical failure, 2 model or parameter error, 3 no tilt, 4 mode mismatch, 5 theory
violation, 6 rare-event budget exhausted.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import brw, laws, tail, walk
from .errors import (
    BrwError,
    DomainError,
    GridTooSmall,
    ModelError,
    NoTiltExists,
    NotLattice,
    RareEventBudgetExceeded,
    SolverInvariantError,
)
from .stats import default_workers, z_score
from .tables import format_csv, format_json

EXIT_OK, EXIT_FAIL, EXIT_MODEL, EXIT_NO_TILT, EXIT_MODE, EXIT_THEORY, EXIT_RARE = 0, 1, 2, 3, 4, 5, 6


class TheoryViolation(Exception):
    """A computed quantity contradicts a proven property of the model."""


@dataclass(frozen=True)
class ExpWeight:
    theta: float

    def __call__(self, v):
        return np.exp(self.theta * np.asarray(v, dtype=float))


@dataclass(frozen=True)
class Above:
    level: float

    def __call__(self, v):
        return (np.asarray(v, dtype=float) > self.level).astype(float)


def _floats(text: str) -> list[float]:
    """``"1,2,5"`` or a range ``"0:8:1"`` (inclusive stop)."""
    if ":" in text:
        a, b, s = (float(t) for t in text.split(":"))
        if s <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        k = int(math.floor((b - a) / s + 1e-9))
        return [a + i * s for i in range(k + 1)]
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(round(v)) for v in _floats(text)]


# ---------------------------------------------------------------- plumbing


class Output:
    def __init__(self, args, command: str):
        self.args = args
        self.command = command

    def spec(self, model: laws.Model, **params) -> dict:
        out = {
            "command": self.command,
            "model": model.to_dict(),
            "model_file": self.args.model,
            "seed": self.args.seed,
            "defaults": {
                "tol": self.args.tol,
                "population_cap": self.args.population_cap,
                "eps_trunc": self.args.eps_trunc,
                "step_budget": self.args.step_budget,
            },
        }
        out.update(params)
        return out

    def _stamp(self) -> dict:
        if self.args.no_timestamp:
            return {}
        return {"generated": datetime.now(timezone.utc).isoformat(timespec="seconds")}

    def _emit(self, text: str, suffix: str) -> None:
        if self.args.out is None:
            sys.stdout.write(text)
            return
        d = Path(self.args.out)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{self.command}.{suffix}"
        path.write_text(text)
        print(path, file=sys.stderr)

    def csv(self, spec: dict, columns, rows, plot: tuple[str, str] | None = None) -> None:
        meta = {"spec": spec, "seed": spec["seed"], **self._stamp()}
        self._emit(format_csv(columns, rows, meta), "csv")
        if self.args.gnuplot and self.args.out is not None and plot is not None:
            x, y = plot
            script = (
                "set datafile separator ','\n"
                f"set xlabel '{x}'\nset ylabel '{y}'\n"
                f"plot '{self.command}.csv' using '{x}':'{y}' with linespoints title '{y}'\n"
            )
            (Path(self.args.out) / f"{self.command}.gp").write_text(script)

    def json(self, spec: dict, payload: dict) -> None:
        doc = dict(payload)
        doc.update({"spec": spec, "seed": spec["seed"], **self._stamp()})
        self._emit(format_json(doc), "json")


def _model(args) -> laws.Model:
    if args.model is None:
        return laws.reference_model()
    return laws.load_model(args.model)


def _tilted_dict(tl: laws.TiltedStepLaw) -> dict:
    return tl.tilted.to_dict()


# ---------------------------------------------------------------- commands


def cmd_gamma(args) -> int:
    model = _model(args)
    out = Output(args, "gamma")
    tl = model.tilted()
    out.json(out.spec(model), {
        "gamma": tl.gamma,
        "drift": tl.drift,
        "critical_speed": tl.drift,
        "m": model.m,
        "tilted": _tilted_dict(tl),
        "lattice_span": model.step.span,
    })
    return EXIT_OK


def cmd_tail(args) -> int:
    model = _model(args)
    out = Output(args, "tail")
    gamma = model.gamma()
    cols = ["x", "u", "stderr", "e_gamma_x_u"]
    if args.mode == "exact":
        # solve past i_max so the closure beyond the grid does not reach the
        # reported rows; the stderr column carries the closure bracket width
        inner = max(2 * args.i_max, args.i_max + 60)
        u = tail.solve_u_lattice(model.offspring, model.step, inner, args.tol)
        k = args.i_max + 1
        rows = [[float(x), float(v), float(w), float(s)]
                for x, v, w, s in zip(u.x[:k], u.values[:k], u.sandwich[:k], u.scaled()[:k])]
        spec = out.spec(model, mode="exact", i_max=args.i_max, solver_i_max=inner)
    else:
        xs = sorted(_floats(args.x))
        cfg = brw.BrwConfig(model.offspring, model.step, population_cap=args.population_cap)
        est = brw.estimate_tail_grid(cfg, xs, args.n, args.seed, args.workers)
        rows = [[x, e.value, e.stderr, math.exp(gamma * x) * e.value] for x, e in zip(xs, est)]
        spec = out.spec(model, mode="mc", x=xs, n=args.n, n_aborted=est[0].n_aborted if est else 0)
    out.csv(spec, cols, rows, plot=("x", "e_gamma_x_u"))
    return EXIT_OK


def cmd_kappa(args) -> int:
    model = _model(args)
    out = Output(args, "kappa")
    off, step = model.offspring, model.step
    tl = model.tilted()
    mins = walk.sample_global_min(tl, args.n, walk.derive_seed(args.seed, 1), args.eps_trunc, args.workers,
                                  args.step_budget)
    ladder = walk.ladder_stats(tl, [tl.gamma], args.n, walk.derive_seed(args.seed, 2), args.workers,
                               args.eps_trunc, mins=mins)
    extra: dict = {}
    if step.is_lattice:
        h = step.span
        need = math.ceil(math.log(1.0 / (10.0 * args.tol)) / (tl.gamma * h))
        i_max = max(args.i_max, need, args.check_index + 1)
        u = tail.solve_u_lattice(off, step, i_max, args.tol)
        rep = tail.kappa_lattice(off, step, u, ladder, mins)
        direct = float(u.scaled()[args.check_index])
        extra["route"] = "lattice"
        extra["direct_scaled_tail"] = {"index": args.check_index, "x": args.check_index * h, "value": direct}
        extra["route_residual"] = abs(direct - rep.kappa)
    else:
        z = np.array(_floats(args.z)) / tl.gamma
        cfg = brw.BrwConfig(off, step, population_cap=args.population_cap)
        est = brw.estimate_tail_grid(cfg, z, args.n, walk.derive_seed(args.seed, 3), args.workers)
        curve = tail.TailCurve.from_estimates(z, est)
        rep = tail.kappa_nonlattice(off, step, curve, ladder, mins)
        extra["route"] = "nonlattice"
        extra["route_residual"] = None
    if args.killed is not None:
        y = args.killed
        pre = tail.killed_prefactor(tl.gamma, y, mins)
        se = math.exp(tl.gamma * y) * mins.p_gt(-y).stderr
        killed = {"y": y, "prefactor": pre, "prefactor_stderr": se, "killed_kappa": pre * rep.kappa}
        if step.is_lattice:
            h = step.span
            yi = int(round(y / h))
            if yi < 1 or abs(yi * h - y) > 1e-9 * max(1.0, y):
                raise DomainError("--killed must be a positive multiple of the span")
            xi = max(args.killed_x_index, yi)
            grid = tail.solve_u_killed_lattice(off, step, yi, xi, args.tol)
            free = tail.solve_u_lattice(off, step, max(xi + 1, 120), args.tol)
            killed["dp_ratio"] = {"x": xi * h, "value": grid.u(yi, xi) / free.values[xi]}
        extra["killed"] = killed
    if not rep.kappa > 0:
        raise TheoryViolation(f"kappa = {rep.kappa} is not positive")
    payload = {
        "kappa": rep.kappa,
        "term_boundary": rep.term_boundary,
        "term_correction": rep.term_correction,
        "error_budget": rep.error_budget,
        "components": rep.components,
        "provenance": rep.provenance,
        **extra,
    }
    out.json(out.spec(model, n=args.n, killed=args.killed), payload)
    return EXIT_OK


def cmd_phase(args) -> int:
    model = _model(args)
    out = Output(args, "phase")
    tl = model.tilted()
    cs, ns = _floats(args.c), _ints(args.n_gen)
    for c in cs:
        if abs(c - tl.drift) <= 0.05 * tl.drift:
            print(f"warning: c = {c:g} is within 5% of critical speed {tl.drift:g}", file=sys.stderr)
    yi = None
    if args.killed is not None and args.method == "exact":
        if not model.step.is_lattice:
            raise NotLattice("exact phase method needs a lattice model")
        yi = int(round(args.killed / model.step.span))
    rows, failed = [], 0
    for k, (c, n_gen) in enumerate((c, n) for c in cs for n in ns):
        if args.method == "exact":
            p = tail.conditional_Mn_exact(model.offspring, model.step, c, n_gen, yi, args.tol)
            rows.append([c, n_gen, p, 0.0, 0, 0])
            continue
        start = args.killed if args.killed is not None else 0.0
        cfg = brw.BrwConfig(model.offspring, model.step, start, population_cap=args.population_cap,
                            killed=args.killed is not None)
        try:
            r = brw.conditional_Mn(cfg, c, n_gen, args.samples, walk.derive_seed(args.seed, k), args.workers,
                                   max_trials=args.max_trials)
        except RareEventBudgetExceeded as exc:
            print(f"warning: c = {c:g}, n = {n_gen}: {exc}", file=sys.stderr)
            rows.append([c, n_gen, math.nan, math.nan, -1, -1])
            failed += 1
            continue
        rows.append([c, n_gen, r.estimate.value, r.estimate.stderr, r.accepted, r.rejected])
    spec = out.spec(model, c=cs, n_gen=ns, samples=args.samples, killed=args.killed, method=args.method,
                    max_trials=args.max_trials, critical_speed=tl.drift)
    out.csv(spec, ["c", "n", "p_cond", "stderr", "accepted", "rejected"], rows, plot=("c", "p_cond"))
    return EXIT_RARE if rows and failed == len(rows) else EXIT_OK


def _renewal_overshoot(args, model, tl):
    thetas = _floats(args.theta) if args.theta else [tl.gamma]
    xs = _floats(args.x)
    ladder = walk.ladder_stats(tl, thetas, args.n, walk.derive_seed(args.seed, 100), args.workers,
                               args.eps_trunc)
    rows = []
    for i, th in enumerate(thetas):
        lap = ladder.laplace(th)
        formula = walk.overshoot_limit(ladder.mean_H1.value, lap.value, th, tl.span)
        # delta-method stderr of the formula from the ladder moments
        d_lap = formula / (1.0 - lap.value) if lap.value < 1 else 0.0
        d_eh = formula / ladder.mean_H1.value
        f_se = math.hypot(d_lap * lap.stderr, d_eh * ladder.mean_H1.stderr)
        for j, x in enumerate(xs):
            e = walk.overshoot_laplace(tl, x, th, args.n, walk.derive_seed(args.seed, 1000 * i + j), args.workers)
            rows.append([th, x, e.value, e.stderr, formula, f_se, z_score(e.value, e.stderr, formula, f_se)])
    return ["theta", "x", "estimate", "stderr", "formula", "formula_stderr", "z"], rows, {"theta": thetas, "x": xs}


def _renewal_constrained(args, model, tl):
    f = walk.GridFunction(args.f_x0, args.f_dx, tuple(_floats(args.f_values)))
    xs = _floats(args.x)
    mins = walk.sample_global_min(tl, args.n, walk.derive_seed(args.seed, 100), args.eps_trunc, args.workers)
    lim = walk.constrained_renewal_limit(tl, f, mins)
    rows = []
    for j, x in enumerate(xs):
        e = walk.constrained_renewal_sum(tl, x, f, args.n, walk.derive_seed(args.seed, j), args.workers)
        rows.append([x, e.value, e.stderr, lim.value, lim.stderr, z_score(e.value, e.stderr, lim.value, lim.stderr)])
    params = {"x": xs, "f": {"x0": f.x0, "dx": f.dx, "values": list(f.values)}}
    return ["x", "estimate", "stderr", "formula", "formula_stderr", "z"], rows, params


def _renewal_killed(args, model, tl):
    y = args.y
    xs = _floats(args.x)
    mins = walk.sample_global_min(tl, args.n, walk.derive_seed(args.seed, 100), args.eps_trunc, args.workers)
    ladder = walk.ladder_stats(tl, [tl.gamma], args.n, walk.derive_seed(args.seed, 101), args.workers,
                               args.eps_trunc, mins=mins)
    lim = walk.killed_renewal_limit(ladder, mins, y, tl.gamma, tl.span)
    rows = []
    for j, x in enumerate(xs):
        e = walk.killed_renewal_sum(tl, x, y, tl.gamma, args.n, walk.derive_seed(args.seed, j), args.workers)
        rows.append([x, e.value, e.stderr, lim, e.z(lim)])
    return ["x", "estimate", "stderr", "formula", "z"], rows, {"x": xs, "y": y}


def _renewal_u(args, model, tl):
    rng = np.random.Generator(np.random.Philox(key=walk.derive_seed(args.seed, 200)))
    top = args.u_max
    pairs = [(float(a), float(b)) for a, b in np.round(rng.uniform(0.0, top, size=(args.pairs, 2)), 3)]
    pts = sorted({1.0} | {p for xy in pairs for p in (xy[0], xy[1], xy[0] + xy[1])})
    est = dict(zip(pts, walk.renewal_U_grid(tl, pts, args.n, args.seed, args.workers)))
    u1 = est[1.0]
    rows = []
    for x, y in pairs:
        ux, uy, uxy = est[x], est[y], est[x + y]
        se = math.sqrt(ux.stderr**2 + uy.stderr**2 + uxy.stderr**2)
        violation = uxy.value > ux.value + uy.value + args.sigmas * se
        lin_se = math.hypot(ux.stderr, (x + 1) * u1.stderr)
        linear_ok = ux.value <= (x + 1) * u1.value + args.sigmas * lin_se
        rows.append([x, y, ux.value, uy.value, uxy.value, se, violation, linear_ok])
    cols = ["x", "y", "U_x", "U_y", "U_x_plus_y", "pooled_stderr", "violation", "linear_bound_ok"]
    return cols, rows, {"pairs": args.pairs, "u_max": top, "sigmas": args.sigmas}


def cmd_renewal_check(args) -> int:
    model = _model(args)
    out = Output(args, "renewal-check")
    tl = model.tilted()
    fn = {"overshoot": _renewal_overshoot, "constrained": _renewal_constrained,
          "killed": _renewal_killed, "U": _renewal_u}[args.which]
    cols, rows, params = fn(args, model, tl)
    out.csv(out.spec(model, which=args.which, n=args.n, **params), cols, rows, plot=(cols[0], cols[-1]))
    return EXIT_OK


def cmd_many_to_one(args) -> int:
    model = _model(args)
    out = Output(args, "many-to-one")
    f = ExpWeight(args.theta) if args.f == "exp" else Above(args.level)
    cfg = brw.BrwConfig(model.offspring, model.step, population_cap=args.population_cap)
    rows = []
    for k, n_gen in enumerate(_ints(args.n_gen)):
        r = brw.many_to_one_check(cfg, n_gen, f, args.n, walk.derive_seed(args.seed, k), args.workers)
        rows.append([n_gen, r.tree.value, r.tree.stderr, r.walk.value, r.walk.stderr, r.z])
    spec = out.spec(model, n_gen=_ints(args.n_gen), n=args.n, f=args.f, theta=args.theta, level=args.level)
    out.csv(spec, ["n_gen", "tree", "tree_stderr", "walk", "walk_stderr", "z"], rows, plot=("n_gen", "z"))
    return EXIT_OK


def cmd_dplus(args) -> int:
    model = _model(args)
    out = Output(args, "dplus")
    cfg = brw.BrwConfig(model.offspring, model.step, population_cap=args.population_cap)
    rows = []
    for k, n_gen in enumerate(_ints(args.n_gen)):
        r = brw.dplus_diag(cfg, n_gen, args.n, walk.derive_seed(args.seed, k), args.workers)
        per_tree = r.tree.value / n_gen if n_gen else math.nan
        per_walk = r.walk.value / n_gen if n_gen else math.nan
        rows.append([n_gen, r.tree.value, r.tree.stderr, r.walk.value, r.walk.stderr, r.z, per_tree, per_walk])
    spec = out.spec(model, n_gen=_ints(args.n_gen), n=args.n)
    cols = ["n_gen", "tree", "tree_stderr", "walk", "walk_stderr", "z", "tree_over_n", "walk_over_n"]
    out.csv(spec, cols, rows, plot=("n_gen", "walk_over_n"))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_globals(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    def d(value):
        return argparse.SUPPRESS if suppress else value

    g = parser.add_argument_group("global options")
    g.add_argument("--model", default=d(None),
                   help="model JSON file (default: the p0=0.6, p2=0.4, +-1 reference model)")
    g.add_argument("--seed", type=int, default=d(1), help="64-bit run seed (default 1)")
    g.add_argument("--workers", type=int, default=d(None), help="worker processes (default: all CPUs)")
    g.add_argument("--out", default=d(None), help="write <command>.csv/.json into this directory instead of stdout")
    g.add_argument("--no-timestamp", action="store_true", default=d(False), help="omit the generation timestamp")
    g.add_argument("--gnuplot", action="store_true", default=d(False),
                   help="also write a gnuplot script next to CSV output")
    g.add_argument("--tol", type=float, default=d(tail.TOL), help="fixed-point tolerance")
    g.add_argument("--population-cap", type=int, default=d(brw.POPULATION_CAP), help="trees above this are aborted")
    g.add_argument("--eps-trunc", type=float, default=d(walk.EPS_TRUNC), help="global-minimum truncation level")
    g.add_argument("--step-budget", type=int, default=d(walk.STEP_BUDGET), help="max increments per walk path")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the subcommand
    # copies default to SUPPRESS so they never overwrite an earlier value
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    p = argparse.ArgumentParser(prog="brwtail", description=__doc__.split("\n\n")[0])
    _add_globals(p)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gamma", parents=[common], help="tilt exponent, tilted law and critical speed")
    s.set_defaults(func=cmd_gamma)

    s = sub.add_parser("tail", parents=[common], help="P(M > x) on a grid")
    s.add_argument("--mode", choices=["exact", "mc"], default="exact")
    s.add_argument("--i-max", type=int, default=60, help="exact mode: last lattice index")
    s.add_argument("--x", default="0:8:1", help="mc mode: x grid, list or a:b:step")
    s.add_argument("--n", type=int, default=10**6, help="mc mode: number of trees")
    s.set_defaults(func=cmd_tail)

    s = sub.add_parser("kappa", parents=[common], help="limit constant of e^(gamma x) P(M > x)")
    s.add_argument("--n", type=int, default=10**6, help="walk samples per ingredient")
    s.add_argument("--i-max", type=int, default=120)
    s.add_argument("--check-index", type=int, default=50, help="lattice index of the direct DP comparison")
    s.add_argument("--z", default="0:12:0.1", help="non-lattice grid in units of 1/gamma")
    s.add_argument("--killed", type=float, default=None, metavar="Y", help="also report the killed prefactor at y")
    s.add_argument("--killed-x-index", type=int, default=20)
    s.set_defaults(func=cmd_kappa)

    s = sub.add_parser("phase", parents=[common], help="P(M_n >= c n | M >= c n)")
    s.add_argument("--c", default="0.3,0.9")
    s.add_argument("--n-gen", default="40")
    s.add_argument("--samples", type=int, default=1000, help="accepted trees per row")
    s.add_argument("--killed", type=float, default=None, metavar="Y")
    s.add_argument("--method", choices=["mc", "exact"], default="mc")
    s.add_argument("--max-trials", type=int, default=10**8)
    s.set_defaults(func=cmd_phase)

    s = sub.add_parser("renewal-check", parents=[common], help="renewal-theory limits: finite-x estimate against the limit formula")
    s.add_argument("which", choices=["overshoot", "constrained", "killed", "U"])
    s.add_argument("--n", type=int, default=10**5)
    s.add_argument("--x", default="5,10,20")
    s.add_argument("--theta", default=None, help="overshoot: Laplace arguments (default gamma)")
    s.add_argument("--y", type=float, default=1.0, help="killed: start height")
    s.add_argument("--f-x0", type=float, default=-3.0)
    s.add_argument("--f-dx", type=float, default=1.0)
    s.add_argument("--f-values", default="1,1,1", help="constrained: step function values")
    s.add_argument("--pairs", type=int, default=50, help="U: random (x, y) pairs")
    s.add_argument("--u-max", type=float, default=10.0)
    s.add_argument("--sigmas", type=float, default=6.0)
    s.set_defaults(func=cmd_renewal_check)

    s = sub.add_parser("many-to-one", parents=[common], help="generation sums against m^n E f(S_n)")
    s.add_argument("--n-gen", default="3,5,10")
    s.add_argument("--n", type=int, default=10**5)
    s.add_argument("--f", choices=["exp", "above"], default="exp")
    s.add_argument("--theta", type=float, default=0.3)
    s.add_argument("--level", type=float, default=0.0)
    s.set_defaults(func=cmd_many_to_one)

    s = sub.add_parser("dplus", parents=[common], help="E[D_n^+] against the tilted walk")
    s.add_argument("--n-gen", default="3,5,10")
    s.add_argument("--n", type=int, default=10**5)
    s.set_defaults(func=cmd_dplus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is None:
        args.workers = default_workers()
    try:
        return args.func(args)
    except NoTiltExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_TILT
    except NotLattice as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE
    except (TheoryViolation, SolverInvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THEORY
    except RareEventBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RARE
    except (ModelError, DomainError, GridTooSmall, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except BrwError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
