"""Command-line entry point: ``relaxctl COMMAND --config PATH [--out DIR] [--seed N] [--quiet]``.

Exit status: 0 when every contract of the command holds, 1 when one fails,
2 for configuration errors, 3 for CFL violations, 4 for instances beyond
exhaustive-search limits.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import inspect
import io
import logging
import os
import platform
import sys

import numpy as np

from . import __version__, builtins
from .config import ConfigError, build_problem, config_hash, dumps, fmt, load, validate
from .core import Mode, Problem, scan_bounds
from .dpp import (
    CFLError,
    backward_induction,
    build_transition,
    check_dpp,
    evaluate_rule,
    local_consistency,
    relaxed_vertex_check,
    snell_envelope,
)
from .martcheck import martingale_suite
from .oracles import InstanceTooLarge, enumerate_policies, riccati_lq
from .relaxed import (
    YoungMeasure,
    bl_distance,
    chattering_approx,
    embed_dirac,
    row_l1,
    time_control_family,
    to_csv as young_to_csv,
    validate_young,
)
from .selection import (
    SizeError,
    characteristics_gap,
    enumerate_optimal_rules,
    extract_mstar,
    krylov_select,
    rule_to_csv,
    verify_markov,
)
from .simulate import SimConfig, batch_to_csv, simulate_batch, summarize

log = logging.getLogger("relaxctl")

COMMANDS = ("solve", "simulate", "chatter", "martcheck", "select", "compare", "oracle")
EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_CFL, EXIT_SIZE = 0, 1, 2, 3, 4


class Run:
    """Collects artifacts and contract outcomes for one command."""

    def __init__(self, command: str, cfg: dict, out: str):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.hash = config_hash(cfg)
        self.seed = int(cfg["seed"])
        self.results: dict = {}
        self.contracts: dict = {}

    def check(self, name: str, value, bound, passed: bool):
        self.contracts[name] = {"value": value, "bound": bound, "passed": bool(passed)}

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.contracts.values())

    def write(self, name: str, text: str):
        os.makedirs(self.out, exist_ok=True)
        with open(os.path.join(self.out, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def header(self) -> str:
        return f"# config_hash={self.hash} seed={self.seed}\n"

    def write_csv(self, name: str, text: str):
        self.write(name, self.header() + text)

    def finish(self, argv):
        report = {"command": self.command, "config_hash": self.hash, "seed": self.seed, "version": __version__,
                  "passed": self.passed, "contracts": self.contracts, "results": self.results}
        self.write("report.json", dumps(report) + "\n")
        meta = {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(), "argv": list(argv),
                "python": platform.python_version(), "numpy": np.__version__, "config_hash": self.hash}
        self.write("metadata.json", dumps(meta) + "\n")


def _table_csv(problem: Problem, columns: list, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = problem.dim
    w.writerow(["i", "t", "node"] + [f"x{j + 1}" for j in range(d)] + columns)
    pts = problem.lattice.points
    for i, x, extra in rows:
        w.writerow([i, fmt(problem.grid.time(i)), x] + [fmt(c) for c in pts[x]] + [fmt(e) for e in extra])
    return buf.getvalue()


def value_csv(problem: Problem, values: np.ndarray) -> str:
    n1, N = values.shape
    return _table_csv(problem, ["v"], ((i, x, [float(values[i, x])]) for i in range(n1) for x in range(N)))


def policy_csv(problem: Problem, policy) -> str:
    n, N = policy.atoms.shape
    labels = problem.controls.labels

    def rows():
        for i in range(n):
            for x in range(N):
                k = int(policy.atoms[i, x])
                stop = "" if policy.stop is None else int(policy.stop[i, x])
                yield i, x, [k, labels[k], stop]

    return _table_csv(problem, ["atom", "label", "stop"], rows())


def _solve(problem: Problem):
    tm = build_transition(problem)
    v, pol = backward_induction(problem, tm)
    return tm, v, pol


def _policy(run: Run, problem: Problem, pol):
    choice = run.cfg["policy"]
    if choice == "solved":
        return pol, pol if problem.stops else None
    k = int(choice)
    if k >= problem.controls.K:
        raise ConfigError("config.policy", f"atom {k} outside the control set of size {problem.controls.K}")
    return k, None


def cmd_solve(run: Run, problem: Problem):
    tol = run.cfg["tolerances"]
    tm, v, pol = _solve(problem)
    run.write_csv("value.csv", value_csv(problem, v.values))
    run.write_csv("policy.csv", policy_csv(problem, pol))
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    rng = np.random.default_rng(run.seed)
    residuals = [check_dpp(problem, tm, v, rng.integers(0, n + 1, size=N)) for _ in range(run.cfg["n_tau"])]
    gap = relaxed_vertex_check(problem, tm, v, run.cfg["n_mixtures"], run.seed)
    bounds = scan_bounds(problem)
    run.results.update({
        "v0": float(v.values[0, problem.x0_node]), "x0_node": problem.x0_node, "cfl_margin": tm.cfl_margin,
        "dpp_residuals": residuals, "vertex_gap": gap, "bounds": bounds.as_dict(),
        "local_consistency": local_consistency(problem, tm), "jump_rounding": tm.jump_rounding,
        "numerical_diffusion": tm.numerical_diffusion,
    })
    run.check("dpp_residual", max(residuals), tol["dpp"], max(residuals) <= tol["dpp"])
    run.check("vertex_gap", gap, tol["vertex"], gap <= tol["vertex"])
    run.check("bounds_finite", bounds.ok, True, bounds.ok)
    if problem.mode == Mode.STOP:
        sv, region = snell_envelope(problem, tm)
        diff = float(np.max(np.abs(sv.values - v.values)))
        phi = np.array([problem.rewards.stopping(problem.grid.time(i), problem.lattice.points) for i in range(n + 1)])
        slack = float(np.min(sv.values - phi))
        run.check("snell_matches_induction", diff, 0.0, diff == 0.0)
        run.check("dominates_stopping_reward", slack, 0.0, slack >= 0.0)


def cmd_simulate(run: Run, problem: Problem):
    _, v, pol = _solve(problem)
    policy, stop = _policy(run, problem, pol)
    cfg = SimConfig(run.cfg["n_paths"], run.seed, run.cfg["substeps"])
    vals = []
    n_rec = min(run.cfg["n_record"], cfg.n_paths)
    for start in range(0, cfg.n_paths, 4096):
        idx = range(start, min(start + 4096, cfg.n_paths))
        batch = simulate_batch(problem, policy, stop, cfg.seed, idx, cfg.substeps, record=start < n_rec)
        if start == 0 and n_rec:
            sub = type(batch)(batch.times, batch.states[:n_rec], batch.controls[:n_rec], batch.stop_index[:n_rec],
                              batch.payoff[:n_rec], 0)
            run.write_csv("paths.csv", batch_to_csv(sub))
        vals.append(batch.payoff)
    est = summarize(np.concatenate(vals), run.seed)
    run.write("estimate.json", dumps({**est.as_dict(), "config_hash": run.hash}) + "\n")
    run.results.update({"estimate": est.as_dict(), "policy": run.cfg["policy"],
                        "lattice_v0": float(v.values[0, problem.x0_node])})
    run.check("finite_estimate", est.mean, "finite", bool(np.isfinite(est.mean) and np.isfinite(est.stderr)))


def default_young(problem: Problem) -> np.ndarray:
    """Non-Dirac measure drifting linearly from 30% to 70% on the first atom (uniform over the rest)."""
    n, K = problem.grid.n_steps, problem.controls.K
    if K == 1:
        return np.ones((n, 1))
    p = 0.3 + 0.4 * np.arange(n) / max(n - 1, 1)
    w = np.empty((n, K))
    w[:, 0] = p
    w[:, 1:] = ((1 - p) / (K - 1))[:, None]
    return w


def chatter_sweep(problem: Problem, m: YoungMeasure, n_subs, n_paths: int, seed: int, substeps: int = None) -> dict:
    """l1 / test-family distances and paired MC values of chattering approximations against sampling m."""
    fine = substeps or int(np.lcm.reduce(list(n_subs)))
    cfg = SimConfig(n_paths, seed, fine)
    ref = _payoffs(problem, m, cfg)
    ref_est = summarize(ref, seed)
    fam = time_control_family(problem.controls, problem.grid.T, 8, problem.grid.t0)
    rows = []
    K = problem.controls.K
    for n_sub in n_subs:
        nu = chattering_approx(m, n_sub)
        emb = embed_dirac(nu, problem.grid)
        l1 = float(np.max(row_l1(emb, m)))
        vals = _payoffs(problem, nu, cfg)
        est = summarize(vals, seed)
        paired = summarize(vals - ref, seed)
        rows.append({"n_sub": int(n_sub), "l1_max": l1, "l1_bound": K / n_sub, "bl": bl_distance(emb, m, fam),
                     "mean": est.mean, "stderr": est.stderr, "diff": est.mean - ref_est.mean,
                     "diff_stderr_paired": paired.stderr,
                     "bands_overlap": abs(est.mean - ref_est.mean) <= 3 * (est.stderr + ref_est.stderr)})
    return {"reference": ref_est.as_dict(), "rows": rows, "substeps": fine}


def _payoffs(problem, policy, cfg: SimConfig) -> np.ndarray:
    out = []
    for start in range(0, cfg.n_paths, 4096):
        idx = range(start, min(start + 4096, cfg.n_paths))
        out.append(simulate_batch(problem, policy, None, cfg.seed, idx, cfg.substeps, record=False).payoff)
    return np.concatenate(out)


def cmd_chatter(run: Run, problem: Problem):
    w = np.asarray(run.cfg["young"], dtype=float) if "young" in run.cfg else default_young(problem)
    try:
        m = validate_young(YoungMeasure(problem.grid, problem.controls, w))
    except ValueError as exc:
        raise ConfigError("config.young", str(exc)) from None
    run.write_csv("young.csv", young_to_csv(m))
    n_subs = list(run.cfg["n_sub"])
    sweep = chatter_sweep(problem, m, n_subs, run.cfg["n_paths"], run.seed)
    cols = ["n_sub", "l1_max", "l1_bound", "bl", "mean", "stderr", "diff", "diff_stderr_paired", "bands_overlap"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for r in sweep["rows"]:
        wr.writerow([fmt(r[c]) if not isinstance(r[c], (bool, np.bool_)) else int(r[c]) for c in cols])
    run.write_csv("chatter.csv", buf.getvalue())
    run.results.update(sweep)
    worst = max(r["l1_max"] - r["l1_bound"] for r in sweep["rows"])
    run.check("l1_within_K_over_n_sub", worst, 0.0, worst <= 1e-12)
    last = sweep["rows"][-1]
    run.check("finest_bands_overlap", last["diff"], "3 stderr bands", last["bands_overlap"])


def cmd_martcheck(run: Run, problem: Problem):
    _, _, pol = _solve(problem)
    policy, stop = _policy(run, problem, pol)
    cfg = SimConfig(run.cfg["n_paths"], run.seed, run.cfg["substeps"])
    rep = martingale_suite(problem, policy, stop, cfg, run.cfg["n_testfns"], run.cfg.get("pairs"), None,
                           run.cfg["z_max"], run.cfg["compensator_scale"], run.cfg["richardson"])
    run.write_csv("martcheck.csv", rep.to_csv())
    run.write("martcheck.json", rep.to_json() + "\n")
    run.results.update(rep.summary())
    run.check("all_abs_z_below_max", rep.max_abs_z, rep.z_max, rep.passed)


def cmd_select(run: Run, problem: Problem):
    tm, v, pol = _solve(problem)
    rules = enumerate_optimal_rules(problem, tm, v, run.cfg["tolerances"]["tie"])
    sel = krylov_select(rules, n_rounds=run.cfg["n_rounds"])
    mk = verify_markov(sel.rule, problem, tm)
    ms = extract_mstar(sel.rule)
    forward = evaluate_rule(problem, tm, ms.kernels, ms.stop)
    v0 = float(v.values[0, problem.x0_node])
    fv = float(forward[0, problem.x0_node])
    cgap = characteristics_gap(problem, tm, v, sel.rule)
    run.write_csv("mstar.csv", rule_to_csv(ms.rule(), problem))
    run.write("selection.json", dumps({"config_hash": run.hash, "seed": run.seed, "trace": sel.trace}) + "\n")
    run.results.update({
        "v0": v0, "mstar_value": fv, "n_vertex_rules": rules.vertex_count(), "vertices_checked": rules.n_checked,
        "vertex_value_gap": rules.max_value_gap, "surviving": sel.ruleset.vertex_count(),
        "markov": mk, "characteristics_gap": cgap, "dirac": ms.policy is not None,
    })
    run.check("optimal_rules_attain_v", rules.max_value_gap, 0.0, rules.max_value_gap == 0.0)
    run.check("markov_discrepancy", mk["max_tv"], 0.0, mk["max_tv"] == 0.0)
    run.check("mstar_reproduces_v", abs(fv - v0), 0.0, fv == v0)
    run.check("characteristics_gap", cgap, run.cfg["tolerances"]["tie"], cgap <= run.cfg["tolerances"]["tie"])


def _lq_params(cfg: dict):
    spec = cfg["problem"]
    if spec.get("builtin") != "lq":
        return None
    sig = inspect.signature(builtins.lq)
    params = {k: p.default for k, p in sig.parameters.items() if p.default is not inspect.Parameter.empty}
    params.update(spec.get("params", {}))
    return params


def cmd_compare(run: Run, problem: Problem):
    tol = run.cfg["tolerances"]
    _, v, pol = _solve(problem)
    v0 = float(v.values[0, problem.x0_node])
    cfg = SimConfig(run.cfg["n_paths"], run.seed, run.cfg["substeps"])
    est = summarize(np.concatenate([b.payoff for b in _batches(problem, pol, pol if problem.stops else None, cfg)]),
                    run.seed)
    run.results.update({"lattice_v0": v0, "mc": est.as_dict()})
    lq = _lq_params(run.cfg)
    if lq is not None:
        sol = riccati_lq(lq["A"], lq["B"], lq["sigma"], lq["q"], lq["r"], lq["p"], problem.grid.dt, problem.grid.n_steps)
        vstar = sol.value(float(problem.x0[0]))
        rel = abs(v0 - vstar) / abs(vstar)
        z = abs(est.mean - vstar) / est.stderr if est.stderr > 0 else float(est.mean != vstar) * np.inf
        run.results.update({"riccati_v": vstar, "lattice_rel_err": rel, "mc_z": z})
        run.check("lattice_within_rel_tol", rel, tol["compare_rel"], rel <= tol["compare_rel"])
        run.check("mc_within_band", z, tol["z_band"], z <= tol["z_band"])
    else:
        gap = abs(est.mean - v0)
        bound = tol["z_band"] * est.stderr + tol["compare_rel"] * abs(v0)
        run.results.update({"mc_minus_lattice": est.mean - v0})
        run.check("mc_near_lattice", gap, bound, gap <= bound)


def _batches(problem, policy, stop, cfg: SimConfig):
    for start in range(0, cfg.n_paths, 4096):
        idx = range(start, min(start + 4096, cfg.n_paths))
        yield simulate_batch(problem, policy, stop, cfg.seed, idx, cfg.substeps, record=False)


def cmd_oracle(run: Run, problem: Problem):
    tm, v, _ = _solve(problem)
    res = enumerate_policies(problem, tm)
    v0 = float(v.values[0, problem.x0_node])
    policy = {f"{i},{x}": a for (i, x), a in sorted(res["policy"].items())}
    run.write("oracle.json", dumps({"config_hash": run.hash, "value": res["value"], "n_policies": res["n_policies"],
                                    "n_decision_nodes": res["n_decision_nodes"], "policy": policy}) + "\n")
    run.results.update({"oracle_value": res["value"], "induction_value": v0, "n_policies": res["n_policies"]})
    run.check("oracle_equals_induction", abs(res["value"] - v0), 0.0, res["value"] == v0)


HANDLERS = {
    "solve": cmd_solve, "simulate": cmd_simulate, "chatter": cmd_chatter, "martcheck": cmd_martcheck,
    "select": cmd_select, "compare": cmd_compare, "oracle": cmd_oracle,
}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relaxctl", description="Relaxed stochastic control experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        raw = load(args.config)
        if args.seed is not None:
            if not isinstance(raw, dict):
                raise ConfigError("config", "top level must be an object")
            raw = {**raw, "seed": args.seed}
        cfg = validate(raw)
        if args.out:
            cfg["out"] = args.out
        problem = build_problem(cfg)
        # the output directory does not change results, so it is left out of the hash
        run = Run(args.command, {k: v for k, v in cfg.items() if k != "out"}, cfg["out"])
        HANDLERS[args.command](run, problem)
    except ConfigError as exc:
        print(f"configuration error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CFLError as exc:
        print(f"CFL violation: {exc}", file=sys.stderr)
        return EXIT_CFL
    except (InstanceTooLarge, SizeError) as exc:
        print(f"instance too large: {exc}", file=sys.stderr)
        return EXIT_SIZE
    run.finish(["relaxctl"] + argv)
    if not args.quiet:
        status = "PASS" if run.passed else "FAIL"
        print(f"{args.command}: {status} (config {run.hash[:12]}, seed {run.seed}) -> {run.out}")
        for name, c in run.contracts.items():
            print(f"  {'ok  ' if c['passed'] else 'FAIL'} {name}: {fmt(c['value'])} vs {fmt(c['bound'])}")
    return EXIT_OK if run.passed else EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
