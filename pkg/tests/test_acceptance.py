"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

Lines are collected in ``RESULTS`` and printed in the terminal summary by
conftest, so they show without ``-s``.
"""

import json
import time

import numpy as np
import pytest

from relaxctl import cli
from relaxctl.builtins import BUILTINS, make, small_random
from relaxctl.cli import chatter_sweep, default_young
from relaxctl.dpp import (
    backward_induction,
    build_transition,
    check_dpp,
    evaluate_rule,
    relaxed_vertex_check,
    snell_envelope,
)
from relaxctl.martcheck import martingale_suite
from relaxctl.oracles import enumerate_policies, enumerate_stopping, riccati_lq
from relaxctl.relaxed import YoungMeasure, validate_young
from relaxctl.selection import enumerate_optimal_rules, extract_mstar, krylov_select, verify_markov
from relaxctl.simulate import SimConfig, estimate_value

from .test_martcheck import unit_drift
from .test_selection import tie_history_rule

RESULTS = []


def report(number, ok, detail):
    RESULTS.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def solved(p):
    tm = build_transition(p)
    v, pol = backward_induction(p, tm)
    return tm, v, pol


def test_criterion_1_dpp_exact():
    worst, slowest = 0.0, 0.0
    for name in sorted(BUILTINS):
        t = time.perf_counter()
        p = make(name)
        tm, v, _ = solved(p)
        rng = np.random.default_rng(0)
        n, N = p.grid.n_steps, p.lattice.n_nodes
        res = max(check_dpp(p, tm, v, rng.integers(0, n + 1, size=N)) for _ in range(20))
        worst = max(worst, res)
        slowest = max(slowest, time.perf_counter() - t)
    report(1, worst <= 1e-10 and slowest <= 10, f"max residual {worst:.3g}, slowest problem {slowest:.2f}s")


def test_criterion_2_bruteforce():
    t = time.perf_counter()
    cases = [dict(n_steps=4, n_states=3, n_atoms=3, seed=s) for s in range(3)]
    cases += [dict(n_steps=4, n_states=5, n_atoms=3, x0_node=0, with_jump=False, seed=s) for s in range(3)]
    cases += [dict(n_steps=4, n_states=4, n_atoms=2, seed=s) for s in range(2)]
    mismatches = 0
    for kw in cases:
        p = small_random(mode="control-and-stop", **kw)
        tm, v, _ = solved(p)
        if enumerate_policies(p, tm)["value"] != v.values[0, p.x0_node]:
            mismatches += 1
    elapsed = time.perf_counter() - t
    report(2, mismatches == 0 and elapsed <= 60, f"{len(cases)} instances, {mismatches} mismatches, {elapsed:.1f}s")


def test_criterion_3_vertex():
    gaps = {}
    for name in sorted(BUILTINS):
        p = make(name)
        tm, v, _ = solved(p)
        gaps[name] = relaxed_vertex_check(p, tm, v, n_mixtures=100, seed=0)
    worst = max(gaps.values())
    report(3, worst <= 1e-12, f"max vertex gap {worst:.3g}")


@pytest.mark.slow
def test_criterion_4_lq_riccati():
    t = time.perf_counter()
    prm = dict(A=0.0, B=1.0, sigma=0.5, q=1.0, r=1.0, p=1.0)
    p = make("lq", n_steps=200, **prm)
    _, v, pol = solved(p)
    vstar = riccati_lq(**prm, dt=p.grid.dt, n_steps=p.grid.n_steps).value(float(p.x0[0]))
    rel = abs(v.values[0, p.x0_node] - vstar) / abs(vstar)
    est = estimate_value(p, pol, None, SimConfig(100_000, seed=0))
    z = abs(est.mean - vstar) / est.stderr
    elapsed = time.perf_counter() - t
    report(4, rel <= 0.02 and z <= 3 and elapsed <= 120,
           f"lattice rel err {rel:.4f}, MC z {z:.2f}, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_5_chattering():
    p = make("drift-bang")
    m = validate_young(YoungMeasure(p.grid, p.controls, default_young(p)))
    rows = chatter_sweep(p, m, [2, 4, 8, 16, 32], 20_000, seed=0)["rows"]
    l1_ok = all(r["l1_max"] <= r["l1_bound"] + 1e-12 for r in rows)
    # the coarsest split is the worst; every finer one sits inside the bands
    shrinks = all(abs(r["diff"]) < abs(rows[0]["diff"]) for r in rows[1:])
    overlap = all(r["bands_overlap"] for r in rows[1:])
    diffs = ", ".join(f"{r['diff']:+.4f}" for r in rows)
    report(5, l1_ok and shrinks and overlap,
           f"l1 bound {l1_ok}, value diffs [{diffs}], bands overlap for n_sub >= 4 {overlap}")


@pytest.mark.slow
def test_criterion_6_martingale():
    z = {}
    for name, seed in (("lq", 0), ("jump-lq", 0)):
        p = make(name)
        _, _, pol = solved(p)
        rep = martingale_suite(p, pol, config=SimConfig(10_000, seed), n_testfns=8)
        z[name] = rep.max_abs_z
    p = make("lq")
    _, _, pol = solved(p)
    bad = martingale_suite(p, pol, config=SimConfig(10_000, 0), n_testfns=8, compensator_scale=1.5).max_abs_z
    bad_unit = martingale_suite(unit_drift(), 0, config=SimConfig(10_000, 2), n_testfns=8,
                                compensator_scale=1.5).max_abs_z
    ok = max(z.values()) <= 4 and bad > 4 and bad_unit > 4
    report(6, ok, f"max|z| lq {z['lq']:.2f}, jump-lq {z['jump-lq']:.2f}, "
                  f"corrupted lq {bad:.1f}, corrupted unit drift {bad_unit:.1f}")


def test_criterion_7_selection():
    t = time.perf_counter()
    p = make("tie")
    tm, v, _ = solved(p)
    rules = enumerate_optimal_rules(p, tm, v)
    sel = krylov_select(rules)
    tv = verify_markov(sel.rule, p, tm)["max_tv"]
    tv_bad = verify_markov(tie_history_rule(p), p, tm)["max_tv"]
    ms = extract_mstar(sel.rule)
    v0 = v.values[0, p.x0_node]
    fwd = evaluate_rule(p, tm, ms.kernels, ms.stop)[0, p.x0_node]
    elapsed = time.perf_counter() - t
    ok = (rules.vertex_count() >= 2 and sel.ruleset.vertex_count() == 1 and tv == 0.0 and tv_bad > 0
          and fwd == v0 and elapsed <= 30)
    report(7, ok, f"{rules.vertex_count()} optimal vertex rules, {sel.ruleset.vertex_count()} selected, "
                  f"TV {tv:g}, negative control TV {tv_bad:g}, m* gap {abs(fwd - v0):g}, {elapsed:.1f}s")


def test_criterion_8_snell():
    p = make("put-stop", n_steps=4)
    tm, v, _ = solved(p)
    sv, _ = snell_envelope(p, tm)
    mism = sum(enumerate_stopping(p, tm, start=x)["value"] != sv.values[0, x] for x in range(p.lattice.n_nodes))
    phi = np.array([p.rewards.stopping(p.grid.time(i), p.lattice.points) for i in range(p.grid.n_steps + 1)])
    slack = float(np.min(sv.values - phi))
    report(8, mism == 0 and slack >= 0, f"{mism} start nodes differ from enumeration, min(v - stop reward) {slack:g}")


SMALL = {
    "solve": {"problem": {"builtin": "put-stop"}},
    "simulate": {"problem": {"builtin": "jump-lq", "params": {"n_steps": 20}}, "n_paths": 300, "n_record": 3},
    "chatter": {"problem": {"builtin": "drift-bang"}, "n_paths": 300},
    "martcheck": {"problem": {"builtin": "lq", "params": {"n_steps": 20}}, "n_paths": 300, "n_testfns": 3},
    "select": {"problem": {"builtin": "tie"}},
    "compare": {"problem": {"builtin": "lq", "params": {"n_steps": 50}}, "n_paths": 500},
    "oracle": {"problem": {"builtin": "small-random"}},
}


def test_criterion_9_determinism(tmp_path):
    differing = []
    for command in cli.COMMANDS:
        cfg = tmp_path / f"{command}.json"
        cfg.write_text(json.dumps({"version": 1, "seed": 5, **SMALL[command]}))
        files = []
        for run in ("a", "b"):
            out = tmp_path / command / run
            cli.main([command, "--config", str(cfg), "--out", str(out), "--quiet"])
            files.append({f.name: f.read_bytes() for f in sorted(out.iterdir()) if f.name != "metadata.json"})
        if not files[0] or files[0] != files[1]:
            differing.append(command)
    report(9, not differing, f"{len(cli.COMMANDS)} commands, differing: {differing or 'none'}")
