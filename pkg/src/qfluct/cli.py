"""Command-line experiment runner.

Every subcommand reads a TOML config, writes ``<command>.json`` (deterministic
for a fixed config and seed), ``<command>.csv`` and ``<command>.meta.json``
(timestamps, versions, runtime) into the output directory.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 configuration
error, 3 resource cap hit.

CSV columns
-----------
clt       T, N, re, im, abs_err
mixing    n, correlation
fcs       n, bound, worst_deviation
kms       N, t, re, im, residual
weyl      check, value, tolerance, status
locality  buffer, deviation
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .algebra import LocalOperator, Interval
from .dynamics import lieb_robinson_probe
from .errors import ConfigError, MixingCertificateError, QuotientError, WindowCapError
from .fluctuation import (characteristic_grid, clt_prediction, covariance_data,
                          determine_phase_convention)
from .config import ExperimentConfig, load_config
from .states import (FCSState, GibbsState, ProductState, dual_transfer, fcs_rank_probe,
                     kms_residual, mixing_analysis, thermodynamic_expect, two_point_decay)
from .weyl import (MicroContext, QuasifreeState, WeylWord, continuity_defect,
                   kms_fluctuation_check, positivity_matrix, quotient_reduce, weyl_reduce)

SCHEMA = "qfluct.report/1"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_CAP = 0, 1, 2, 3


# serialization ------------------------------------------------------------------

def _clean(x):
    """JSON-safe copy: complex as [re, im], non-finite floats as strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (complex, np.complexfloating)):
        return [_clean(float(x.real)), _clean(float(x.imag))]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _assertion(name, ok, detail=None, skipped=False):
    status = "SKIPPED" if skipped else ("PASS" if ok else "FAIL")
    return {"name": name, "status": status, "detail": detail}


def _report(command, cfg: ExperimentConfig, results, assertions, tails=None):
    return {
        "schema": SCHEMA,
        "command": command,
        "config": cfg.raw,
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "tolerances": cfg.tolerances,
        "phase_convention": determine_phase_convention().describe(),
        "tail_certificates": tails or {},
        "results": results,
        "assertions": assertions,
        "status": "FAIL" if any(a["status"] == "FAIL" for a in assertions) else "PASS",
    }


def write_outputs(out_dir, command, report, header, rows, started):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.json").write_text(json.dumps(_clean(report), sort_keys=True, indent=2) + "\n")
    with open(out / f"{command}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    meta = {"command": command, "started": started, "runtime_s": time.time() - started,
            "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "config_hash": report["config_hash"]}
    (out / f"{command}.meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _pmap(fn, items, workers):
    """Order-preserving map over grid points; results do not depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# subcommands ---------------------------------------------------------------------

def run_clt(cfg: ExperimentConfig):
    state = cfg.build_state()
    gens = cfg.build_generators()
    T = np.asarray(cfg.grid.get("T", [0.5, 1.0, 1.5, 2.0]), float)
    N_list = cfg.grid.get("N", [2, 3, 4, 5])
    method = cfg.extra.get("clt", {}).get("method", "auto")
    sign = determine_phase_convention().sign
    cov = covariance_data(state, gens, cfg.tolerances["tail"])
    pred = clt_prediction(cov, T, sign)
    cap = min(cfg.max_window_dim, 2 ** 12)  # dense exponentials beyond this are impractical
    values = _pmap(lambda N: characteristic_grid(state, gens, T, N, method, cap), N_list, cfg.workers)
    sup = [float(np.max(np.abs(v - pred))) for v in values]
    ns = np.log(2 * np.asarray(N_list, float) + 1)
    rate = float(np.polyfit(ns, np.log(np.maximum(sup, 1e-300)), 1)[0]) if len(N_list) > 1 else float("nan")
    slack = cfg.tolerances["clt_slack"]
    if len(N_list) < 2:
        checks = [_assertion("sup_error_decreasing", True, "single N", skipped=True)]
    else:
        ok = all(b < a + slack for a, b in zip(sup, sup[1:]))
        checks = [_assertion("sup_error_decreasing", ok, {"sup_errors": sup, "slack": slack})]
    rows = [(float(t), N, float(v.real), float(v.imag), float(abs(v - p)))
            for N, vals in zip(N_list, values) for t, v, p in zip(T, vals, pred)]
    results = {"T": T, "N": N_list, "values": values, "prediction": pred, "sup_errors": sup,
               "rate": rate, "t_matrix": cov.t_matrix, "sigma_matrix": cov.sigma_matrix,
               "state": state.describe(), "generators": [str(g.support) for g in gens]}
    tails = {"t_sigma": cov.tail_bounds, "certified": cov.certified}
    return results, checks, tails, ["T", "N", "re", "im", "abs_err"], rows


def run_mixing(cfg: ExperimentConfig):
    state = cfg.build_state()
    gens = cfg.build_generators()
    q1, q2 = gens[0], gens[1] if len(gens) > 1 else gens[0]
    seps = cfg.grid.get("separations", list(range(1, 9)))
    table = two_point_decay(state, q1, q2, seps, cfg.grid.get("fit_min"))
    checks = []
    if math.isinf(table.M):
        checks.append(_assertion("exponential_decay", True, "all correlations vanish"))
    else:
        ok = table.M > 0 and table.r2 >= cfg.tolerances["min_r2"]
        checks.append(_assertion("exponential_decay", ok, {"M": table.M, "r2": table.r2}))
    expected = cfg.extra.get("mixing", {}).get("expected_M")
    if expected is not None:
        checks.append(_assertion("rate_matches", abs(table.M - expected) <= 0.1 * abs(expected),
                                 {"M": table.M, "expected": expected}))
    results = {"state": state.describe(), "separations": seps, "correlations": table.values,
               "K": table.K, "M": table.M, "r2": table.r2}
    if isinstance(state, GibbsState) and "buffers" in cfg.grid and state.beta > 0:
        try:
            obs = cfg.extra.get("mixing", {}).get("observable")
            qt = cfg.build_generators([obs])[0] if obs else q1
            th = thermodynamic_expect(state, qt, 1e-300, max_buffer=cfg.grid["buffers"][-1])
        except WindowCapError as exc:
            th = exc.partial
        results["thermodynamic"] = {"values": th.values, "increments": th.increments,
                                    "slope": th.slope, "r2": th.r2}
        checks.append(_assertion("increments_loglinear", th.slope < 0 and th.r2 >= cfg.tolerances["min_r2"],
                                 {"slope": th.slope, "r2": th.r2}))
    rows = list(zip(seps, table.values))
    return results, checks, {}, ["n", "correlation"], rows


def run_fcs(cfg: ExperimentConfig):
    spec = cfg.fcs_spec()
    state = FCSState(spec)
    t = dual_transfer(spec)
    cert = mixing_analysis(t)
    unital = float(np.abs(t.apply(np.eye(spec.bond_dim)) - np.eye(spec.bond_dim)).max())
    rng = cfg.rng()
    k = spec.bond_dim
    n_max = int(cfg.grid.get("n_max", 30))
    worst = np.zeros(n_max + 1)
    P = t.projection
    for _ in range(int(cfg.grid.get("samples", 100))):
        A = rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))
        A /= np.linalg.norm(A, 2)
        X = A
        for n in range(n_max + 1):
            dev = np.linalg.norm(X - (P @ A.reshape(-1)).reshape(k, k), 2)
            worst[n] = max(worst[n], dev)
            X = t.apply(X)
    bounds = cert.bound(np.arange(n_max + 1)) if cert.is_mixing else np.full(n_max + 1, np.inf)
    checks = [_assertion("unitality", unital <= cfg.tolerances["unitality"], unital)]
    if cert.is_mixing:
        checks.append(_assertion("certificate_valid", bool(np.all(worst <= bounds)),
                                 {"max_ratio": float(np.max(worst / np.maximum(bounds, 1e-300)))}))
    else:
        checks.append(_assertion("certificate_valid", True, "not mixing", skipped=True))
    kl, kr = cfg.grid.get("rank_probe", [2, 2])
    rank = fcs_rank_probe(state, kl, kr)
    checks.append(_assertion("rank_bound", rank <= k * k, {"rank": rank, "bond_dim": k}))
    expected = cfg.extra.get("fcs", {}).get("expected_M")
    if expected is not None:
        checks.append(_assertion("rate_matches", abs(cert.rate - expected) <= 1e-9,
                                 {"M": cert.rate, "expected": expected}))
    results = {"spec": spec.to_dict(), "slem": cert.slem, "M": cert.rate, "C": cert.prefactor,
               "is_mixing": cert.is_mixing, "peripheral": cert.peripheral,
               "unitality_residual": unital, "rank": rank}
    rows = [(n, float(b), float(w)) for n, (b, w) in enumerate(zip(bounds, worst))]
    return results, checks, {"mixing": {"C": cert.prefactor, "M": cert.rate}}, \
        ["n", "bound", "worst_deviation"], rows


def _random_local(rng, window: Interval, d=2):
    """Random self-adjoint operator on a random sub-interval of ``window``."""
    lo = int(rng.integers(window.lo, window.hi + 1))
    hi = int(rng.integers(lo, min(lo + 1, window.hi) + 1))
    D = d ** (hi - lo + 1)
    A = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    return LocalOperator(Interval(lo, hi), (A + A.conj().T) / 2, d)


def run_kms(cfg: ExperimentConfig):
    state = cfg.build_state()
    if not isinstance(state, GibbsState):
        raise ConfigError("kms needs a gibbs state")
    gens = cfg.build_generators()
    q, r = gens[0], gens[1] if len(gens) > 1 else gens[0]
    rng = cfg.rng()
    L = int(cfg.grid.get("window_sites", 8))
    window = Interval(0, L - 1)
    pairs = int(cfg.grid.get("pairs", 10))
    res_local = [kms_residual(state, _random_local(rng, window, state.d),
                              _random_local(rng, window, state.d), window) for _ in range(pairs)]
    t_grid = cfg.grid.get("t", [0.0, 0.5])
    N_list = cfg.grid.get("N", [1, 2])
    rep = kms_fluctuation_check(state, q, r, t_grid=t_grid, N_list=N_list)
    tol = cfg.tolerances["kms"]
    checks = [_assertion("local_kms", max(res_local, default=0.0) <= tol, max(res_local, default=0.0)),
              _assertion("fluctuation_kms", rep.max_residual <= tol, rep.max_residual),
              _assertion("bounded", rep.max_abs <= 1 + 1e-10, rep.max_abs)]
    rows = [(N, float(t), float(v.real), float(v.imag), float(res))
            for N, vals, ress in zip(rep.N_list, rep.values, rep.residuals)
            for t, v, res in zip(rep.t_grid, vals, ress)]
    results = {"state": state.describe(), "local_residuals": res_local, "fluctuation": rep.to_dict()}
    return results, checks, {}, ["N", "t", "re", "im", "residual"], rows


def run_weyl(cfg: ExperimentConfig):
    state = cfg.build_state()
    gens = cfg.build_generators()
    cov = covariance_data(state, gens, cfg.tolerances["tail"])
    space = quotient_reduce(cov)
    omega = QuasifreeState(space)
    rng = cfg.rng()
    rows, checks = [], []

    def record(name, value, tol, ok):
        rows.append((name, float(value), float(tol), "PASS" if ok else "FAIL"))
        checks.append(_assertion(name, ok, {"value": float(value), "tolerance": tol}))

    if space.dim:
        f, g = rng.standard_normal((2, space.dim))
        v, ph = weyl_reduce(WeylWord([f, g, -f, -g]), space)
        err = abs(ph - np.exp(-1j * space.sign * space.sigma(f, g))) + np.abs(v).max()
        record("group_commutator_phase", err, 1e-12, err <= 1e-12)
        word = WeylWord(rng.standard_normal((5, space.dim)))
        (vl, pl), (vr, pr) = weyl_reduce(word, space, "left"), weyl_reduce(word, space, "right")
        err = abs(pl - pr) + np.abs(vl - vr).max()
        record("fold_agreement", err, 1e-12, err <= 1e-12)
        vecs = rng.standard_normal((6, space.dim))
        mineig = float(np.linalg.eigvalsh(positivity_matrix(omega, vecs)).min())
        record("positivity", mineig, -1e-9, mineig >= -1e-9)
    u_list = cfg.grid.get("u")
    results = {"quotient_dim": space.dim, "kernel": space.kernel.T, "t_reduced": space.t_reduced,
               "sigma_reduced": space.sigma_reduced, "phase_sign": space.sign}
    if u_list:
        invariant = isinstance(state, GibbsState) or (
            isinstance(state, ProductState) and np.allclose(state.rho, np.eye(state.d) / state.d))
        if not invariant:
            raise ConfigError("macroscopic continuity needs a state invariant under the dynamics "
                              "(gibbs, or the tracial product state)")
        psi = cfg.dynamics()
        ctx = MicroContext(state, psi, cfg.tolerances["evolve"], cfg.tolerances["tail"])
        defects = [continuity_defect(ctx, gens[0], u) for u in u_list]
        vals = [d[0] for d in defects]
        ok = all(b < a for a, b in zip(vals, vals[1:]))
        results["continuity"] = {"u": u_list, "values": vals, "errors": [d[1] for d in defects]}
        checks.append(_assertion("continuity_decreasing", ok, vals))
    return results, checks, {"t_sigma": cov.tail_bounds}, ["check", "value", "tolerance", "status"], rows


def run_locality(cfg: ExperimentConfig):
    psi = cfg.dynamics()
    q = cfg.build_generators()[0]
    t = float(cfg.grid.get("t", [1.0])[0])
    buffers = cfg.grid.get("buffers", [0, 1, 2, 3, 4])
    table = lieb_robinson_probe(q, t, psi, buffers, cfg.max_window_dim)
    devs = table.deviations[:-1]
    ok = all(b <= a for a, b in zip(devs, devs[1:])) and table.rate > 0
    checks = [_assertion("deviation_decay", ok, {"rate": table.rate, "r2": table.r2})]
    results = {"interaction": psi.name, "t": t, "buffers": table.buffers,
               "deviations": table.deviations, "rate": table.rate, "r2": table.r2}
    return results, checks, {}, ["buffer", "deviation"], list(zip(table.buffers, table.deviations))


HELP = {
    "clt": "characteristic functions of fluctuation operators against their Gaussian limit",
    "mixing": "decay of truncated two-point correlations",
    "fcs": "transfer-operator mixing certificate and rank probe of a finitely correlated state",
    "kms": "finite-volume KMS identities, local and for fluctuation words",
    "weyl": "CCR phases, quasifree positivity and macroscopic continuity",
    "locality": "window dependence of the time evolution",
}

COMMANDS = {"clt": run_clt, "mixing": run_mixing, "fcs": run_fcs, "kms": run_kms,
            "weyl": run_weyl, "locality": run_locality}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfluct", description="Quantum fluctuation experiments.")
    p.add_argument("--version", action="version", version=f"qfluct {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--out", help="output directory (default from config)")
        sp.add_argument("--workers", type=int, help="worker threads for grid points")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--max-window-dim", type=int, dest="max_window_dim",
                        help="largest Hilbert space dimension of any window")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config).replace(seed=args.seed, workers=args.workers,
                                               max_window_dim=args.max_window_dim, out=args.out)
        results, checks, tails, header, rows = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WindowCapError as exc:
        print(f"resource cap hit: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (MixingCertificateError, QuotientError) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    report = _report(args.command, cfg, results, checks, tails)
    write_outputs(cfg.out, args.command, report, header, rows, started)
    for c in checks:
        print(f"{c['status']:7s} {c['name']}")
    return EXIT_FAIL if report["status"] == "FAIL" else EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
