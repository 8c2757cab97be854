"""Command-line front end: experiment configuration and structured outputs.

Subcommands: distance, flow, parametrix, norms, dss (horizons | qnm |
norm-scan | end-check), glue (verify).  Every run writes a JSON header
(config echo, package/library versions, derived constants) next to its
CSV / JSON-lines data files; identical configurations produce bit-identical
data files (fixed task ordering, no timestamps).

Exit codes: 0 success, 2 validation error, 3 numerical failure (with a
machine-readable failure record in the output directory).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__, desitter, errors, gluing, metrics, parametrix, radial, schur
from .geodesics import distance_flow, halfspace_flow0, HalfspaceState
from .hyperbolic import boundary_triple, dist0_closed, log_structure_F

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

_VALIDATION_ERRORS = (
    errors.DomainError,
    errors.SchurRangeError,
    errors.WeightWindowError,
    errors.InvalidDeltaError,
    errors.HorizonError,
    ValueError,
)
_NUMERICAL_ERRORS = (
    errors.ConvergenceError,
    errors.ConjugatePointError,
    errors.ModelValidityError,
    errors.PerturbativeRegimeError,
    errors.AccuracyError,
    errors.TruncationError,
)


def _fmt(x):
    """Deterministic shortest-repr float formatting."""
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")


def _write_jsonl(path, records):
    with open(path, "w", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_header(outdir, command, cfg, derived):
    header = {
        "command": command,
        "config": cfg,
        "derived": derived,
        "versions": {
            "hypres": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(Path(outdir) / "run.json", "w", newline="\n") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metric_spec(cfg):
    h_name = cfg.get("H", "zero")
    w_name = cfg.get("W", "zero")
    h_kw = cfg.get("H_params", {})
    w_kw = cfg.get("W_params", {})
    return metrics.MetricSpec(
        n=int(cfg.get("n", 2)),
        delta=float(cfg.get("delta", 0.0)),
        H=metrics.tensor_field(h_name, **h_kw),
        W=metrics.scalar_field(w_name, **w_kw),
    )


def _parse_complex(s):
    return complex(str(s).replace(" ", "").replace("i", "j"))


# ----------------------------------------------------------------------
# subcommands


def cmd_distance(cfg, outdir):
    spec = _metric_spec(cfg)
    n_pairs = int(cfg.get("pairs", 25))
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_pairs):
        z = rng.uniform(-0.6, 0.6, spec.dim)
        zp = rng.uniform(-0.6, 0.6, spec.dim)
        if np.allclose(z, zp):
            continue
        d0 = float(dist0_closed(z, zp))
        d, _ = distance_flow(spec, z, zp)
        trip = boundary_triple(z, zp)
        rows.append(
            (k, *z, *zp, d, d0, float(log_structure_F(z, zp)), float(trip.rho_l), float(trip.rho_r))
        )
    _write_csv(
        Path(outdir) / "distance.csv",
        ["pair", "z1", "z2", "z3", "zp1", "zp2", "zp3", "dist_flow", "dist_closed", "F", "rho_l", "rho_r"],
        rows,
    )
    return {"pairs": len(rows), "max_rel_err": max(abs(r[7] - r[8]) / r[8] for r in rows)}


def cmd_flow(cfg, outdir):
    lam = float(cfg.get("lam", 0.0))
    mu = np.atleast_1d(np.asarray(cfg.get("mu", [1.0, 0.0]), dtype=float))
    x0 = float(cfg.get("x", 1.0))
    t_final = float(cfg.get("T", 20.0))
    state = HalfspaceState(x=x0, y=np.zeros(mu.size), lam=lam, mu=mu)
    t, states, diag = halfspace_flow0(state, t_final)
    rows = [
        (float(tt), s.x, *s.y, s.lam, *s.mu, s.energy) for tt, s in zip(t, states)
    ]
    ycols = [f"y{i+1}" for i in range(mu.size)]
    mcols = [f"mu{i+1}" for i in range(mu.size)]
    _write_csv(Path(outdir) / "flow.csv", ["t", "x", *ycols, "lam", *mcols, "energy2p0"], rows)
    return diag


def cmd_parametrix(cfg, outdir):
    spec = _metric_spec(cfg)
    h = float(cfg.get("h", 0.1))
    sigma = _parse_complex(cfg.get("sigma", "1.0"))
    sp = parametrix.SpectralPoint(h=h, sigma=sigma)
    zp = np.asarray(cfg.get("base", [0.1, -0.2, 0.15]), dtype=float)
    r_max = float(cfg.get("r_max", 8.0))
    fan = parametrix.build_fan(
        spec, zp, n_phi=int(cfg.get("n_phi", 6)), n_psi=int(cfg.get("n_psi", 8)),
        r_max=r_max, n_r=int(cfg.get("n_r", 100)), rtol=float(cfg.get("rtol", 1e-10)),
    )
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    n_samples = int(cfg.get("samples", 60))
    targets = rng.uniform(-0.55, 0.55, (n_samples, spec.dim))
    fields = fan.evaluate_pairs(targets)
    g_vals = parametrix.g_from_fields(fields, sp)
    e_vals = parametrix.e_from_fields(fields, sp)
    trip = boundary_triple(targets, zp[None, :])
    rows = []
    for i in range(targets.shape[0]):
        rows.append(
            (
                *targets[i], *zp,
                float(g_vals[i].real), float(g_vals[i].imag),
                float(e_vals[i].real), float(e_vals[i].imag),
                float(fields["r"][i]), float(trip.rho_l[i]), float(trip.rho_r[i]),
            )
        )
    _write_csv(
        Path(outdir) / "kernel.csv",
        ["z1", "z2", "z3", "zp1", "zp2", "zp3", "re_G", "im_G", "re_E", "im_E", "r", "rho_l", "rho_r"],
        rows,
    )
    u1max = float(np.max(np.abs(fields["Q"] / (2.0 * abs(sigma)))))
    return {"max_abs_U1": u1max, "max_abs_E": float(np.max(np.abs(e_vals)))}


def cmd_norms(cfg, outdir, threads=1):
    spec = _metric_spec(cfg)
    sigma = _parse_complex(cfg.get("sigma", "1.0"))
    a = float(cfg.get("a", 1.0))
    b = float(cfg.get("b", 1.0))
    h_values = [float(x) for x in cfg.get("h_values", [0.1, 0.05, 0.025])]
    pair = schur.build_pair_data(
        spec,
        levels=int(cfg.get("levels", 8)),
        per_level=int(cfg.get("per_level", 1)),
        n_cos=int(cfg.get("n_cos", 2)),
        n_psi=int(cfg.get("n_psi", 4)),
        fan_kw={"n_phi": 6, "n_psi": 8, "n_r": 100, "rtol": 1e-8},
    )

    def task(h):
        sp = parametrix.SpectralPoint(h=h, sigma=sigma)
        e_grid = schur.error_kernel_grid(pair, sp, b)
        g_grid = schur.parametrix_kernel_grid(pair, sp, a, b)
        en = schur.grid_norm(e_grid)
        gn = schur.grid_norm(g_grid)
        rn = np.nan
        if en < 1.0:
            r_grid = schur.resolvent_assemble(g_grid, e_grid, a, b)
            rn = schur.grid_norm(r_grid)
        return en, gn, rn

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(task, h_values))
    records = []
    for h, (en, gn, rn) in sorted(zip(h_values, results), key=lambda t: -t[0]):
        records.append(
            {
                "h": h, "re_sigma": sigma.real, "im_sigma": sigma.imag, "a": a, "b": b,
                "norm": rn if np.isfinite(rn) else None, "error_norm": en,
                "parametrix_norm": gn, "slope_window": [min(h_values), max(h_values)],
            }
        )
    _write_jsonl(Path(outdir) / "norms.jsonl", records)
    hs = np.array([r["h"] for r in records if r["norm"]])
    rs = np.array([r["norm"] for r in records if r["norm"]])
    slope = float(np.polyfit(np.log(hs), np.log(rs), 1)[0]) if hs.size >= 2 else np.nan
    return {"resolvent_slope": slope, "h0": max([r["h"] for r in records if r["error_norm"] <= 0.5], default=None)}


def _dss_model(cfg):
    return desitter.DSSModel.create(
        float(cfg.get("m", 1.0)), float(cfg.get("lambda", 0.1)), int(cfg.get("n", 2))
    )


def cmd_dss_horizons(cfg, outdir):
    model = _dss_model(cfg)
    out = {
        "r_H": model.r_H, "r_I": model.r_I,
        "beta_H": model.beta_H, "beta_I": model.beta_I,
        "alpha2_at_r_H": desitter.alpha2(model, model.r_H),
        "alpha2_at_r_I": desitter.alpha2(model, model.r_I),
    }
    print(
        f"r_H = {model.r_H:.6f}  r_I = {model.r_I:.6f}  "
        f"beta_H = {model.beta_H:+.6f}  beta_I = {model.beta_I:+.6f}"
    )
    _write_jsonl(Path(outdir) / "horizons.jsonl", [out])
    return out


def cmd_dss_qnm(cfg, outdir, threads=1):
    model = _dss_model(cfg)
    ells = [int(e) for e in cfg.get("ells", [0, 1, 2])]
    rect = tuple(float(v) for v in cfg.get("rect", [-0.5, 0.5, -0.1, 0.02]))
    refine = float(cfg.get("refine", 1e-8))

    def task(ell):
        grid = radial.tortoise(model, ell)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return radial.qnm_scan(grid, rect, refine=refine)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(task, ells))
    rows = []
    for ell, zeros in zip(ells, results):
        for z in zeros:
            rows.append((ell, z["sigma"].real, z["sigma"].imag, z["multiplicity"], z["residual"]))
    _write_csv(Path(outdir) / "qnm.csv", ["ell", "re", "im", "multiplicity", "residual"], rows)
    return {"zero_counts": {str(ell): len(z) for ell, z in zip(ells, results)}}


def cmd_dss_norm_scan(cfg, outdir, threads=1):
    model = _dss_model(cfg)
    ells = [int(e) for e in cfg.get("ells", [0, 1, 2])]
    gamma = float(cfg.get("gamma", 0.04))
    b = float(cfg.get("b", 0.06))
    log_n = cfg.get("logN", None)
    log_n = float(log_n) if log_n is not None else None
    sigma_line = np.linspace(
        float(cfg.get("sigma_min", 1.0)), float(cfg.get("sigma_max", 20.0)),
        int(cfg.get("n_sigma", 12)),
    )

    def task(ell):
        grid = radial.tortoise(model, ell)
        return radial.norm_scan(grid, b=b, gamma=gamma, sigma_line=sigma_line, logN=log_n)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scans = list(pool.map(task, ells))
    records = []
    for scan in scans:
        for i, s_re in enumerate(scan.sigma):
            records.append(
                {
                    "ell": scan.ell, "re_sigma": float(s_re), "im_sigma": scan.gamma,
                    "wronskian_re": float(scan.wronskians[i].real),
                    "wronskian_im": float(scan.wronskians[i].imag),
                    "norm": float(scan.norms[i]) if np.isfinite(scan.norms[i]) else None,
                    "flags": [f["flag"] for f in scan.flags if f["sigma"].real == s_re],
                }
            )
    _write_jsonl(Path(outdir) / "norm_scan.jsonl", records)
    return {"M_hat": {str(s.ell): s.M_hat for s in scans}}


def cmd_dss_end_check(cfg, outdir):
    model = _dss_model(cfg)
    reports = []
    for end in ("H", "I"):
        reports.append(desitter.model_end_check(model, end, ell=int(cfg.get("ell", 0))))
    _write_jsonl(Path(outdir) / "end_check.jsonl", reports)
    return {r["end"]: r["fitted_exponent"] for r in reports}


def cmd_glue_verify(cfg, outdir):
    model = _dss_model(cfg)
    ell = int(cfg.get("ell", 0))
    sigma = _parse_complex(cfg.get("sigma", "2-0.01j"))
    delta = float(cfg.get("delta", 0.05 * model.width))
    n_grid = int(cfg.get("n_grid", 9001))
    grid = gluing.glue_grid(model, ell, L=float(cfg.get("L", 36.0)), n_grid=n_grid)
    res = gluing.gluing_residual(model, ell, sigma, delta, grid=grid)
    records = [
        {"identity": k, "ell": ell, "sigma": [sigma.real, sigma.imag],
         "grid_size": n_grid, "residual": float(res[k])}
        for k in ("residentity1", "residentity2", "brpkid")
    ]
    _write_jsonl(Path(outdir) / "glue.jsonl", records)
    worst = max(r["residual"] for r in records)
    print(f"gluing residuals: " + "  ".join(f"{r['identity']}={r['residual']:.3e}" for r in records))
    return {"worst_residual": worst}


# ----------------------------------------------------------------------
# driver


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="TOML config file")
    common.add_argument("--out", type=str, default="runs/out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for scans")
    p = argparse.ArgumentParser(prog="hypres", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("distance", parents=[common], help="distance tables: flow vs closed form, F values")
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--delta", type=float)

    sp = sub.add_parser("flow", parents=[common], help="half-space Hamilton flow diagnostics")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--x", type=float)
    sp.add_argument("--T", type=float)

    sp = sub.add_parser("parametrix", parents=[common], help="amplitude/kernel samples and dumps")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--W", type=str)
    sp.add_argument("--H", type=str)
    sp.add_argument("--h", type=float)
    sp.add_argument("--sigma", type=str)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("norms", parents=[common], help="weighted norms, h-sweeps, resolvent assembly")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--W", type=str)
    sp.add_argument("--H", type=str)
    sp.add_argument("--sigma", type=str)
    sp.add_argument("--a", type=float)
    sp.add_argument("--b", type=float)

    dss = sub.add_parser("dss", help="de Sitter-Schwarzschild model scans")
    dss_sub = dss.add_subparsers(dest="dss_command", required=True)
    for name in ("horizons", "qnm", "norm-scan", "end-check"):
        q = dss_sub.add_parser(name, parents=[common])
        q.add_argument("--m", type=float)
        q.add_argument("--lambda", dest="lambda_", type=float)
        q.add_argument("--n", type=int)
        if name == "qnm":
            q.add_argument("--refine", type=float)
        if name == "norm-scan":
            q.add_argument("--gamma", type=float)
            q.add_argument("--b", type=float)
            q.add_argument("--logN", type=float)
        if name == "end-check":
            q.add_argument("--ell", type=int)

    gl = sub.add_parser("glue", help="resolvent gluing identity verification")
    gl_sub = gl.add_subparsers(dest="glue_command", required=True)
    q = gl_sub.add_parser("verify", parents=[common])
    q.add_argument("--m", type=float)
    q.add_argument("--lambda", dest="lambda_", type=float)
    q.add_argument("--ell", type=int)
    q.add_argument("--sigma", type=str)
    q.add_argument("--delta", type=float)
    q.add_argument("--n-grid", dest="n_grid", type=int)
    return p


def _merge_config(args):
    cfg = {}
    if args.config:
        with open(args.config, "rb") as fh:
            cfg = tomllib.load(fh)
    section = cfg.get(args.command, {}) if isinstance(cfg.get(args.command, {}), dict) else {}
    merged = {**cfg.get("global", {}), **section}
    for key, val in vars(args).items():
        if key in ("config", "out", "threads", "command", "dss_command", "glue_command"):
            continue
        if val is not None:
            merged[key.rstrip("_").replace("lambda", "lambda")] = val
    if "lambda_" in merged:
        merged["lambda"] = merged.pop("lambda_")
    return merged


def main(argv=None):
    args = _build_parser().parse_args(argv)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = _merge_config(args)
    command = args.command
    if command == "dss":
        command = f"dss-{args.dss_command}"
    if command == "glue":
        command = f"glue-{args.glue_command}"
    try:
        if command == "distance":
            derived = cmd_distance(cfg, outdir)
        elif command == "flow":
            derived = cmd_flow(cfg, outdir)
        elif command == "parametrix":
            derived = cmd_parametrix(cfg, outdir)
        elif command == "norms":
            derived = cmd_norms(cfg, outdir, threads=args.threads)
        elif command == "dss-horizons":
            derived = cmd_dss_horizons(cfg, outdir)
        elif command == "dss-qnm":
            derived = cmd_dss_qnm(cfg, outdir, threads=args.threads)
        elif command == "dss-norm-scan":
            derived = cmd_dss_norm_scan(cfg, outdir, threads=args.threads)
        elif command == "dss-end-check":
            derived = cmd_dss_end_check(cfg, outdir)
        elif command == "glue-verify":
            derived = cmd_glue_verify(cfg, outdir)
        else:
            print(f"unknown command {command}", file=sys.stderr)
            return 2
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        record = {"failure": type(exc).__name__, "message": str(exc), "command": command}
        with open(outdir / "failure.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    _write_header(outdir, command, _jsonable(cfg), _jsonable(derived))
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


if __name__ == "__main__":
    sys.exit(main())
