"""Command line: ``volfactor <command> [--config FILE] [--block.field VALUE ...]``.

Artifacts go to the output directory, a short summary goes to stdout and
failures are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .closed_form import psi0_tilde, psi1_tilde, solve_A1B1, solve_AB
from .config import ExperimentConfig, apply_override, default_config, load_config
from .errors import ConfigError, IoError, StabilityFailure, VolFactorError
from .model import WealthState
from .montecarlo import (SimConfig, estimate_expected_utility, feynman_kac_psi0, near_optimality_gap,
                         worker_count)
from .pde import (Grid2D, diagonal_error_curves, solve_psi0_2d, solve_psi0_tilde_1d, solve_psi1_2d,
                  solve_psi_full)
from .two_asset import (TwoAssetModel, diagonal_correction, diagonal_drift_comparison, effective_lambdas,
                        pi0_two_asset, q_two_asset, solve_psi0_two_asset, solve_psi1_two_asset)
from .verifier import (SubSuperPair, choose_M, hjb_residual, pair_residual_signs, residual_order_regression,
                       sample_second_order, sandwich_check, verification_report)

COMMANDS = ("approx", "pde", "mc", "verify", "figures", "two-asset")


# ---------------------------------------------------------------- output helpers

class Run:
    """Collects artifacts and manifest data for one command."""

    def __init__(self, command, cfg: ExperimentConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.artifacts = []
        self.seeds = []
        self.summary = []
        self.t0 = time.perf_counter()
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create output directory {self.out}: {exc}") from None

    def _open(self, name):
        path = self.out / name
        try:
            return open(path, "w", newline="\n")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from None

    def csv(self, name, header, columns):
        data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
        if not np.all(np.isfinite(data)):
            raise StabilityFailure(f"non-finite value in {name}")
        with self._open(name) as fh:
            fh.write(",".join(header) + "\n")
            for row in data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
        self.artifacts.append(name)

    def json(self, name, obj):
        _check_finite(obj, name)
        with self._open(name) as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        self.artifacts.append(name)

    def say(self, line):
        self.summary.append(line)

    def manifest(self):
        wall = time.perf_counter() - self.t0
        man = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_sha256": self.cfg.digest(),
            "versions": {"volfactor": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "seeds": self.seeds,
            "threads": worker_count(),
            "wall_time_s": wall,
            "artifacts": self.artifacts,
        }
        with self._open("run_manifest.json") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return wall


def _check_finite(obj, where):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}:{k}")
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _check_finite(v, where)
    elif isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        raise StabilityFailure(f"non-finite value at {where}")


def _tag(eps):
    return f"{eps:g}"


def _grid(cfg, pad=None, n_z=None):
    g = cfg.grid
    return Grid2D(g.z_max, n_z or g.n_z, g.n_t, cfg.model.T, g.pad if pad is None else pad)


def _sim(cfg, scheme=None):
    mc = cfg.mc
    return SimConfig(mc.n_paths, mc.n_steps, mc.seed, scheme)


# ---------------------------------------------------------------- commands

def cmd_approx(run: Run):
    cfg = run.cfg
    model, consts, scheme = cfg.chacko_viceira(), cfg.constants(), cfg.scheme()
    ric = solve_AB(consts, model, scheme.rho)
    cor = solve_A1B1(ric, scheme, consts)
    t = np.linspace(0.0, model.T, cfg.grid.n_t + 1)
    z0 = cfg.mc.z0
    run.csv("approx_table.csv", ["t", "A", "B", "A1", "B1", "psi0_tilde", "psi1_tilde"],
            [t, ric.A(t), ric.B(t), cor.A1(t), cor.B1(t), psi0_tilde(t, z0, ric), psi1_tilde(t, z0, ric, cor)])
    z = np.linspace(0.0, cfg.grid.z_max, cfg.grid.n_z)
    A0 = ric.A(0.0)
    pi0 = 2 * z * (model.lambda_bar + scheme.rho * consts.q * model.beta_bar * A0) / ((1 - consts.p) * model.sigma_bar)
    run.csv("pi0_curve.csv", ["z", "pi0_over_x"], [z, pi0])
    run.json("approx_summary.json", {"a_plus": ric.a_plus, "a_minus": ric.a_minus, "A0": float(A0),
                                     "B0": float(ric.B(0.0)), "A1_0": float(cor.A1(0.0)),
                                     "B1_0": float(cor.B1(0.0)), "gamma": consts.gamma, "q": consts.q,
                                     "method": ric.method, "z0": z0})
    run.say(f"A(0) = {float(A0):.10g}, B(0) = {float(ric.B(0.0)):.10g}, "
            f"A1(0) = {float(cor.A1(0.0)):.10g}, B1(0) = {float(cor.B1(0.0)):.10g}")


def _base_surfaces(cfg, grid):
    model, consts, scheme = cfg.chacko_viceira(), cfg.constants(), cfg.scheme()
    psi0 = solve_psi0_2d(model, consts, scheme.rho, grid)
    psi1 = solve_psi1_2d(model, consts, scheme, psi0)
    return psi0, psi1


def _error_tables(run: Run, eps_list, prefix):
    cfg = run.cfg
    model, consts = cfg.chacko_viceira(), cfg.constants()
    grid = _grid(cfg)
    psi0, psi1 = _base_surfaces(cfg, grid)
    sups = {}
    for e in eps_list:
        full = solve_psi_full(model, consts, cfg.scheme(e), grid, keep_levels=False)
        tab = diagonal_error_curves(full, psi0, psi1, e)
        tab.to_csv(run.out / f"{prefix}_eps_{_tag(e)}.csv")
        run.artifacts.append(f"{prefix}_eps_{_tag(e)}.csv")
        sups[_tag(e)] = {"sup_err0": tab.sup_err0, "sup_err1": tab.sup_err1,
                         "err1_below_err0": bool(tab.sup_err1 < tab.sup_err0),
                         "corrector_change": full.diagnostics.max_corrector_change}
        run.say(f"eps={e:g}: sup|err0| = {tab.sup_err0:.4e}, sup|err1| = {tab.sup_err1:.4e}")
    return sups, psi0, psi1


def cmd_pde(run: Run):
    cfg = run.cfg
    eps = cfg.correlation.eps
    sups, psi0, psi1 = _error_tables(run, [eps], "diagonal")
    model, consts = cfg.chacko_viceira(), cfg.constants()
    ric = solve_AB(consts, model, cfg.correlation.rho)
    one_d = solve_psi0_tilde_1d(model, consts, cfg.correlation.rho,
                                np.linspace(0.0, cfg.grid.z_max, 2 * cfg.grid.n_z - 1), cfg.grid.n_t, cfg.grid.pad)
    z, v = one_d.z_report, one_d.at_level(0)
    exact = psi0_tilde(0.0, z, ric)
    run.json("pde_report.json", {
        "eps": eps, "errors": sups,
        "psi0_1d_max_rel_error": float(np.max(np.abs(v - exact) / exact)),
        "m_matrix_violation_fraction": psi0.diagnostics.m_matrix_violation_fraction,
    })


def cmd_figures(run: Run, eps_list):
    sups, _, _ = _error_tables(run, eps_list, "figure")
    summary = {"errors": sups}
    if len(eps_list) >= 2:
        a, b = _tag(eps_list[0]), _tag(eps_list[1])
        summary["ratio_err0"] = sups[a]["sup_err0"] / sups[b]["sup_err0"]
        summary["ratio_err1"] = sups[a]["sup_err1"] / sups[b]["sup_err1"]
        run.say(f"ratios eps {a}/{b}: err0 {summary['ratio_err0']:.3f}, err1 {summary['ratio_err1']:.3f}")
    run.json("figures_summary.json", summary)


def cmd_mc(run: Run):
    cfg = run.cfg
    model, consts, scheme = cfg.chacko_viceira(), cfg.constants(), cfg.scheme()
    ric = solve_AB(consts, model, scheme.rho)
    cor = solve_A1B1(ric, scheme, consts)
    z0 = cfg.mc.z0
    sim = _sim(cfg)
    run.seeds.append(sim.seed)
    fk = feynman_kac_psi0(model, consts, scheme.rho, 0.0, z0, z0, sim)
    exact0 = float(psi0_tilde(0.0, z0, ric))
    report = {"feynman_kac": fk.to_json(sim), "psi0_closed_form": exact0,
              "feynman_kac_z_score": (fk.mean - exact0) / fk.std_error}
    run.say(f"Feynman-Kac psi0(0,{z0:g},{z0:g}) = {fk.mean:.8g} +- {fk.std_error:.2g} (closed form {exact0:.8g})")
    x0 = 1.0
    state = WealthState(0.0, x0, z0, z0)
    v_closed = x0**consts.p / consts.p * (exact0 + scheme.eps * float(psi1_tilde(0.0, z0, ric, cor))) ** consts.q
    if scheme.eps == 0:
        lead = model.lambda_bar
        coef = scheme.rho * consts.q * model.beta_bar

        def strategy(t, x, z1, z2):
            return x * (z1 + z2) * (lead + coef * ric.A(t)) / ((1 - consts.p) * model.sigma_bar)

        est = estimate_expected_utility(model, strategy, _sim(cfg, scheme), state, consts.p)
        report["utility_pi0"] = est.to_json(sim)
        report["value_closed_form"] = v_closed
        report["utility_z_score"] = (est.mean - v_closed) / est.std_error
        run.say(f"E[U] under pi0 = {est.mean:.8g} +- {est.std_error:.2g} (closed form {v_closed:.8g})")
    else:
        grid = _grid(cfg, pad=cfg.mc.gap_pad, n_z=_padded_nz(cfg))
        psi0 = solve_psi0_2d(model, consts, scheme.rho, grid)
        full = solve_psi_full(model, consts, scheme, grid)
        gap = near_optimality_gap(model, scheme, consts, full, psi0, _sim(cfg, scheme), state)
        report["gap"] = gap.to_json(sim)
        report["value_order1_closed_form"] = v_closed
        run.say(f"v_pde - E[U(pi0)] = {gap.gap:.4e} +- {gap.std_error:.2e} at eps={scheme.eps:g}")
    run.json("mc_report.json", report)


def _padded_nz(cfg):
    """Node count that keeps the spacing of the main grid on the wider gap box."""
    g = cfg.grid
    h = g.pad * g.z_max / (g.n_z - 1)
    return int(round(cfg.mc.gap_pad * g.z_max / h)) + 1


def cmd_verify(run: Run):
    cfg = run.cfg
    v = cfg.verify
    model, consts, scheme = cfg.chacko_viceira(), cfg.constants(), cfg.scheme()
    grid = _grid(cfg)
    psi0, psi1 = _base_surfaces(cfg, grid)
    sample = sample_second_order(psi0, psi1, model, consts, scheme, v.band_width, v.stride)
    Ms = {src: choose_M(sample, consts, model.T, max(v.sandwich_eps), source=src, slack=v.slack)
          for src in ("displayed", "assembled")}
    M = Ms[v.m_source]
    other = "elapsed" if v.slack == "horizon" else "horizon"
    M_other = choose_M(sample, consts, model.T, max(v.sandwich_eps), source=v.m_source, slack=other)
    verdicts, residuals, compare, signs = {}, {}, {}, {}
    for e in v.sandwich_eps:
        full = solve_psi_full(model, consts, scheme.with_eps(e), grid)
        pair = SubSuperPair(M, e, psi0, psi1, consts, v.slack)
        verdicts[e] = sandwich_check(pair, full, v.band_width)
        compare[_tag(e)] = sandwich_check(SubSuperPair(M_other, e, psi0, psi1, consts, other), full,
                                          v.band_width).violation_fraction
        sub, sup = pair_residual_signs(pair, model, scheme.with_eps(e), v.band_width)
        signs[_tag(e)] = {"sub_negative": sub, "super_positive": sup}
        residuals[_tag(e)] = hjb_residual(full, model, consts, scheme.with_eps(e), v.band_width)
        run.say(f"eps={e:g}: sandwich violation fraction {verdicts[e].violation_fraction:.4f} "
                f"({other} slack: {compare[_tag(e)]:.4f})")
    reg = residual_order_regression(v.eps_list, psi0, psi1, model, consts, scheme,
                                    width=v.band_width, stride=v.stride)
    run.say(f"residual order {reg.fitted_order:.3f} over eps {reg.eps}")
    extra = {
        "M_by_source": Ms, "m_source": v.m_source, "slack": v.slack,
        f"{other}_slack_violation_fraction": compare,
        "pair_residual_wrong_sign_fraction": signs,
        "phi_sup": float(np.max(np.abs(sample.phi))),
        "theta_sq_sup": float(np.max(np.abs(sample.theta_sq))),
        "phi_assembled_sub_sup": float(np.max(np.abs(sample.phi_sub_assembled))),
        "phi_assembled_super_sup": float(np.max(np.abs(sample.phi_super_assembled))),
        "regression_noise_floor": reg.noise_floor, "regression_trusted": reg.trusted,
        "full_solution_hjb_residual": residuals,
        "sandwich_max_excess": {_tag(e): d.max_excess for e, d in verdicts.items()},
    }
    run.json("verify_report.json", verification_report(M, verdicts, reg, extra))


def two_asset_model(cfg: ExperimentConfig, eps=None):
    ta = cfg.two_asset
    return TwoAssetModel(cfg.model.mu_bar, ta.mu_bar_2, cfg.model.sigma_bar, ta.sigma_bar_2, cfg.model.m,
                         cfg.model.beta_bar, ta.rho_w, cfg.correlation.rho, ta.rho_2,
                         (tuple(ta.slopes_1), tuple(ta.slopes_2)), ta.slope_b,
                         cfg.correlation.eps if eps is None else eps, cfg.model.T)


def cmd_two_asset(run: Run):
    cfg = run.cfg
    tm = two_asset_model(cfg)
    consts = q_two_asset(cfg.model.p, tm.rho_1, tm.rho_2, tm.rho_w)
    ric = solve_psi0_two_asset(tm, consts)
    cor = diagonal_correction(tm, consts, ric)
    t = np.linspace(0.0, tm.T, cfg.grid.n_t + 1)
    z0 = cfg.mc.z0
    run.csv("two_asset_table.csv", ["t", "C", "D", "C1", "D1", "psi0_tilde", "psi1_tilde"],
            [t, ric.A(t), ric.B(t), cor.A1(t), cor.B1(t), psi0_tilde(t, z0, ric), psi1_tilde(t, z0, ric, cor)])
    z = np.linspace(cfg.grid.z_max / (cfg.grid.n_z - 1), cfg.grid.z_max, cfg.grid.n_z - 1)
    pis = np.array([pi0_two_asset(WealthState(0.0, 1.0, zz, zz), ric, tm, consts) for zz in z])
    run.csv("two_asset_pi0.csv", ["asset", "z", "pi0_over_x"],
            [np.repeat([1.0, 2.0], z.size), np.tile(z, 2), np.concatenate([pis[:, 0], pis[:, 1]])])
    lam_sq, lam_bb = effective_lambdas(tm)
    report = {"q": consts.q, "gamma": consts.gamma, "lambda_sq": lam_sq, "lambda_bb": lam_bb,
              "C0": float(ric.A(0.0)), "D0": float(ric.B(0.0)), "C1_0": float(cor.A1(0.0)),
              "D1_0": float(cor.B1(0.0)), "drift_comparison": diagonal_drift_comparison(tm, consts)}
    if cfg.two_asset.grid_2d:
        grid = _grid(cfg)
        s0 = solve_psi0_two_asset(tm, consts, grid)
        s1 = solve_psi1_two_asset(tm, consts, s0)
        zd, d0 = s0.diagonal(0)
        _, d1 = s1.diagonal(0)
        run.csv("two_asset_diagonal.csv", ["z", "psi0", "psi1", "psi0_tilde", "psi1_tilde"],
                [zd, d0, d1, psi0_tilde(0.0, zd, ric), psi1_tilde(0.0, zd, ric, cor)])
        report["psi0_2d_vs_closed_form_max_rel"] = float(np.max(np.abs(d0 / psi0_tilde(0.0, zd, ric) - 1)))
    run.json("two_asset_report.json", report)
    run.say(f"q = {consts.q:.10g}, C(0) = {report['C0']:.10g}, C1(0) = {report['C1_0']:.10g}")


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="volfactor", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (default: shipped parameter set)")
    common.add_argument("--output", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("approx", parents=[common], help="closed-form tables")
    sub.add_parser("pde", parents=[common], help="two-dimensional solves and diagonal error table")
    p = sub.add_parser("mc", parents=[common], help="Monte Carlo estimates")
    p.add_argument("--paths", type=int, help="number of simulated paths (same as --mc.n_paths)")
    sub.add_parser("verify", parents=[common], help="sub/super-solution and residual-order report")
    p = sub.add_parser("figures", parents=[common], help="error curves for a list of eps values")
    p.add_argument("--eps", type=float, action="append", help="repeat for several values")
    sub.add_parser("two-asset", parents=[common], help="two-stock diagonal closed forms")
    return ap


def _split_overrides(extra):
    """Turn leftover ``--block.field value`` tokens into (field, value) pairs."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument '{tok}'", tok)
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for '{tok}'", tok[2:])
            key, val = tok[2:], extra[i + 1]
            i += 2
        pairs.append((key, val))
    return pairs


def _error_payload(exc):
    payload = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": getattr(exc, "exit_code", 3)}
    for attr in ("line", "field"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    return payload


def run_command(command, cfg: ExperimentConfig, eps_list=None):
    run = Run(command, cfg)
    if command == "approx":
        cmd_approx(run)
    elif command == "pde":
        cmd_pde(run)
    elif command == "mc":
        cmd_mc(run)
    elif command == "verify":
        cmd_verify(run)
    elif command == "figures":
        cmd_figures(run, eps_list or cfg.figures.eps_list)
    elif command == "two-asset":
        cmd_two_asset(run)
    else:
        raise ConfigError(f"unknown command '{command}'", "command")
    wall = run.manifest()
    return run, wall


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        for key, val in _split_overrides(extra):
            cfg = apply_override(cfg, key, val)
        if args.output:
            cfg = apply_override(cfg, "output", json.dumps(args.output))
        if getattr(args, "paths", None) is not None:
            cfg = apply_override(cfg, "mc.n_paths", str(args.paths))
        eps_list = getattr(args, "eps", None)
        if eps_list:
            cfg = apply_override(cfg, "figures.eps_list", json.dumps(eps_list))
        run, wall = run_command(args.command, cfg, eps_list)
    except VolFactorError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(json.dumps({"error": "IoError", "message": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 3}), file=sys.stderr)
        return 3
    for line in run.summary:
        print(line)
    print(f"{args.command}: {len(run.artifacts)} artifacts in {run.out} ({wall:.1f} s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
