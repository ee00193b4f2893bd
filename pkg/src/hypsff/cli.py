"""Command-line front end: config ingestion, pipeline runs and CSV export.

Configuration is TOML.  [system] holds the sizes, velocities, couplings and
boundary matrices, [ode] the cascade block, [grid], [simulation] and
[output] the run settings.  Coefficient fields come in three forms: a
constant matrix (nested arrays, row-major), a polynomial in z written as
{ poly = [M0, M1, ...] } with one matrix per power, or an explicit node
table { nodes = [...] } with one matrix per grid node.  Velocities use the
same forms with diagonal vectors in place of matrices, except that their
poly form lists one coefficient row per channel.

Exit codes: 0 pass, 1 domain failure, 2 usage or parse failure.
"""
from __future__ import annotations

import argparse
import os
import sys as _sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .artstein import assemble_pdeode_sff, solve_N
from .ctrl_algebra import (
    build_boundary_algebra,
    exact_controllability_check,
    kalman_check,
)
from .fredholm import sff_coefficients, solve_PI
from .model import (
    Grid1D,
    HyperbolicSystem,
    MatrixField1D,
    PdeOdeSystem,
    Trajectory,
    field_from_diag,
    resample,
    validate_system,
)
from .sim import (
    SimConfig,
    UnstableStep,
    as_intermediate_spec,
    as_pdeode_spec,
    as_sff_spec,
    as_spec,
    simulate,
)
from .verify import (
    artstein_consistency,
    convergence_study,
    format_report,
    kernel_residual_fredholm,
    kernel_residual_volterra,
    structure_check_sff,
    transform_consistency,
)
from .volterra import (
    HU_Z1_ZERO,
    REMARK2_TAIL,
    NoConvergence,
    extract_coupling_matrices,
    solve_kernel_set,
)

OUT_ENV = "HYPSFF_OUT"
FORMS = ("original", "intermediate", "sff", "pdeode", "pdeode-sff")
SUITES = ("kernels", "structure", "consistency", "artstein", "convergence")
FLOAT_FMT = "%.17g"


class ConfigError(Exception):
    """Parse or validation failure, annotated with the offending key."""


@dataclass(frozen=True)
class ProjectConfig:
    kind: str
    system: HyperbolicSystem
    ode: Optional[PdeOdeSystem]
    n_cells: int
    bc_mode: str
    sim: SimConfig
    out_dir: Path
    seed: int


def _section(raw, name, allowed):
    tab = raw.get(name, {})
    if not isinstance(tab, dict):
        raise ConfigError("[%s] must be a table" % name)
    for key in tab:
        if key not in allowed:
            raise ConfigError("[%s] has unknown key %r" % (name, key))
    return tab


def _require(tab, section, key):
    if key not in tab:
        raise ConfigError("[%s] is missing required key %r" % (section, key))
    return tab[key]


def _poly_values(coeffs, nodes):
    vals = np.zeros((nodes.shape[0],) + coeffs[0].shape)
    for p, c in enumerate(coeffs):
        vals += np.power(nodes, p)[(slice(None),) + (None,) * c.ndim] * c
    return vals


def _matrix_field(node, grid: Grid1D, shape, key) -> MatrixField1D:
    try:
        if isinstance(node, dict):
            if "poly" in node:
                coeffs = [np.asarray(m, dtype=float) for m in node["poly"]]
                if any(c.shape != shape for c in coeffs):
                    raise ConfigError("%s: every poly coefficient must have shape %r" % (key, (shape,)))
                return MatrixField1D(grid, _poly_values(coeffs, grid.nodes))
            if "nodes" in node:
                arr = np.asarray(node["nodes"], dtype=float)
                if arr.shape != (grid.n_nodes,) + shape:
                    raise ConfigError("%s: node table must have shape %r, got %r"
                                      % (key, (grid.n_nodes,) + shape, arr.shape))
                return MatrixField1D(grid, arr)
            raise ConfigError("%s: field tables need a poly or nodes key" % key)
        arr = np.asarray(node, dtype=float)
        if arr.shape != shape:
            raise ConfigError("%s: expected shape %r, got %r" % (key, shape, arr.shape))
        return MatrixField1D.constant(grid, arr)
    except (TypeError, ValueError) as exc:
        raise ConfigError("%s: %s" % (key, exc)) from exc


def _velocity_field(node, grid: Grid1D, key) -> MatrixField1D:
    try:
        if isinstance(node, dict):
            if "poly" in node:
                # one coefficient row per channel, low powers first
                rows = [np.atleast_1d(np.asarray(r, dtype=float)) for r in node["poly"]]
                diag = np.stack([np.polynomial.polynomial.polyval(grid.nodes, r) for r in rows], axis=1)
                return field_from_diag(grid, diag)
            if "nodes" in node:
                diag = np.asarray(node["nodes"], dtype=float)
                if diag.ndim != 2 or diag.shape[0] != grid.n_nodes:
                    raise ConfigError("%s: node table must have one row per grid node" % key)
                return field_from_diag(grid, diag)
            raise ConfigError("%s: field tables need a poly or nodes key" % key)
        diag = np.atleast_1d(np.asarray(node, dtype=float))
        if diag.ndim != 1:
            raise ConfigError("%s: constant velocities must be a flat list" % key)
        return field_from_diag(grid, np.tile(diag, (grid.n_nodes, 1)))
    except (TypeError, ValueError) as exc:
        raise ConfigError("%s: %s" % (key, exc)) from exc


def _input_spec(node):
    if node is None:
        return None
    if isinstance(node, list) and node and isinstance(node[0], list):
        return [tuple(ch) for ch in node]
    if isinstance(node, list):
        return tuple(node)
    raise ConfigError("[simulation] input must be a signal tuple or a list of them")


def load_config(path, grid=None, bc_mode=None, seed=None, out=None) -> ProjectConfig:
    """Parse and build the full run configuration; flags override file values."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc)) from exc
    except tomllib.TOMLDecodeError as exc:
        # the decoder message carries line and column
        raise ConfigError("%s: %s" % (path, exc)) from exc

    for name in raw:
        if name not in ("system", "ode", "grid", "simulation", "output"):
            raise ConfigError("unknown section [%s]" % name)
    sys_tab = _section(raw, "system", {"kind", "n_minus", "n_plus", "lambda_minus",
                                       "lambda_plus", "A_mm", "A_mp", "A_pm", "A_pp",
                                       "Q", "R"})
    ode_tab = _section(raw, "ode", {"F", "B", "C"})
    grid_tab = _section(raw, "grid", {"n_cells", "bc_mode"})
    sim_tab = _section(raw, "simulation", {"t_end", "cfl", "input", "x_minus0",
                                           "x_plus0", "xi0", "stride"})
    out_tab = _section(raw, "output", {"dir", "seed"})

    kind = sys_tab.get("kind", "hyperbolic")
    if kind not in ("hyperbolic", "pdeode"):
        raise ConfigError("[system] kind must be 'hyperbolic' or 'pdeode', got %r" % kind)
    if kind == "pdeode" and not ode_tab:
        raise ConfigError("[ode] section is required when kind = 'pdeode'")

    n_minus = int(_require(sys_tab, "system", "n_minus"))
    n_plus = int(_require(sys_tab, "system", "n_plus"))
    n_cells = int(grid if grid is not None else grid_tab.get("n_cells", 100))
    if n_cells < 4:
        raise ConfigError("[grid] n_cells must be at least 4")
    mode = bc_mode if bc_mode is not None else grid_tab.get("bc_mode", HU_Z1_ZERO)
    if mode not in (HU_Z1_ZERO, REMARK2_TAIL):
        raise ConfigError("[grid] bc_mode must be %r or %r" % (HU_Z1_ZERO, REMARK2_TAIL))

    g = Grid1D(n_cells)
    lam_m = _velocity_field(_require(sys_tab, "system", "lambda_minus"), g, "system.lambda_minus")
    lam_p = _velocity_field(_require(sys_tab, "system", "lambda_plus"), g, "system.lambda_plus")
    if lam_m.values.shape[1] != n_minus:
        raise ConfigError("system.lambda_minus: %d channels configured, n_minus = %d"
                          % (lam_m.values.shape[1], n_minus))
    if lam_p.values.shape[1] != n_plus:
        raise ConfigError("system.lambda_plus: %d channels configured, n_plus = %d"
                          % (lam_p.values.shape[1], n_plus))

    def block(key, shape):
        node = sys_tab.get(key)
        if node is None:
            return MatrixField1D.constant(g, np.zeros(shape))
        return _matrix_field(node, g, shape, "system.%s" % key)

    Q = np.asarray(sys_tab.get("Q", np.eye(n_plus, n_minus)), dtype=float)
    R = np.asarray(sys_tab.get("R", np.zeros((n_minus, n_plus))), dtype=float)
    if Q.shape != (n_plus, n_minus):
        raise ConfigError("system.Q: expected shape %r, got %r" % ((n_plus, n_minus), Q.shape))
    if R.shape != (n_minus, n_plus):
        raise ConfigError("system.R: expected shape %r, got %r" % ((n_minus, n_plus), R.shape))

    try:
        system = HyperbolicSystem(
            n_minus=n_minus, n_plus=n_plus, lambda_minus=lam_m, lambda_plus=lam_p,
            A_mm=block("A_mm", (n_minus, n_minus)), A_mp=block("A_mp", (n_minus, n_plus)),
            A_pm=block("A_pm", (n_plus, n_minus)), A_pp=block("A_pp", (n_plus, n_plus)),
            Q=Q, R=R)
    except ValueError as exc:
        raise ConfigError("[system]: %s" % exc) from exc

    ode = None
    if kind == "pdeode":
        try:
            ode = PdeOdeSystem(
                base=system, n0=len(np.atleast_2d(_require(ode_tab, "ode", "F"))),
                F=np.asarray(_require(ode_tab, "ode", "F"), dtype=float),
                B=np.asarray(_require(ode_tab, "ode", "B"), dtype=float),
                C=np.asarray(_require(ode_tab, "ode", "C"), dtype=float))
        except ValueError as exc:
            raise ConfigError("[ode]: %s" % exc) from exc

    try:
        sim = SimConfig(
            t_end=float(sim_tab.get("t_end", 1.0)),
            cfl=float(sim_tab.get("cfl", 0.9)),
            input_signal=_input_spec(sim_tab.get("input")),
            x_minus0=sim_tab.get("x_minus0"),
            x_plus0=sim_tab.get("x_plus0"),
            xi0=sim_tab.get("xi0"),
            stride=int(sim_tab.get("stride", 1)))
    except ValueError as exc:
        raise ConfigError("[simulation]: %s" % exc) from exc

    out_dir = out if out is not None else os.environ.get(OUT_ENV) or out_tab.get("dir", "out")
    return ProjectConfig(
        kind=kind, system=system, ode=ode, n_cells=n_cells, bc_mode=mode, sim=sim,
        out_dir=Path(out_dir),
        seed=int(seed if seed is not None else out_tab.get("seed", 0)))


def _entry_names(p, q):
    return ["e%d_%d" % (i, j) for i in range(p) for j in range(q)]


def _save_csv(path: Path, header, rows):
    arr = np.asarray(rows, dtype=float).reshape(len(rows), -1)
    np.savetxt(path, arr, fmt=FLOAT_FMT, delimiter=",",
               header=",".join(header), comments="")


def _write_field(path: Path, field: MatrixField1D):
    v = field.values
    rows = [np.concatenate(([z], v[k].ravel()))
            for k, z in enumerate(field.grid.nodes)]
    _save_csv(path, ["z"] + _entry_names(*v.shape[1:]), rows)


def _write_kernel(path: Path, kernel, triangular: bool):
    v = kernel.values
    nodes = kernel.grid.nodes
    rows = []
    for i, z in enumerate(nodes):
        hi = i + 1 if triangular else nodes.shape[0]
        for j in range(hi):
            rows.append(np.concatenate(([z, nodes[j]], v[i, j].ravel())))
    _save_csv(path, ["z", "zeta"] + _entry_names(*v.shape[2:]), rows)


def _write_matrix(path: Path, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    _save_csv(path, ["c%d" % j for j in range(M.shape[1])], list(M))


def _write_trajectory(path: Path, traj: Trajectory):
    nm = traj.x_minus.shape[2]
    npl = traj.x_plus.shape[2]
    names = ["t", "z"] + ["xm%d" % i for i in range(nm)] + ["xp%d" % i for i in range(npl)]
    nodes = np.linspace(0.0, 1.0, traj.x_minus.shape[1])
    rows = []
    for m, t in enumerate(traj.times):
        for k, z in enumerate(nodes):
            rows.append(np.concatenate(([t, z], traj.x_minus[m, k], traj.x_plus[m, k])))
    _save_csv(path, names, rows)


def _write_ode_trajectory(path: Path, traj: Trajectory):
    names = ["t"] + ["xi%d" % i for i in range(traj.xi.shape[1])]
    rows = [np.concatenate(([t], traj.xi[m])) for m, t in enumerate(traj.times)]
    _save_csv(path, names, rows)


def cmd_check(cfg: ProjectConfig, out=None) -> int:
    """Validate system invariants and the solvability assumptions."""
    out = out or _sys.stdout
    report = validate_system(cfg.system)
    if report.ok:
        print("system invariants: ok", file=out)
    else:
        for issue in report.issues:
            print("system invariants: FAIL (%s)" % issue, file=out)
    controllable = exact_controllability_check(cfg.system.Q, cfg.system.n_plus)
    rank = np.linalg.matrix_rank(cfg.system.Q)
    if controllable:
        print("boundary rank: ok (rank Q = %d = n_plus)" % rank, file=out)
    else:
        print("boundary rank: FAIL (rank Q = %d < n_plus = %d; "
              "the null-controllable case is out of scope)" % (rank, cfg.system.n_plus),
              file=out)
    ode_ok = True
    if cfg.ode is not None:
        ode_ok = kalman_check(cfg.ode.F, cfg.ode.B)
        if ode_ok:
            print("ode pair: ok (controllable)", file=out)
        else:
            print("ode pair: FAIL ((F, B) fails the controllability rank test)", file=out)
    return 0 if (report.ok and controllable and ode_ok) else 1


def _pipeline(cfg: ProjectConfig):
    algebra = build_boundary_algebra(cfg.system.Q)
    kernels, info = solve_kernel_set(cfg.system, grid=Grid1D(cfg.n_cells),
                                     bc_mode=cfg.bc_mode)
    coeffs = extract_coupling_matrices(kernels, cfg.system, algebra)
    lam_p = resample(cfg.system.lambda_plus, kernels.grid)
    P_I = solve_PI(coeffs.A0_plus, lam_p, kernels.grid)
    sff = sff_coefficients(P_I, lam_p, coeffs.B0_plus, coeffs.A0_minus)
    return algebra, kernels, info, coeffs, P_I, sff


def cmd_transform(cfg: ProjectConfig, out=None) -> int:
    """Solve the kernel chain and export every artifact as CSV."""
    out = out or _sys.stdout
    if cmd_check(cfg, out=out) != 0:
        return 1
    try:
        algebra, kernels, info, coeffs, P_I, sff = _pipeline(cfg)
    except NoConvergence as exc:
        print("kernel iteration failed: %s" % exc, file=out)
        return 1
    d = cfg.out_dir
    d.mkdir(parents=True, exist_ok=True)
    for name in ("K_mm", "K_mp", "K_pm", "K_pp"):
        _write_kernel(d / ("%s.csv" % name), getattr(kernels, name), triangular=True)
    _write_field(d / "A0_minus.csv", coeffs.A0_minus)
    _write_field(d / "A0_plus.csv", coeffs.A0_plus)
    _write_field(d / "B0_plus.csv", coeffs.B0_plus)
    _write_kernel(d / "P_I.csv", P_I.P_I, triangular=False)
    _write_field(d / "A0_tilde_plus.csv", sff.A0_tilde_plus)
    _write_field(d / "B0_tilde_plus.csv", sff.B0_tilde_plus)
    if cfg.ode is not None:
        nk = solve_N(cfg.ode, algebra, grid=kernels.grid)
        _write_field(d / "N.csv", nk.N)
        _write_matrix(d / "F_bar.csv", nk.F_bar)
        _write_matrix(d / "B_bar.csv", nk.B_bar)
    res_v = kernel_residual_volterra(kernels, cfg.system)
    res_f = kernel_residual_fredholm(P_I, coeffs.A0_plus,
                                     resample(cfg.system.lambda_plus, kernels.grid))
    lines = ["kind = %s" % cfg.kind,
             "n_cells = %d" % cfg.n_cells,
             "bc_mode = %s" % cfg.bc_mode,
             "seed = %d" % cfg.seed]
    for fam in ("minus", "plus"):
        lines.append("%s_iterations = %d" % (fam, info[fam]["iterations"]))
        lines.append("%s_final_update = %.6e" % (fam, info[fam]["final_update"]))
    for rep in (res_v, res_f):
        for key, val in rep.measured.items():
            lines.append("%s_%s = %.6e" % (rep.name, key, val))
        lines.append("%s_passed = %s" % (rep.name, rep.passed))
    (d / "run_metadata.txt").write_text("\n".join(lines) + "\n")
    print("wrote %d artifacts to %s" % (len(list(d.iterdir())), d), file=out)
    return 0


def _resolve_form(cfg: ProjectConfig, form, default_hyperbolic, default_ode):
    if form is None:
        form = default_hyperbolic if cfg.kind == "hyperbolic" else default_ode
    needs_ode = form in ("pdeode", "pdeode-sff")
    if needs_ode and cfg.ode is None:
        raise ConfigError("form %r requires a pde-ode configuration" % form)
    if not needs_ode and cfg.kind == "pdeode":
        raise ConfigError("form %r applies to plain hyperbolic configurations" % form)
    return form


def _build_spec(cfg: ProjectConfig, form: str):
    if form == "original":
        return as_spec(cfg.system)
    if form == "pdeode":
        return as_pdeode_spec(cfg.ode)
    if form == "pdeode-sff":
        algebra = build_boundary_algebra(cfg.system.Q)
        nk = solve_N(cfg.ode, algebra, grid=Grid1D(cfg.n_cells))
        return assemble_pdeode_sff(cfg.ode, nk, algebra)
    algebra, kernels, info, coeffs, P_I, sff = _pipeline(cfg)
    if form == "intermediate":
        return as_intermediate_spec(coeffs, cfg.system, algebra)
    return as_sff_spec(sff, cfg.system, algebra)


def cmd_simulate(cfg: ProjectConfig, form=None, out=None) -> int:
    """Simulate the requested form and write the long-format trajectory."""
    out = out or _sys.stdout
    try:
        form = _resolve_form(cfg, form, "original", "pdeode")
        spec = _build_spec(cfg, form)
    except NoConvergence as exc:
        print("kernel iteration failed: %s" % exc, file=out)
        return 1
    try:
        traj = simulate(spec, cfg.sim)
    except UnstableStep as exc:
        print("simulation unstable: %s" % exc, file=out)
        return 1
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / ("trajectory_%s.csv" % form)
    _write_trajectory(path, traj)
    if traj.xi is not None:
        _write_ode_trajectory(cfg.out_dir / ("ode_%s.csv" % form), traj)
    print("wrote %s (%d snapshots)" % (path, traj.n_snapshots), file=out)
    return 0


def _verify_reports(cfg: ProjectConfig, suite: str, form):
    if suite == "kernels":
        algebra, kernels, info, coeffs, P_I, sff = _pipeline(cfg)
        return [kernel_residual_volterra(kernels, cfg.system),
                kernel_residual_fredholm(P_I, coeffs.A0_plus,
                                         resample(cfg.system.lambda_plus, kernels.grid))]
    if suite == "structure":
        form = _resolve_form(cfg, form, "sff", "pdeode-sff")
        algebra = build_boundary_algebra(cfg.system.Q)
        return [structure_check_sff(_build_spec(cfg, form), algebra)]
    if suite == "consistency":
        if cfg.kind != "hyperbolic":
            raise ConfigError("the consistency suite runs on plain hyperbolic configurations")
        algebra, kernels, info, coeffs, P_I, sff = _pipeline(cfg)
        return [transform_consistency(cfg.system, kernels, coeffs, sff, algebra,
                                      cfg.sim, seed=cfg.seed)]
    if suite == "artstein":
        if cfg.ode is None:
            raise ConfigError("the artstein suite needs a pde-ode configuration")
        algebra = build_boundary_algebra(cfg.system.Q)
        nk = solve_N(cfg.ode, algebra, grid=Grid1D(cfg.n_cells))
        return [artstein_consistency(cfg.ode, nk, algebra, cfg.sim, seed=cfg.seed)]
    grids = sorted({max(16, cfg.n_cells // 4), max(16, cfg.n_cells // 2), cfg.n_cells})

    def residual_at(n_cells):
        kernels, _ = solve_kernel_set(cfg.system, grid=Grid1D(n_cells), bc_mode=cfg.bc_mode)
        return kernel_residual_volterra(kernels, cfg.system)

    return [convergence_study(residual_at, grids)]


def cmd_verify(cfg: ProjectConfig, suite: str, form=None, out=None) -> int:
    """Run one verification suite; the report is printed and always written."""
    out = out or _sys.stdout
    try:
        reports = _verify_reports(cfg, suite, form)
    except NoConvergence as exc:
        print("kernel iteration failed: %s" % exc, file=out)
        return 1
    text = "\n\n".join(format_report(r) for r in reports) + "\n"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / ("verify_%s.txt" % suite)).write_text(text)
    print(text, end="", file=out)
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypsff",
        description="Strict-feedback form construction for heterodirectional "
                    "hyperbolic systems and PDE-ODE cascades.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "check": "validate a configuration against the solvability assumptions",
        "transform": "solve the kernel chain and export all artifacts",
        "simulate": "run one form of the system and export the trajectory",
        "verify": "run a verification suite",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", type=Path, help="TOML configuration file")
        p.add_argument("--grid", type=int, metavar="N", help="override [grid] n_cells")
        p.add_argument("--bc-mode", choices=(HU_Z1_ZERO, REMARK2_TAIL),
                       help="override the z = 1 kernel closure")
        p.add_argument("--seed", type=int, metavar="S", help="override [output] seed")
        p.add_argument("--out", type=Path, metavar="DIR", help="override the output directory")
        if name in ("simulate", "verify"):
            p.add_argument("--form", choices=FORMS, help="which system form to target")
        if name == "verify":
            p.add_argument("--suite", choices=SUITES, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, grid=args.grid, bc_mode=args.bc_mode,
                          seed=args.seed, out=args.out)
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "transform":
            return cmd_transform(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, form=args.form)
        return cmd_verify(cfg, args.suite, form=args.form)
    except ConfigError as exc:
        print("config error: %s" % exc, file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
