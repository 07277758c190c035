"""Command line front end: ``freebound solve|oracle-compare|density-audit|greeks CONFIG``.

Configs are JSON, validated with unknown keys rejected. Every artifact
carries the sha256 of the resolved config, and the resolved config itself
is written next to the results.

Exit codes: 0 success, 1 error, 2 iteration limit reached, 3 audit failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__, frontfix, oracle, quad, solver, wkb
from .errors import ConfigError, EllipticityError, StageError
from .model import MarketModel, ellipticity_bounds, model_from_spec, working_samples

logger = logging.getLogger("freebound")

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER, EXIT_AUDIT = 0, 1, 2, 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CovarianceSpec(_Strict):
    name: Literal["black-scholes", "cev"]
    vols: list[float]
    corr: Optional[Union[float, list[list[float]]]] = None
    beta: Optional[float] = None
    ref: Optional[float] = None


class RateSpec(_Strict):
    name: Literal["linear-term"]
    r0: float
    slope: float = 0.0


class ModelSpec(_Strict):
    n: int = Field(ge=1)
    strike: float = Field(gt=0)
    horizon: float = Field(gt=0)
    rate: Union[float, RateSpec] = 0.0
    covariance: Union[list[list[float]], CovarianceSpec]


class GridSpec(_Strict):
    n_time: int = Field(64, ge=2)
    n_x1: int = Field(24, ge=2, description="interior log-moneyness levels (v-mode source)")
    x1_max: float = Field(float(np.exp(3.0)), gt=1.0)
    n_angle: int = Field(33, ge=3)
    angle_margin: float = Field(frontfix.SIMPLEX_MARGIN, gt=0, lt=0.5)
    fine_factor: int = Field(4, ge=1)


class SolverSpec(_Strict):
    mode: Literal["u", "v"] = "u"
    eps: float = Field(1e-3, gt=0)
    max_iter: int = Field(100, ge=1)
    rho_factor: float = Field(0.0125, gt=0, le=1)
    growth: float = Field(1.3, ge=1)
    order: int = Field(1, ge=0, le=2)
    policy: Literal["midpoint-frozen", "taylor-1"] = "midpoint-frozen"
    relax: float = Field(1.0, gt=0, le=1)
    greeks: bool = True
    fit_stride: int = Field(1, ge=1)
    curvature_filter: bool = True


class QuadSpec(_Strict):
    kind: Literal["gauss-legendre-tensor", "mc"] = "gauss-legendre-tensor"
    nodes: int = Field(16, ge=2)
    samples: int = Field(4096, ge=2)
    half_width: float = Field(7.0, gt=0)
    n_sigma: int = Field(8, ge=2)
    first_panel_nodes: int = Field(24, ge=2)


class OracleSpec(_Strict):
    kind: Literal["binomial", "psor", "file"] = "binomial"
    steps: int = Field(5000, ge=100)
    grid: Optional[list[int]] = None
    path: Optional[str] = None
    t_min: float = Field(0.1, ge=0)
    xhat_range: tuple[float, float] = (0.1, 0.9)


class AuditSpec(_Strict):
    points: int = Field(1000, ge=10)
    order: int = Field(1, ge=0, le=2)


class RunConfig(_Strict):
    model: ModelSpec
    grid: GridSpec = GridSpec()
    solver: SolverSpec = SolverSpec()
    quadrature: QuadSpec = QuadSpec()
    oracle: OracleSpec = OracleSpec()
    audit: AuditSpec = AuditSpec()
    output: str = "out"
    seed: int = 0
    workers: int = Field(1, ge=1)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Hash of everything that affects the numbers (not the output path or worker count)."""
        return config_hash(self.model_dump(mode="json", exclude={"output", "workers"}))

    def build_model(self) -> MarketModel:
        return model_from_spec(self.model.model_dump(mode="json", exclude_none=True))

    def solver_config(self) -> solver.SolverConfig:
        s, g, q = self.solver, self.grid, self.quadrature
        return solver.SolverConfig(mode=s.mode, eps=s.eps, max_iter=s.max_iter, rho_factor=s.rho_factor,
                                   growth=s.growth, order=s.order, policy=s.policy, relax=s.relax,
                                   greeks=s.greeks, fit_stride=s.fit_stride, curvature_filter=s.curvature_filter,
                                   n_time=g.n_time, n_angle=g.n_angle, angle_margin=g.angle_margin,
                                   fine_factor=g.fine_factor, v_levels=g.n_x1, z_max=float(np.log(g.x1_max)),
                                   n_sigma=q.n_sigma, first_panel_nodes=q.first_panel_nodes)

    def rule(self) -> quad.QuadratureRule:
        q = self.quadrature
        return quad.QuadratureRule(kind=q.kind, nodes=q.nodes, samples=q.samples, half_width=q.half_width,
                                   seed=self.seed, workers=self.workers)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# loading

def _line_of(text: str, loc) -> int:
    """Best-effort line number of a JSON path in ``text`` (1-based)."""
    pos = 0
    for part in loc:
        if isinstance(part, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(part))).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a config file; errors name the path, the JSON location and the line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    for key, val in (overrides or {}).items():
        node = data
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = val
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = [p for p in err["loc"] if not (isinstance(p, str) and p in _UNION_TAGS)]
            where = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{path}:{_line_of(text, loc)}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from exc


_UNION_TAGS = {"float", "int", "list[list[float]]", "RateSpec", "CovarianceSpec", "tuple[float, float]"}


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "mc_samples", None) is not None:
        out["quadrature.samples"] = args.mc_samples
    if getattr(args, "quad_nodes", None) is not None:
        out["quadrature.nodes"] = args.quad_nodes
    workers = getattr(args, "workers", None)
    if workers is None and os.environ.get(quad.WORKERS_ENV):
        workers = quad.default_workers()
    if workers is not None:
        out["workers"] = workers
    if getattr(args, "output", None) is not None:
        out["output"] = args.output
    if getattr(args, "max_iter", None) is not None:
        out["solver.max_iter"] = args.max_iter
    return out


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return str(x)


def _header(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "version": __version__}


# subcommands

def cmd_solve(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    head = _header(cfg)
    _write_json(out / "resolved_config.json", {"config_hash": head["config_hash"], "config": cfg.resolved()})
    model = cfg.build_model()
    result = solver.run(model, config=cfg.solver_config(), rule=cfg.rule())
    result.surface.to_csv(out / "boundary.csv", head)
    if result.greeks is not None:
        result.greeks.to_csv(out / "greeks.csv", head)
    report = dict(result.report, config_hash=head["config_hash"])
    _write_json(out / "report.json", report)
    _write_json(out / "state.json", dict(result.state.to_json(), config_hash=head["config_hash"]))
    _write_json(out / "timings.json", result.state.timings)
    if not result.converged:
        logger.warning("iteration limit reached before convergence; partial surfaces written to %s", out)
        return EXIT_MAX_ITER
    logger.info("converged; artifacts in %s", out)
    return EXIT_OK


def _oracle_for(cfg: RunConfig, model: MarketModel, kind: str, path: Optional[str]):
    spec = cfg.oracle
    if kind == "file":
        src = path or spec.path
        if not src:
            raise ConfigError("file oracle needs a path (--oracle-csv or oracle.path)")
        return oracle.oracle_from_surface(frontfix.BoundarySurface.from_csv(src))
    if kind == "binomial":
        if model.n != 1 or model.constant_covariance is None or model.constant_rate is None:
            raise ConfigError("the binomial oracle needs one asset with constant coefficients")
        sigma = float(np.sqrt(model.constant_covariance[0, 0]))
        return oracle.binomial_boundary(model.K, model.constant_rate, sigma, model.T, steps=spec.steps)
    return oracle.psor_boundary(model, spec.grid)


def cmd_oracle_compare(cfg: RunConfig, kind: Optional[str] = None, oracle_csv: Optional[str] = None) -> int:
    out = _outdir(cfg)
    src = out / "boundary.csv"
    if not src.exists():
        raise ConfigError(f"no solver boundary at {src}; run 'solve' first")
    surface = frontfix.BoundarySurface.from_csv(src)
    model = cfg.build_model()
    kind = kind or cfg.oracle.kind
    ref = _oracle_for(cfg, model, kind, oracle_csv)
    worst, rows = oracle.compare_boundaries(surface, ref, cfg.oracle.t_min, cfg.oracle.xhat_range)
    head = _header(cfg)
    if kind != "file":
        ref.to_csv(out / f"oracle_{kind}.csv", head)
    oracle.write_comparison_csv(out / f"comparison_{kind}.csv", rows)
    _write_json(out / f"comparison_{kind}.json", {
        "config_hash": head["config_hash"], "oracle": kind, "max_rel_err": worst,
        "per_time": oracle.per_time_errors(rows), "t_min": cfg.oracle.t_min,
    })
    logger.info("max relative error against %s oracle: %.3e", kind, worst)
    return EXIT_OK


def cmd_density_audit(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    model = cfg.build_model()
    ellipticity_bounds(model, working_samples(model, seed=cfg.seed))
    n = model.n
    if model.constant_covariance is not None and model.constant_rate is not None:
        a = np.asarray(model.constant_covariance, float)
        b = model.constant_rate - 0.5 * np.diag(a)
    else:
        a, b = wkb.log_price_coefficients(model.cov, model.r, n)
    centre = np.log(np.full(n, model.K / n))
    checks, samples = wkb.invariant_suite(a, b, n, centre, order=cfg.audit.order, policy=cfg.solver.policy,
                                          points=cfg.audit.points, seed=cfg.seed)
    head = _header(cfg)
    wkb.write_checks_csv(out / "audit.csv", checks, head)
    w = wkb.WkbDensity(a, b, n, order=cfg.audit.order, policy=cfg.solver.policy)
    wkb.write_audit_csv(out / "audit_residuals.csv", wkb.audit_table(w, samples[:200]), head)
    failed = [c for c in checks if not c.passed]
    for c in failed:
        print(f"FAILED {c.name}: {c.value:.3e} (tolerance {c.tolerance:.1e})", file=sys.stderr)
    return EXIT_AUDIT if failed else EXIT_OK


def cmd_greeks(cfg: RunConfig) -> int:
    """Recompute the derivative surfaces from ``state.json`` without iterating."""
    out = _outdir(cfg)
    path = out / "state.json"
    if not path.exists():
        raise ConfigError(f"no saved state at {path}; run 'solve' first")
    data = json.loads(path.read_text())
    if data.get("config_hash") not in (None, cfg.digest()):
        logger.warning("saved state was produced by a different config (%s)", data.get("config_hash"))
    model = cfg.build_model()
    sconf = cfg.solver_config()
    if not sconf.greeks:
        sconf = dataclasses.replace(sconf, greeks=True)
    slv = solver.make_solver(model, config=sconf, rule=cfg.rule())
    state = solver.IterationState.from_json(data)
    g = slv.grid
    if state.F.shape != (len(g.t), g.m):
        raise ConfigError(f"saved state has shape {state.F.shape}, config grid needs {(len(g.t), g.m)}")
    slv.table.fill(state.F.reshape((len(g.t),) + (g.shape or (1,))))
    _, greeks = solver.finalize(slv, state)
    greeks.to_csv(out / "greeks.csv", _header(cfg))
    return EXIT_OK


# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freebound", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--mc-samples", type=int, help="Monte Carlo sample count")
        p.add_argument("--quad-nodes", type=int, help="Gauss-Legendre nodes per axis")
        p.add_argument("--workers", type=int, help=f"worker threads (default ${quad.WORKERS_ENV} or 1)")
        p.add_argument("--output", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("solve", help="iterate the boundary and write surfaces")).add_argument(
        "--max-iter", type=int, help="iteration cap per substep")
    p = common(sub.add_parser("oracle-compare", help="compare a saved boundary with a reference solver"))
    p.add_argument("--oracle", choices=["binomial", "psor", "file"], help="reference kind")
    p.add_argument("--oracle-csv", help="boundary CSV for the file oracle")
    common(sub.add_parser("density-audit", help="check the density expansion invariants"))
    common(sub.add_parser("greeks", help="re-emit derivative surfaces from a saved state"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "solve":
            code = cmd_solve(cfg)
        elif args.command == "oracle-compare":
            code = cmd_oracle_compare(cfg, args.oracle, args.oracle_csv)
        elif args.command == "density-audit":
            code = cmd_density_audit(cfg)
        else:
            code = cmd_greeks(cfg)
    except (ConfigError, EllipticityError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # any solver failure is reported, not raised, at the CLI boundary
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logger.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
