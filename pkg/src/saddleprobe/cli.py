"""Command-line driver.

Usage::

    saddleprobe COMMAND [--config FILE] [--out DIR] [--seed N] [--KEY VALUE ...]

Configuration is a flat ``key = value`` file; command-line overrides win over
the file, which wins over the defaults in :data:`KEYS`.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import evolution, forward, mesh, probing, saddle
from .operators import ConvergenceError, SingularOperatorError

COMMANDS = ("forward", "probe", "saddle", "constrained", "sweep", "heat-reverse", "sideway", "moving")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_open(v):
    return 0 < v < 1


def _auto_fraction(v):
    return v is None or 0 < v <= 1


def _auto_float(text: str):
    return None if text.strip().lower() == "auto" else float(text)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _pair(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) != 2:
        raise ValueError("expected two numbers")
    return vals


def _inclusions(text: str) -> tuple[forward.Inclusion, ...]:
    """``disk:cx,cy,r,amp; rect:x0,y0,w,h,amp`` or ``none``."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(";"):
        kind, _, args = item.strip().partition(":")
        vals = _float_list(args)
        if kind == "disk" and len(vals) == 4:
            out.append(forward.Inclusion.disk(vals[:2], vals[2], vals[3]))
        elif kind in ("rect", "rectangle") and len(vals) == 5:
            out.append(forward.Inclusion.rectangle(vals[:2], vals[2:4], vals[4]))
        else:
            raise ValueError(f"cannot parse inclusion {item.strip()!r}")
    return tuple(out)


def _fmt_inclusions(incs) -> str:
    if not incs:
        return "none"
    parts = []
    for inc in incs:
        if inc.shape == "disk":
            vals = (*inc.center, inc.size[0], inc.amplitude)
            parts.append("disk:" + ",".join(f"{v:.17g}" for v in vals))
        else:
            vals = (*inc.center, *inc.size, inc.amplitude)
            parts.append("rect:" + ",".join(f"{v:.17g}" for v in vals))
    return "; ".join(parts)


def _choice(*options):
    def check(v):
        return v in options
    check.options = options
    return check


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    valid: Callable[[Any], bool] | None = None
    doc: str = ""


KEYS: dict[str, Key] = {
    "nx": Key(int, "33", lambda v: v >= 3, "nodes along x"),
    "ny": Key(int, "33", lambda v: v >= 3, "nodes along y"),
    "mu_bar": Key(float, "1.0", _positive, "background coefficient"),
    "inclusions": Key(_inclusions, "disk:0.3,0.7,0.15,5", None, "inclusion list"),
    "flux": Key(float, "1.0", None, "constant Neumann input g"),
    "noise": Key(float, "0.0", _nonneg, "relative noise level on f"),
    "seed": Key(int, "0", _nonneg, "noise seed"),
    "epsilon": Key(float, "1e-2", _positive, "data-fit weight"),
    "s": Key(int, "1", _nonneg, "power of P on the mismatch / probing trace"),
    "t": Key(float, "1.0", _nonneg, "power of P in the probing weight"),
    "margin": Key(int, "2", _nonneg, "sample margin in nodes"),
    "max_iter": Key(int, "500", lambda v: v >= 1, "iteration cap"),
    "tol": Key(float, "1e-10", _unit_open, "relative increment tolerance"),
    "relaxation": Key(_auto_float, "auto", _auto_fraction, "ADI relaxation or auto"),
    "damping": Key(_auto_float, "auto", _auto_fraction, "constrained damping or auto"),
    "method": Key(str, "coupled", _choice("coupled", "iterative"), "saddle solver"),
    "mode": Key(str, "neumann", _choice("neumann", "dirichlet"), "data mode"),
    "floor": Key(float, "1e-6", _positive, "state floor for medium recovery"),
    "epsilons": Key(_float_list, "1e-1,1e-2,1e-3,1e-4",
                    lambda v: len(v) > 0 and all(e > 0 for e in v)
                    and all(b < a for a, b in zip(v, v[1:])), "sweep values"),
    "T": Key(float, "0.1", _positive, "final time"),
    "nt": Key(int, "20", lambda v: 2 <= v, "time steps"),
    "alpha": Key(float, "1e-4", _nonneg, "initial-gradient weight"),
    "mode_p": Key(int, "1", _nonneg, "x wavenumber of the heat-reverse initial state"),
    "mode_q": Key(int, "1", _nonneg, "y wavenumber of the heat-reverse initial state"),
    "gamma_start": Key(_pair, "0.3,0.5", None, "moving centre at t=0"),
    "gamma_end": Key(_pair, "0.7,0.5", None, "moving centre at t=T"),
    "radius": Key(float, "0.1", _positive, "moving inclusion radius"),
    "amplitude": Key(float, "5.0", _nonneg, "moving inclusion amplitude"),
}


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]
    out: Path
    raw: dict[str, str] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> str:
        lines = [f"# command = {self.command}"]
        for k in KEYS:
            v = self.values[k]
            if k == "inclusions":
                text = _fmt_inclusions(v)
            elif v is None:
                text = "auto"
            elif isinstance(v, tuple):
                text = ",".join(f"{x:.17g}" for x in v)
            elif isinstance(v, float):
                text = f"{v:.17g}"
            else:
                text = str(v)
            lines.append(f"{k} = {text}")
        return "\n".join(lines) + "\n"


def _read_file(path) -> dict[str, str]:
    out = {}
    if path is None:
        return out
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}", "expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def parse_config(path=None, overrides: dict[str, str] | None = None, command: str = "forward",
                 out=".") -> RunConfig:
    """Resolve defaults, file and overrides (in rising precedence) into a :class:`RunConfig`."""
    raw = {k: entry.default for k, entry in KEYS.items()}
    merged = _read_file(path)
    for k, v in (overrides or {}).items():
        merged[k.replace("-", "_")] = v
    for k, v in merged.items():
        if k not in KEYS:
            raise ConfigError(k, "unknown key")
        raw[k] = v
    values = {}
    for k, entry in KEYS.items():
        try:
            val = entry.parse(raw[k])
        except (ValueError, TypeError) as exc:
            raise ConfigError(k, f"cannot parse {raw[k]!r}: {exc}") from None
        if entry.valid is not None and not entry.valid(val):
            raise ConfigError(k, f"value {raw[k]!r} out of range")
        values[k] = val
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}")
    return RunConfig(command, values, Path(out), raw)


def _grid(cfg: RunConfig) -> mesh.Grid2D:
    return mesh.build_grid(cfg.nx, cfg.ny)


def _medium(cfg: RunConfig) -> forward.Medium:
    return forward.Medium(cfg.mu_bar, cfg.inclusions)


def _data(cfg: RunConfig, grid) -> forward.CauchyData:
    g = np.full(grid.n_boundary, cfg.flux)
    return forward.make_cauchy(grid, _medium(cfg), g, cfg.noise, cfg.seed)


def _saddle_cfg(cfg: RunConfig, **kw) -> saddle.SaddleConfig:
    base = dict(epsilon=cfg.epsilon, mu_bar=cfg.mu_bar, s=cfg.s, max_iter=cfg.max_iter,
                tol=cfg.tol, mode=cfg.mode, relaxation=cfg.relaxation)
    base.update(kw)
    return saddle.SaddleConfig(**base)


def _cmd_forward(cfg, out, summary):
    grid = _grid(cfg)
    mu = forward.realize_medium(grid, _medium(cfg))
    data = _data(cfg, grid)
    u, _ = forward.solve_forward(grid, mu, data.g)
    u0 = forward.background_solve(grid, cfg.mu_bar, data.g)
    mesh.write_field(out / "mu.txt", grid, mu)
    mesh.write_field(out / "u.txt", grid, u)
    mesh.write_field(out / "u0.txt", grid, u0)
    mesh.write_trace(out / "f.txt", data.f)
    mesh.write_trace(out / "g.txt", data.g)
    summary["mismatch_max"] = float(np.max(np.abs(data.f - mesh.trace(grid, u0))))


def _cmd_probe(cfg, out, summary):
    grid = _grid(cfg)
    data = _data(cfg, grid)
    u0 = forward.background_solve(grid, cfg.mu_bar, data.g)
    pcfg = probing.ProbeConfig(cfg.s, cfg.t, cfg.epsilon, cfg.mu_bar, cfg.margin)
    mismatch = probing.data_mismatch(data, u0)
    if np.any(mismatch != 0):
        idx = probing.index_green(grid, data, u0, pcfg)
    else:
        idx = probing.index_green(grid, data, u0, pcfg, normalize=False)
    adj = probing.index_adjoint(grid, data, u0, pcfg)
    probing.write_index(out / "index.txt", idx)
    probing.write_index(out / "index_adjoint.txt", adj)
    mesh.write_trace(out / "mismatch.txt", mismatch)
    summary["argmax"] = idx.argmax


def _write_pair(out, grid, u, lam, floor):
    mu_hat, mask = saddle.recover_medium(u, lam, floor)
    mesh.write_field(out / "u.txt", grid, u)
    mesh.write_field(out / "lambda.txt", grid, lam)
    mesh.write_field(out / "mu_hat.txt", grid, mu_hat)
    return mask


def _cmd_saddle(cfg, out, summary):
    grid = _grid(cfg)
    data = _data(cfg, grid)
    scfg = _saddle_cfg(cfg)
    if cfg.mode == "dirichlet":
        st = saddle.dtn_solve(data, scfg)
    elif cfg.method == "iterative":
        st = saddle.run_iterative_probing(data, scfg)
        saddle.write_iteration_log(out / "iterations.csv", st)
        summary.update(iterations=st.iterations, rho_hat=st.rho_hat, relaxation=st.relaxation)
        summary["residual"] = saddle.coupled_residual(data, scfg, st.u, st.lam)
    else:
        st = saddle.solve_coupled(data, scfg)
    _write_pair(out, grid, st.u, st.lam, cfg.floor)


def _cmd_constrained(cfg, out, summary):
    grid = _grid(cfg)
    data = _data(cfg, grid)
    res = saddle.constrained_solve(data, _saddle_cfg(cfg), damping=cfg.damping)
    _write_pair(out, grid, res.u, res.lam, cfg.floor)
    mesh.write_field(out / "p.txt", grid, res.p)
    summary.update(iterations=res.iterations, damping=res.damping)


def _cmd_sweep(cfg, out, summary):
    grid = _grid(cfg)
    data = _data(cfg, grid)
    rows = saddle.epsilon_sweep(data, _saddle_cfg(cfg), cfg.epsilons)
    saddle.write_sweep(out / "sweep.csv", rows)
    failed = [r.epsilon for r in rows if r.error]
    summary["failed_epsilons"] = failed


def _cmd_heat_reverse(cfg, out, summary):
    grid = _grid(cfg)
    tg = evolution.TimeGrid(cfg.T, cfg.nt)
    X, Y = grid.coords
    y0 = np.cos(cfg.mode_p * np.pi * X) * np.cos(cfg.mode_q * np.pi * Y)
    z = evolution.heat_forward(grid, tg, np.zeros(grid.shape), y0).levels[-1]
    if cfg.noise > 0:
        rng = np.random.default_rng(cfg.seed)
        z = z + cfg.noise * np.max(np.abs(z)) * rng.uniform(-1.0, 1.0, z.shape)
    y, lam = evolution.time_reversal_solve(grid, tg, z, _saddle_cfg(cfg), cfg.alpha)
    mesh.write_field(out / "y0_true.txt", grid, y0)
    mesh.write_field(out / "z.txt", grid, z)
    mesh.write_field(out / "y0_recovered.txt", grid, y[0])
    evolution.write_space_time(out / "y", grid, y, "y")
    evolution.write_space_time(out / "lambda", grid, lam, "lambda")
    summary["relative_error"] = mesh.field_norm(grid, y[0] - y0) / max(mesh.field_norm(grid, y0), 1e-300)


def _cmd_sideway(cfg, out, summary):
    grid = _grid(cfg)
    tg = evolution.TimeGrid(cfg.T, cfg.nt)
    mu = forward.realize_medium(grid, _medium(cfg))
    g = np.full(grid.n_boundary, cfg.flux)
    u_init, _ = forward.solve_forward(grid, mu, g)
    states = evolution.heat_forward(grid, tg, mu, u_init, g)
    f = np.array([mesh.trace(grid, lev) for lev in states.levels])
    if cfg.noise > 0:
        rng = np.random.default_rng(cfg.seed)
        f = f + cfg.noise * np.max(np.abs(f)) * rng.uniform(-1.0, 1.0, f.shape)
    data = evolution.TimeCauchyData(grid, tg, f, np.tile(g, (tg.nt + 1, 1)))
    y, lam = evolution.sideway_march(data, _saddle_cfg(cfg))
    evolution.write_space_time(out / "y", grid, y, "y")
    evolution.write_space_time(out / "lambda", grid, lam, "lambda")
    lines = ["t,cx,cy"]
    for t, lev in zip(tg.times, lam.levels):
        c = evolution.positive_centroid(grid, lev)
        c = (float("nan"), float("nan")) if c is None else c
        lines.append(f"{t:.17g},{c[0]:.17g},{c[1]:.17g}")
    (out / "centroids.csv").write_text("\n".join(lines) + "\n")


def _cmd_moving(cfg, out, summary):
    grid = _grid(cfg)
    tg = evolution.TimeGrid(cfg.T, cfg.nt)
    frac = tg.times / tg.T
    a, b = np.array(cfg.gamma_start), np.array(cfg.gamma_end)
    gamma = a[None, :] + frac[:, None] * (b - a)[None, :]
    rep = evolution.moving_potential_experiment(grid, tg, gamma, cfg.radius, cfg.amplitude,
                                                _saddle_cfg(cfg), g=np.full(grid.n_boundary, cfg.flux))
    evolution.write_trajectory(out / "trajectory.csv", rep)
    summary["mean_error_second_half"] = rep.mean_error(tg.T / 2)
    summary["detected_levels"] = int(rep.detected.sum())


HANDLERS = {
    "forward": _cmd_forward,
    "probe": _cmd_probe,
    "saddle": _cmd_saddle,
    "constrained": _cmd_constrained,
    "sweep": _cmd_sweep,
    "heat-reverse": _cmd_heat_reverse,
    "sideway": _cmd_sideway,
    "moving": _cmd_moving,
}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.echo())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    summary: dict[str, Any] = {}
    start = time.perf_counter()
    try:
        HANDLERS[cfg.command](cfg, out, summary)
        status = EXIT_OK
    except (saddle.NonConvergenceError, ConvergenceError, SingularOperatorError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        summary["failure"] = str(exc)
        status = EXIT_SOLVER
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        summary["failure"] = str(exc)
        status = EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    wall = time.perf_counter() - start
    manifest = [f"command = {cfg.command}", f"status = {status}", f"wall_time = {wall:.3f}"]
    manifest += [f"{k} = {v}" for k, v in summary.items()]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return status


def _split_overrides(extra: list[str]) -> dict[str, str]:
    overrides = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected --KEY VALUE")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(key, "missing value") from None
        overrides[key] = value
    return overrides


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="saddleprobe", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="flat key = value file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", default=None, help="noise seed")
    args, extra = ap.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = parse_config(args.config, overrides, args.command, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
