"""Command-line interface.

    bcaplab sample-tree --mu binary --conditioned 7 --seed 1
    bcaplab estimate --method bcap-escape --set ball:4 --d 5
    bcaplab experiment range-capacity --d 5 --seed 7 --workers 4
    bcaplab identities

Settings come from built-in defaults, then ``--config FILE`` (flat
``key = value`` lines, arrays as ``[a, b, c]``), then command-line flags.
Data go to files under ``--out-dir`` (default ``$BCAPLAB_OUTPUT_DIR`` or
``./bcaplab-out``); diagnostics go to standard error.

Exit codes: 0 success, 2 invalid input, 3 numerical failure or failed
identity check, 4 vertex budget exhausted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, capacity, experiments, trees
from .brw import realize
from .distributions import PrecisionError, parse_offspring, parse_step
from .lattice import LatticeSet, ball
from .rng import Stream, stream_key

OUTPUT_ENV = "BCAPLAB_OUTPUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_BUDGET = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_VALIDATION):
        super().__init__(msg)
        self.code = code


@dataclass
class RunConfig:
    command: str = ""
    experiment: str | None = None
    method: str | None = None
    d: int | None = None
    mu: str = "binary"
    theta: str | None = None
    xi: str | None = None
    set: str | None = None
    points: str | None = None
    gamma: float | None = None
    kappa: float | None = None
    tol: float = 1e-9
    max_iters: int = 100_000
    conditioned: int | None = None
    count: int = 1
    n_grid: list[int] | None = None
    eps_grid: list[float] | None = None
    far: list[float] | None = None
    x: list[float] | None = None
    eta: float | None = None
    trials: int | None = None
    budget: int | None = None
    guard: float | None = None
    walks: int | None = None
    xi_samples: int | None = None
    trees_per_xi: int | None = None
    samples: int | None = None
    filter: bool = True
    seed: int = 0
    workers: int = 1
    out: str | None = None
    out_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ENV, "bcaplab-out"))

    # ------------------------------------------------------------ disk form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_render(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**parse_config_text(text))

    def validate(self) -> "RunConfig":
        if self.d is not None and self.d < 1:
            raise CLIError("d must be >= 1")
        for name in ("trials", "budget", "walks", "xi_samples", "trees_per_xi", "samples",
                     "count", "max_iters"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise CLIError(f"{name} must be >= 1")
        if self.workers < 1:
            raise CLIError("workers must be >= 1")
        if self.conditioned is not None and self.conditioned < 1:
            raise CLIError("conditioned size must be >= 1")
        if self.eta is not None and not 0 < self.eta < 1:
            raise CLIError("eta must lie in (0, 1)")
        if self.tol <= 0:
            raise CLIError("tol must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise CLIError("gamma must be positive (precondition 0 < gamma < d)")
        return self


_TYPES = typing.get_type_hints(RunConfig)


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_render(a) for a in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, raw: str):
    if name not in _TYPES:
        raise CLIError(f"unknown config key {name!r}")
    tp = _TYPES[name]
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    base = args[0] if args else tp
    raw = raw.strip()
    if raw in ("none", "None", ""):
        return None
    origin = typing.get_origin(base)
    if origin is list:
        (item,) = typing.get_args(base)
        body = raw.strip("[]").strip()
        return [item(float(a)) if item is int else item(a) for a in body.split(",") if a.strip()]
    if base is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise CLIError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if base is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if base is float:
            return float(raw)
    except ValueError:
        raise CLIError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"config line {no}: expected key = value")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        out[k] = _coerce(k, v)
    return out


# ------------------------------------------------------------------ parser


def _list_of(tp):
    def conv(s: str):
        return [tp(float(a)) if tp is int else tp(a) for a in s.replace(" ", "").strip("[]").split(",") if a]
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcaplab", description="Branching capacity laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value file; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        sp.add_argument("--d", type=int)
        sp.add_argument("--mu")
        sp.add_argument("--theta")

    st = sub.add_parser("sample-tree", help="sample Galton-Watson trees")
    common(st)
    st.add_argument("--conditioned", type=int, help="condition on this many vertices")
    st.add_argument("--count", type=int)
    st.add_argument("--budget", type=int)

    sb = sub.add_parser("sample-brw", help="sample a branching random walk")
    common(sb)
    sb.add_argument("--conditioned", type=int)
    sb.add_argument("--budget", type=int)

    es = sub.add_parser("estimate", help="estimate a capacity")
    common(es)
    es.add_argument("--method", choices=["newtonian", "bcap-hitting", "bcap-escape", "riesz"])
    es.add_argument("--set", help="point | ball:R | file:PATH.csv")
    es.add_argument("--points", help="CSV point cloud for riesz")
    es.add_argument("--gamma", type=float)
    es.add_argument("--kappa", type=float)
    es.add_argument("--tol", type=float)
    es.add_argument("--max-iters", dest="max_iters", type=int)
    es.add_argument("--trials", type=int)
    es.add_argument("--budget", type=int)
    es.add_argument("--guard", type=float)
    es.add_argument("--far", type=_list_of(float))

    ex = sub.add_parser("experiment", help="run an experiment")
    common(ex)
    ex.add_argument("experiment", choices=["range-capacity", "intersection", "spine-fraction",
                                           "identities", "c-theta"])
    ex.add_argument("--xi")
    ex.add_argument("--n-grid", dest="n_grid", type=_list_of(int))
    ex.add_argument("--eps-grid", dest="eps_grid", type=_list_of(float))
    ex.add_argument("--x", type=_list_of(float))
    ex.add_argument("--eta", type=float)
    ex.add_argument("--trials", type=int)
    ex.add_argument("--guard", type=float)
    ex.add_argument("--walks", type=int)
    ex.add_argument("--xi-samples", dest="xi_samples", type=int)
    ex.add_argument("--trees-per-xi", dest="trees_per_xi", type=int)
    ex.add_argument("--samples", type=int)
    ex.add_argument("--budget", type=int)
    ex.add_argument("--no-filter", dest="filter", action="store_false", default=None)

    idn = sub.add_parser("identities", help="alias of 'experiment identities'")
    common(idn)
    idn.add_argument("--samples", type=int)

    sub.add_parser("version", help="print the version")
    return p


def resolve(argv: list[str]) -> tuple[RunConfig, bool]:
    ns = build_parser().parse_args(argv)
    values: dict = {}
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            values.update(parse_config_text(Path(cfg_path).read_text()))
        except OSError as exc:
            raise CLIError(f"cannot read config: {exc}") from None
    for k, v in vars(ns).items():
        if k in ("config", "dry_run") or v is None:
            continue
        values[k.replace("-", "_")] = v
    if values.get("command") == "identities":
        values["command"], values["experiment"] = "experiment", "identities"
    cfg = RunConfig(**values)
    return cfg.validate(), bool(getattr(ns, "dry_run", False))


# ---------------------------------------------------------------- commands


def _laws(cfg: RunConfig, need_d: bool = True):
    mu = parse_offspring(cfg.mu)
    if cfg.theta:
        theta = parse_step(cfg.theta, cfg.d)
    elif cfg.d is not None:
        theta = parse_step("srw", cfg.d)
    elif need_d:
        raise CLIError("need --d or --theta")
    else:
        theta = None
    if theta is not None and cfg.d is not None and theta.d != cfg.d:
        raise CLIError(f"step law has dimension {theta.d}, but d = {cfg.d}")
    return mu, theta


def _out_path(cfg: RunConfig, default_name: str) -> Path:
    path = Path(cfg.out) if cfg.out else Path(cfg.out_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sample_tree(mu, cfg: RunConfig, i: int):
    s = Stream(stream_key(cfg.seed, f"{cfg.command}:{cfg.mu}", i))
    if cfg.conditioned is not None:
        return trees.sample_gw_conditioned(mu, cfg.conditioned, s)
    return trees.sample_gw(mu, s, max_vertices=cfg.budget or 10**6)


def cmd_sample_tree(cfg: RunConfig) -> int:
    mu, _ = _laws(cfg, need_d=False)
    lines = []
    truncated = 0
    for i in range(cfg.count):
        t = _sample_tree(mu, cfg, i)
        truncated += isinstance(t, trees.Truncated)
        lines.append(t.to_text())
    tag = f"n{cfg.conditioned}" if cfg.conditioned else "gw"
    path = _out_path(cfg, f"trees_{tag}_seed{cfg.seed}.txt")
    path.write_text("\n".join(lines) + "\n")
    _log(f"wrote {cfg.count} tree(s) to {path}")
    if truncated:
        _log(f"{truncated} tree(s) hit the vertex budget")
        return EXIT_BUDGET
    return EXIT_OK


def cmd_sample_brw(cfg: RunConfig) -> int:
    mu, theta = _laws(cfg)
    t = _sample_tree(mu, cfg, 0)
    w = realize(t, theta, None, Stream(stream_key(cfg.seed, "sample-brw:positions", 0)))
    path = _out_path(cfg, f"brw_seed{cfg.seed}.bin")
    path.write_bytes(w.to_bytes())
    _log(f"wrote a walk over {w.n} vertices to {path}")
    return EXIT_BUDGET if w.truncated else EXIT_OK


def _parse_set(spec: str, d: int) -> LatticeSet:
    if spec == "point":
        return LatticeSet(np.zeros((1, d), dtype=np.int64), d)
    if spec.startswith("ball:"):
        return ball(d, float(spec[5:]))
    if spec.startswith("file:"):
        return LatticeSet.from_csv(Path(spec[5:]).read_text(), d)
    raise CLIError(f"unknown set {spec!r} (use point, ball:R or file:PATH)")


def cmd_estimate(cfg: RunConfig) -> int:
    if cfg.method is None:
        raise CLIError("--method is required")
    if cfg.method == "riesz":
        if not cfg.points or cfg.gamma is None:
            raise CLIError("riesz needs --points FILE and --gamma")
        try:
            pts = np.loadtxt(cfg.points, delimiter=",", ndmin=2)
        except OSError as exc:
            raise CLIError(f"cannot read points: {exc}") from None
        d = pts.shape[1]
        if not 0 < cfg.gamma < d:
            raise CLIError(f"gamma = {cfg.gamma} violates the precondition 0 < gamma < d = {d}")
        sol = capacity.riesz_cap(pts, cfg.gamma, tol=cfg.tol, max_iters=cfg.max_iters,
                                 kappa=cfg.kappa)
        out = sol.to_dict()
        out["method"] = "riesz"
        path = _out_path(cfg, f"riesz_gamma{cfg.gamma:g}.json")
        path.write_text(json.dumps(out, indent=2))
        _log(f"capacity {sol.capacity:.6g} (gap {sol.gap:.3g}) written to {path}")
        return EXIT_OK
    mu, theta = _laws(cfg)
    d = theta.d
    K = _parse_set(cfg.set or "point", d)
    kw = {"rng": Stream(stream_key(cfg.seed, f"estimate:{cfg.method}", 0)),
          "descriptor": cfg.set or "point"}
    if cfg.trials:
        kw["trials"] = cfg.trials
    if cfg.method == "newtonian":
        est = capacity.newtonian_cap(K, theta, far_distances=cfg.far, **kw)
    elif cfg.method == "bcap-hitting":
        est = capacity.bcap_hitting(K, mu, theta, far_distances=cfg.far, budget=cfg.budget, **kw)
    else:
        est = capacity.bcap_escape(K, mu, theta, budget=cfg.budget, guard=cfg.guard, **kw)
    path = _out_path(cfg, f"{cfg.method}_{(cfg.set or 'point').replace(':', '')}_seed{cfg.seed}.json")
    path.write_text(est.to_json(indent=2))
    _log(f"{cfg.method}: {est.value:.6g} +- {est.stderr:.3g} written to {path}")
    for w in est.warnings:
        _log(f"warning: {w}")
    if est.truncated_fraction > 0 and cfg.budget is not None and est.truncated_fraction > 0.5:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_experiment(cfg: RunConfig) -> int:
    name = cfg.experiment
    mu = parse_offspring(cfg.mu)
    if name == "range-capacity":
        d = cfg.d or 5
        _, theta = _laws(dataclasses.replace(cfg, d=d))
        xi = parse_step(cfg.xi, d) if cfg.xi else None
        mc = {}
        if cfg.trials:
            mc["trials"] = cfg.trials
        if cfg.guard:
            mc["guard"] = cfg.guard
        if cfg.budget:
            mc["budget"] = cfg.budget
        rep = experiments.run_range_capacity(
            d, mu, theta, xi, n_grid=cfg.n_grid or (250, 1000, 4000), walks_per_n=cfg.walks or 100,
            mc_params=mc, seed=cfg.seed, workers=cfg.workers)
    elif name == "intersection":
        d = cfg.d or 5
        _, theta = _laws(dataclasses.replace(cfg, d=d))
        xi = parse_step(cfg.xi, d) if cfg.xi else None
        kw = {}
        if cfg.x is not None:
            kw["x"] = cfg.x
        if cfg.eta is not None:
            kw["eta"] = cfg.eta
        if cfg.eps_grid:
            kw["eps_grid"] = cfg.eps_grid
        if cfg.n_grid:
            kw["n_grid"] = cfg.n_grid
        if cfg.xi_samples:
            kw["xi_samples"] = cfg.xi_samples
        if cfg.trees_per_xi:
            kw["trees_per_xi"] = cfg.trees_per_xi
        rep = experiments.run_intersection(d, mu, theta, xi, filter=cfg.filter,
                                           budget=cfg.budget, seed=cfg.seed,
                                           workers=cfg.workers, **kw)
    elif name == "spine-fraction":
        rep = experiments.run_spine_fraction(mu, n_grid=cfg.n_grid or (10, 50, 200, 1000),
                                             samples=cfg.samples or 10_000, seed=cfg.seed)
    elif name == "identities":
        d = cfg.d or 5
        _, theta = _laws(dataclasses.replace(cfg, d=d))
        rep = experiments.run_identity_suite(mu, theta, translation_samples=cfg.samples or 2000,
                                             seed=cfg.seed)
    elif name == "c-theta":
        d = cfg.d or 5
        _, theta = _laws(dataclasses.replace(cfg, d=d))
        rep = experiments.run_c_theta(mu, theta, seed=cfg.seed)
    else:
        raise CLIError(f"unknown experiment {name!r}")
    paths = rep.write(cfg.out_dir)
    for p in paths:
        _log(f"wrote {p}")
    if name in ("identities", "c-theta"):
        for r in rep.rows:
            _log(f"{'PASS' if r['pass'] else 'FAIL'}  {r['check']}  error={r['error']}")
        if not rep.passed:
            return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "sample-tree": cmd_sample_tree,
    "sample-brw": cmd_sample_brw,
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        if argv[:1] == ["version"]:
            print(__version__)
            return EXIT_OK
        cfg, dry = resolve(argv)
        if dry:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        return COMMANDS[cfg.command](cfg)
    except CLIError as exc:
        _log(f"error: {exc}")
        return exc.code
    except trees.UnreachableSize as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except (capacity.EstimatorError, PrecisionError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except (capacity.NumericalError, trees.PeriodicityError, FloatingPointError) as exc:
        _log(f"numerical error: {exc}")
        return EXIT_NUMERICAL
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
