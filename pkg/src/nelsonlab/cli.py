"""Command line front end.

Subcommands: ``coeffs``, ``selfenergy``, ``binding``, ``vev``, ``lemmas``
and ``sweep``. Every run writes one artifact (JSON, or CSV for ``sweep``)
that echoes the parsed configuration next to the results.

Exit codes: 0 success, 2 invalid input, 3 numerical non-convergence,
4 a lemma check with margin below ``-1e-8``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import jsonfmt
from .fock import BasisTooLargeError, DegenerateGridError, enumerate_basis
from .lemmas import bound_c_eps, lemma_suite, verify_resolvent_identity
from .modes import ModelParams, build_mode_grid, coupling_constants
from .quad import QuadratureError, QuadResult, SamplingError, integrate_grid3d, integrate_mc, reduce_two_photon
from .spectral import (Budgets, LanczosError, binding_expansion, hydrogen_ground,
                       order_fit, self_energy_expansion)
from .wick import BUILTIN_STRINGS, expansion_energy, matrix_path_vev, matrix_vevs, vev_integrand

SCHEMA = "nelson/1"
COMMANDS = ("coeffs", "selfenergy", "binding", "vev", "lemmas", "sweep")
GRID_COMMANDS = ("selfenergy", "vev", "lemmas", "sweep")
LEMMA_FAIL = -1e-8
CSV_HEADER = ("e,z,lambda,n_radial,n_angular,n_max,E_at,a4,a4_err,b1,b1_err,b2,b2_err,"
              "b3,b3_err,E0_expansion,E0_lanczos,E0_trial,E_bin_expansion,residual_order_fit,seed")

log = logging.getLogger("nelsonlab")


class ConfigError(ValueError):
    """Invalid command line or configuration file input."""


def _lam_to_json(lam: float):
    return "inf" if math.isinf(lam) else lam


def _lam_from_json(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    return float(value)


@dataclass
class RunConfig:
    """Everything a run depends on. Worker count is deliberately absent: it
    must not change results, so it is not part of the artifact."""

    command: str = "coeffs"
    e: float = 0.1
    z: float = 1.0
    lam: float = 1.0
    ir_shift: float = 0.0
    ir_from_e: bool = False
    n_radial: int = 3
    n_angular: int = 8
    n_max: int = 3
    budget: int = 1_000_000
    grid_n: int = 16
    seed: int = 0
    name: str = "a4"
    method: str = "mc"
    es: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3])
    lambdas: list = field(default_factory=lambda: [1.0])
    out_path: str | None = None
    cache_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command in GRID_COMMANDS:
            lams = self.lambdas if self.command == "sweep" else [self.lam]
            if any(math.isinf(x) for x in lams):
                raise ConfigError(f"--lambda inf is only accepted by coeffs and binding, "
                                  f"not by {self.command}")
        for x in [self.lam] + list(self.lambdas):
            if not x > 0:
                raise ConfigError(f"cutoff must be positive, got {x}")
        for x in [self.e] + list(self.es):
            if not (0.0 <= x < 1.0):
                raise ConfigError(f"coupling e must lie in [0, 1), got {x}")
        if self.z < 0:
            raise ConfigError("Z must be >= 0")
        if self.n_radial < 1 or self.n_angular < 2 or self.n_max < 0:
            raise ConfigError("grid sizes must satisfy n_radial >= 1, n_angular >= 2, n_max >= 0")
        if self.budget < 10_000:
            raise ConfigError("Monte Carlo budget must be >= 1e4")
        if self.grid_n < 2:
            raise ConfigError("grid_n must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.name not in BUILTIN_STRINGS:
            raise ConfigError(f"unknown VEV {self.name!r}; choose from {sorted(BUILTIN_STRINGS)}")
        if self.method not in ("mc", "grid", "matrix"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.command == "vev" and self.method == "grid" and self.name != "a4":
            raise ConfigError("the reduced grid path exists only for the two-photon VEV a4")
        if self.command in ("lemmas", "selfenergy", "sweep") and self.n_max < 3:
            raise ConfigError(f"{self.command} needs n_max >= 3")
        return self

    def params(self, e: float | None = None, lam: float | None = None) -> ModelParams:
        e = self.e if e is None else e
        lam = self.lam if lam is None else lam
        eps = e ** 7 if self.ir_from_e else self.ir_shift
        return ModelParams(e=e, Z=self.z, lam=lam, ir_shift=eps)

    def to_json(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if key == "lam":
                out["lambda"] = _lam_to_json(value)
            elif key == "lambdas":
                out[key] = [_lam_to_json(x) for x in value]
            elif key not in ("out_path", "cache_dir"):
                out[key] = value
        return out

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        if "lambda" in data:
            data["lam"] = _lam_from_json(data.pop("lambda"))
        if "lambdas" in data:
            data["lambdas"] = [_lam_from_json(x) for x in data["lambdas"]]
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**data).validate()


# ---------------------------------------------------------------------------
# caching

class VevCache:
    """JSON files keyed by (name, method, grid, lambda, eps, budget, seed)."""

    def __init__(self, directory: str | None):
        self.dir = Path(directory) if directory else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: dict) -> Path:
        text = json.dumps(key, sort_keys=True)
        return self.dir / (hashlib.sha256(text.encode()).hexdigest()[:32] + ".json")

    def get_or_compute(self, key: dict, compute) -> QuadResult:
        if self.dir is None:
            return compute()
        path = self._path(key)
        if path.exists():
            try:
                data = json.loads(path.read_text())
                if data.get("key") != json.loads(json.dumps(key)):
                    raise ValueError("key mismatch")
                return QuadResult.from_json(data["result"])
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("cache entry %s is corrupt (%s); recomputing", path.name, exc)
        result = compute()
        path.write_text(jsonfmt.dumps({"key": key, "result": result.to_json()}))
        return result


# ---------------------------------------------------------------------------
# commands

def _workers() -> int | None:
    raw = os.environ.get("NELSON_WORKERS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"NELSON_WORKERS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError("NELSON_WORKERS must be >= 1")
    return value


def _vev_key(cfg: RunConfig, name: str, method: str, params: ModelParams) -> dict:
    grid = {"mc": [], "grid": [cfg.grid_n], "matrix": [cfg.n_radial, cfg.n_angular]}[method]
    return {"name": name, "method": method, "grid": grid, "lambda": _lam_to_json(params.lam),
            "eps": params.ir_shift, "budget": cfg.budget if method == "mc" else 0,
            "seed": cfg.seed if method == "mc" else 0}


def _compute_vev(cfg: RunConfig, name: str, method: str, params: ModelParams) -> QuadResult:
    if method == "grid":
        return integrate_grid3d(reduce_two_photon(vev_integrand(BUILTIN_STRINGS[name], params)),
                                params.lam, cfg.grid_n)
    if method == "matrix":
        return matrix_path_vev(BUILTIN_STRINGS[name], params, cfg.n_radial, cfg.n_angular)
    return integrate_mc(vev_integrand(BUILTIN_STRINGS[name], params), cfg.budget, cfg.seed,
                        params, workers=_workers())


def cmd_coeffs(cfg: RunConfig) -> tuple[dict, int]:
    params = cfg.params()
    result = {"constants": coupling_constants(params).to_json()}
    if 0.0 < cfg.e < 1.0:
        result["c_eps_fit"] = bound_c_eps(cfg.e, params.lam).to_json()
    return result, 0


def cmd_binding(cfg: RunConfig) -> tuple[dict, int]:
    params = cfg.params()
    result = {"binding": binding_expansion(params).to_json()}
    if params.e > 0 and params.Z > 0:
        result["hydrogen"] = hydrogen_ground(params).to_json()
    return result, 0


def cmd_vev(cfg: RunConfig, cache: VevCache) -> tuple[dict, int]:
    params = cfg.params()
    res = cache.get_or_compute(_vev_key(cfg, cfg.name, cfg.method, params),
                               lambda: _compute_vev(cfg, cfg.name, cfg.method, params))
    return {"name": cfg.name, "string": BUILTIN_STRINGS[cfg.name], "vev": res.to_json()}, 0


def _vev_cache_fn(cfg, cache, params):
    def fn(name, compute):
        method = "grid" if name == "a4" else "mc"
        return cache.get_or_compute(_vev_key(cfg, name, method, params), compute)
    return fn


def cmd_selfenergy(cfg: RunConfig, cache: VevCache) -> tuple[dict, int]:
    params = cfg.params()
    budgets = Budgets(mc_budget=cfg.budget, seed=cfg.seed, grid_n=cfg.grid_n, workers=_workers(),
                      basis=(cfg.n_radial, cfg.n_angular, cfg.n_max))
    report = self_energy_expansion(params, budgets, vev_cache=_vev_cache_fn(cfg, cache, params))
    return {"energy": report.to_json()}, 0


def cmd_lemmas(cfg: RunConfig) -> tuple[dict, int]:
    params = cfg.params()
    basis = enumerate_basis(build_mode_grid(cfg.n_radial, cfg.n_angular, params), cfg.n_max)
    reports = lemma_suite(basis, params, seed=cfg.seed)
    small = enumerate_basis(basis.grid, min(cfg.n_max, 3))
    residual = verify_resolvent_identity(small, params) if small.dim - 1 <= 4000 else None
    code = 4 if any(r.unbounded or r.margin < LEMMA_FAIL for r in reports) else 0
    return {"reports": [r.to_json() for r in reports], "resolvent_identity_residual": residual}, code


def sweep_rows(cfg: RunConfig, cache: VevCache) -> list[list]:
    """One CSV row per (lambda, e) in grid order: lambda outer, e inner."""
    from .fock import FockOperators, assemble_T
    from .spectral import lanczos_ground, rayleigh_quotient, trial_state_selfenergy
    import numpy as np

    rows = []
    for lam in cfg.lambdas:
        base = cfg.params(e=0.0, lam=lam)
        basis = enumerate_basis(build_mode_grid(cfg.n_radial, cfg.n_angular, base), cfg.n_max)
        block = []
        for e in cfg.es:
            params = cfg.params(e=e, lam=lam)
            coeffs = {}
            for name in BUILTIN_STRINGS:
                method = "grid" if name == "a4" else "mc"
                coeffs[name] = cache.get_or_compute(
                    _vev_key(cfg, name, method, params),
                    lambda n=name, m=method, p=params: _compute_vev(cfg, n, m, p))
            E0 = expansion_energy(e, {k: v.value for k, v in coeffs.items()})
            ops = FockOperators.build(basis, params)
            T = assemble_T(basis, params, ops)
            omega = np.zeros(basis.dim)
            omega[0] = 1.0
            E_l, _ = lanczos_ground(T, tol=1e-13, v0=omega)
            E_t = rayleigh_quotient(T, trial_state_selfenergy(basis, params, ops))
            matrix = matrix_vevs(basis, params)
            block.append({
                "e": e, "E_at": binding_expansion(params).E_at, "coeffs": coeffs, "E0": E0,
                "E_l": E_l, "E_t": E_t, "E_bin": binding_expansion(params).E_bin_expansion,
                "resid": E_l - expansion_energy(e, matrix)})
        pos = [(b["e"], b["resid"]) for b in block if b["e"] > 0]
        slope = order_fit([p[0] for p in pos], [p[1] for p in pos]) if len(pos) >= 2 else math.nan
        for b in block:
            c = b["coeffs"]
            rows.append([b["e"], cfg.z, lam, cfg.n_radial, cfg.n_angular, cfg.n_max, b["E_at"],
                         c["a4"].value, c["a4"].stderr, c["b1"].value, c["b1"].stderr,
                         c["b2"].value, c["b2"].stderr, c["b3"].value, c["b3"].stderr,
                         b["E0"], b["E_l"], b["E_t"], b["E_bin"], slope, cfg.seed])
    return rows


def cmd_sweep(cfg: RunConfig, cache: VevCache) -> str:
    lines = [CSV_HEADER]
    for row in sweep_rows(cfg, cache):
        lines.append(",".join(jsonfmt.csv_cell(x) for x in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing

def _float_list(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [_lam_from_json(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from exc


def _lam_arg(text: str) -> float:
    try:
        return _lam_from_json(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid cutoff {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nelsonlab",
                                     description="Numerical laboratory for the Nelson model "
                                                 "of a hydrogen-like atom.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    common.add_argument("--e", type=float, help="coupling strength e (default 0.1)")
    common.add_argument("--z", type=float, help="nuclear charge multiplier Z (default 1)")
    common.add_argument("--lambda", dest="lam", type=_lam_arg,
                        help="ultraviolet cutoff; 'inf' only for coeffs and binding (default 1)")
    common.add_argument("--ir-shift", type=float, help="shift added to H_f (default 0)")
    common.add_argument("--ir-from-e", action="store_true", default=None,
                        help="use the shift e**7 instead of --ir-shift")
    common.add_argument("--n-radial", type=int, help="radial Gauss nodes (default 3)")
    common.add_argument("--n-angular", type=int, help="angular nodes (default 8)")
    common.add_argument("--n-max", type=int, help="photon number cutoff (default 3)")
    common.add_argument("--budget", type=int, help="Monte Carlo samples (default 1e6)")
    common.add_argument("--grid-n", type=int, help="Gauss nodes per axis of the 3D rule (default 16)")
    common.add_argument("--seed", type=int, help="random seed (default $NELSON_SEED or 0)")
    common.add_argument("--out", dest="out_path", help="output file (default stdout)")
    common.add_argument("--cache-dir", help="directory for cached VEVs")

    sub.add_parser("coeffs", parents=[common], help="scalar coupling constants")
    sub.add_parser("selfenergy", parents=[common], help="self-energy expansion and Lanczos")
    sub.add_parser("binding", parents=[common], help="binding-energy expansion")
    p = sub.add_parser("vev", parents=[common], help="one vacuum expectation value")
    p.add_argument("--name", choices=sorted(BUILTIN_STRINGS))
    p.add_argument("--method", choices=("mc", "grid", "matrix"))
    sub.add_parser("lemmas", parents=[common], help="operator inequality checks")
    p = sub.add_parser("sweep", parents=[common], help="CSV sweep over e and lambda")
    p.add_argument("--es", type=_float_list, help="comma separated couplings")
    p.add_argument("--lambdas", type=_float_list, help="comma separated cutoffs")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if ns.config:
        try:
            data = json.loads(Path(ns.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.pop("schema", None)
    data["command"] = ns.command
    if "seed" not in data and os.environ.get("NELSON_SEED"):
        try:
            data["seed"] = int(os.environ["NELSON_SEED"])
        except ValueError as exc:
            raise ConfigError("NELSON_SEED must be an integer") from exc
    for key in ("e", "z", "lam", "ir_shift", "ir_from_e", "n_radial", "n_angular", "n_max",
                "budget", "grid_n", "seed", "name", "method", "es", "lambdas", "out_path",
                "cache_dir"):
        value = getattr(ns, key, None)
        if value is not None:
            data["lambda" if key == "lam" else key] = value
    if "lambdas" in data and "lambda" in data and getattr(ns, "lambdas", None) is None \
            and ns.command == "sweep" and getattr(ns, "lam", None) is not None:
        data["lambdas"] = [data["lambda"]]
    return RunConfig.from_json(data)


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(ns)
        cache = VevCache(cfg.cache_dir)
        if cfg.command == "sweep":
            _emit(cmd_sweep(cfg, cache), cfg.out_path)
            return 0
        handler = {"coeffs": lambda: cmd_coeffs(cfg),
                   "binding": lambda: cmd_binding(cfg),
                   "vev": lambda: cmd_vev(cfg, cache),
                   "selfenergy": lambda: cmd_selfenergy(cfg, cache),
                   "lemmas": lambda: cmd_lemmas(cfg)}[cfg.command]
        result, code = handler()
    except (ConfigError, BasisTooLargeError, TypeError) as exc:
        print(f"nelsonlab: error: {exc}", file=sys.stderr)
        return 2
    except (QuadratureError, LanczosError, SamplingError, DegenerateGridError) as exc:
        print(f"nelsonlab: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"nelsonlab: error: {exc}", file=sys.stderr)
        return 2
    artifact = {"schema": SCHEMA, "config": cfg.to_json(), "seed": cfg.seed, "result": result}
    _emit(jsonfmt.dumps(artifact), cfg.out_path)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
