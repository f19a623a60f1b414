"""Command-line entry point: ``csafqmc csa|afqmc|shadows|noise --config <path>``.

The config is an INI file; see ``demos/`` and the README for complete
examples. Every run writes ``results.json``, ``manifest.json`` and, for
AFQMC commands, ``blocks.csv`` into the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .afqmc import AFQMCParams, SlaterDeterminant, trial_overlap
from .chem import cholesky_factorize, load_fixture, parse_fcidump
from .contextual import TRUNCATION_LOSS, TRUNCATION_MAX_TERMS, perturb_trial
from .errors import (ConfigError, ConvergenceError, CSAFQMCError, DimensionError, NotPSDError, ParseError,
                     ParticleSectorViolation, UnsupportedFrameError, ValidationError, WeightCollapseError)
from .exact import fci_ground_state
from .pipeline import (NC_STRATEGIES, csa_sweep, fci_feasible, make_trial, prepare, run_seeds, solve_csa,
                       summarize, worker_count)

log = logging.getLogger("csafqmc")

RESULTS_SCHEMA = 1

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_CONVERGENCE = 5
EXIT_SECTOR = 6
EXIT_COLLAPSE = 7


@dataclass
class RunConfig:
    fcidump: str | None = None
    fixture: str | None = None
    n_cs: int | None = None
    sweep: bool = False
    nc_strategy: str = "reference"
    max_weight: int = 2
    max_loss: float = TRUNCATION_LOSS
    max_terms: int = TRUNCATION_MAX_TERMS
    n_walkers: int = 600
    n_blocks: int = 600
    steps_per_block: int = 25
    dt: float = 0.005
    seeds: list[int] = field(default_factory=lambda: [0])
    equilibration: float = 0.1
    cholesky_tol: float = 1e-6
    overlap_backend: str = "exact"
    shadow_samples: int = 10_000
    shadow_batches: int = 10
    shadow_seed: int = 0
    shadow_frame: bool = False
    shadow_walkers: int = 4
    epsilons: list[float] = field(default_factory=lambda: [0.0, 1e-3, 1e-2, 1e-1])
    n_cs_list: list[int] = field(default_factory=list)
    out: str = "results"

    def validate(self) -> None:
        if (self.fcidump is None) == (self.fixture is None):
            raise ConfigError("set exactly one of [system] fcidump or fixture")
        if self.nc_strategy not in NC_STRATEGIES:
            raise ConfigError(f"nc_strategy must be one of {NC_STRATEGIES}")
        if self.overlap_backend not in ("exact", "shadows"):
            raise ConfigError("overlap_backend must be 'exact' or 'shadows'")
        if self.n_cs is not None and self.n_cs < 0:
            raise ConfigError("n_cs must be non-negative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(not 0 <= e < 1 for e in self.epsilons):
            raise ConfigError("epsilons must lie in [0, 1)")
        if self.max_loss < 0 or self.max_terms <= 0:
            raise ConfigError("truncation needs max_loss >= 0 and max_terms > 0")
        if self.shadow_samples % self.shadow_batches:
            raise ConfigError("shadow batches must divide shadow samples")
        try:
            self.afqmc_params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def afqmc_params(self) -> AFQMCParams:
        return AFQMCParams(n_walkers=self.n_walkers, n_blocks=self.n_blocks, steps_per_block=self.steps_per_block,
                           dt=self.dt, seed=self.seeds[0], equilibration=self.equilibration)


_INT_LIST = lambda s: [int(x) for x in s.replace(",", " ").split()]  # noqa: E731
_FLOAT_LIST = lambda s: [float(x) for x in s.replace(",", " ").split()]  # noqa: E731

# (section, key) -> (field, converter)
_KEYS = {
    ("system", "fcidump"): ("fcidump", str),
    ("system", "fixture"): ("fixture", str),
    ("csa", "n_cs"): ("n_cs", int),
    ("csa", "sweep"): ("sweep", "bool"),
    ("csa", "nc_strategy"): ("nc_strategy", str),
    ("csa", "max_weight"): ("max_weight", int),
    ("trial", "max_loss"): ("max_loss", float),
    ("trial", "max_terms"): ("max_terms", int),
    ("afqmc", "n_walkers"): ("n_walkers", int),
    ("afqmc", "n_blocks"): ("n_blocks", int),
    ("afqmc", "steps_per_block"): ("steps_per_block", int),
    ("afqmc", "dt"): ("dt", float),
    ("afqmc", "seeds"): ("seeds", _INT_LIST),
    ("afqmc", "equilibration"): ("equilibration", float),
    ("afqmc", "cholesky_tol"): ("cholesky_tol", float),
    ("afqmc", "overlap_backend"): ("overlap_backend", str),
    ("shadows", "n_samples"): ("shadow_samples", int),
    ("shadows", "n_batches"): ("shadow_batches", int),
    ("shadows", "seed"): ("shadow_seed", int),
    ("shadows", "use_frame"): ("shadow_frame", "bool"),
    ("shadows", "n_walkers"): ("shadow_walkers", int),
    ("noise", "epsilons"): ("epsilons", _FLOAT_LIST),
    ("noise", "n_cs_list"): ("n_cs_list", _INT_LIST),
    ("output", "dir"): ("out", str),
}


def load_config(path: str | Path) -> RunConfig:
    """Parse an INI run config; unknown keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    cfg = RunConfig()
    base = Path(path).resolve().parent
    for section in parser.sections():
        for key, raw in parser.items(section):
            if (section, key) not in _KEYS:
                raise ConfigError(f"unknown config key [{section}] {key}")
            name, conv = _KEYS[(section, key)]
            try:
                value = parser.getboolean(section, key) if conv == "bool" else conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
            setattr(cfg, name, value)
    if cfg.fcidump is not None and not Path(cfg.fcidump).is_absolute():
        cfg.fcidump = str(base / cfg.fcidump)
    return cfg


def _load_system(cfg: RunConfig):
    if cfg.fixture is not None:
        return load_fixture(cfg.fixture)
    with open(cfg.fcidump) as fh:
        return parse_fcidump(fh)


def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _manifest(cfg: RunConfig, command: str, argv, started: float) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "config": asdict(cfg),
        "seeds": cfg.seeds,
        "git_hash": _git_hash(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "workers": worker_count(),
        "elapsed_seconds": round(time.time() - started, 3),
    }


def _exact(h):
    if not fci_feasible(h):
        log.warning("FCI oracle infeasible at this size; exact columns omitted")
        return None
    return fci_ground_state(h)


# -- commands ----------------------------------------------------------------------

def cmd_csa(cfg: RunConfig, out: Path) -> dict:
    h = _load_system(cfg)
    prep = prepare(h, cfg.nc_strategy)
    fci = _exact(h)
    values = list(range(h.n_qubits + 1)) if cfg.sweep or cfg.n_cs is None else [cfg.n_cs]
    rows = csa_sweep(prep, values, fci=fci, max_weight=cfg.max_weight,
                     max_loss=cfg.max_loss, max_terms=cfg.max_terms)
    with open(out / "csa.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        header = ["n_cs", "e_nc", "e_c", "e_csa", "n_terms", "error"]
        if fci is not None:
            header[4:4] = ["e_fci", "abs_error", "overlap"]
        wr.writerow(header)
        for r in rows:
            line = [r.n_cs, f"{r.e_nc:.12f}", f"{r.e_c:.12f}", f"{r.e_csa:.12f}", r.n_terms, r.error or ""]
            if fci is not None:
                ov = "" if r.overlap is None else f"{r.overlap:.10f}"
                line[4:4] = [f"{fci.energy:.12f}", f"{abs(r.e_csa - fci.energy):.3e}", ov]
            wr.writerow(line)
    return {
        "e_hf": prep.ref.hf_energy,
        "e_fci": None if fci is None else fci.energy,
        "rows": [asdict(r) for r in rows],
    }


def _write_blocks(path: Path, estimates) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["seed", "block", "energy", "total_weight", "cap_events"])
        for seed, est in estimates.items():
            for i, (e, w, c) in enumerate(zip(est.block_means, est.total_weights, est.cap_events)):
                wr.writerow([seed, i, f"{e:.12f}", f"{w:.10g}", c])


def _afqmc_report(estimates, e_exact):
    summ = summarize(estimates, e_exact)
    per_seed = {str(s): {"mean": e.mean, "stderr": e.stderr, "n_blocks": e.n_blocks,
                         "n_equilibration": e.n_equilibration, "cap_events": int(sum(e.cap_events)),
                         "killed": e.killed} for s, e in estimates.items()}
    return {"per_seed": per_seed, "pooled_mean": summ.mean, "pooled_stderr": summ.stderr,
            "mse": summ.mse, "mae": summ.mae,
            "error": None if e_exact is None else summ.mean - e_exact}


def cmd_afqmc(cfg: RunConfig, out: Path) -> dict:
    if cfg.n_cs is None:
        raise ConfigError("afqmc needs [csa] n_cs")
    h = _load_system(cfg)
    prep = prepare(h, cfg.nc_strategy)
    sol = solve_csa(prep, cfg.n_cs, max_weight=cfg.max_weight)
    trial = make_trial(prep, sol, max_loss=cfg.max_loss, max_terms=cfg.max_terms)
    (out / "trial.json").write_text(trial.to_json() + "\n")
    (out / "frame.json").write_text(sol.frame.to_json() + "\n")
    chol = cholesky_factorize(h, cfg.cholesky_tol)
    fci = _exact(h)
    overlap_fn = None
    if cfg.overlap_backend == "shadows":
        from .shadows import ShadowEstimatorConfig, ShadowOverlap, collect_samples

        scfg = ShadowEstimatorConfig(n_samples=cfg.shadow_samples, n_batches=cfg.shadow_batches,
                                     seed=cfg.shadow_seed)
        overlap_fn = ShadowOverlap(collect_samples(trial, None, scfg), scfg)
    estimates = run_seeds(h, chol, trial, cfg.afqmc_params(), cfg.seeds, overlap_fn=overlap_fn)
    _write_blocks(out / "blocks.csv", estimates)
    report = _afqmc_report(estimates, None if fci is None else fci.energy)
    report.update({"n_cs": cfg.n_cs, "e_hf": prep.ref.hf_energy, "e_csa": sol.e_csa,
                   "e_fci": None if fci is None else fci.energy, "trial_terms": len(trial),
                   "n_cholesky": chol.n_factors, "overlap_backend": cfg.overlap_backend})
    return report


def cmd_noise_sweep(cfg: RunConfig, out: Path) -> dict:
    h = _load_system(cfg)
    n_cs_list = cfg.n_cs_list or ([cfg.n_cs] if cfg.n_cs is not None else [])
    if not n_cs_list:
        raise ConfigError("noise needs [noise] n_cs_list or [csa] n_cs")
    prep = prepare(h, cfg.nc_strategy)
    chol = cholesky_factorize(h, cfg.cholesky_tol)
    fci = _exact(h)
    e_exact = None if fci is None else fci.energy
    table = []
    all_blocks = {}
    for n_cs in n_cs_list:
        sol = solve_csa(prep, n_cs, max_weight=cfg.max_weight)
        base = make_trial(prep, sol, max_loss=cfg.max_loss, max_terms=cfg.max_terms)
        for eps in cfg.epsilons:
            trial = perturb_trial(base, eps)
            estimates = run_seeds(h, chol, trial, cfg.afqmc_params(), cfg.seeds)
            summ = summarize(estimates, e_exact)
            means = [e.mean for e in estimates.values()]
            spread = None
            if e_exact is not None and len(means) > 1:
                spread = float(np.std(np.abs(np.array(means) - e_exact), ddof=1) / np.sqrt(len(means)))
            table.append({"n_cs": n_cs, "epsilon": eps, "mae": summ.mae, "mae_stderr": spread,
                          "mean": summ.mean, "n_seeds": len(means)})
            for s, e in estimates.items():
                all_blocks[f"{n_cs}/{eps}/{s}"] = e
    with open(out / "noise.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n_cs", "epsilon", "mae", "mae_stderr", "mean", "n_seeds"])
        for r in table:
            wr.writerow([r["n_cs"], r["epsilon"], r["mae"], r["mae_stderr"], r["mean"], r["n_seeds"]])
    _write_blocks(out / "blocks.csv", all_blocks)
    return {"e_fci": e_exact, "table": table}


def cmd_shadows(cfg: RunConfig, out: Path) -> dict:
    from .shadows import ShadowEstimatorConfig, collect_samples, estimate_overlap, overlap_samples, save_samples

    if cfg.n_cs is None:
        raise ConfigError("shadows needs [csa] n_cs")
    h = _load_system(cfg)
    prep = prepare(h, cfg.nc_strategy)
    sol = solve_csa(prep, cfg.n_cs, max_weight=cfg.max_weight)
    trial = make_trial(prep, sol, max_loss=cfg.max_loss, max_terms=cfg.max_terms)
    scfg = ShadowEstimatorConfig(n_samples=cfg.shadow_samples, n_batches=cfg.shadow_batches,
                                 seed=cfg.shadow_seed)
    samples = collect_samples(trial, sol.frame if cfg.shadow_frame else None, scfg)
    save_samples(out / "samples.npz", samples)
    rng = np.random.Generator(np.random.Philox(cfg.shadow_seed + 1))
    walkers = [SlaterDeterminant.hartree_fock(h.n_spatial, h.n_alpha, h.n_beta)]
    walkers += [SlaterDeterminant.random(h.n_spatial, h.n_alpha, h.n_beta, rng)
                for _ in range(max(cfg.shadow_walkers - 1, 0))]
    rows = []
    for k, w in enumerate(walkers):
        vals = overlap_samples(samples, w, scfg)
        exact = np.conj(trial_overlap(trial, w))
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
        est = complex(vals.mean())
        rows.append({"walker": k, "estimate": est, "median_of_means": estimate_overlap(samples, w, scfg), "exact": complex(exact), "stderr": se,
                     "z": abs(est - exact) / se if se > 0 else None})
    return {"n_cs": cfg.n_cs, "use_frame": cfg.shadow_frame, "n_samples": len(samples), "walkers": rows}


COMMANDS = {"csa": cmd_csa, "afqmc": cmd_afqmc, "shadows": cmd_shadows, "noise": cmd_noise_sweep}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, ParticleSectorViolation):
        return EXIT_SECTOR
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, WeightCollapseError):
        return EXIT_COLLAPSE
    if isinstance(exc, (ConfigError, ValidationError, DimensionError, NotPSDError, UnsupportedFrameError)):
        return EXIT_VALIDATION
    return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csafqmc", description="Contextual-subspace AFQMC pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--n-cs", type=int, help="override [csa] n_cs")
    p.add_argument("--seed", type=int, action="append", help="override [afqmc] seeds (repeatable)")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.n_cs is not None:
            cfg.n_cs = args.n_cs
        if args.seed:
            cfg.seeds = args.seed
        if args.out:
            cfg.out = args.out
        cfg.validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, out)
    except (CSAFQMCError, OSError) as exc:
        code = exit_code(exc) if isinstance(exc, CSAFQMCError) else EXIT_ERROR
        print(f"csafqmc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    _write_json(out / "results.json", {"schema_version": RESULTS_SCHEMA, "command": args.command, **result})
    _write_json(out / "manifest.json", _manifest(cfg, args.command, argv, started))
    print(json.dumps({k: v for k, v in result.items() if not isinstance(v, (list, dict))},
                     default=_jsonable, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
