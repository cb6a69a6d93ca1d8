"""Config-driven experiment runner, comparison reports, sweeps, validation.

A run resolves an :class:`ExperimentConfig` (from YAML or a preset), executes
the selected engines, and writes one CSV per engine plus raw state arrays,
an invariants log, and a manifest that fully reproduces the run (embedded
resolved config + hash + seeds + versions).  ``compare``, ``sweep`` and
``validate`` build on the same artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .analysis import pairwise_concurrence_series, single_qubit_benchmark, trace_distance
from .grids import TimeGrid
from .hierarchy import check_forbidden, init_hierarchy
from .kernels import BathKernel, OrnsteinUhlenbeckKernel, discretize_bath_modes
from .master import (
    RTableSeries,
    compute_r_tables,
    lindblad_propagate,
    propagate_master,
    propagate_rho,
)
from .noise import sample_noise_paths, verify_novikov
from .operators import QubitSystemSpec, named_state
from .oracles import PseudomodeConfig, finite_bath_evolve, pseudomode_evolve
from .qsd import compute_qsd_tables, propagate_batch, run_ensemble
from .reduced import ReducedHierarchy

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EngineSeries",
    "RunResult",
    "CompareReport",
    "SweepResult",
    "ValidationReport",
    "load_config",
    "preset_names",
    "preset_config",
    "cached_master_tables",
    "run_experiment",
    "compare_runs",
    "run_sweep",
    "validate_config",
]

ENGINES = ("master", "qsd", "pseudomode", "finite_bath", "lindblad")
SERIES = ("populations", "concurrence", "rho", "trace", "min_eigenvalue")
SWEEP_AXES = ("dt", "n_traj", "gamma", "K_modes")

_MANIFEST_NAME = "manifest.yaml"
_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved run description (see docs/config-schema in README)."""

    name: str
    spec: QubitSystemSpec
    gamma: float
    dt: float
    t_max: float
    initial_state: str | tuple
    engines: tuple[str, ...]
    n_traj: int = 1000
    master_seed: int = 2024
    fock_cutoff: int = 5
    n_modes: int = 120
    excitation_cap: int = 3
    series: tuple[str, ...] = ("populations", "concurrence", "trace", "min_eigenvalue")
    compare_tolerance: float = 1e-3
    use_cache: bool = True

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_t_max(self.dt, self.t_max)

    def kernel(self) -> OrnsteinUhlenbeckKernel:
        return OrnsteinUhlenbeckKernel(self.gamma)

    def initial_vector(self) -> np.ndarray:
        if isinstance(self.initial_state, str):
            return named_state(self.initial_state, self.spec.n_qubits)
        amp = np.array([complex(re, im) for re, im in self.initial_state])
        if amp.shape != (self.spec.dim,):
            raise ConfigError(
                "initial_state", f"needs {self.spec.dim} amplitudes, got {amp.size}"
            )
        norm = np.linalg.norm(amp)
        if norm < 1e-12:
            raise ConfigError("initial_state", "amplitudes are all zero")
        return amp / norm

    def initial_rho(self) -> np.ndarray:
        v = self.initial_vector()
        return np.outer(v, v.conj())

    def to_dict(self) -> dict:
        state = (
            self.initial_state
            if isinstance(self.initial_state, str)
            else [list(pair) for pair in self.initial_state]
        )
        return {
            "name": self.name,
            "system": {
                "n_qubits": self.spec.n_qubits,
                "omega": list(self.spec.omega),
                "j_xy": self.spec.j_xy,
                "kappa": list(self.spec.kappa),
            },
            "kernel": {"type": "ou", "gamma": self.gamma},
            "grid": {"dt": self.dt, "t_max": self.t_max},
            "initial_state": state,
            "engines": list(self.engines),
            "qsd": {"n_traj": self.n_traj, "master_seed": self.master_seed},
            "pseudomode": {"fock_cutoff": self.fock_cutoff},
            "finite_bath": {
                "n_modes": self.n_modes,
                "excitation_cap": self.excitation_cap,
            },
            "output": {"series": list(self.series), "cache": self.use_cache},
            "tolerances": {"compare_trace_distance": self.compare_tolerance},
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def _require(mapping, path, known: dict):
    """Validate one mapping level: unknown keys are errors with field paths."""
    if not isinstance(mapping, dict):
        raise ConfigError(path, f"expected a mapping, got {type(mapping).__name__}")
    for key in mapping:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    out = {}
    for key, (required, default) in known.items():
        if key in mapping:
            out[key] = mapping[key]
        elif required:
            raise ConfigError(f"{path}.{key}" if path else str(key), "missing")
        else:
            out[key] = default
    return out


def _as_number(value, path, kind=float):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a number, got {value!r}") from None


def load_config(source) -> ExperimentConfig:
    """Build a config from a YAML path, YAML text, or a plain dict."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source) as f:
            data = yaml.safe_load(f)
    elif isinstance(source, str):
        data = yaml.safe_load(source)
    else:
        data = source
    if not isinstance(data, dict):
        raise ConfigError("", "config root must be a mapping")

    top = _require(
        data,
        "",
        {
            "name": (False, "run"),
            "system": (True, None),
            "kernel": (True, None),
            "grid": (True, None),
            "initial_state": (True, None),
            "engines": (True, None),
            "qsd": (False, {}),
            "pseudomode": (False, {}),
            "finite_bath": (False, {}),
            "output": (False, {}),
            "tolerances": (False, {}),
        },
    )

    sys_d = _require(
        top["system"],
        "system",
        {
            "n_qubits": (True, None),
            "omega": (True, None),
            "j_xy": (False, 0.0),
            "kappa": (False, None),
        },
    )
    try:
        spec = QubitSystemSpec(
            n_qubits=_as_number(sys_d["n_qubits"], "system.n_qubits", int),
            omega=tuple(sys_d["omega"]),
            j_xy=_as_number(sys_d["j_xy"], "system.j_xy"),
            kappa=tuple(sys_d["kappa"]) if sys_d["kappa"] is not None else (),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError("system", str(exc)) from None

    ker_d = _require(
        top["kernel"], "kernel", {"type": (False, "ou"), "gamma": (True, None)}
    )
    if ker_d["type"] != "ou":
        raise ConfigError("kernel.type", f"unsupported kernel type {ker_d['type']!r}")
    gamma = _as_number(ker_d["gamma"], "kernel.gamma")
    if gamma <= 0:
        raise ConfigError("kernel.gamma", "must be positive")

    grid_d = _require(top["grid"], "grid", {"dt": (True, None), "t_max": (True, None)})
    dt = _as_number(grid_d["dt"], "grid.dt")
    t_max = _as_number(grid_d["t_max"], "grid.t_max")
    if dt <= 0 or t_max <= 0:
        raise ConfigError("grid", "dt and t_max must be positive")

    state = top["initial_state"]
    if isinstance(state, str):
        initial = state
    elif isinstance(state, (list, tuple)):
        try:
            initial = tuple(
                (float(p[0]), float(p[1])) for p in state
            )
        except (TypeError, ValueError, IndexError):
            raise ConfigError(
                "initial_state", "amplitude list entries must be [re, im] pairs"
            ) from None
    else:
        raise ConfigError("initial_state", "must be a preset name or amplitude list")

    engines = top["engines"]
    if not isinstance(engines, (list, tuple)) or not engines:
        raise ConfigError("engines", "must be a nonempty list")
    for e in engines:
        if e not in ENGINES:
            raise ConfigError("engines", f"unknown engine {e!r}; choose from {ENGINES}")

    qsd_d = _require(
        top["qsd"], "qsd", {"n_traj": (False, 1000), "master_seed": (False, 2024)}
    )
    pm_d = _require(top["pseudomode"], "pseudomode", {"fock_cutoff": (False, 5)})
    fb_d = _require(
        top["finite_bath"],
        "finite_bath",
        {"n_modes": (False, 120), "excitation_cap": (False, 3)},
    )
    out_d = _require(
        top["output"], "output", {"series": (False, None), "cache": (False, True)}
    )
    series = out_d["series"]
    if series is None:
        series = ["populations", "concurrence", "trace", "min_eigenvalue"]
    for s in series:
        if s not in SERIES:
            raise ConfigError("output.series", f"unknown series {s!r}")
    tol_d = _require(
        top["tolerances"], "tolerances", {"compare_trace_distance": (False, 1e-3)}
    )

    cfg = ExperimentConfig(
        name=str(top["name"]),
        spec=spec,
        gamma=gamma,
        dt=dt,
        t_max=t_max,
        initial_state=initial,
        engines=tuple(engines),
        n_traj=_as_number(qsd_d["n_traj"], "qsd.n_traj", int),
        master_seed=_as_number(qsd_d["master_seed"], "qsd.master_seed", int),
        fock_cutoff=_as_number(pm_d["fock_cutoff"], "pseudomode.fock_cutoff", int),
        n_modes=_as_number(fb_d["n_modes"], "finite_bath.n_modes", int),
        excitation_cap=_as_number(
            fb_d["excitation_cap"], "finite_bath.excitation_cap", int
        ),
        series=tuple(series),
        compare_tolerance=_as_number(
            tol_d["compare_trace_distance"], "tolerances.compare_trace_distance"
        ),
        use_cache=bool(out_d["cache"]),
    )
    cfg.initial_vector()  # fail fast on bad presets / amplitude lists
    return cfg


# -- presets -----------------------------------------------------------------

_PRESET_STATES = {
    "fig1a": ("111", 0.4),
    "fig1b": ("ghz", 0.4),
    "fig1c": ("w", 0.4),
    "fig1d": ("wbar", 0.4),
    "fig2a": ("bell00", 0.4),
    "fig2b": ("bell00", 1.5),
    "fig2c": ("bell01", 0.4),
    "fig2d": ("bell01", 1.5),
}


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESET_STATES)


def preset_config(
    name: str,
    gamma: float | None = None,
    dt: float = 0.01,
    t_max: float = 10.0,
    engines=("master",),
) -> ExperimentConfig:
    """Three-qubit figure scenario; defaults omega=1, kappa=1, J_xy=0."""
    if name not in _PRESET_STATES:
        raise ConfigError("preset", f"unknown preset {name!r}; see preset_names()")
    state, default_gamma = _PRESET_STATES[name]
    return load_config(
        {
            "name": name,
            "system": {"n_qubits": 3, "omega": [1.0, 1.0, 1.0]},
            "kernel": {"gamma": gamma if gamma is not None else default_gamma},
            "grid": {"dt": dt, "t_max": t_max},
            "initial_state": state,
            "engines": list(engines),
        }
    )


# -- master-table disk cache -------------------------------------------------

def _cache_dir() -> Path:
    env = os.environ.get("NMQSD_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "nmqsd"


def cached_master_tables(
    spec: QubitSystemSpec,
    kernel: OrnsteinUhlenbeckKernel,
    grid: TimeGrid,
    symmetry: str = "auto",
    cache_dir: Path | None = None,
) -> RTableSeries:
    """R(t) coefficient tables, reusing a disk cache across processes.

    The expensive part of a master run is the field propagation producing
    the tables; the tables themselves are tiny, so they are stored keyed by
    a hash of everything that determines them.
    """
    key = json.dumps(
        {
            "v": _SCHEMA_VERSION,
            "n": spec.n_qubits,
            "omega": list(spec.omega),
            "j": spec.j_xy,
            "kappa": list(spec.kappa),
            "gamma": kernel.gamma,
            "dt": grid.dt,
            "n_t": grid.n_t,
            "symmetry": symmetry,
        },
        sort_keys=True,
    )
    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    cache_dir = _cache_dir() if cache_dir is None else Path(cache_dir)
    path = cache_dir / f"rtables-{digest}.npz"
    if path.exists():
        with np.load(path) as data:
            return RTableSeries(
                spec=spec,
                grid=grid,
                symmetric_storage=bool(data["symmetric"]),
                obar0=data["obar0"],
                g=data["g"],
                jw=data["jw"],
            )
    fields = ReducedHierarchy(spec, grid, kernel, symmetry=symmetry)
    tables = compute_r_tables(fields)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez_compressed(
        tmp,
        symmetric=np.array(tables.symmetric_storage),
        obar0=tables.obar0,
        g=tables.g,
        jw=tables.jw,
    )
    tmp.replace(path)
    return tables


# -- engine execution --------------------------------------------------------

@dataclass(frozen=True)
class EngineSeries:
    """One engine's density-matrix series plus its invariant log."""

    engine: str
    grid: TimeGrid
    states: np.ndarray  # (n_t, dim, dim)
    invariants: dict


@dataclass(frozen=True)
class RunResult:
    config: ExperimentConfig
    out_dir: Path
    engines: dict  # name -> EngineSeries
    manifest: dict


def _run_engine(config: ExperimentConfig, engine: str) -> EngineSeries:
    spec, grid, kernel = config.spec, config.grid, config.kernel()
    rho0 = config.initial_rho()
    if engine == "master":
        if config.use_cache:
            tables = cached_master_tables(spec, kernel, grid)
            res = propagate_rho(tables, rho0)
        else:
            res = propagate_master(spec, kernel, rho0, grid)
        inv = {
            "trace_drift_max": res.trace_drift_max,
            "hermiticity_defect_max": res.hermiticity_defect_max,
            "min_eigenvalue": res.min_eigenvalue,
        }
        return EngineSeries(engine, grid, res.states, inv)
    if engine == "lindblad":
        res = lindblad_propagate(spec, rho0, grid)
        inv = {
            "trace_drift_max": res.trace_drift_max,
            "hermiticity_defect_max": res.hermiticity_defect_max,
            "min_eigenvalue": res.min_eigenvalue,
        }
        return EngineSeries(engine, grid, res.states, inv)
    if engine == "pseudomode":
        cfg = PseudomodeConfig.for_ou(
            config.gamma, spec.n_qubits, fock_cutoff=config.fock_cutoff
        )
        res = pseudomode_evolve(spec, config.gamma, rho0, grid, cfg=cfg)
        inv = {
            "trace_drift_max": res.trace_drift_max,
            "hermiticity_defect_max": res.hermiticity_defect_max,
            "min_eigenvalue": res.min_eigenvalue,
            "truncation_error": res.truncation_error,
        }
        return EngineSeries(engine, grid, res.states, inv)
    if engine == "finite_bath":
        modes = discretize_bath_modes(kernel, config.n_modes)
        res = finite_bath_evolve(
            spec, modes, config.initial_vector(), grid, cap=config.excitation_cap
        )
        inv = {
            "trace_drift_max": res.trace_drift_max,
            "hermiticity_defect_max": res.hermiticity_defect_max,
            "min_eigenvalue": res.min_eigenvalue,
            "excitation_drift": res.excitation_drift,
            "joint_dimension": res.joint_dimension,
            "mode_reconstruction_error": modes.reconstruction_error,
        }
        return EngineSeries(engine, grid, res.states, inv)
    if engine == "qsd":
        res = run_ensemble(
            spec,
            kernel,
            config.initial_vector(),
            grid,
            n_traj=config.n_traj,
            master_seed=config.master_seed,
        )
        inv = {
            "n_trajectories": res.n_trajectories,
            "exploded_trajectories": len(res.exploded_trajectories),
            "max_standard_error": float(res.standard_errors.max()),
            "max_trace_deviation": float(
                np.abs(np.real(np.trace(res.states, axis1=1, axis2=2)) - 1.0).max()
            ),
        }
        return EngineSeries(engine, grid, res.states, inv)
    raise ConfigError("engines", f"unknown engine {engine!r}")


def _concurrence_pairs(n_qubits: int):
    return tuple(
        (i, j) for i in range(1, n_qubits + 1) for j in range(i + 1, n_qubits + 1)
    )


def _csv_header(config: ExperimentConfig) -> list[str]:
    dim = config.spec.dim
    cols = ["t"]
    if "populations" in config.series:
        cols += [f"pop_{i}" for i in range(dim)]
    if "concurrence" in config.series and config.spec.n_qubits >= 2:
        cols += [f"c{i}{j}" for i, j in _concurrence_pairs(config.spec.n_qubits)]
    if "rho" in config.series:
        for i in range(dim):
            for j in range(dim):
                cols += [f"rho_{i}{j}_re", f"rho_{i}{j}_im"]
    if "trace" in config.series:
        cols.append("trace")
    if "min_eigenvalue" in config.series:
        cols.append("min_eigenvalue")
    return cols


def _series_table(config: ExperimentConfig, series: EngineSeries) -> np.ndarray:
    grid = series.grid
    states = series.states
    cols = [grid.times]
    if "populations" in config.series:
        pops = np.real(np.einsum("tii->ti", states))
        cols += [pops[:, i] for i in range(config.spec.dim)]
    if "concurrence" in config.series and config.spec.n_qubits >= 2:
        pairs = _concurrence_pairs(config.spec.n_qubits)
        if config.spec.n_qubits == 2:
            conc = pairwise_concurrence_series(states, grid.times, pairs=[(1, 2)])
        else:
            conc = pairwise_concurrence_series(states, grid.times, pairs=pairs)
        cols += [c.values for c in conc]
    if "rho" in config.series:
        for i in range(config.spec.dim):
            for j in range(config.spec.dim):
                cols += [np.real(states[:, i, j]), np.imag(states[:, i, j])]
    if "trace" in config.series:
        cols.append(np.real(np.trace(states, axis1=1, axis2=2)))
    if "min_eigenvalue" in config.series:
        sym = 0.5 * (states + states.conj().transpose(0, 2, 1))
        cols.append(np.linalg.eigvalsh(sym)[:, 0])
    return np.column_stack(cols)


def _write_csv(path: Path, header: list[str], table: np.ndarray) -> None:
    np.savetxt(
        path, table, delimiter=",", header=",".join(header), comments="", fmt="%.12g"
    )


def _versions() -> dict:
    import scipy

    from importlib.metadata import version as pkg_version

    try:
        own = pkg_version("nmqsd")
    except Exception:
        own = "unknown"
    return {
        "nmqsd": own,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def run_experiment(
    config: ExperimentConfig, out_dir, workers: int = 1
) -> RunResult:
    """Execute every configured engine and write the artifact directory.

    Engine failures are re-raised after writing ``error.txt`` so callers can
    map them to the numerical-failure exit code.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _csv_header(config)

    results: dict[str, EngineSeries] = {}
    files = []
    try:
        if workers > 1 and len(config.engines) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {e: pool.submit(_run_engine, config, e) for e in config.engines}
                results = {e: f.result() for e, f in futures.items()}
        else:
            for engine in config.engines:
                results[engine] = _run_engine(config, engine)
    except Exception as exc:
        (out_dir / "error.txt").write_text(
            f"engine failure: {type(exc).__name__}: {exc}\n"
        )
        raise

    for engine, series in results.items():
        csv_path = out_dir / f"{engine}.csv"
        _write_csv(csv_path, header, _series_table(config, series))
        npy_path = out_dir / f"{engine}_states.npy"
        np.save(npy_path, series.states)
        files += [csv_path.name, npy_path.name]

    invariants = {e: s.invariants for e, s in results.items()}
    with open(out_dir / "invariants.yaml", "w") as f:
        yaml.safe_dump(_plain(invariants), f, sort_keys=True)
    files.append("invariants.yaml")

    manifest = {
        "schema_version": _SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": {"master_seed": config.master_seed},
        "versions": _versions(),
        "engines": list(config.engines),
        "files": sorted(files),
    }
    with open(out_dir / _MANIFEST_NAME, "w") as f:
        yaml.safe_dump(_plain(manifest), f, sort_keys=True)
    return RunResult(config=config, out_dir=out_dir, engines=results, manifest=manifest)


def _plain(obj):
    """YAML-safe structure: numpy scalars/arrays to native types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_run(run_dir) -> RunResult:
    run_dir = Path(run_dir)
    with open(run_dir / _MANIFEST_NAME) as f:
        manifest = yaml.safe_load(f)
    config = load_config(manifest["config"])
    engines = {}
    for engine in manifest["engines"]:
        states = np.load(run_dir / f"{engine}_states.npy")
        engines[engine] = EngineSeries(engine, config.grid, states, {})
    return RunResult(config=config, out_dir=run_dir, engines=engines, manifest=manifest)


# -- compare -----------------------------------------------------------------

@dataclass(frozen=True)
class CompareReport:
    engine_a: str
    engine_b: str
    times: np.ndarray
    distances: np.ndarray
    max_distance: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_distance <= self.tolerance


def compare_runs(
    run_a,
    run_b,
    engine_a: str | None = None,
    engine_b: str | None = None,
    tolerance: float | None = None,
    out_path=None,
) -> CompareReport:
    """Per-time trace distance between one engine series of each run.

    Accepts RunResult objects or artifact directories; grids and system
    specs must match.
    """
    a = run_a if isinstance(run_a, RunResult) else load_run(run_a)
    b = run_b if isinstance(run_b, RunResult) else load_run(run_b)
    ga, gb = a.config.grid, b.config.grid
    if ga.n_t != gb.n_t or abs(ga.dt - gb.dt) > 1e-12:
        raise ValueError(f"grid mismatch: {ga} vs {gb}")
    if a.config.spec != b.config.spec:
        raise ValueError("system spec mismatch between runs")
    engine_a = engine_a or next(iter(a.engines))
    engine_b = engine_b or next(iter(b.engines))
    if engine_a not in a.engines or engine_b not in b.engines:
        raise ValueError(f"requested engines not present: {engine_a}, {engine_b}")
    sa, sb = a.engines[engine_a].states, b.engines[engine_b].states
    distances = np.array([trace_distance(x, y) for x, y in zip(sa, sb)])
    if tolerance is None:
        tolerance = a.config.compare_tolerance
    report = CompareReport(
        engine_a=engine_a,
        engine_b=engine_b,
        times=ga.times,
        distances=distances,
        max_distance=float(distances.max()),
        tolerance=float(tolerance),
    )
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(
            out_path,
            ["t", "trace_distance"],
            np.column_stack([report.times, report.distances]),
        )
    return report


# -- sweep -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    axis: str
    values: tuple
    metrics: tuple
    observed_order: float | None  # dt axis: error ratio exponent
    fitted_slope: float | None  # n_traj axis: log-log slope
    monotone_decreasing: bool

    def table(self) -> np.ndarray:
        return np.column_stack([np.asarray(self.values, float), self.metrics])


def _sweep_metric(config: ExperimentConfig, axis: str, value) -> float:
    spec, kernel = config.spec, config.kernel()
    rho0 = config.initial_rho()
    if axis == "dt":
        grid = TimeGrid.from_t_max(float(value), config.t_max)
        res = propagate_master(spec, kernel, rho0, grid)
        if spec.n_qubits != 1:
            raise ConfigError(
                "sweep", "dt sweeps benchmark against the single-qubit solution; "
                "use n_qubits=1"
            )
        bench = single_qubit_benchmark(
            config.gamma, spec.omega[0], grid, kappa=spec.kappa[0],
            rho_11_0=float(np.real(rho0[1, 1])),
        )
        return float(np.abs(np.real(res.states[:, 1, 1]) - bench).max())
    grid = config.grid
    if axis == "n_traj":
        master = propagate_master(spec, kernel, rho0, grid)
        res = run_ensemble(
            spec, kernel, config.initial_vector(), grid,
            n_traj=int(value), master_seed=config.master_seed,
        )
        return max(trace_distance(x, y) for x, y in zip(res.states, master.states))
    if axis == "gamma":
        k = OrnsteinUhlenbeckKernel(float(value))
        res = propagate_master(spec, k, rho0, grid)
        lind = lindblad_propagate(spec, rho0, grid)
        return max(trace_distance(x, y) for x, y in zip(res.states, lind.states))
    if axis == "K_modes":
        pm = pseudomode_evolve(
            spec, config.gamma, rho0, grid,
            cfg=PseudomodeConfig.for_ou(
                config.gamma, spec.n_qubits, fock_cutoff=config.fock_cutoff
            ),
        )
        modes = discretize_bath_modes(kernel, int(value), error_threshold=1.0)
        fb = finite_bath_evolve(
            spec, modes, config.initial_vector(), grid, cap=config.excitation_cap
        )
        return max(trace_distance(x, y) for x, y in zip(fb.states, pm.states))
    raise ConfigError("sweep.axis", f"unknown axis {axis!r}; choose from {SWEEP_AXES}")


def run_sweep(
    config: ExperimentConfig, axis: str, values, out_dir=None, workers: int = 1
) -> SweepResult:
    """One run per value; emits the monitored metric and convergence info."""
    values = list(values)
    if len(values) < 2:
        raise ConfigError("sweep.values", "need at least 2 values")
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"unknown axis {axis!r}; choose from {SWEEP_AXES}")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            metrics = list(pool.map(lambda v: _sweep_metric(config, axis, v), values))
    else:
        metrics = [_sweep_metric(config, axis, v) for v in values]

    observed_order = None
    fitted_slope = None
    vals = np.asarray(values, dtype=float)
    mets = np.asarray(metrics, dtype=float)
    if axis == "dt":
        orders = np.log(mets[:-1] / mets[1:]) / np.log(vals[:-1] / vals[1:])
        observed_order = float(orders.mean())
    if axis == "n_traj":
        fitted_slope = float(np.polyfit(np.log10(vals), np.log10(mets), 1)[0])
    monotone = bool(np.all(np.diff(mets) < 0))

    result = SweepResult(
        axis=axis,
        values=tuple(values),
        metrics=tuple(float(m) for m in metrics),
        observed_order=observed_order,
        fitted_slope=fitted_slope,
        monotone_decreasing=monotone,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "sweep.csv", [axis, "metric"], result.table())
        with open(out_dir / "sweep.yaml", "w") as f:
            yaml.safe_dump(
                _plain(
                    {
                        "axis": axis,
                        "values": list(values),
                        "metrics": list(result.metrics),
                        "observed_order": observed_order,
                        "fitted_slope": fitted_slope,
                        "monotone_decreasing": monotone,
                        "config_hash": config.config_hash(),
                    }
                ),
                f,
                sort_keys=True,
            )
    return result


# -- validate ----------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    checks: dict  # name -> {"value": float | None, "tolerance": float, "passed": bool, "note": str}

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())


def validate_config(
    config: ExperimentConfig,
    perturbation: float = 0.0,
    n_traj_novikov: int = 2000,
    out_path=None,
) -> ValidationReport:
    """Forbidden products, grading leakage, Novikov residual, conservation.

    The structural checks run a dense-storage hierarchy on a coarse grid (the
    graded storage enforces the support by construction, so only dense mode
    measures anything).  ``perturbation`` injects a grading-violating error
    as a negative-control hook.
    """
    spec = config.spec
    kernel = config.kernel()
    checks: dict[str, dict] = {}

    # coarse dense-storage grid: the order-2 field is (n_t)^3 x dim^2
    n_t = min(41, config.grid.n_t)
    coarse = TimeGrid(dt=max(config.dt, 0.1), n_t=n_t)
    dense = init_hierarchy(spec, coarse, kernel, storage="dense")
    dense.propagate_to(coarse.n_t - 1)
    if perturbation:
        # negative-control hook: corrupt the stored order-0 field so both the
        # grading and forbidden-product measurements see a genuine violation
        dense.fields[0] += perturbation
    forbidden = check_forbidden(dense, perturbation=perturbation)
    if forbidden.applicable:
        checks["forbidden_products"] = {
            "value": forbidden.max_residual(),
            "tolerance": 1e-10,
            "passed": forbidden.passes(1e-10),
            "note": str({k: float(f"{v:.3e}") for k, v in forbidden.residuals.items()}),
        }
    else:
        checks["forbidden_products"] = {
            "value": None,
            "tolerance": 1e-10,
            "passed": True,
            "note": "not applicable for this register size",
        }
    grading = dense.grading_defect()
    checks["grading_leakage"] = {
        "value": float(grading),
        "tolerance": 1e-12,
        "passed": grading <= 1e-12,
        "note": "max weight outside graded supports (dense storage)",
    }

    # Novikov identity along QSD trajectories
    nov_grid = TimeGrid.from_t_max(max(config.dt, 0.05), min(config.t_max, 3.0))
    h = init_hierarchy(spec, nov_grid, kernel)
    tables = compute_qsd_tables(h)
    z = sample_noise_paths(kernel, nov_grid, config.master_seed, n_traj_novikov)
    psi_t = propagate_batch(tables, config.initial_vector(), z)
    s_probe = round(nov_grid.n_t / 3) * nov_grid.dt  # snap t/3 to a grid node
    report = verify_novikov(z, psi_t, h, kernel, s=s_probe, t=nov_grid.t_max)
    checks["novikov_sigma"] = {
        "value": float(report.sigma_level),
        "tolerance": 5.0,
        "passed": report.consistent_with_zero,
        "note": f"residual {report.residual_max:.3e} over {report.n_trajectories} paths",
    }

    # conservation on the configured master run
    res = propagate_master(spec, kernel, config.initial_rho(), config.grid)
    checks["trace_conservation"] = {
        "value": float(res.trace_drift_max),
        "tolerance": 1e-8,
        "passed": res.trace_drift_max <= 1e-8,
        "note": "max |tr rho - 1| over the run",
    }
    checks["hermiticity"] = {
        "value": float(res.hermiticity_defect_max),
        "tolerance": 1e-10,
        "passed": res.hermiticity_defect_max <= 1e-10,
        "note": "max entry of |rho - rho^+|",
    }
    checks["positivity"] = {
        "value": float(res.min_eigenvalue),
        "tolerance": -1e-6,
        "passed": res.min_eigenvalue >= -1e-6,
        "note": "min eigenvalue across the run (lower bound)",
    }

    out = ValidationReport(checks=checks)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as f:
            yaml.safe_dump(
                _plain({"passed": out.passed, "checks": checks}), f, sort_keys=True
            )
    return out
