"""End-to-end orchestration: config parsing, the simulate / train / estimate /
evaluate pipeline, metrics, and artifact emission.

The run configuration is a single JSON file with units spelled out in the key
names (unit bugs are the dominant failure mode in vehicle-dynamics code), and
unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DEFAULT_EIG_FLOOR
from .exceptions import ConfigError
from .fusion import (
    METHOD_ENSEMBLE,
    METHOD_JACOBIAN,
    METHOD_KOOPMAN,
    ChannelConfig,
    MultiModelFilter,
)
from .koopman import KoopmanEstimator
from .predictors import PhysicsPredictor, RffRegressor, fit_rff_predictor
from .simulator import Scenario, SensorConfig, Trajectory, export_csv, sense, simulate_truth
from .vehicle import VehicleParams

STATE_LABELS = ("vx_mps", "vy_mps", "yaw_rate_rad_s")
REPORT_FORMAT_VERSION = 1

MODEL_KINDS = ("physics", "rff", "koopman")

# Per-section offsets applied to the master seed when a section does not pin
# its own; keeps independent streams deterministic under --seed overrides.
_SEED_OFFSETS = {"scenario": 1, "sensors": 2, "filter": 3, "rff": 4, "koopman": 5}


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


# ------------------------------------------------------------- config parsing


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str, required: bool = False) -> dict:
    value = cfg.get(name)
    if value is None:
        if required:
            raise ConfigError(f"config is missing the required '{name}' section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return value


def _take(d: dict, where: str, known: dict, required: tuple = ()):
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; known keys are {sorted(known)}")
    for key in required:
        if key not in d:
            raise ConfigError(f"{where}: missing required key '{key}'")
    out = {}
    for key, (conv, default) in known.items():
        if key in d:
            try:
                out[key] = conv(d[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: bad value for '{key}': {exc}") from exc
        else:
            out[key] = default
    return out


def _seed_for(section: dict, name: str, master: int) -> int:
    if "seed" in section and section["seed"] is not None:
        return int(section["seed"])
    return int(master) + _SEED_OFFSETS[name]


def parse_scenario(d: dict, master_seed: int, where: str = "scenario") -> Scenario:
    vals = _take(d, where, {
        "kind": (str, None),
        "duration_s": (float, 10.0),
        "dt_s": (float, 0.005),
        "speed_mps": (lambda v: None if v is None else float(v), 19.4),
        "steer_amplitude_rad": (float, 0.0),
        "steer_frequency_hz": (float, 0.5),
        "mu": (float, 1.0),
        "seed": (lambda v: None if v is None else int(v), None),
        "v0_mps": (lambda v: None if v is None else float(v), None),
    }, required=("kind",))
    try:
        return Scenario(
            kind=vals["kind"], duration=vals["duration_s"], dt=vals["dt_s"],
            speed=vals["speed_mps"], steer_amplitude=vals["steer_amplitude_rad"],
            steer_frequency=vals["steer_frequency_hz"], mu=vals["mu"],
            seed=_seed_for(d, "scenario", master_seed), v0=vals["v0_mps"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_sensors(d: dict, master_seed: int) -> SensorConfig:
    vals = _take(d, "sensors", {
        "sigma_vx_mps": (float, 0.1),
        "sigma_vy_mps": (float, 0.1),
        "sigma_yaw_rate_rad_s": (float, 0.01),
        "observe_vy": (bool, False),
        "dropout_prob": (float, 0.0),
        "seed": (lambda v: None if v is None else int(v), None),
    })
    try:
        return SensorConfig(
            sigma_vx=vals["sigma_vx_mps"], sigma_vy=vals["sigma_vy_mps"],
            sigma_yaw=vals["sigma_yaw_rate_rad_s"], observe_vy=vals["observe_vy"],
            dropout=vals["dropout_prob"], seed=_seed_for(d, "sensors", master_seed),
        )
    except ValueError as exc:
        raise ConfigError(f"sensors: {exc}") from exc


def parse_vehicle(d: dict) -> VehicleParams:
    vals = _take(d, "vehicle", {
        "mass_kg": (float, 2271.0),
        "yaw_inertia_kgm2": (float, 4600.0),
        "a_m": (float, 1.42),
        "b_m": (float, 1.43),
        "wheel_radius_m": (float, 0.347),
        "cornering_stiffness_n_rad": (float, 83700.0),
        "wheel_inertia_kgm2": (float, 1.7),
        "steering_ratio": (float, 18.0),
    })
    try:
        return VehicleParams(
            mass=vals["mass_kg"], yaw_inertia=vals["yaw_inertia_kgm2"], a=vals["a_m"],
            b=vals["b_m"], wheel_radius=vals["wheel_radius_m"],
            cornering_stiffness=vals["cornering_stiffness_n_rad"],
            wheel_inertia=vals["wheel_inertia_kgm2"], steering_ratio=vals["steering_ratio"],
        )
    except ValueError as exc:
        raise ConfigError(f"vehicle: {exc}") from exc


@dataclass
class ModelSpec:
    """One roster entry, as declared in the config."""

    name: str
    kind: str
    method: str
    process_noise_diag: np.ndarray | None
    sampling_cov_diag: np.ndarray | None
    ensemble_size: int
    model_file: str | None
    koopman_file: str | None
    blend_alpha: float
    adapt_noise: bool


def parse_models(entries, where: str = "models") -> list[ModelSpec]:
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{where}: at least one model entry is required")
    specs = []
    for i, entry in enumerate(entries):
        w = f"{where}[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{w}: model entry must be an object")
        vals = _take(entry, w, {
            "name": (str, None),
            "kind": (str, None),
            "method": (str, None),
            "process_noise_diag": (lambda v: np.asarray(v, dtype=float), None),
            "sampling_cov_diag": (lambda v: np.asarray(v, dtype=float), None),
            "ensemble_size": (int, 100),
            "model_file": (str, None),
            "koopman_file": (str, None),
            "blend_alpha": (float, 0.8),
            "adapt_noise": (bool, True),
        }, required=("name", "kind"))
        kind = vals["kind"]
        if kind not in MODEL_KINDS:
            raise ConfigError(f"{w}: unknown kind {kind!r}, expected one of {MODEL_KINDS}")
        method = vals["method"]
        if method is None:
            method = METHOD_JACOBIAN if kind == "physics" else METHOD_KOOPMAN
        allowed = {
            "physics": (METHOD_JACOBIAN, METHOD_ENSEMBLE),
            "rff": (METHOD_ENSEMBLE, METHOD_KOOPMAN),
            "koopman": (METHOD_KOOPMAN,),
        }[kind]
        if method not in allowed:
            raise ConfigError(f"{w}: kind {kind!r} supports methods {allowed}, got {method!r}")
        if method == METHOD_JACOBIAN and vals["process_noise_diag"] is None:
            raise ConfigError(f"{w}: jacobian method requires 'process_noise_diag'")
        if method == METHOD_ENSEMBLE and vals["sampling_cov_diag"] is None:
            raise ConfigError(f"{w}: ensemble method requires 'sampling_cov_diag'")
        if kind == "rff" and vals["model_file"] is None:
            raise ConfigError(f"{w}: rff models require 'model_file'")
        if method == METHOD_KOOPMAN and vals["koopman_file"] is None:
            raise ConfigError(f"{w}: koopman_linearization requires 'koopman_file'")
        specs.append(ModelSpec(
            name=vals["name"], kind=kind, method=method,
            process_noise_diag=vals["process_noise_diag"],
            sampling_cov_diag=vals["sampling_cov_diag"],
            ensemble_size=vals["ensemble_size"], model_file=vals["model_file"],
            koopman_file=vals["koopman_file"], blend_alpha=vals["blend_alpha"],
            adapt_noise=vals["adapt_noise"],
        ))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"{where}: duplicate model names {names}")
    return specs


@dataclass
class FusionSettings:
    window: int = 50
    rho: float = 0.98
    floor: float = DEFAULT_EIG_FLOOR
    innovation_correction: bool = True
    calibration_margin: float = 2.5
    seed: int = 3


def parse_fusion(d: dict, master_seed: int) -> FusionSettings:
    vals = _take(d, "fusion", {
        "window_steps": (int, 50),
        "forgetting_rho": (float, 0.98),
        "eig_floor": (float, DEFAULT_EIG_FLOOR),
        "innovation_correction": (bool, True),
        "calibration_margin": (float, 2.5),
        "seed": (lambda v: None if v is None else int(v), None),
    })
    return FusionSettings(
        window=vals["window_steps"], rho=vals["forgetting_rho"], floor=vals["eig_floor"],
        innovation_correction=vals["innovation_correction"],
        calibration_margin=vals["calibration_margin"],
        seed=_seed_for(d, "filter", master_seed),
    )


def parse_init(d: dict, scenario: Scenario):
    vals = _take(d, "init", {
        "x0": (lambda v: np.asarray(v, dtype=float), None),
        "p0_diag": (lambda v: np.asarray(v, dtype=float), np.array([0.25, 0.25, 0.01])),
    })
    x0 = vals["x0"]
    if x0 is None:
        x0 = np.array([scenario.initial_speed, 0.0, 0.0])
    p0 = np.diag(vals["p0_diag"])
    if p0.shape[0] != x0.size:
        raise ConfigError(f"init: p0_diag length {p0.shape[0]} does not match x0 length {x0.size}")
    return x0, p0


# ---------------------------------------------------------------- training


def parse_training_scenarios(cfg: dict, master_seed: int) -> list[Scenario]:
    training = _section(cfg, "training")
    entries = training.get("scenarios")
    if not entries:
        raise ConfigError("training: a non-empty 'scenarios' list is required for training")
    return [
        parse_scenario(entry, master_seed, where=f"training.scenarios[{i}]")
        for i, entry in enumerate(entries)
    ]


def training_trajectories(cfg: dict, master_seed: int, params: VehicleParams) -> list[Trajectory]:
    return [simulate_truth(sc, params) for sc in parse_training_scenarios(cfg, master_seed)]


def train_rff(cfg: dict, out_dir: Path, master_seed: int, params: VehicleParams) -> Path:
    training = _section(cfg, "training", required=True)
    opts = _take(_section(training, "rff"), "training.rff", {
        "n_features": (int, 256),
        "ridge": (float, 1e-6),
        "feature_scale": (float, 1.0),
        "seed": (lambda v: None if v is None else int(v), None),
    })
    trajs = training_trajectories(cfg, master_seed, params)
    model = fit_rff_predictor(
        trajs, n_features=opts["n_features"], ridge=opts["ridge"],
        feature_scale=opts["feature_scale"],
        seed=_seed_for(_section(training, "rff"), "rff", master_seed),
    )
    out = out_dir / "rff.npz"
    model.save(out)
    return out


def train_koopman(cfg: dict, out_dir: Path, master_seed: int, params: VehicleParams) -> Path:
    training = _section(cfg, "training", required=True)
    opts = _take(_section(training, "koopman"), "training.koopman", {
        "lifted_dim": (int, 64),
        "feature_scale": (float, 1.0),
        "lambda_a": (float, 1e-6),
        "lambda_b": (float, 1e-6),
        "lambda_h": (float, 1e-6),
        "lambda_c": (float, 0.0),
        "lambda_q": (float, 1e-9),
        "lambda_r": (float, 1e-9),
        "learn_output_map": (bool, False),
        "normalize_controls": (bool, True),
        "seed": (lambda v: None if v is None else int(v), None),
    })
    trajs = training_trajectories(cfg, master_seed, params)
    estimator = KoopmanEstimator(
        lifted_dim=opts["lifted_dim"], feature_scale=opts["feature_scale"],
        lam_a=opts["lambda_a"], lam_b=opts["lambda_b"], lam_h=opts["lambda_h"],
        lam_c=opts["lambda_c"], lam_q=opts["lambda_q"], lam_r=opts["lambda_r"],
        learn_output_map=opts["learn_output_map"],
        normalize_controls=opts["normalize_controls"],
        seed=_seed_for(_section(training, "koopman"), "koopman", master_seed),
    ).fit(trajs)
    out = out_dir / "koopman.npz"
    estimator.save(out)
    return out


# ------------------------------------------------------------ model building


def _resolve_model_file(name: str | None, out_dir: Path) -> Path | None:
    if name is None:
        return None
    path = Path(name)
    return path if path.is_absolute() else out_dir / path


def build_channels(specs: list[ModelSpec], cfg: dict, out_dir: Path, master_seed: int,
                   params: VehicleParams, dt: float, allow_training: bool = True):
    """Instantiate filter channels, training referenced model files if absent."""
    channels = []
    trained: dict[str, Path] = {}
    for spec in specs:
        predictor = None
        koop = None
        if spec.kind == "physics":
            predictor = PhysicsPredictor(params, dt)
        elif spec.kind == "rff":
            path = _resolve_model_file(spec.model_file, out_dir)
            if not path.exists():
                if allow_training and "training" in cfg and path.name == "rff.npz":
                    trained.setdefault("rff", train_rff(cfg, out_dir, master_seed, params))
                if not path.exists():
                    raise ConfigError(
                        f"model {spec.name!r}: trained predictor file {path} does not exist "
                        "(run train-rff or add a 'training' section)"
                    )
            predictor = RffRegressor.load(path)
        if spec.method == METHOD_KOOPMAN:
            path = _resolve_model_file(spec.koopman_file, out_dir)
            if not path.exists():
                if allow_training and "training" in cfg and path.name == "koopman.npz":
                    trained.setdefault("koopman", train_koopman(cfg, out_dir, master_seed, params))
                if not path.exists():
                    raise ConfigError(
                        f"model {spec.name!r}: trained lifted-model file {path} does not exist "
                        "(run train-koopman or add a 'training' section)"
                    )
            koop = KoopmanEstimator.load(path)
        channels.append(ChannelConfig(
            name=spec.name,
            method=spec.method,
            predictor=predictor,
            process_noise=None if spec.process_noise_diag is None else np.diag(spec.process_noise_diag),
            sampling_cov=None if spec.sampling_cov_diag is None else np.diag(spec.sampling_cov_diag),
            ensemble_size=spec.ensemble_size,
            koopman=koop,
            blend=spec.blend_alpha,
            adapt_noise=spec.adapt_noise,
        ))
    return channels


# ----------------------------------------------------------------- metrics


@dataclass
class EvaluationReport:
    """Accuracy and calibration metrics for one filtering run."""

    rmse: np.ndarray
    peak_abs_error: np.ndarray
    nees_mean: float
    avg_weights: dict
    steps: int
    dt: float
    state_labels: tuple = STATE_LABELS

    def lines(self) -> list[str]:
        out = [
            "# multi-model filter evaluation report",
            f"# format_version = {REPORT_FORMAT_VERSION}",
            f"# python = {sys.version.split()[0]}",
            f"# numpy = {np.__version__}",
            f"# platform = {platform.platform()}",
            f"steps = {self.steps}",
            f"dt_s = {_fmt(self.dt)}",
        ]
        for label, value in zip(self.state_labels, self.rmse):
            out.append(f"rmse_{label} = {_fmt(value)}")
        for label, value in zip(self.state_labels, self.peak_abs_error):
            out.append(f"peak_abs_{label} = {_fmt(value)}")
        out.append(f"nees_mean = {_fmt(self.nees_mean)}")
        out.append(f"nees_dim = {len(self.state_labels)}")
        for name, value in self.avg_weights.items():
            out.append(f"weight_avg_{name} = {_fmt(value)}")
        return out


def evaluate(truth_states, est_states, covariances, weights=None, model_names=(),
             dt: float = 0.0, state_labels: tuple = STATE_LABELS) -> EvaluationReport:
    """Per-state RMSE and peak error, mean NEES, and average fusion weights."""
    truth = np.atleast_2d(np.asarray(truth_states, dtype=float))
    est = np.atleast_2d(np.asarray(est_states, dtype=float))
    if truth.shape != est.shape:
        raise ValueError(f"truth shape {truth.shape} does not match estimate shape {est.shape}")
    covs = np.asarray(covariances, dtype=float)
    if covs.shape != (truth.shape[0], truth.shape[1], truth.shape[1]):
        raise ValueError(f"covariance stack shape {covs.shape} does not match states {truth.shape}")
    err = truth - est
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    peak = np.abs(err).max(axis=0) if err.size else np.zeros(truth.shape[1])
    sol = np.linalg.solve(covs, err[:, :, None])[:, :, 0]
    nees = float(np.mean(np.sum(err * sol, axis=1)))
    avg = {}
    if weights is not None and len(model_names):
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        for j, name in enumerate(model_names):
            avg[name] = float(W[:, j].mean()) if W.size else float("nan")
    return EvaluationReport(rmse=rmse, peak_abs_error=peak, nees_mean=nees,
                            avg_weights=avg, steps=truth.shape[0], dt=dt,
                            state_labels=tuple(state_labels[:truth.shape[1]]))


# ------------------------------------------------------------ run pipeline


@dataclass
class PipelineResult:
    report: EvaluationReport
    truth: Trajectory
    estimates: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    model_names: list
    files: dict


def _write_covariances(path: Path, times, covs) -> None:
    n = covs.shape[1]
    header = ["t"] + [f"P_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    lines = [",".join(header)]
    for t, P in zip(times, covs):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in P.ravel()]))
    path.write_text("\n".join(lines) + "\n")


def read_covariances(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a covariance trace written by the pipeline: returns (times, (T,n,n))."""
    from .exceptions import DataFormatError

    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("t,"):
        raise DataFormatError(f"{path}: line 1: expected covariance header 't,P_1_1,...'")
    ncols = len(lines[0].split(","))
    n = int(round((ncols - 1) ** 0.5))
    if 1 + n * n != ncols:
        raise DataFormatError(f"{path}: line 1: column count {ncols} is not 1 + n^2")
    times, covs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != ncols:
            raise DataFormatError(f"{path}: line {lineno}: expected {ncols} columns, found {len(cells)}")
        try:
            row = [float(c) for c in cells]
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: non-numeric cell ({exc})") from exc
        times.append(row[0])
        covs.append(np.array(row[1:]).reshape(n, n))
    return np.array(times), np.array(covs)


def _write_plot_data(out_dir: Path, times, truth, est, covs, labels) -> dict:
    files = {}
    for i, label in enumerate(labels):
        sigma = np.sqrt(covs[:, i, i])
        lines = ["t,truth,estimate,lo2sigma,hi2sigma"]
        for k in range(len(times)):
            lines.append(",".join([
                _fmt(times[k]), _fmt(truth[k, i]), _fmt(est[k, i]),
                _fmt(est[k, i] - 2.0 * sigma[k]), _fmt(est[k, i] + 2.0 * sigma[k]),
            ]))
        path = out_dir / f"plot_{label}.csv"
        path.write_text("\n".join(lines) + "\n")
        files[f"plot_{label}"] = path
    return files


def run_pipeline(cfg: dict, out_dir, roster=None, master_seed: int | None = None) -> PipelineResult:
    """Execute the full pipeline for one configuration.

    ``roster`` optionally restricts the model list by name (used by compare).
    Writes truth/estimate/covariance CSVs, per-state plot data, the metrics
    report, and wall-clock stats (the latter to a separate file so the report
    stays byte-reproducible).
    """
    t_start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    master = int(cfg.get("seed", 0)) if master_seed is None else int(master_seed)
    scenario = parse_scenario(_section(cfg, "scenario", required=True), master)
    sensors = parse_sensors(_section(cfg, "sensors"), master)
    params = parse_vehicle(_section(cfg, "vehicle"))
    specs = parse_models(cfg.get("models"))
    if roster is not None:
        roster = list(roster)
        unknown = set(roster) - {s.name for s in specs}
        if unknown:
            raise ConfigError(f"roster filter names unknown models: {sorted(unknown)}")
        specs = [s for s in specs if s.name in roster]
        if not specs:
            raise ConfigError("roster filter removed every model")
    fusion_cfg = parse_fusion(_section(cfg, "fusion"), master)
    x0, P0 = parse_init(_section(cfg, "init"), scenario)

    t_sim = time.perf_counter()
    truth = sense(simulate_truth(scenario, params), sensors)
    t_train = time.perf_counter()
    channels = build_channels(specs, cfg, out_dir, master, params, scenario.dt)
    t_filter = time.perf_counter()
    mmf = MultiModelFilter(
        channels, x0, P0, window=fusion_cfg.window, rho=fusion_cfg.rho,
        floor=fusion_cfg.floor, innovation_correction=fusion_cfg.innovation_correction,
        calibration_margin=fusion_cfg.calibration_margin, seed=fusion_cfg.seed,
    )
    means, covs, weights = mmf.run(truth.controls, truth.frames())
    t_eval = time.perf_counter()

    names = [s.name for s in specs]
    report = evaluate(truth.states, means, covs, weights=weights, model_names=names,
                      dt=scenario.dt)

    files = {}
    truth_path = out_dir / "truth.csv"
    export_csv(truth, truth_path)
    files["truth"] = truth_path
    est_traj = Trajectory(times=truth.times, states=means, controls=truth.controls)
    est_path = out_dir / "estimate.csv"
    export_csv(est_traj, est_path)
    files["estimate"] = est_path
    cov_path = out_dir / "covariances.csv"
    _write_covariances(cov_path, truth.times, covs)
    files["covariances"] = cov_path

    weights_path = out_dir / "weights.csv"
    wlines = ["t," + ",".join(names)]
    for k in range(weights.shape[0]):
        wlines.append(",".join([_fmt(truth.times[k + 1])] + [_fmt(v) for v in weights[k]]))
    weights_path.write_text("\n".join(wlines) + "\n")
    files["weights"] = weights_path

    report_path = out_dir / "report.txt"
    report_path.write_text("\n".join(report.lines()) + "\n")
    files["report"] = report_path
    files.update(_write_plot_data(out_dir, truth.times, truth.states, means, covs,
                                  report.state_labels))

    t_end = time.perf_counter()
    runtime_path = out_dir / "runtime.json"
    runtime_path.write_text(json.dumps({
        "simulate_s": t_train - t_sim,
        "train_s": t_filter - t_train,
        "filter_s": t_eval - t_filter,
        "evaluate_and_write_s": t_end - t_eval,
        "total_s": t_end - t_start,
        "steps": len(truth),
    }, indent=2) + "\n")
    files["runtime"] = runtime_path

    return PipelineResult(report=report, truth=truth, estimates=means, covariances=covs,
                          weights=weights, model_names=names, files=files)


def compare_models(cfg: dict, out_dir, roster=None, master_seed: int | None = None):
    """Run each single-model baseline and the fused roster on one scenario.

    Returns (table text, {run name: PipelineResult}). Every run replays the
    identical scenario and measurement stream.
    """
    out_dir = Path(out_dir)
    specs = parse_models(cfg.get("models"))
    names = [s.name for s in specs]
    if roster is not None:
        unknown = set(roster) - set(names)
        if unknown:
            raise ConfigError(f"--models names unknown models: {sorted(unknown)}")
        names = [n for n in names if n in roster]
        if not names:
            raise ConfigError("--models filter removed every model")

    results = {}
    for name in names:
        results[name] = run_pipeline(cfg, out_dir / f"single_{name}", roster=[name],
                                     master_seed=master_seed)
    if len(names) > 1:
        results["fused"] = run_pipeline(cfg, out_dir / "fused", roster=names,
                                        master_seed=master_seed)

    labels = results[names[0]].report.state_labels
    header = ["run"] + [f"rmse_{label}" for label in labels] + ["nees_mean"]
    widths = [max(24, len(header[0]))] + [22] * (len(header) - 1)
    rows = [" ".join(h.ljust(w) for h, w in zip(header, widths))]
    for name, result in results.items():
        cells = [name] + [f"{v:.6g}" for v in result.report.rmse] + [f"{result.report.nees_mean:.6g}"]
        rows.append(" ".join(c.ljust(w) for c, w in zip(cells, widths)))
    table = "\n".join(rows) + "\n"
    (out_dir / "compare_report.txt").write_text(table)
    return table, results
