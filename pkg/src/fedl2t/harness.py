"""Experiment orchestration: configs, comparisons, sweeps, export, checkpoints.

A run is fully determined by (config, seed): data generation, model
initialization, batch order and the queue draws all derive from the seed, so
re-running a cell reproduces its metrics files byte for byte. Checkpoints
persist parameters, private datasets, every RNG stream position and the
metrics accumulated so far, which makes resume-then-finish equal to an
uninterrupted run.
"""
from __future__ import annotations

import configparser
import io
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .data import DataConfig, SampleBatch, generate
from .errors import CheckpointError, ConfigError, FedL2TError
from .federation import (
    ALGORITHMS,
    AlgorithmRun,
    ClientState,
    GlobalState,
    HyperParams,
    ModelSpec,
    build_clients,
    normalize_algorithm,
    run_algorithm,
)
from .nn import ModelParams
from .seeding import rng_from_state, rng_state

CHECKPOINT_VERSION = 1

CURVE_HEADER = "algorithm,seed,round,client,acc,task_loss,kl_loss,feat_loss,prox_loss"
SUMMARY_HEADER = "algorithm,final_acc_mean,final_acc_std"

# row: (algorithm, seed, round, client, acc, task_loss, kl_loss, feat_loss, prox_loss)
CurveRow = tuple[str, int, int, int, float, float, float, float, float]


@dataclass
class ExperimentConfig:
    """One comparison: data settings, architecture, training settings, run plan."""

    data: DataConfig
    model: ModelSpec
    hyper: HyperParams
    algorithms: list[str]
    seeds: list[int]
    output_dir: str = "results"

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("run.algorithms must not be empty")
        if not self.seeds:
            raise ConfigError("run.seeds must not be empty")
        self.algorithms = [normalize_algorithm(a) for a in self.algorithms]
        if self.model.input_dim != self.data.n_features:
            raise ConfigError(
                f"model.input_dim ({self.model.input_dim}) must equal "
                f"data.n_features ({self.data.n_features})"
            )


@dataclass
class ExperimentResult:
    """Curve rows plus the final run objects, keyed by (algorithm, seed)."""

    config: ExperimentConfig
    rows: list[CurveRow]
    runs: dict[tuple[str, int], AlgorithmRun]

    def summary(self) -> list[tuple[str, float, float]]:
        """Per-algorithm mean and std of final-round accuracy across seeds and clients."""
        final = self.config.hyper.rounds
        out = []
        for algo in self.config.algorithms:
            accs = [r[4] for r in self.rows if r[0] == algo and r[2] == final]
            out.append((algo, float(np.mean(accs)), float(np.std(accs))))
        return out


# ---------------------------------------------------------------------------
# configuration files (INI sections: data / model / hyper / run)
# ---------------------------------------------------------------------------

_DESK_MODEL_HIDDEN = (32,)

_SCHEMA = {
    "data": {
        "n_clients": int,
        "n_per_client": int,
        "n_features": int,
        "heterogeneity": float,
        "class_sep": float,
        "test_fraction": float,
        "label_ratio": float,
    },
    "model": {"hidden": "int_list", "feature_dim": int},
    "hyper": {
        "eta": float,
        "mu": float,
        "lambda_c": float,
        "rounds": int,
        "local_epochs": int,
        "batch_size": int,
        "fml_weight": float,
    },
    "run": {"algorithms": "str_list", "seeds": "int_list", "output_dir": str},
}


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == "str_list":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse value '{raw}'") from exc


def _read_config_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    values: dict[str, dict] = {s: {} for s in _SCHEMA}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section '[{section}]'")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            values[section][key] = _parse_value(section, key, raw, _SCHEMA[section][key])

    data = DataConfig(**values["data"])
    hidden = tuple(values["model"].get("hidden", _DESK_MODEL_HIDDEN))
    feature_dim = values["model"].get("feature_dim", hidden[-1] if hidden else 0)
    model = ModelSpec(input_dim=data.n_features, base_hidden=hidden, feature_dim=feature_dim)
    hyper = HyperParams(**values["hyper"])
    run = values["run"]
    return ExperimentConfig(
        data=data,
        model=model,
        hyper=hyper,
        algorithms=run.get("algorithms", list(ALGORITHMS)),
        seeds=run.get("seeds", [0, 1, 2, 3, 4]),
        output_dir=run.get("output_dir", "results"),
    )


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a config file; omitted keys take the documented defaults."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return _read_config_parser(cp)


def config_from_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config text: {exc}") from exc
    return _read_config_parser(cp)


def config_to_text(config: ExperimentConfig) -> str:
    """Render a config as INI text that load_config parses back to an equal config."""
    cp = configparser.ConfigParser()
    cp["data"] = {
        "n_clients": str(config.data.n_clients),
        "n_per_client": str(config.data.n_per_client),
        "n_features": str(config.data.n_features),
        "heterogeneity": repr(config.data.heterogeneity),
        "class_sep": repr(config.data.class_sep),
        "test_fraction": repr(config.data.test_fraction),
        "label_ratio": repr(config.data.label_ratio),
    }
    cp["model"] = {
        "hidden": ", ".join(str(h) for h in config.model.base_hidden),
        "feature_dim": str(config.model.feature_dim),
    }
    cp["hyper"] = {
        "eta": repr(config.hyper.eta),
        "mu": repr(config.hyper.mu),
        "lambda_c": repr(config.hyper.lambda_c),
        "rounds": str(config.hyper.rounds),
        "local_epochs": str(config.hyper.local_epochs),
        "batch_size": str(config.hyper.batch_size),
        "fml_weight": repr(config.hyper.fml_weight),
    }
    cp["run"] = {
        "algorithms": ", ".join(config.algorithms),
        "seeds": ", ".join(str(s) for s in config.seeds),
        "output_dir": config.output_dir,
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def default_config() -> ExperimentConfig:
    """The desk-scale defaults, identical to loading an empty config file."""
    return _read_config_parser(configparser.ConfigParser())


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _rows_from_run(algorithm: str, seed: int, run: AlgorithmRun) -> list[CurveRow]:
    rows: list[CurveRow] = []
    for rm in run.metrics:
        for i in range(len(rm.acc)):
            rows.append(
                (
                    algorithm,
                    seed,
                    rm.round,
                    i + 1,
                    float(rm.acc[i]),
                    float(rm.task_loss[i]),
                    float(rm.kl_loss[i]),
                    float(rm.feat_loss[i]),
                    float(rm.prox_loss[i]),
                )
            )
    return rows


def run_single(
    config: ExperimentConfig,
    algorithm: str,
    seed: int,
    stop_at_round: int | None = None,
) -> AlgorithmRun:
    """Run one (algorithm, seed) cell from scratch."""
    algorithm = normalize_algorithm(algorithm)
    datasets = generate(replace(config.data, seed=seed))
    hp = replace(config.hyper, algorithm=algorithm, seed=seed)
    clients, server_rng = build_clients(datasets, config.model, hp)
    return run_algorithm(
        algorithm, clients, hp, server_rng=server_rng, stop_at_round=stop_at_round
    )


def run_comparison(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Run every (algorithm, seed) cell of the config, collecting curve rows."""
    rows: list[CurveRow] = []
    runs: dict[tuple[str, int], AlgorithmRun] = {}
    for algorithm in config.algorithms:
        for seed in config.seeds:
            if progress is not None:
                progress(f"running {algorithm} seed={seed}")
            run = run_single(config, algorithm, seed)
            runs[(algorithm, seed)] = run
            rows.extend(_rows_from_run(algorithm, seed, run))
    return ExperimentResult(config=config, rows=rows, runs=runs)


SWEEP_PARAMETERS = ("lambda_c", "label_ratio", "mu")


def sweep_cell_config(config: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    """The config of one sweep cell: the base config with one knob replaced."""
    if parameter == "label_ratio":
        return replace(config, data=replace(config.data, label_ratio=float(value)))
    if parameter in ("lambda_c", "mu"):
        return replace(config, hyper=replace(config.hyper, **{parameter: float(value)}))
    raise ConfigError(f"unknown sweep parameter '{parameter}' (choose from {SWEEP_PARAMETERS})")


def run_sweep(
    config: ExperimentConfig, parameter: str, values: list[float], progress=None
) -> dict[float, ExperimentResult]:
    """One full comparison per parameter value, keyed by value."""
    out: dict[float, ExperimentResult] = {}
    for value in values:
        if progress is not None:
            progress(f"sweep {parameter}={value!r}")
        out[float(value)] = run_comparison(sweep_cell_config(config, parameter, value), progress)
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _write_text(path: str, text: str):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise FedL2TError(f"cannot write {path}: {exc}") from exc


def export_results(result: ExperimentResult, output_dir: str):
    """Write curves.csv, summary.csv and manifest.ini into output_dir.

    Curve rows appear in (algorithm, seed, round, client) order; every
    summary statistic is recomputable from the curve rows.
    """
    os.makedirs(output_dir, exist_ok=True)
    lines = [CURVE_HEADER]
    for algo, seed, rnd, client, acc, task, kl, feat, prox in result.rows:
        lines.append(
            f"{algo},{seed},{rnd},{client},{_fmt(acc)},{_fmt(task)},"
            f"{_fmt(kl)},{_fmt(feat)},{_fmt(prox)}"
        )
    _write_text(os.path.join(output_dir, "curves.csv"), "\n".join(lines) + "\n")

    lines = [SUMMARY_HEADER]
    for algo, mean, std in result.summary():
        lines.append(f"{algo},{_fmt(mean)},{_fmt(std)}")
    _write_text(os.path.join(output_dir, "summary.csv"), "\n".join(lines) + "\n")

    _write_text(os.path.join(output_dir, "manifest.ini"), config_to_text(result.config))


def export_sweep(sweep: dict[float, ExperimentResult], parameter: str, output_dir: str):
    """One subdirectory of standard result files per sweep value."""
    for value, result in sweep.items():
        export_results(result, os.path.join(output_dir, f"{parameter}_{value!r}"))


# ---------------------------------------------------------------------------
# checkpoint / restore
# ---------------------------------------------------------------------------

def _spec_dict(spec: ModelSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "base_hidden": list(spec.base_hidden),
        "feature_dim": spec.feature_dim,
        "num_classes": spec.num_classes,
    }


def _hp_dict(hp: HyperParams) -> dict:
    return {
        "eta": hp.eta,
        "mu": hp.mu,
        "lambda_c": hp.lambda_c,
        "rounds": hp.rounds,
        "local_epochs": hp.local_epochs,
        "batch_size": hp.batch_size,
        "algorithm": hp.algorithm,
        "seed": hp.seed,
        "fml_weight": hp.fml_weight,
    }


@dataclass
class Checkpoint:
    """A restored mid-run state, sufficient to finish the run bit-identically."""

    clients: list[ClientState]
    global_state: GlobalState | None
    server_rng: np.random.Generator
    hp: HyperParams
    spec: ModelSpec
    algorithm: str
    seed: int
    completed_rounds: int
    rows: list[CurveRow]
    config_text: str


def checkpoint(
    clients: list[ClientState],
    global_state: GlobalState | None,
    path: str,
    *,
    server_rng: np.random.Generator,
    hp: HyperParams,
    algorithm: str = "FedL2T",
    seed: int = 0,
    completed_rounds: int = 0,
    rows: list[CurveRow] = (),
    config_text: str = "",
):
    """Persist a full run state (models, data, RNG positions, metrics so far)."""
    spec = clients[0].personalized.spec
    header = {
        "version": CHECKPOINT_VERSION,
        "algorithm": algorithm,
        "seed": seed,
        "completed_rounds": completed_rounds,
        "global_round": None if global_state is None else global_state.round,
        "hp": _hp_dict(hp),
        "spec": _spec_dict(spec),
        "n_clients": len(clients),
        "server_rng": rng_state(server_rng),
        "client_rngs": [rng_state(c.rng) for c in clients],
        "config_text": config_text,
    }
    arrays: dict[str, np.ndarray] = {"header": np.array(json.dumps(header))}
    for i, c in enumerate(clients):
        arrays[f"p_{i}"] = c.personalized.values
        arrays[f"t_{i}"] = c.transfer.values
        arrays[f"train_x_{i}"] = c.train.x
        arrays[f"train_y_{i}"] = c.train.y
        arrays[f"test_x_{i}"] = c.test.x
        arrays[f"test_y_{i}"] = c.test.y
    if global_state is not None:
        arrays["t_global"] = global_state.t_global.values
    if rows:
        arrays["row_values"] = np.array(
            [[r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]] for r in rows], dtype=np.float64
        )
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise FedL2TError(f"cannot write checkpoint {path}: {exc}") from exc


def restore(path: str, expected_spec: ModelSpec | None = None) -> Checkpoint:
    """Load a checkpoint written by checkpoint(); validates version and layout."""
    try:
        archive = np.load(path, allow_pickle=False)
        header = json.loads(str(archive["header"][()]))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {header.get('version')}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    spec = ModelSpec(
        input_dim=header["spec"]["input_dim"],
        base_hidden=tuple(header["spec"]["base_hidden"]),
        feature_dim=header["spec"]["feature_dim"],
        num_classes=header["spec"]["num_classes"],
    )
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(
            f"checkpoint {path} was written for a different model layout: "
            f"{spec} vs expected {expected_spec}"
        )
    hp = HyperParams(**header["hp"])
    clients = []
    for i in range(header["n_clients"]):
        clients.append(
            ClientState(
                client_id=i + 1,
                personalized=ModelParams(spec, archive[f"p_{i}"].copy()),
                transfer=ModelParams(spec, archive[f"t_{i}"].copy()),
                train=SampleBatch(archive[f"train_x_{i}"], archive[f"train_y_{i}"]),
                test=SampleBatch(archive[f"test_x_{i}"], archive[f"test_y_{i}"]),
                rng=rng_from_state(header["client_rngs"][i]),
            )
        )
    global_state = None
    if "t_global" in archive:
        global_state = GlobalState(
            ModelParams(spec, archive["t_global"].copy()), round=header["global_round"]
        )
    rows: list[CurveRow] = []
    if "row_values" in archive:
        for seed, rnd, client, acc, task, kl, feat, prox in archive["row_values"]:
            rows.append(
                (
                    header["algorithm"],
                    int(seed),
                    int(rnd),
                    int(client),
                    float(acc),
                    float(task),
                    float(kl),
                    float(feat),
                    float(prox),
                )
            )
    return Checkpoint(
        clients=clients,
        global_state=global_state,
        server_rng=rng_from_state(header["server_rng"]),
        hp=hp,
        spec=spec,
        algorithm=header["algorithm"],
        seed=header["seed"],
        completed_rounds=header["completed_rounds"],
        rows=rows,
        config_text=header["config_text"],
    )


def _checkpoint_name(algorithm: str, seed: int) -> str:
    return f"checkpoint_{algorithm}_{seed}.npz"


def run_comparison_halting(config: ExperimentConfig, stop_at_round: int, progress=None):
    """Run every cell up to stop_at_round and leave one checkpoint file per cell."""
    os.makedirs(config.output_dir, exist_ok=True)
    text = config_to_text(config)
    for algorithm in config.algorithms:
        for seed in config.seeds:
            if progress is not None:
                progress(f"running {algorithm} seed={seed} up to round {stop_at_round}")
            run = run_single(config, algorithm, seed, stop_at_round=stop_at_round)
            checkpoint(
                run.clients,
                run.global_state,
                os.path.join(config.output_dir, _checkpoint_name(algorithm, seed)),
                server_rng=run.server_rng,
                hp=replace(config.hyper, algorithm=algorithm, seed=seed),
                algorithm=algorithm,
                seed=seed,
                completed_rounds=run.completed_rounds,
                rows=_rows_from_run(algorithm, seed, run),
                config_text=text,
            )


def resume_comparison(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Finish a halted comparison; cells without a checkpoint run from scratch."""
    rows: list[CurveRow] = []
    runs: dict[tuple[str, int], AlgorithmRun] = {}
    for algorithm in config.algorithms:
        for seed in config.seeds:
            ckpt_path = os.path.join(config.output_dir, _checkpoint_name(algorithm, seed))
            if os.path.exists(ckpt_path):
                if progress is not None:
                    progress(f"resuming {algorithm} seed={seed} from {ckpt_path}")
                ckpt = restore(ckpt_path, expected_spec=config.model)
                if config_from_text(ckpt.config_text) != config:
                    raise CheckpointError(
                        f"checkpoint {ckpt_path} was written under a different config"
                    )
                run = run_algorithm(
                    algorithm,
                    ckpt.clients,
                    ckpt.hp,
                    server_rng=ckpt.server_rng,
                    global_state=ckpt.global_state,
                    start_round=ckpt.completed_rounds,
                )
                cell_rows = ckpt.rows + _rows_from_run(algorithm, seed, run)
            else:
                if progress is not None:
                    progress(f"no checkpoint for {algorithm} seed={seed}; running fresh")
                run = run_single(config, algorithm, seed)
                cell_rows = _rows_from_run(algorithm, seed, run)
            runs[(algorithm, seed)] = run
            rows.extend(cell_rows)
    return ExperimentResult(config=config, rows=rows, runs=runs)
