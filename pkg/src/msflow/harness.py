"""Experiment orchestration: config schema, train/solve/ablate/report commands.

Configs are YAML (comment-capable, human-diffable); every value round-trips
bit-identically through ``to_dict``/``from_dict`` and the YAML dump. Ledgers
split into a deterministic part (``ledger.json``, byte-identical across
single-threaded reruns of the same config) and a volatile sidecar
(``timings.json``) holding wall-clock measurements.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, replace
from itertools import product
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .counting import counters
from .errors import ContractViolationError
from .flow import LearnedField, SyntheticDataset, TrainSchedule, train_flow
from .net import VelocityNet, load_checkpoint, save_checkpoint
from .operators import (
    LinearOperator,
    blur_operator,
    dense_operator,
    make_observation,
    mask_operator,
    subsample_operator,
)
from .priors import LatentFit, OneNormFit, QuadraticFit, RadialPrior, ToyDecoder
from .solver import (
    IterationRecord,
    SolverConfig,
    counter_report,
    d_flow_solve,
    ms_flow_solve,
)

SOLVER_NAMES = ("ms_flow", "d_flow", "ms_flow_gd")
DATA_FIT_NAMES = ("quadratic", "one_norm", "latent")
ABLATE_KEYS = ("num_segments", "inner_sweeps", "lam", "grad_mode")


@dataclass
class DatasetConfig:
    kind: str = "gmm2d"
    seed: int = 0
    size: int = 10000


@dataclass
class ModelConfig:
    hidden: list = dc_field(default_factory=lambda: [64, 64, 64])
    init_seed: int = 0


@dataclass
class TrainConfig:
    steps: int = 4000
    step_size: float = 0.02
    batch_size: int = 256
    seed: int = 0


@dataclass
class OperatorConfig:
    kind: str = "mask"              # mask | blur | subsample | dense
    indices: list | None = None     # mask
    sigma: float | None = None      # blur
    size: int | None = None         # blur
    factor: int | None = None       # subsample
    ndim: int = 1                   # blur / subsample
    matrix: list | None = None      # dense (inline rows)
    path: str | None = None         # dense (.npy file)


@dataclass
class DecoderConfig:
    latent_dim: int = 2
    hidden: list = dc_field(default_factory=list)
    output_dim: int = 2
    seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = dc_field(default_factory=DatasetConfig)
    model: ModelConfig = dc_field(default_factory=ModelConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    operator: OperatorConfig = dc_field(default_factory=OperatorConfig)
    noise_sigma: float = 0.01
    observation_seed: int = 7
    truth_index: int = 0
    data_fit: str = "quadratic"
    decoder: DecoderConfig | None = None
    solver: str = "ms_flow"
    solver_config: SolverConfig = dc_field(default_factory=SolverConfig)
    data_range: float = 1.0
    ablate: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.solver not in SOLVER_NAMES:
            raise ContractViolationError(f"solver must be one of {SOLVER_NAMES}")
        if self.data_fit not in DATA_FIT_NAMES:
            raise ContractViolationError(f"data_fit must be one of {DATA_FIT_NAMES}")
        for key in self.ablate:
            if key not in ABLATE_KEYS:
                raise ContractViolationError(
                    f"ablate key {key!r} not supported; use {ABLATE_KEYS}"
                )

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.decoder is None:
            d["decoder"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            dec = d.pop("decoder", None)
            cfg = cls(
                seed=d.pop("seed", 0),
                dataset=DatasetConfig(**d.pop("dataset", {})),
                model=ModelConfig(**d.pop("model", {})),
                train=TrainConfig(**d.pop("train", {})),
                operator=OperatorConfig(**d.pop("operator", {})),
                noise_sigma=d.pop("noise_sigma", 0.01),
                observation_seed=d.pop("observation_seed", 7),
                truth_index=d.pop("truth_index", 0),
                data_fit=d.pop("data_fit", "quadratic"),
                decoder=DecoderConfig(**dec) if dec is not None else None,
                solver=d.pop("solver", "ms_flow"),
                solver_config=SolverConfig(**d.pop("solver_config", {})),
                data_range=d.pop("data_range", 1.0),
                ablate=d.pop("ablate", {}),
            )
        except TypeError as e:
            raise ContractViolationError(f"bad config field: {e}") from e
        if d:
            raise ContractViolationError(f"unknown config keys: {sorted(d)}")
        return cfg


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def config_from_yaml(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ContractViolationError("config file must contain a mapping")
    return ExperimentConfig.from_dict(data)


def load_config(path) -> ExperimentConfig:
    return config_from_yaml(Path(path).read_text())


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_yaml(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def build_net(cfg: ExperimentConfig, dim) -> VelocityNet:
    widths = [dim + 1] + list(cfg.model.hidden) + [dim]
    return VelocityNet(widths, seed=cfg.model.init_seed)


def build_operator(op_cfg: OperatorConfig, n) -> LinearOperator:
    if op_cfg.kind == "mask":
        if not op_cfg.indices:
            raise ContractViolationError("mask operator needs 'indices'")
        return mask_operator(op_cfg.indices, n)
    if op_cfg.kind == "blur":
        if op_cfg.sigma is None or op_cfg.size is None:
            raise ContractViolationError("blur operator needs 'sigma' and 'size'")
        return blur_operator(op_cfg.sigma, op_cfg.size, n, ndim=op_cfg.ndim)
    if op_cfg.kind == "subsample":
        if op_cfg.factor is None:
            raise ContractViolationError("subsample operator needs 'factor'")
        return subsample_operator(op_cfg.factor, n, ndim=op_cfg.ndim)
    if op_cfg.kind == "dense":
        if op_cfg.matrix is not None:
            return dense_operator(np.asarray(op_cfg.matrix, dtype=np.float64))
        if op_cfg.path is not None:
            return dense_operator(np.load(op_cfg.path))
        raise ContractViolationError("dense operator needs 'matrix' or 'path'")
    raise ContractViolationError(f"unknown operator kind {op_cfg.kind!r}")


def build_decoder(dec_cfg: DecoderConfig) -> ToyDecoder:
    widths = [dec_cfg.latent_dim] + list(dec_cfg.hidden) + [dec_cfg.output_dim]
    return ToyDecoder(widths, seed=dec_cfg.seed)


def _ground_truth(cfg: ExperimentConfig) -> np.ndarray:
    """Held-out sample: drawn from a dedicated stream keyed by observation_seed."""
    ds = SyntheticDataset(**asdict(cfg.dataset))
    rng = np.random.default_rng((cfg.observation_seed, cfg.dataset.seed))
    return ds.sample(cfg.truth_index + 1, rng)[cfg.truth_index]


def build_problem(cfg: ExperimentConfig):
    """(observation, prior, fit, x_true, decoder_or_None) for the configured task."""
    truth = _ground_truth(cfg)
    scfg = cfg.solver_config
    if cfg.data_fit == "latent":
        if cfg.decoder is None:
            raise ContractViolationError("latent data fit needs a decoder config")
        decoder = build_decoder(cfg.decoder)
        x_true = decoder.decode(truth)
        op = build_operator(cfg.operator, decoder.dim_out)
        obs = make_observation(op, x_true, cfg.noise_sigma, cfg.observation_seed)
        fit = LatentFit(op, obs.y, decoder)
        prior = RadialPrior(decoder.dim_in, weight=scfg.lam)
        return obs, prior, fit, x_true, decoder
    x_true = truth
    op = build_operator(cfg.operator, x_true.size)
    obs = make_observation(op, x_true, cfg.noise_sigma, cfg.observation_seed)
    if cfg.data_fit == "one_norm":
        fit = OneNormFit(obs.y, op)
    else:
        fit = QuadraticFit(op, obs.y)
    prior = RadialPrior(x_true.size, weight=scfg.lam)
    return obs, prior, fit, x_true, None


# ---------------------------------------------------------------------------
# CSV / ledger I/O (repr round-trips every float64 exactly)
# ---------------------------------------------------------------------------

ITER_COLUMNS = (
    "outer_iter", "sweep", "J", "phi", "residual", "psnr",
    "n_forward", "n_vjp", "peak_live_tapes", "step_norm",
)


def write_iterations_csv(path, log):
    with open(path, "w") as f:
        f.write(",".join(ITER_COLUMNS) + "\n")
        for r in log:
            f.write(
                f"{r.outer_iter},{r.sweep},{r.J!r},{r.phi!r},{r.residual!r},{r.psnr!r},"
                f"{r.n_forward},{r.n_vjp},{r.peak_live_tapes},{r.step_norm!r}\n"
            )


def read_iterations_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(ITER_COLUMNS):
        raise ContractViolationError(f"unrecognized iteration CSV header in {path}")
    out = []
    for line in lines[1:]:
        p = line.split(",")
        out.append(IterationRecord(
            outer_iter=int(p[0]), sweep=int(p[1]),
            J=float(p[2]), phi=float(p[3]), residual=float(p[4]), psnr=float(p[5]),
            n_forward=int(p[6]), n_vjp=int(p[7]), peak_live_tapes=int(p[8]),
            step_norm=float(p[9]),
        ))
    return out


def write_loss_trace(path, trace):
    with open(path, "w") as f:
        f.write("step,loss\n")
        for step, loss in trace:
            f.write(f"{step},{loss!r}\n")


def read_loss_trace(path):
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "step,loss":
        raise ContractViolationError(f"unrecognized loss trace header in {path}")
    return [(int(a), float(b)) for a, b in (line.split(",") for line in lines[1:])]


def write_samples_csv(path, samples):
    samples = np.atleast_2d(samples)
    header = ",".join(f"dim{i}" for i in range(samples.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in samples:
            f.write(",".join(repr(v) for v in row) + "\n")


def read_samples_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    return np.array([[float(v) for v in line.split(",")] for line in lines[1:]])


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out_dir):
    """Train the flow on the configured dataset; writes checkpoint + loss trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = SyntheticDataset(**asdict(cfg.dataset))
    net = build_net(cfg, ds.dim)
    schedule = TrainSchedule(**asdict(cfg.train))
    net, trace = train_flow(ds, net, schedule)
    ckpt = out / "checkpoint.msfnet"
    save_checkpoint(net, ckpt)
    write_loss_trace(out / "loss_trace.csv", trace)
    _write_json(out / "train_ledger.json", {
        "config_hash": config_hash(cfg),
        "version": f"msflow-{__version__}",
        "steps": schedule.steps,
        "final_loss": None if not trace else repr(trace[-1][1]),
    })
    _write_json(out / "timings.json", {"train_seconds": time.perf_counter() - t0})
    return ckpt


def _method_name(cfg: ExperimentConfig) -> str:
    if cfg.solver == "ms_flow" and cfg.solver_config.grad_mode == "full_gd":
        return "ms_flow_gd"
    return cfg.solver


def cmd_solve(cfg: ExperimentConfig, checkpoint, out_dir):
    """Run the configured solver against a seeded observation; writes the ledger."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    net = load_checkpoint(checkpoint)
    field = LearnedField(net)
    obs, prior, fit, x_true, decoder = build_problem(cfg)
    scfg = cfg.solver_config
    expected_dim = prior.dim
    if field.dim != expected_dim:
        raise ContractViolationError(
            f"checkpoint dimension {field.dim} does not match problem dimension {expected_dim}"
        )
    counters.reset()
    if cfg.solver == "d_flow":
        result = d_flow_solve(obs, field, prior, fit, scfg,
                              x_true=x_true, data_range=cfg.data_range)
    else:
        if cfg.solver == "ms_flow_gd":
            scfg = replace(scfg, grad_mode="full_gd")
        result = ms_flow_solve(obs, field, prior, fit, scfg,
                               x_true=x_true, data_range=cfg.data_range)
    write_iterations_csv(out / "iterations.csv", result.log)
    final = result.log[-1]
    snap = counters.snapshot()
    ledger = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "version": f"msflow-{__version__}",
        "method": _method_name(cfg),
        "final": {
            "J": repr(final.J),
            "phi": repr(final.phi),
            "residual": repr(final.residual),
            "psnr": repr(final.psnr),
        },
        "counters": {
            "n_forward": snap.n_forward,
            "n_vjp": snap.n_vjp,
            "peak_live_tapes": snap.peak_live_tapes,
            "trajectory_state_count": snap.trajectory_state_count,
        },
        "x_star": [repr(v) for v in np.atleast_1d(result.x_star)],
        "iterations_csv": "iterations.csv",
    }
    _write_json(out / "ledger.json", ledger)
    _write_json(out / "timings.json", {"solve_seconds": time.perf_counter() - t0})
    return result


def _ablate_cell(args):
    cfg_dict, checkpoint, cell_dir, overrides = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    scfg_kwargs = asdict(cfg.solver_config)
    for key, val in overrides.items():
        if key == "grad_mode":
            scfg_kwargs["grad_mode"] = val
        else:
            scfg_kwargs[key] = val
    cfg = replace(cfg, solver_config=SolverConfig(**scfg_kwargs), ablate={})
    if overrides.get("grad_mode") == "full_gd":
        cfg = replace(cfg, solver="ms_flow")
    cmd_solve(cfg, checkpoint, cell_dir)
    return overrides


def cmd_ablate(cfg: ExperimentConfig, checkpoint, out_dir, threads=1):
    """Cartesian sweep over the config's ``ablate`` grid; one subdirectory per
    cell plus a tidy aggregate CSV (one row per cell per log row)."""
    if not cfg.ablate:
        raise ContractViolationError("config has no 'ablate' grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(cfg.ablate.keys())
    grid = list(product(*(cfg.ablate[k] for k in keys)))
    cells = []
    for i, values in enumerate(grid):
        overrides = dict(zip(keys, values))
        cells.append((cfg.to_dict(), str(checkpoint), str(out / f"cell_{i:03d}"), overrides))

    failures = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = list(pool.map(_run_cell_safe, cells))
        for i, err in enumerate(futures):
            if err is not None:
                failures.append({"cell": i, "error": err})
    else:
        for i, cell in enumerate(cells):
            err = _run_cell_safe(cell)
            if err is not None:
                failures.append({"cell": i, "error": err})

    # aggregate
    agg_path = out / "ablate.csv"
    with open(agg_path, "w") as f:
        f.write(",".join(keys) + "," + ",".join(ITER_COLUMNS) + "\n")
        for i, (_, _, cell_dir, overrides) in enumerate(cells):
            it_csv = Path(cell_dir) / "iterations.csv"
            if not it_csv.exists():
                continue
            prefix = ",".join(str(overrides[k]) for k in keys)
            for r in read_iterations_csv(it_csv):
                f.write(
                    f"{prefix},{r.outer_iter},{r.sweep},{r.J!r},{r.phi!r},{r.residual!r},"
                    f"{r.psnr!r},{r.n_forward},{r.n_vjp},{r.peak_live_tapes},{r.step_norm!r}\n"
                )
    _write_json(out / "ablate_ledger.json", {
        "config_hash": config_hash(cfg),
        "version": f"msflow-{__version__}",
        "grid_keys": keys,
        "cells": [dict(zip(keys, v)) for v in grid],
        "failures": failures,
    })
    return agg_path


def _run_cell_safe(cell):
    try:
        _ablate_cell(cell)
        return None
    except Exception as e:  # cell failure is recorded, the sweep continues
        return f"{type(e).__name__}: {e}"


def cmd_report(out_dir):
    """Summarize a solve ledger and validate the counter model when applicable."""
    out = Path(out_dir)
    ledger = json.loads((out / "ledger.json").read_text())
    log = read_iterations_csv(out / ledger["iterations_csv"])
    cfg = ExperimentConfig.from_dict(ledger["config"])
    scfg = cfg.solver_config
    if cfg.solver == "ms_flow_gd":
        scfg = replace(scfg, grad_mode="full_gd")
    lines = [
        f"run {ledger['config_hash'][:12]}  method={ledger['method']}  version={ledger['version']}",
        f"iterations logged: {len(log)}",
        "final: " + "  ".join(f"{k}={v}" for k, v in ledger["final"].items()),
    ]
    if scfg.line_search == "off" and scfg.outer_iters > 0:
        report = counter_report(log, ledger["method"], scfg)
        exp = report["expected_per_iteration"]
        lines.append(
            "counter model OK: per-iteration "
            f"(n_forward={exp['n_forward']}, n_vjp={exp['n_vjp']}, "
            f"peak_live_tapes={exp['peak_live_tapes']})"
        )
    else:
        lines.append("counter model: skipped (line search on or no iterations)")
    text = "\n".join(lines)
    print(text)
    return text
