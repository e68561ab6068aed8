"""Analytic epoch-time model for choosing a 3D grid configuration.

SpMM time is a linear model over three shape features per configuration;
communication time uses bandwidth-only ring costs with per-axis effective
bandwidths. Collective volumes come from :func:`plexuskit.layout.layer_collectives`,
the same shape algebra the engine runs on.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import enumerate_configs
from .layout import X, Y, Z, layer_collectives, plan_layouts

log = logging.getLogger(__name__)

# Fallback coefficients from an A100 cluster fit.
DEFAULT_COEFFICIENTS = (7.8e-4, 7.8e-10, -2.6e-10)

# Axis packing priority into a node: Y first, then X, then Z.
PACK_ORDER = (Y, X, Z)


class RankDeficientError(ValueError):
    pass


@dataclass
class DatasetStats:
    num_nodes: int
    nnz: int
    dims: list[int]

    def __post_init__(self):
        if self.num_nodes <= 0 or self.nnz <= 0 or not self.dims or min(self.dims) <= 0:
            raise ValueError("dataset stats must be positive")
        if len(self.dims) < 2:
            raise ValueError("dims must list the input and at least one output width")

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1


@dataclass
class MachineParams:
    g_node: int = 4
    beta_intra: float = 200e9  # not reported for the original platform; documented default
    beta_inter: float = 25e9
    bytes_per_scalar: int = 4

    def __post_init__(self):
        if self.g_node < 1 or self.beta_intra <= 0 or self.beta_inter <= 0:
            raise ValueError("machine parameters must be positive")

    @classmethod
    def load(cls, path) -> "MachineParams":
        with open(path) as fh:
            d = json.load(fh)
        return cls(int(d.get("g_node", 4)), float(d.get("beta_intra", 200e9)),
                   float(d.get("beta_inter", 25e9)), int(d.get("bytes_per_scalar", 4)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)


@dataclass
class PerfCoefficients:
    c: tuple[float, float, float] = DEFAULT_COEFFICIENTS
    r2: float = float("nan")
    rmse: float = float("nan")
    n_samples: int = 0

    @classmethod
    def load(cls, path) -> "PerfCoefficients":
        with open(path) as fh:
            d = json.load(fh)
        return cls(tuple(float(v) for v in d["c"]), float(d.get("r2", "nan")),
                   float(d.get("rmse", "nan")), int(d.get("n_samples", 0)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"c": list(self.c), "r2": self.r2, "rmse": self.rmse,
                       "n_samples": self.n_samples}, fh, indent=1)


@dataclass
class ConfigPrediction:
    config: tuple[int, int, int]
    spmm: float
    comm: dict = field(default_factory=dict)
    clamped: bool = False

    @property
    def comm_total(self) -> float:
        return float(sum(self.comm.values()))

    @property
    def total(self) -> float:
        return self.spmm + self.comm_total


def comp_features(stats: DatasetStats, config) -> np.ndarray:
    """(sum sqrt(flops), sum sqrt(flops)*fwd_penalty, sum sqrt(flops)*bwd_penalty)
    over layers, with each layer's rotated axis roles."""
    if min(config) < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {config}")
    n = stats.num_nodes
    out = np.zeros(3)
    for layout in plan_layouts(stats.num_layers):
        d = stats.dims[layout.layer]
        root = np.sqrt(float(stats.nnz) * d)
        fwd = (n / config[layout.inner]) * (config[layout.col] / d)
        bwd = (n / config[layout.row]) * (config[layout.col] / d)
        out += (root, root * fwd, root * bwd)
    return out


def flops_cost(stats: DatasetStats, layer: int = 0) -> int:
    return stats.nnz * stats.dims[layer]


def predict_spmm_time(features, coeffs: PerfCoefficients) -> tuple[float, bool]:
    """Linear prediction clamped at zero; second value flags clamping."""
    t = float(np.dot(features, coeffs.c))
    return (0.0, True) if t < 0 else (t, False)


def effective_bandwidth(axis: int, config, machine: MachineParams) -> float:
    """Bandwidth seen by a process group along ``axis``.

    Axes fill a node in Y, X, Z order. ``inner`` is the product of the axes
    packed before this one; the group is on-node when ``inner * size`` fits,
    otherwise it shares ``min(g_node, inner)`` NICs.
    """
    inner = 1
    for ax in PACK_ORDER:
        if ax == axis:
            break
        inner *= config[ax]
    if inner * config[axis] <= machine.g_node:
        return machine.beta_intra
    return machine.beta_inter / min(machine.g_node, inner)


def collective_time(kind: str, nbytes: float, g: int, beta: float) -> float:
    """Bandwidth-only ring cost; all-gather and reduce-scatter cost half an all-reduce."""
    if g <= 1:
        return 0.0
    factor = 2.0 if kind == "all_reduce" else 1.0
    return factor / beta * (g - 1) / g * nbytes


def predict_comm_time(config, stats: DatasetStats, machine: MachineParams) -> dict:
    """Seconds per (layer, phase) for every collective of one epoch."""
    out = {}
    for layout in plan_layouts(stats.num_layers):
        d_in, d_out = stats.dims[layout.layer], stats.dims[layout.layer + 1]
        for spec in layer_collectives(layout, config, stats.num_nodes, d_in, d_out):
            nbytes = spec.elements() * machine.bytes_per_scalar
            beta = effective_bandwidth(spec.axis, config, machine)
            out[(spec.layer, spec.phase)] = collective_time(spec.kind, nbytes, config[spec.axis], beta)
    return out


def predict(config, stats: DatasetStats, machine: MachineParams,
            coeffs: PerfCoefficients) -> ConfigPrediction:
    spmm, clamped = predict_spmm_time(comp_features(stats, config), coeffs)
    if clamped:
        log.warning("predicted SpMM time for %s clamped at 0", config)
    return ConfigPrediction(tuple(config), spmm, predict_comm_time(config, stats, machine), clamped)


def rank_configs(g: int, stats: DatasetStats, machine: MachineParams,
                 coeffs: PerfCoefficients) -> list[ConfigPrediction]:
    preds = [predict(c, stats, machine, coeffs) for c in enumerate_configs(g)]
    return sorted(preds, key=lambda p: (p.total, p.config[2], p.config[0], p.config[1]))


def r2_score(y, pred) -> float:
    y, pred = np.asarray(y, float), np.asarray(pred, float)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_regression(features, seconds) -> PerfCoefficients:
    """Least-squares fit (no intercept) of seconds on the three features."""
    X_ = np.asarray(features, dtype=float)
    y = np.asarray(seconds, dtype=float)
    if X_.ndim != 2 or X_.shape[1] != 3 or len(y) != len(X_):
        raise ValueError("expected an (n, 3) feature matrix and n timings")
    if len(y) < 3:
        raise RankDeficientError(f"need at least 3 samples, got {len(y)}")
    # column scaling keeps the wildly different feature magnitudes well conditioned
    scale = np.abs(X_).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X_ / scale
    if np.linalg.matrix_rank(Xs) < 3:
        raise RankDeficientError("features are rank deficient; collect samples over more "
                                 "diverse configurations or datasets")
    coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    coef = coef / scale
    pred = X_ @ coef
    return PerfCoefficients(tuple(float(c) for c in coef), r2_score(y, pred),
                            float(np.sqrt(np.mean((y - pred) ** 2))), len(y))


@dataclass
class HoldoutReport:
    train_r2: float
    test_r2: float
    train_rmse: float
    test_rmse: float
    iterations: int


def holdout_evaluate(features, seconds, test_fraction: float = 0.3, iterations: int = 1000,
                     seed: int = 0) -> HoldoutReport:
    """Mean train/test R^2 and RMSE over repeated random splits."""
    X_ = np.asarray(features, float)
    y = np.asarray(seconds, float)
    rng = np.random.Generator(np.random.Philox(seed))
    n_test = max(1, int(round(test_fraction * len(y))))
    acc = np.zeros(4)
    for _ in range(iterations):
        idx = rng.permutation(len(y))
        te, tr = idx[:n_test], idx[n_test:]
        co = fit_regression(X_[tr], y[tr])
        pred = X_[te] @ np.asarray(co.c)
        acc += (co.r2, r2_score(y[te], pred), co.rmse, np.sqrt(np.mean((y[te] - pred) ** 2)))
    acc /= iterations
    return HoldoutReport(*acc, iterations)


def load_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read fitting samples.

    Either columns ``f1,f2,f3,seconds`` or raw rows
    ``num_nodes,nnz,dims,gx,gy,gz,seconds`` with ``dims`` as ``100;128;128;47``.
    """
    feats, secs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if "f1" in row:
                feats.append([float(row["f1"]), float(row["f2"]), float(row["f3"])])
            else:
                stats = DatasetStats(int(row["num_nodes"]), int(row["nnz"]),
                                     [int(v) for v in row["dims"].split(";")])
                feats.append(comp_features(stats, (int(row["gx"]), int(row["gy"]), int(row["gz"]))))
            secs.append(float(row["seconds"]))
    return np.asarray(feats, float), np.asarray(secs, float)


def harness_cost(stats_by_rank: dict, config, machine: MachineParams,
                 flop_rate: float = 19.5e12) -> float:
    """Cost of a simulated run from its counters: slowest rank's FLOPs over
    ``flop_rate`` plus its bytes per axis over that axis' effective bandwidth."""
    worst = 0.0
    for st in stats_by_rank.values():
        t = sum(st.flops.values()) / flop_rate
        for (axis, _kind), nbytes in st.bytes.items():
            t += nbytes / effective_bandwidth(axis, config, machine)
        worst = max(worst, t)
    return worst


def stats_from_graph(g, hidden: int, layers: int) -> DatasetStats:
    dims = [g.num_features] + [hidden] * (layers - 1) + [g.num_classes]
    return DatasetStats(g.num_nodes, g.adjacency.nnz, dims)
