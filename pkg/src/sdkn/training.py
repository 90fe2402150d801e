"""Datasets, loss, RKHS penalties, optimizers and the training loop."""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .network import ForwardTrace, LinearLayer, SdknModel, backward, forward

__all__ = [
    "Dataset",
    "DatasetError",
    "TrainConfig",
    "TrainingDivergedError",
    "Optimizer",
    "CenterRule",
    "load_dataset",
    "write_dataset",
    "mse_loss",
    "rkhs_penalty",
    "penalty_gradients",
    "objective",
    "select_centers",
    "train",
    "write_metrics",
]


class DatasetError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DatasetError(
                f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows"
            )
        if self.inputs.shape[0] < 1:
            raise DatasetError("dataset is empty")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise DatasetError("dataset contains non-finite values")

    def __len__(self):
        return self.inputs.shape[0]


def load_dataset(path: str | os.PathLike, d_in: int, d_out: int) -> Dataset:
    """Read a CSV file: one header row, then ``d_in`` input and ``d_out`` target columns."""
    ncols = d_in + d_out
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise DatasetError(f"dataset file not found: {path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        if len(header) != ncols:
            raise DatasetError(
                f"{path}:1: header has {len(header)} columns, expected {d_in}+{d_out}={ncols}"
            )
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != ncols:
                raise DatasetError(f"{path}:{line}: expected {ncols} columns, found {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DatasetError(f"{path}:{line}: non-numeric field in row {row!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}:{line}: non-finite value")
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :d_in], arr[:, d_in:])


def write_dataset(path: str | os.PathLike, data: Dataset, header: Sequence[str] | None = None) -> None:
    d_in, d_out = data.inputs.shape[1], data.targets.shape[1]
    if header is None:
        header = [f"x{i}" for i in range(d_in)] + [f"y{i}" for i in range(d_out)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(data.inputs, data.targets):
            w.writerow([f"{v:.17g}" for v in np.concatenate([x, y])])


def mse_loss(pred, target) -> float:
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return float(np.sum((pred - target) ** 2) / pred.shape[0])


def rkhs_penalty(model: SdknModel, trace: ForwardTrace) -> list:
    """Squared RKHS norm of every layer.

    Linear layers: squared Frobenius norm of the weights.  Activation
    layers: ``sum_j alpha_j^T K_j alpha_j`` with ``K_j`` the Gram matrix of
    kernel ``j`` on the propagated centers entering that layer.
    """
    out = []
    for l, layer in enumerate(model.layers):
        if isinstance(layer, LinearLayer):
            out.append(float(np.sum(layer.weights**2)))
            continue
        Z = trace.centers(l)
        total = 0.0
        for j, kernel in enumerate(layer.kernels):
            a = layer.coefficients[:, j]
            K = kernel(Z[:, j, None], Z[None, :, j])
            total += float(a @ K @ a)
        out.append(total)
    return out


def penalty_gradients(model: SdknModel, trace: ForwardTrace, weights: Sequence[float]):
    """Gradient of ``sum_l weights[l] * penalty_l``.

    Returns ``(direct, extra)``: ``direct[l]`` is the partial derivative in
    layer ``l``'s own parameters; ``extra`` holds cotangents on propagated
    centers to be passed to :func:`backward`.
    """
    direct = []
    extra = {}
    n = trace.n_batch
    for l, (layer, lam) in enumerate(zip(model.layers, weights)):
        if lam == 0.0:
            direct.append(np.zeros_like(layer.params))
            continue
        if isinstance(layer, LinearLayer):
            direct.append(2.0 * lam * layer.weights)
            continue
        Z = trace.centers(l)
        alpha = layer.coefficients
        g = np.zeros_like(alpha)
        gz = np.zeros_like(Z)
        for j, kernel in enumerate(layer.kernels):
            a = alpha[:, j]
            zc = Z[:, j]
            g[:, j] = 2.0 * lam * kernel(zc[:, None], zc[None, :]) @ a
            gz[:, j] = 2.0 * lam * a * (kernel.dx(zc[:, None], zc[None, :]) @ a)
        direct.append(g)
        cot = np.zeros_like(trace.values[l])
        cot[n:] = gz
        extra[l] = cot
    return direct, extra


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class CenterRule(str, enum.Enum):
    FIRST = "first"
    RANDOM = "random"


@dataclass
class TrainConfig:
    loss: str = "mse"
    reg_weights: Sequence[float] | float = 0.0
    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None
    epochs: int = 100
    num_centers: int = 16
    center_rule: CenterRule = CenterRule.FIRST
    seed: int = 0
    record_time: bool = False

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        self.center_rule = CenterRule(self.center_rule)
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.num_centers < 1:
            raise ValueError("num_centers must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def layer_weights(self, n_layers: int) -> list:
        w = self.reg_weights
        if np.isscalar(w):
            out = [float(w)] * n_layers
        else:
            out = [float(v) for v in w]
            if len(out) != n_layers:
                raise ValueError(f"reg_weights has {len(out)} entries for {n_layers} layers")
        if any(v < 0 for v in out):
            raise ValueError("regularization weights must be nonnegative")
        return out


def select_centers(data: Dataset, cfg: TrainConfig) -> np.ndarray:
    M, N = cfg.num_centers, len(data)
    if M > N:
        raise ValueError(f"num_centers={M} exceeds the {N} available points")
    if cfg.center_rule is CenterRule.FIRST:
        idx = np.arange(M)
    else:
        idx = np.random.default_rng(cfg.seed).choice(N, size=M, replace=False)
    return data.inputs[idx].copy()


def objective(model: SdknModel, data: Dataset, weights: Sequence[float]):
    """Return ``(loss, penalty, objective)`` on the whole dataset."""
    pred, trace = forward(model, data.inputs)
    loss = mse_loss(pred, data.targets)
    pens = rkhs_penalty(model, trace)
    pen = math.fsum(w * p for w, p in zip(weights, pens))
    return loss, pen, loss + pen


class _Sgd:
    def __init__(self, params, cfg: TrainConfig):
        self.lr, self.mu = cfg.learning_rate, cfg.momentum
        self.vel = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.vel):
            if self.mu:
                v *= self.mu
                v += g
                g = v
            p -= self.lr * g


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def train(
    model: SdknModel,
    data: Dataset,
    cfg: TrainConfig,
    callback: Callable[[dict], None] | None = None,
):
    """Minibatch gradient descent on ``MSE + sum_l lambda_l * ||f_l||^2``.

    The model is updated in place and returned together with one record per
    epoch: ``epoch, loss, penalty, objective, seconds``.  ``seconds`` is the
    elapsed wall time when ``cfg.record_time`` is set and ``None`` otherwise,
    which keeps histories byte-identical across runs.
    """
    model.validate()
    N = len(data)
    if model.d_in != data.inputs.shape[1] or model.d_out != data.targets.shape[1]:
        raise ValueError(
            f"model maps {model.d_in}->{model.d_out}, data is {data.inputs.shape[1]}->{data.targets.shape[1]}"
        )
    if model.num_centers > N:
        raise ValueError(f"model has {model.num_centers} centers but only {N} data points")
    weights = cfg.layer_weights(len(model.layers))
    params = model.parameters()
    opt = (_Adam if cfg.optimizer is Optimizer.ADAM else _Sgd)(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    batch = N if cfg.batch_size is None else min(cfg.batch_size, N)
    history = []
    start = time.perf_counter()
    # overflow shows up as a non-finite loss below; no need for numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            order = np.arange(N) if batch == N else rng.permutation(N)
            for s in range(0, N, batch):
                idx = order[s : s + batch]
                X, Y = data.inputs[idx], data.targets[idx]
                pred, trace = forward(model, X)
                resid = pred - Y
                loss = float(np.sum(resid**2) / len(idx))
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss in epoch {epoch} (learning rate too large?)")
                direct, extra = penalty_gradients(model, trace, weights)
                grads = backward(model, trace, 2.0 * resid / len(idx), extra)
                grads = [g + d for g, d in zip(grads, direct)]
                opt.step(params, grads)
            loss, pen, obj = objective(model, data, weights)
            if not math.isfinite(obj):
                raise TrainingDivergedError(f"non-finite objective after epoch {epoch}")
            record = {
                "epoch": epoch,
                "loss": loss,
                "penalty": pen,
                "objective": obj,
                "seconds": time.perf_counter() - start if cfg.record_time else None,
            }
            history.append(record)
            if callback is not None:
                callback(record)
    return model, history


def write_metrics(history: Sequence[dict], path: str | os.PathLike) -> None:
    """Write one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
