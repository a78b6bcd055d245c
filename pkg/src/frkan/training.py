"""Optimizer, regularized objective, deterministic training loops.

The loss is the task objective plus lambda times the summed
coefficient-smoothness penalty over every spline group in the network.
Gradients come from recording the whole mini-batch on one scalar tape;
evaluation metrics use the vectorized forward path.  A non-finite loss or
gradient halts the run and records the step index -- divergence is a
measured outcome here, not an error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import AutodiffError, NonFiniteValue, Tape
from .layers import Network
from .splines import penalty_on_tape
from .tasks import DatasetSplit


class EmptySplit(Exception):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 128
    lam: float = 1e-4
    seed: int = 2024
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    task: str = "regression"  # "regression" (RMSE metric) or "classification" (accuracy)
    max_steps: int | None = None
    normalize_inputs: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


def hash_config(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- losses ---------------------------------------------------------------------


def _tape_task_loss(tape: Tape, net: Network, tb, X, y, task: str) -> int:
    inv_n = tape.constant(1.0 / X.shape[0])
    total = None
    for n in range(X.shape[0]):
        outs = net.tape_forward(tape, tb, X[n])
        if task == "regression":
            sample = None
            inv_d = tape.constant(1.0 / len(outs))
            for o, out in enumerate(outs):
                target = y[n] if np.ndim(y[n]) == 0 else y[n][o]
                r = tape.sub(out, tape.constant(target))
                sq = tape.mul(r, r)
                sample = sq if sample is None else tape.add(sample, sq)
            sample = tape.mul(sample, inv_d)
        else:
            vals = tape.values(outs)
            m = int(np.argmax(vals))
            exps = [tape.exp(tape.sub(z, outs[m])) for z in outs]
            sumexp = exps[0]
            for e in exps[1:]:
                sumexp = tape.add(sumexp, e)
            log_z = tape.add(tape.log(sumexp), outs[m])
            sample = tape.sub(log_z, outs[int(y[n])])
        total = sample if total is None else tape.add(total, sample)
    return tape.mul(total, inv_n)


def _tape_penalty(tape: Tape, net: Network, tb) -> int:
    total = None
    for m, bind in zip(net.modules, tb.per_module):
        if m.kind not in ("kan", "frkan"):
            continue
        dg = m.kv.dg if m.kind == "kan" else (m.b - m.a) / m.G
        for row in m.penalty_coef_ids(bind):
            node = penalty_on_tape(tape, row, dg)
            total = node if total is None else tape.add(total, node)
    return tape.constant(0.0) if total is None else total


def regularized_loss(net: Network, X: np.ndarray, y: np.ndarray, lam: float,
                     task: str = "regression"):
    """Loss value, flat gradient, and the (task, penalty) decomposition.

    total = task loss + lam * penalty; with lam = 0 the total equals the
    task loss exactly.
    """
    if X.shape[0] == 0:
        raise EmptySplit("empty batch")
    tape = Tape()
    tb = net.bind_tape(tape)
    task_node = _tape_task_loss(tape, net, tb, X, y, task)
    pen_node = _tape_penalty(tape, net, tb)
    root = tape.add(task_node, tape.mul(tape.constant(lam), pen_node))
    loss = tape.value(root)
    if not np.isfinite(loss):
        raise NonFiniteValue(f"loss is {loss!r}")
    grads = tape.gradient_vector(root, tb.n_params)
    parts = {"task_loss": tape.value(task_node), "penalty": tape.value(pen_node)}
    return loss, grads, parts


def evaluate(net: Network, data: DatasetSplit, metric: str | None = None,
             split: str = "test", normalized: bool = False) -> float:
    """RMSE, accuracy, or mean cross-entropy on one split."""
    X, y = data.split(split, normalized=normalized)
    if X.shape[0] == 0:
        raise EmptySplit(f"split {split!r} is empty")
    if metric is None:
        metric = "rmse" if data.task == "regression" else "accuracy"
    preds = net.forward_batch(X)
    if metric == "rmse":
        err = preds[:, 0] - y if preds.shape[1] == 1 else preds - np.atleast_2d(y)
        return float(np.sqrt(np.mean(err ** 2)))
    if metric == "accuracy":
        return float(np.mean(np.argmax(preds, axis=1) == y.astype(int)))
    if metric == "cross_entropy":
        z = preds - preds.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-np.mean(logp[np.arange(len(y)), y.astype(int)]))
    raise ValueError(f"unknown metric {metric!r}")


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected adaptive update; returns (new params, state)."""
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# -- run records -------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    steps: list = field(default_factory=list)   # dicts: step, loss, penalty, metric
    epoch_metrics: list = field(default_factory=list)
    nan_step: int | None = None
    wall_time: float = 0.0
    final_metric: float | None = None
    metric_name: str = "rmse"

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "metric", "penalty", "nan_flag"])
            for row in self.steps:
                w.writerow([row["step"], repr(row["loss"]),
                            "" if row["metric"] is None else repr(row["metric"]),
                            repr(row["penalty"]),
                            1 if self.nan_step == row["step"] else 0])
            if self.nan_step is not None and all(
                    r["step"] != self.nan_step for r in self.steps):
                w.writerow([self.nan_step, "", "", "", 1])

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "metric_name": self.metric_name,
            "final_metric": self.final_metric,
            "epoch_metrics": self.epoch_metrics,
            "nan_step": self.nan_step,
            "completed_steps": len(self.steps),
            "wall_time_s": self.wall_time,
        }


def train(net: Network, data: DatasetSplit, config: TrainConfig,
          extra_hash: dict | None = None):
    """Seeded mini-batch training; returns (RunRecord, net).

    Shuffling draws from a stream dedicated to the run seed, effective
    knots are re-sorted by construction on every forward pass, and the
    sorted-knot invariant is asserted after each update.  A non-finite
    loss halts the run with nan_step set.
    """
    t0 = time.perf_counter()
    Xtr, ytr = data.split("train", normalized=config.normalize_inputs)
    if Xtr.shape[0] == 0:
        raise EmptySplit("training split is empty")
    rng = np.random.default_rng([config.seed, 29])
    flat = net.get_flat()
    state = AdamState.zeros(flat.size)
    hash_payload = {"config": asdict(config), "data": data.manifest}
    if extra_hash:
        hash_payload.update(extra_hash)
    record = RunRecord(
        config_hash=hash_config(hash_payload),
        metric_name="rmse" if config.task == "regression" else "accuracy",
    )

    step = 0
    latest_metric = None
    done = False
    for epoch in range(config.epochs):
        perm = rng.permutation(Xtr.shape[0])
        for lo in range(0, Xtr.shape[0], config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            try:
                loss, grads, parts = regularized_loss(
                    net, Xtr[idx], ytr[idx], config.lam, config.task)
            except AutodiffError:
                record.nan_step = step
                done = True
                break
            flat, state = adam_step(flat, grads, state, config.learning_rate,
                                    config.beta1, config.beta2, config.eps)
            if not np.all(np.isfinite(flat)):
                record.nan_step = step
                done = True
                break
            net.set_flat(flat)
            net.assert_knots_sorted()
            record.steps.append({"step": step, "loss": loss,
                                 "penalty": parts["penalty"],
                                 "metric": latest_metric})
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
        latest_metric = evaluate(net, data, split="test",
                                 normalized=config.normalize_inputs)
        record.epoch_metrics.append({"epoch": epoch, "metric": latest_metric})

    if record.nan_step is None:
        record.final_metric = evaluate(net, data, split="test",
                                       normalized=config.normalize_inputs)
    record.wall_time = time.perf_counter() - t0
    return record, net


def penalty_total(net: Network) -> float:
    """Current smoothness penalty summed over every spline group."""
    from .splines import coeff_second_difference_penalty

    return sum(coeff_second_difference_penalty(sg) for sg in net.spline_groups())


def grid_range_experiment(ranges, depth: int, steps: int, seed: int,
                          classes: int = 10, input_dim: int = 10,
                          width: int = 8, G: int = 20, K: int = 3,
                          n_samples: int = 2000, batch_size: int = 32,
                          learning_rate: float = 1e-3, lam: float = 0.0):
    """Train one architecture per grid range; divergence is the measurement.

    Identical seeds give identical initial parameters across ranges; only
    the knot scale differs.  The SiLU shortcut is disabled so stability is
    attributable to the spline path alone.
    """
    from .layers import GridConfig, init_network
    from .tasks import generate_classification

    if depth < 3:
        raise ValueError(f"need depth >= 3 to exercise instability, got {depth}")
    data = generate_classification(n_samples, classes, input_dim, seed)
    hidden = " -> ".join([f"frkan:{width}"] * (depth - 1))
    descriptor = f"in:{input_dim} -> {hidden} -> frkan:{classes}"
    results = []
    for a, b in ranges:
        grid = GridConfig(G=G, K=K, a=a, b=b)
        net = init_network(descriptor, grid, seed=seed, silu=False, layernorm="auto")
        epochs = max(1, -(-steps * batch_size // data.train_idx.size))
        config = TrainConfig(learning_rate=learning_rate, epochs=epochs,
                             batch_size=batch_size, lam=lam, seed=seed,
                             task="classification", max_steps=steps)
        record, net = train(net, data, config,
                            extra_hash={"grid_range": [a, b], "descriptor": descriptor})
        results.append({"range": [a, b], "record": record, "net": net})
    return results
