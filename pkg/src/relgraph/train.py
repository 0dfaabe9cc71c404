"""Deterministic training loop, optimizers, and checkpoint files.

A batch is a list of whole scenes; object counts vary per scene, so the
forward/backward pass runs per scene and gradients accumulate in a fixed
order before one optimizer update. Given (dataset, TrainConfig, ModelConfig)
the final checkpoint is bit-identical across runs on one platform, and a run
resumed from a checkpoint reproduces the uninterrupted run exactly because
the shuffling RNG state travels inside the checkpoint.

Checkpoints are versioned JSON; floats are written as shortest round-trip
decimals, so save/load is lossless.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointShapeError,
    CheckpointTensorError,
    CheckpointVersionError,
    ConfigError,
    DivergenceError,
)
from .model import ModelConfig, ModelParams, param_shapes, scene_losses
from .scenes import Scene
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Checkpoint",
    "init_params",
    "train_step",
    "train_run",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    gradient_clip_norm: float | None = None

    def validate(self) -> "TrainConfig":
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm <= 0:
            raise ConfigError("gradient_clip_norm must be positive")
        return self

    def to_json(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "gradient_clip_norm": self.gradient_clip_norm,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        known = set(cls().to_json())
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown train config field '{key}'")
        return cls(**data).validate()


@dataclass
class OptimizerState:
    """Adam moments per parameter name; empty for SGD."""

    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: matrices uniform(-a, a) with a = sqrt(6 / (fan_in +
    fan_out)), biases zero. Deterministic per seed; tensors are drawn in the
    fixed name order of ``param_shapes``.

    Each attention key projection starts as a copy of its query projection,
    so the initial pair affinities are symmetric positive semidefinite
    (objects start out attending to what resembles them). Training is free
    to move the two matrices apart.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            tensors[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif name.endswith(".key.w"):
            query = tensors[name.replace(".key.w", ".query.w")]
            tensors[name] = Tensor(query.data.copy(), requires_grad=True)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = Tensor(rng.uniform(-a, a, shape), requires_grad=True)
    return ModelParams(cfg, tensors)


def _optimizer_update(
    params: ModelParams, cfg: TrainConfig, state: OptimizerState
) -> None:
    if cfg.optimizer == "sgd":
        for _, t in params.items():
            t.data -= cfg.learning_rate * t.grad
        return
    state.step += 1
    t_step = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, t in params.items():
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state.moments[name]
        m *= b1
        m += (1.0 - b1) * t.grad
        v *= b2
        v += (1.0 - b2) * t.grad * t.grad
        m_hat = m / (1.0 - b1**t_step)
        v_hat = v / (1.0 - b2**t_step)
        t.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train_step(
    params: ModelParams,
    batch: list[Scene],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    state: OptimizerState,
) -> dict[str, float]:
    """One optimizer update from the averaged gradients over a batch.

    Updates ``params`` and ``state`` in place and returns the mean of every
    loss term over the batch. Raises DivergenceError naming the first
    non-finite term.
    """
    if not batch:
        raise ValueError("train_step: batch must not be empty")
    params.zero_grads()
    sums = {"object": 0.0, "relation": 0.0, "presence": 0.0, "total": 0.0}
    for scene in batch:
        with Tape() as tape:
            total, parts, _ = scene_losses(scene, params, model_cfg)
        for term, value in parts.items():
            if not np.isfinite(value.data).all():
                raise DivergenceError(f"non-finite '{term}' loss on {scene.scene_id}")
            sums[term] += value.item()
        sums["total"] += total.item()
        tape.backward(total)
    inv = 1.0 / len(batch)
    for _, t in params.items():
        t.grad *= inv
    if train_cfg.gradient_clip_norm is not None:
        norm = math.sqrt(sum(float((t.grad * t.grad).sum()) for _, t in params.items()))
        if norm > train_cfg.gradient_clip_norm:
            factor = train_cfg.gradient_clip_norm / norm
            for _, t in params.items():
                t.grad *= factor
    _optimizer_update(params, train_cfg, state)
    return {k: v * inv for k, v in sums.items()}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    optimizer: str
    opt_state: OptimizerState
    rng_state: dict | None
    epoch: int

    def params(self) -> ModelParams:
        return ModelParams(
            self.model_config,
            {n: Tensor(a.copy(), requires_grad=True) for n, a in self.tensors.items()},
        )


def _snapshot(
    params: ModelParams, train_cfg: TrainConfig, state: OptimizerState,
    rng: np.random.Generator | None, epoch: int,
) -> Checkpoint:
    return Checkpoint(
        model_config=params.config,
        tensors={n: t.data.copy() for n, t in params.items()},
        optimizer=train_cfg.optimizer,
        opt_state=OptimizerState(
            state.step, {n: (m.copy(), v.copy()) for n, (m, v) in state.moments.items()}
        ),
        rng_state=rng.bit_generator.state if rng is not None else None,
        epoch=epoch,
    )


def train_run(
    scenes: list[Scene],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    start: Checkpoint | None = None,
) -> tuple[Checkpoint, list[dict[str, float]]]:
    """Run (or resume) training for ``train_cfg.epochs`` total epochs.

    Scene order is reshuffled every epoch from a dedicated RNG whose state is
    carried in the checkpoint, so resuming from epoch k replays exactly the
    remaining epochs of a longer run. Returns the final checkpoint and one
    row of mean per-term losses per completed epoch.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not scenes and train_cfg.epochs > 0:
        raise ValueError("train_run: need at least one scene")
    if start is not None:
        params = start.params()
        state = OptimizerState(
            start.opt_state.step,
            {n: (m.copy(), v.copy()) for n, (m, v) in start.opt_state.moments.items()},
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = start.rng_state
        first_epoch = start.epoch + 1
    else:
        params = init_params(model_cfg, train_cfg.seed)
        state = OptimizerState()
        rng = np.random.default_rng((train_cfg.seed, 1))
        first_epoch = 1

    history: list[dict[str, float]] = []
    for epoch in range(first_epoch, train_cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        epoch_sums = {"object": 0.0, "relation": 0.0, "presence": 0.0, "total": 0.0}
        n_steps = 0
        for lo in range(0, len(scenes), train_cfg.batch_size):
            batch = [scenes[i] for i in order[lo : lo + train_cfg.batch_size]]
            try:
                metrics = train_step(params, batch, model_cfg, train_cfg, state)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {n_steps + 1}: {exc}") from exc
            for k in epoch_sums:
                epoch_sums[k] += metrics[k]
            n_steps += 1
        row = {k: v / n_steps for k, v in epoch_sums.items()}
        row["epoch"] = epoch
        history.append(row)
    final_epoch = max(train_cfg.epochs, start.epoch if start is not None else 0)
    return _snapshot(params, train_cfg, state, rng, final_epoch), history


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write of a versioned JSON checkpoint."""
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_json(),
        "epoch": ckpt.epoch,
        "tensors": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in ckpt.tensors.items()
        },
        "optimizer": {
            "type": ckpt.optimizer,
            "step": ckpt.opt_state.step,
            "state": {
                name: {"m": m.reshape(-1).tolist(), "v": v.reshape(-1).tolist()}
                for name, (m, v) in ckpt.opt_state.moments.items()
            },
        },
        "rng_state": ckpt.rng_state,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load and validate a checkpoint.

    Distinct errors for an unsupported schema version, a missing or
    unexpected tensor name, and a shape that disagrees with the stored model
    configuration.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig.from_json(doc["model_config"])
    expected = param_shapes(cfg)
    stored = doc["tensors"]
    for name in expected:
        if name not in stored:
            raise CheckpointTensorError(f"missing tensor '{name}'")
    for name in stored:
        if name not in expected:
            raise CheckpointTensorError(f"unexpected tensor '{name}'")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = stored[name]
        got = tuple(entry["shape"])
        if got != shape:
            raise CheckpointShapeError(f"tensor '{name}' has shape {got}, expected {shape}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointShapeError(f"tensor '{name}' has {values.size} values for shape {shape}")
        tensors[name] = values.reshape(shape)
    opt = doc["optimizer"]
    moments = {
        name: (
            np.asarray(entry["m"], dtype=np.float64).reshape(expected[name]),
            np.asarray(entry["v"], dtype=np.float64).reshape(expected[name]),
        )
        for name, entry in opt.get("state", {}).items()
    }
    return Checkpoint(
        model_config=cfg,
        tensors=tensors,
        optimizer=opt["type"],
        opt_state=OptimizerState(opt.get("step", 0), moments),
        rng_state=doc.get("rng_state"),
        epoch=int(doc["epoch"]),
    )
