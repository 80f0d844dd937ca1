"""Minibatch training loop for the signaling game."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .agents import Agents
from .game import ObjectDistribution, rollout_greedy, rollout_sample
from .objectives import (
    ObjectiveSpec,
    SurrogateResult,
    TrainState,
    baseline_loss,
    initial_train_state,
    rewo_update,
    surrogate_loss,
)
from .priors import AnalyticPrior

LOG_COLUMNS = ("step", "objective_kind", "beta", "recon_error_ema", "loss", "mean_msg_len", "sender_entropy")


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class BatchResult:
    surrogate: SurrogateResult
    baseline_loss: ad.Tensor
    recon_error: float
    mean_length: float
    sender_entropy: float
    log_r: np.ndarray


def batch_losses(
    agents: Agents,
    spec: ObjectiveSpec,
    beta: float,
    objects: np.ndarray,
    rng: np.random.Generator,
    use_baseline: bool = True,
) -> BatchResult:
    """Sample messages for ``objects`` and build the surrogate and baseline losses."""
    cfg = agents.config
    rollout = rollout_sample(agents.sender, objects, cfg.max_len, rng)
    masks = agents.receiver.sample_masks(len(objects), rng)
    prior_steps, final = agents.receiver.read(rollout.messages, rollout.lengths, masks)
    log_r = agents.receiver.object_log_prob(final, objects)

    if spec.kind == "ours":
        prior = prior_steps
    elif spec.kind == "elbo_alpha":
        prior = AnalyticPrior("exponential", cfg, spec.alpha).step_log_probs(rollout.messages, rollout.lengths)
    else:
        prior = None

    values = None
    if use_baseline:
        values = ad.stack([agents.baseline.value(s) for s in rollout.states], axis=1)
    sur = surrogate_loss(spec, beta, log_r, rollout.log_probs, rollout.entropies, rollout.mask, prior, values)
    bl = baseline_loss(sur.returns, values, rollout.mask) if use_baseline else ad.constant(0.0)

    free = rollout.mask.copy()
    forced = rollout.lengths == cfg.max_len
    if forced.any():
        free[forced, cfg.max_len - 1] = 0.0
    ent = rollout.entropies.data
    sender_entropy = float((ent * free).sum() / max(free.sum(), 1.0))
    return BatchResult(
        surrogate=sur,
        baseline_loss=bl,
        recon_error=float(-log_r.data.mean()),
        mean_length=float(rollout.lengths.mean()),
        sender_entropy=sender_entropy,
        log_r=log_r.data,
    )


class Trainer:
    """Adam on sender, receiver, and baseline jointly, with β annealing."""

    def __init__(
        self,
        agents: Agents,
        spec: ObjectiveSpec,
        distribution: ObjectDistribution,
        batch_size: int = 256,
        lr: float = 1e-3,
        seed=None,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.agents = agents
        self.spec = spec
        self.distribution = distribution
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.params = list(agents.named_parameters().values())
        self.names = list(agents.named_parameters())
        self.adam = nn.AdamState(lr=lr)
        self.state: TrainState = initial_train_state(spec)
        self.history: list[dict] = []

    def step(self) -> dict:
        objects = self.distribution.sample(self.rng, self.batch_size)
        beta = self.state.beta
        res = batch_losses(self.agents, self.spec, beta, objects, self.rng)
        total = ad.add(res.surrogate.loss, res.baseline_loss)
        step = self.state.step + 1
        if not np.isfinite(total.data):
            raise TrainingDivergedError(step, "non-finite loss")
        grads = ad.backward(total, self.params)
        for name, g in zip(self.names, grads):
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(step, f"non-finite gradient for {name}")
        nn.adam_step(self.params, grads, self.adam)
        self.state = rewo_update(self.state, res.recon_error, self.spec.beta)
        row = {
            "step": step,
            "objective_kind": self.spec.kind,
            "beta": beta,
            "recon_error_ema": self.state.recon_ema,
            "loss": float(total.data),
            "mean_msg_len": res.mean_length,
            "sender_entropy": res.sender_entropy,
        }
        self.history.append(row)
        return row

    def fit(self, n_updates: int, log_every: int = 0, callback=None, time_budget: float | None = None) -> list[dict]:
        start = time.monotonic()
        for _ in range(n_updates):
            row = self.step()
            if callback is not None and (log_every and row["step"] % log_every == 0):
                callback(row)
            if time_budget is not None and time.monotonic() - start > time_budget:
                break
        return self.history


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def greedy_language(agents: Agents, objects: np.ndarray) -> list[tuple[int, ...]]:
    with ad.no_grad():
        return rollout_greedy(agents.sender, objects, agents.config.max_len).message_list()


def greedy_accuracy(agents: Agents, objects: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Share of objects recovered exactly from the sender's greedy message."""
    with ad.no_grad():
        ro = rollout_greedy(agents.sender, objects, agents.config.max_len)
    pred = agents.receiver.predict(ro.messages, ro.lengths)
    hit = np.all(pred == np.asarray(objects), axis=1).astype(np.float64)
    if weights is None:
        return float(hit.mean())
    return float(np.dot(hit, weights) / np.sum(weights))
