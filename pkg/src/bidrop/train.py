"""Training loop: k dropout passes per batch, sub-net selection, masked Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import (
    Dataset,
    batches,
    inject_label_noise,
    load_csv,
    make_blobs,
    make_imbalanced,
    make_xor,
    num_batches,
    subsample,
)
from .model import Mlp, loss_and_grad, predict_metrics
from .optim import AdamState, UpdateRecord, masked_adam_step
from .selection import BIDROP_KINDS, StepContext, SubnetMask, SubnetSelector, mean_gradient
from .tensor import RngStream

log = logging.getLogger(__name__)

# stream ids under one seed; each consumer owns its stream
INIT_STREAM = 1
DROPOUT_STREAM = 2
SHUFFLE_STREAM = 3
SELECT_STREAM = 4
# data_seed streams
TRAIN_DATA_STREAM = 101
DEV_DATA_STREAM = 102
CORRUPT_STREAM = 103


def build_datasets(config: TrainConfig, base_dir=None) -> tuple[Dataset, Dataset]:
    """Train and dev splits for a config; corruptions touch the train split only."""
    if config.dataset == "csv":
        root = Path(base_dir) if base_dir is not None else Path.cwd()
        task = "regression" if config.loss == "mean-squared-error" else "classification"
        train = load_csv(root / config.train_csv, task=task, split="train")
        dev = load_csv(root / config.dev_csv, task=task, split="dev")
        if task == "classification":
            classes = max(train.num_classes, dev.num_classes)
            train = Dataset(train.features, train.targets, "train", task, classes)
            dev = Dataset(dev.features, dev.targets, "dev", task, classes)
        if train.dim != dev.dim:
            raise ValueError(f"train has {train.dim} features but dev has {dev.dim}")
    else:
        seed = config.data_seed
        if config.dataset == "xor":
            train = make_xor(config.n_train, config.noise_std, RngStream(seed, TRAIN_DATA_STREAM))
            dev = make_xor(config.n_dev, config.noise_std, RngStream(seed, DEV_DATA_STREAM), split="dev")
        else:
            train = make_blobs(config.n_train, config.dim, config.separation, RngStream(seed, TRAIN_DATA_STREAM))
            dev = make_blobs(config.n_dev, config.dim, config.separation, RngStream(seed, DEV_DATA_STREAM), split="dev")
    rng = RngStream(config.data_seed, CORRUPT_STREAM)
    if config.subsample:
        train = subsample(train, config.subsample, rng)
    if config.imbalance:
        train = make_imbalanced(train, config.minority_class, config.imbalance, rng)
    if config.label_noise:
        train = inject_label_noise(train, config.label_noise, rng)
    return train, dev


def build_model(config: TrainConfig, train: Dataset, rng: RngStream) -> Mlp:
    d_out = 1 if train.task == "regression" else train.num_classes
    sizes = [train.dim, *config.hidden_sizes(), d_out]
    return Mlp(sizes, config.activation, config.keep_prob, rng=rng)


def train_step(model: Mlp, x, y, config: TrainConfig, state: AdamState, rng: RngStream,
               selector: SubnetSelector, step: int, select_rng=None, fisher_batches=None) -> UpdateRecord:
    """One training step on batch ``(x, y)``.

    Runs ``config.k`` train-mode passes with fresh dropout masks, takes their
    gradients, asks ``selector`` for the step's mask and applies one masked
    Adam step with the mean gradient. The mask is left on ``selector.current``.
    """
    samples = []
    losses = []
    for _ in range(config.k):
        logits, trace = model.forward(x, rng, train=True)
        loss, grads = loss_and_grad(model, trace, logits, y, config.loss)
        samples.append(grads)
        losses.append(loss)
    ctx = StepContext(step=step, params=model.params, samples=samples, rng=select_rng, fisher_batches=fisher_batches)
    mask = selector.mask(ctx)
    record = masked_adam_step(model.params, mean_gradient(samples), mask, state)
    record.loss = float(np.mean(losses))
    return record


def fisher_batch_grads(model: Mlp, train: Dataset, config: TrainConfig):
    """Callable yielding eval-mode per-batch gradients over the whole train split."""

    def generate():
        order = np.arange(len(train))
        for idx in batches(len(train), config.batch_size, order):
            logits, trace = model.forward(train.features[idx], train=False)
            _, grads = loss_and_grad(model, trace, logits, train.targets[idx], config.loss)
            yield grads

    return generate


@dataclass
class SeedResult:
    seed: int
    final: dict
    trajectory: list = field(default_factory=list)
    churn: list = field(default_factory=list)
    selected_counts: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    steps: int = 0
    final_mask: SubnetMask | None = None
    warnings: list = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer state and RNG streams for one seed."""

    def __init__(self, config: TrainConfig, train: Dataset, dev: Dataset, seed: int):
        self.config = config
        self.train = train
        self.dev = dev
        self.seed = seed
        self.model = build_model(config, train, RngStream(seed, INIT_STREAM))
        self.state = AdamState.for_params(
            self.model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps_adam
        )
        self.selector = SubnetSelector(config.strategy_config())
        self.dropout_rng = RngStream(seed, DROPOUT_STREAM)
        self.shuffle_rng = RngStream(seed, SHUFFLE_STREAM)
        self.select_rng = RngStream(seed, SELECT_STREAM)
        self.step_count = 0

    def step(self, idx) -> UpdateRecord:
        fisher = None
        if self.config.strategy == "static-fisher" and self.selector.static_mask is None:
            fisher = fisher_batch_grads(self.model, self.train, self.config)
        record = train_step(
            self.model, self.train.features[idx], self.train.targets[idx], self.config, self.state,
            self.dropout_rng, self.selector, self.step_count, self.select_rng, fisher,
        )
        self.step_count += 1
        return record

    def evaluate(self) -> dict:
        return predict_metrics(self.model, self.dev, self.config.minority_class)

    def total_steps(self) -> int:
        per_epoch = num_batches(len(self.train), self.config.effective_batch_size)
        limits = []
        if self.config.epochs:
            limits.append(self.config.epochs * per_epoch)
        if self.config.max_steps:
            limits.append(self.config.max_steps)
        return min(limits)

    def run(self) -> SeedResult:
        config = self.config
        total = self.total_steps()
        bsz = config.effective_batch_size
        eval_every = config.eval_every or num_batches(len(self.train), bsz)
        result = SeedResult(self.seed, final={})
        if config.strategy in BIDROP_KINDS and config.k == 1:
            result.warnings.append("k=1 with a bidrop strategy: perturbation factor degenerates to |mu|/eps_den")
        previous = None
        epoch = 0
        while self.step_count < total:
            order = self.shuffle_rng.permutation(len(self.train))
            for idx in batches(len(self.train), bsz, order):
                record = self.step(idx)
                mask = self.selector.current
                result.selected_counts.append(record.selected_count)
                result.losses.append(record.loss)
                if previous is not None:
                    result.churn.append(mask.churn(previous))
                previous = mask
                if self.step_count % eval_every == 0 or self.step_count == total:
                    result.trajectory.append({"epoch": epoch, "step": self.step_count, "metrics": self.evaluate()})
                if self.step_count >= total:
                    break
            epoch += 1
        result.steps = self.step_count
        result.final = dict(result.trajectory[-1]["metrics"])
        result.final_mask = previous
        if not np.isfinite(result.losses[-1]):
            raise FloatingPointError(f"seed {self.seed}: training loss diverged")
        log.debug("seed %d finished after %d steps: %s", self.seed, self.step_count, result.final)
        return result


def run_seed(config: TrainConfig, train: Dataset, dev: Dataset, seed: int) -> SeedResult:
    return Trainer(config, train, dev, seed).run()
