"""Counterfactual training: min-max robustification of a target classifier.

Each round attacks the current model with counterfactual searches on fresh
styles, labels every counterfactual with the pre-update model's own soft
prediction on the corresponding original image, and trains one epoch on the
mix of those counterfactuals with equally many originally-labeled samples
(alternating batches). Ground truth is never read for counterfactual samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import engine as eng
from . import world as tw
from .directions import AttributeSpace
from .errors import PreconditionError, TrainingDivergedError
from .serialize import document_hash, model_hash, world_hash


@dataclass(frozen=True)
class CTConfig:
    rounds: int = 5
    batch_size: int = 64  # counterfactuals generated per round
    mix_ratio: float = 1.0  # originals per counterfactual
    search: eng.SearchConfig = field(
        default_factory=lambda: eng.SearchConfig(iterations=25)
    )
    learning_rate: float = 0.001
    train_batch_size: int = 64
    seed_index: int = 0
    fr_population: int = 500
    fr_budgets: Tuple[int, ...] = (25, 100)

    def __post_init__(self):
        if self.rounds < 1:
            raise PreconditionError("counterfactual training needs rounds >= 1")
        if self.batch_size < 1:
            raise PreconditionError("counterfactual batch size must be >= 1")
        if self.mix_ratio <= 0:
            raise PreconditionError("original-data mixing ratio must be positive")
        if self.fr_population < 1:
            raise PreconditionError("flip-resistance population must be >= 1")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "batch_size": self.batch_size,
            "mix_ratio": self.mix_ratio,
            "search": {
                "step_size": self.search.step_size,
                "bound": self.search.bound,
                "iterations": self.search.iterations,
                "optimizer": self.search.optimizer,
                "space": self.search.space,
                "weights": [
                    self.search.weights.target,
                    self.search.weights.structure,
                    self.search.weights.attribute,
                ],
            },
            "learning_rate": self.learning_rate,
            "train_batch_size": self.train_batch_size,
            "seed_index": self.seed_index,
            "fr_population": self.fr_population,
            "fr_budgets": list(self.fr_budgets),
        }


@dataclass
class RoundStats:
    round_index: int
    flip_rate: float  # of this round's batch against the round's starting model
    mean_train_loss: float
    labels: np.ndarray  # soft labels assigned to the counterfactual batch
    original_styles: np.ndarray


@dataclass
class CTReport:
    rounds: int
    per_round_flip_rate: List[float]
    fr_before: Dict[int, float]
    fr_after: Dict[int, float]
    accuracy_before: float
    accuracy_after: float
    config_hash: str
    world_hash: str
    model_hash_before: str
    model_hash_after: str

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "per_round_flip_rate": self.per_round_flip_rate,
            "fr_before": {str(k): v for k, v in sorted(self.fr_before.items())},
            "fr_after": {str(k): v for k, v in sorted(self.fr_after.items())},
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "config_hash": self.config_hash,
            "world_hash": self.world_hash,
            "model_hash_before": self.model_hash_before,
            "model_hash_after": self.model_hash_after,
        }

    def content_hash(self) -> str:
        return document_hash(self.to_dict())


def _one_epoch(model, images, labels, batch_order, lr) -> float:
    """One SGD pass over the mixed data in the given fixed batch order.

    Plain SGD, not Adam: fine-tuning a trained boundary with Adam's
    per-coordinate normalization moves every weight a full step on the very
    first update, which wrecks the model long before the counterfactual
    signal is absorbed.
    """
    flat = images.reshape(len(images), -1)
    values = [model.w1, model.b1, model.w2, model.b2]
    losses = []
    step = 0
    for idx in batch_order:
        tape = ad.Tape()
        leaves = [tape.leaf(v) for v in values]
        loss = tw._batch_loss_node(tape, "classifier", leaves, flat[idx], labels[idx])
        step += 1
        if not np.isfinite(loss.value):
            raise TrainingDivergedError(step)
        grads = ad.backward(loss, leaves)
        for value, leaf in zip(values, leaves):
            value -= lr * grads[leaf]
        losses.append(float(loss.value))
    model.w1, model.b1, model.w2, model.b2 = values
    return float(np.mean(losses)) if losses else 0.0


def ct_round(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    config: CTConfig,
    originals: tw.LabeledDataset,
    round_index: int = 0,
) -> Tuple[tw.TargetModel, RoundStats]:
    """One min-max round; returns the updated model and the round's statistics."""
    if model.kind != "classifier":
        raise PreconditionError("counterfactual training is defined for binary classifiers")
    if len(originals) == 0:
        raise PreconditionError("counterfactual training needs original labeled data to mix in")

    c = world.config
    n_cf = config.batch_size
    base = (config.seed_index * 1000 + round_index) * 1_000_000

    cf_images = np.zeros((n_cf, c.height, c.width))
    cf_labels = np.zeros(n_cf)
    styles = np.zeros((n_cf, c.style_dim))
    flips = np.zeros(n_cf, dtype=bool)
    for k in range(n_cf):
        s = tw.sample_style(world, base + k, stream=tw.STREAM_CT)
        res = eng.search_counterfactual(world, model, space, s, config.search, sample_index=k)
        styles[k] = s
        cf_images[k] = res.best_image
        # self-label: the pre-update model's prediction on the original image
        cf_labels[k] = float(model.predict(res.original_image))
        flips[k] = res.flipped

    # equal-count originals per the mixing ratio, drawn deterministically
    n_orig = int(round(config.mix_ratio * n_cf))
    rng = tw.rng_for(c.seed, tw.STREAM_CT, base + 999_999)
    pick = rng.integers(0, len(originals), size=n_orig)
    images = np.concatenate([cf_images, originals.images[pick]])
    labels = np.concatenate([cf_labels, originals.labels[pick]])

    # alternating counterfactual/original batches, each side in its own order
    bs = config.train_batch_size
    cf_batches = [np.arange(i, min(i + bs, n_cf)) for i in range(0, n_cf, bs)]
    orig_batches = [
        np.arange(n_cf + i, n_cf + min(i + bs, n_orig)) for i in range(0, n_orig, bs)
    ]
    order: List[np.ndarray] = []
    for i in range(max(len(cf_batches), len(orig_batches))):
        if i < len(cf_batches):
            order.append(cf_batches[i])
        if i < len(orig_batches):
            order.append(orig_batches[i])

    updated = model.copy()
    mean_loss = _one_epoch(updated, images, labels, order, config.learning_rate)
    stats = RoundStats(
        round_index=round_index,
        flip_rate=float(flips.mean()),
        mean_train_loss=mean_loss,
        labels=cf_labels,
        original_styles=styles,
    )
    return updated, stats


def measure_flip_resistance(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    config: CTConfig,
) -> Dict[int, float]:
    """Flip resistance on a fresh evaluation population, per budget."""
    budgets = sorted(config.fr_budgets)
    iters = max(budgets)
    search = eng.SearchConfig(
        step_size=config.search.step_size,
        bound=config.search.bound,
        iterations=iters,
        optimizer=config.search.optimizer,
        space=config.search.space,
        flip_threshold=config.search.flip_threshold,
        weights=config.search.weights,
        keypoint_displacement=config.search.keypoint_displacement,
        seed_index=config.search.seed_index,
    )
    results = []
    for k in range(config.fr_population):
        s = tw.sample_style(world, config.seed_index * 1_000_000 + k, stream=tw.STREAM_EVAL)
        results.append(
            eng.search_counterfactual(world, model, space, s, search, sample_index=k)
        )
    from .diagnosis import flip_stats

    return {b: flip_stats(results, b).flip_resistance for b in budgets}


def ct_train(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    config: CTConfig,
    originals: tw.LabeledDataset,
    heldout: tw.LabeledDataset,
) -> Tuple[tw.TargetModel, CTReport]:
    """Full counterfactual training plus before/after evaluation."""
    if model.kind != "classifier":
        raise PreconditionError("counterfactual training is defined for binary classifiers")
    if len(heldout) == 0:
        raise PreconditionError("held-out accuracy needs a nonempty dataset")

    hash_before = model_hash(model)
    acc_before = tw.evaluate_accuracy(model, heldout)
    fr_before = measure_flip_resistance(world, model, space, config)

    current = model
    per_round = []
    for r in range(config.rounds):
        current, stats = ct_round(world, current, space, config, originals, round_index=r)
        per_round.append(stats.flip_rate)

    acc_after = tw.evaluate_accuracy(current, heldout)
    fr_after = measure_flip_resistance(world, current, space, config)

    report = CTReport(
        rounds=config.rounds,
        per_round_flip_rate=per_round,
        fr_before=fr_before,
        fr_after=fr_after,
        accuracy_before=acc_before,
        accuracy_after=acc_after,
        config_hash=document_hash(config.to_dict()),
        world_hash=world_hash(world),
        model_hash_before=hash_before,
        model_hash_after=model_hash(current),
    )
    return current, report
