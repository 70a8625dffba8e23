"""Attacks on a protected model and the noising defence.

Every attack works on copies of the victim; ``victim_guard`` checks the
victim's parameter hash is unchanged afterwards.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from authnet.nncore import (
    AdamState,
    Linear,
    SequentialModel,
    TrainConfig,
    accuracy,
    adam_step,
    backward,
    build_model,
    cross_entropy,
    fit,
    forward,
    magnitude_prune,
    one_hot,
    predict,
    softmax,
)
from authnet.pipeline import AuthKey, Metrics, apply_key, evaluate, mask_bounds

log = logging.getLogger(__name__)

PRUNE_RATES = tuple(float(r) for r in np.round(np.r_[np.arange(0, 0.4, 0.05), np.arange(0.4, 1.0001, 0.1)], 2))


class VictimMutatedError(RuntimeError):
    pass


@contextlib.contextmanager
def victim_guard(model: SequentialModel):
    before = model.param_hash()
    yield
    if model.param_hash() != before:
        raise VictimMutatedError("attack modified the victim's parameters")


@dataclass
class AttackReport:
    kind: str
    fraction: float
    acc_attacked: float
    acc_leg: float
    acc_ill: float
    seed: int
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "fraction", "acc_attacked", "acc_leg", "acc_ill", "seed")}


def _subset(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    m = max(1, int(round(fraction * n)))
    return np.sort(np.random.default_rng(seed).permutation(n)[:m])


# --- differential attack -----------------------------------------------------

@dataclass
class ImagePairSet:
    raw: np.ndarray
    keyed: np.ndarray

    def __post_init__(self):
        if len(self.raw) == 0 or self.raw.shape != self.keyed.shape:
            raise ValueError("need N >= 1 raw/keyed pairs of matching shape")

    @property
    def n(self) -> int:
        return len(self.raw)

    @classmethod
    def leak(cls, images, key: AuthKey, n: int, seed: int = 0, defense_strength: float = 0.0):
        """Pairs an attacker would collect; keyed side passes through the defence if enabled."""
        idx = np.random.default_rng(seed).permutation(len(images))[:n]
        raw = np.asarray(images[idx], dtype=np.float64)
        keyed = apply_key(raw, key)
        if defense_strength > 0:
            keyed = noising_defense(keyed, defense_strength, seed)
        return cls(raw, keyed)


def differential_mask(pairs: ImagePairSet) -> np.ndarray:
    """Mask_D: mean keyed-minus-raw difference over the leaked pairs."""
    return (pairs.keyed - pairs.raw).mean(axis=0)


def noising_defense(images: np.ndarray, strength: float, seed: int = 0) -> np.ndarray:
    """Texture-enhancing noise: unsharp-mask residual plus small uniform noise."""
    if strength < 0:
        raise ValueError("strength must be non-negative")
    x = np.asarray(images, dtype=np.float64)
    if strength == 0:
        return x.copy()
    sigma = (0,) * (x.ndim - 2) + (1.0, 1.0)
    resid = x - gaussian_filter(x, sigma=sigma)
    noise = np.random.default_rng(seed).uniform(-strength / 4, strength / 4, size=x.shape)
    return np.clip(x + strength * resid + noise, 0.0, 1.0)


def differential_attack(model: SequentialModel, key: AuthKey, leak_images, test_images, test_labels,
                        n: int = 100, defense_strength: float = 0.0, seed: int = 0) -> AttackReport:
    """Leak ``n`` pairs, add Mask_D to raw test images, measure ACC_diff.

    With the defence on, legitimate users also see noised keyed images, so
    ACC_leg is measured through the defence as well.
    """
    with victim_guard(model):
        pairs = ImagePairSet.leak(leak_images, key, n, seed, defense_strength)
        mask_d = differential_mask(pairs)
        acc_diff = accuracy(model, np.clip(test_images + mask_d, 0.0, 1.0), test_labels)
        keyed = apply_key(test_images, key)
        if defense_strength > 0:
            keyed = noising_defense(keyed, defense_strength, seed + 1)
        acc_leg = accuracy(model, keyed, test_labels)
        acc_ill = accuracy(model, test_images, test_labels)
    return AttackReport("differential", n / len(leak_images), acc_diff, acc_leg, acc_ill, seed,
                        {"n": n, "defense_strength": defense_strength},
                        {"mask_d_mean_abs": float(np.abs(mask_d).mean())})


# --- mask optimization (reverse engineering a key) ---------------------------

def mask_optimization_attack(model: SequentialModel, images, labels, test_images, test_labels,
                             train_fraction: float, epochs: int = 5, lr_m: float = 0.01, lr_u: float = 0.003,
                             eps_m: float = 0.5, eps_u: float = 0.5, batch_size: int = 128, seed: int = 0,
                             key: AuthKey | None = None):
    """Fit a fake key by cross-entropy through the frozen model; returns (report, fake key)."""
    idx = _subset(len(images), train_fraction, seed)
    x_tr, y_tr = images[idx], np.asarray(labels)[idx]
    with victim_guard(model):
        frozen = model.copy().freeze()
        c, h, w = frozen.input_shape
        lo, hi = mask_bounds(eps_m)
        mask, offset = np.ones((h, w)), np.zeros((c, h, w))
        state = AdamState.for_params([mask, offset])
        best, best_key = -1.0, None
        for epoch in range(epochs):
            order = np.random.default_rng(seed + epoch).permutation(len(x_tr))
            for start in range(0, len(order), batch_size):
                b = order[start:start + batch_size]
                raw = x_tr[b] * mask + offset
                logits = forward(frozen, np.clip(raw, 0.0, 1.0), record=True)
                _, g = cross_entropy(logits, one_hot(y_tr[b], frozen.num_classes))
                gx = backward(frozen, g)
                gx = np.where((raw > 0) & (raw < 1), gx, 0.0)
                adam_step([mask, offset], [(gx * x_tr[b]).sum(axis=(0, 1)), gx.sum(axis=0)], state, [lr_m, lr_u])
                np.clip(mask, lo, hi, out=mask)
                np.clip(offset, -eps_u, eps_u, out=offset)
            frozen.clear()
            fake = AuthKey(mask.copy(), offset.copy(), eps_m, eps_u)
            acc = accuracy(frozen, apply_key(test_images, fake), test_labels)
            log.info("mask attack epoch %d acc %.4f", epoch + 1, acc)
            if acc > best:
                best, best_key = acc, fake
        acc_leg = accuracy(model, apply_key(test_images, key), test_labels) if key is not None else float("nan")
        acc_ill = accuracy(model, test_images, test_labels)
    report = AttackReport("mask-opt", train_fraction, best, acc_leg, acc_ill, seed,
                          {"epochs": epochs, "lr_m": lr_m, "lr_u": lr_u})
    return report, best_key


# --- fine-tuning and pruning -------------------------------------------------

def finetune_attack(model: SequentialModel, key: AuthKey, new_images, new_labels, new_k: int,
                    cfg: TrainConfig, test_images, test_labels, new_test=None) -> AttackReport:
    """Fine-tune every parameter on a new task, then re-measure the original task.

    When the new task has a different class count the final Linear layer is
    swapped for a fresh one during fine-tuning; the original final layer is
    put back for the original-task measurements.
    """
    with victim_guard(model):
        work = model.copy().freeze(False)
        orig_last = work.layers[-1]
        rehead = new_k != model.num_classes
        if rehead:
            layers = work.layers[:-1] + [Linear(new_k)]
            work = SequentialModel(layers, model.input_shape, new_k, seed=cfg.rng_seed)
        fit(work, new_images, new_labels, cfg, loss="ce")
        new_acc = accuracy(work, *new_test) if new_test is not None else float("nan")
        if rehead:
            work = SequentialModel(work.layers[:-1] + [orig_last], model.input_shape, model.num_classes)
        m = evaluate(work, key, test_images, test_labels, timing_reps=0)
    return AttackReport("finetune", 1.0, m.acc_ill, m.acc_leg, m.acc_ill, cfg.rng_seed,
                        {"epochs": cfg.epochs, "lr": cfg.learning_rate, "new_k": new_k},
                        {"new_task_acc": new_acc, "reheaded": rehead})


def pruning_sweep(model: SequentialModel, key: AuthKey | None, test_images, test_labels,
                  rates=PRUNE_RATES) -> list[dict]:
    """Magnitude-prune at each rate and evaluate; without a key only raw accuracy is measured."""
    rates = list(rates)
    if rates != sorted(rates):
        raise ValueError("rates must be ascending")
    rows = []
    with victim_guard(model):
        for r in rates:
            pruned = magnitude_prune(model, r)
            if key is None:
                acc = accuracy(pruned, test_images, test_labels)
                rows.append({"rate": r, "acc": acc})
            else:
                m: Metrics = evaluate(pruned, key, test_images, test_labels, timing_reps=0)
                rows.append({"rate": r, "acc_leg": m.acc_leg, "acc_ill": m.acc_ill, "gap": m.gap})
    return rows


# --- authentication offsetting -----------------------------------------------

def offset_attack(model: SequentialModel, images, labels, test_images, test_labels, data_fraction: float = 0.2,
                  rounds: int = 10000, lr: float = 1e-3, batch_size: int = 128, seed: int = 0,
                  key: AuthKey | None = None) -> AttackReport:
    """Train an identity-initialised K->K affine layer on the frozen model's logits."""
    idx = _subset(len(images), data_fraction, seed)
    k = model.num_classes
    with victim_guard(model):
        extra = Linear(k)
        stacked = SequentialModel(model.copy().layers + [extra], model.input_shape, k, seed=seed)
        extra.weight[...] = np.eye(k)
        extra.bias[...] = 0.0
        n = len(idx)
        epochs = int(np.ceil(rounds * batch_size / n)) if rounds > 0 else 0
        if epochs:
            cfg = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size, rng_seed=seed)
            fit(stacked, images[idx], np.asarray(labels)[idx], cfg, frozen_prefix=len(model.layers))
        acc = accuracy(stacked, test_images, test_labels)
        acc_leg = accuracy(model, apply_key(test_images, key), test_labels) if key is not None else float("nan")
        acc_ill = accuracy(model, test_images, test_labels)
    return AttackReport("offset", data_fraction, acc, acc_leg, acc_ill, seed,
                        {"rounds": rounds, "lr": lr, "batch_size": batch_size, "epochs": epochs})


# --- model extraction --------------------------------------------------------

EXTRACTION_LOSSES = {"mse-soft-label": "mse-soft", "cross-entropy-soft-label": "ce-soft"}


@dataclass
class ExtractionConfig:
    query_source: str = "in-domain"  # or "out-of-domain"
    loss: str = "mse-soft-label"
    arch: str = "lenet"
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 128

    def __post_init__(self):
        if self.loss not in EXTRACTION_LOSSES:
            raise ValueError(f"loss must be one of {sorted(EXTRACTION_LOSSES)}")


def soft_label_oracle(model: SequentialModel):
    """Expose the victim only as input -> probability rows."""
    snapshot = model.copy()
    return lambda x: softmax(predict(snapshot, x))


def extract_model(oracle, queries: np.ndarray, cfg: ExtractionConfig, test_images, test_labels,
                  num_classes: int = 10, seed: int = 0):
    """Train a substitute on (query, oracle soft label) pairs; returns (report, substitute)."""
    if len(queries) == 0:
        raise ValueError("empty query set")
    soft = oracle(queries)
    sub = build_model(cfg.arch, seed=seed, num_classes=num_classes, input_shape=queries.shape[1:])
    tc = TrainConfig(learning_rate=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, rng_seed=seed)
    fit(sub, queries, soft, tc, loss=EXTRACTION_LOSSES[cfg.loss])
    acc = accuracy(sub, test_images, test_labels)
    report = AttackReport("extraction", 1.0, acc, float("nan"), float("nan"), seed, asdict(cfg),
                          {"n_queries": len(queries)})
    return report, sub


def constant_oracle(k: int, cls: int = 0):
    return lambda x: one_hot(np.full(len(x), cls), k)
