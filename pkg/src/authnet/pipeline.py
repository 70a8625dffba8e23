"""Head/tail splitting, key inversion, mixed-set fine-tuning and evaluation."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from authnet.nncore import (
    Conv2d,
    SequentialModel,
    TrainConfig,
    accuracy,
    backward,
    fit,
    forward,
    mse,
    predict,
)
from authnet.nncore.training import TrainingError

log = logging.getLogger(__name__)

MASK_MODES = ("deviation", "literal")


class KeyConstraintError(ValueError):
    pass


class SplitError(ValueError):
    pass


# --- model splitting ----------------------------------------------------------

@dataclass
class SplitModel:
    head: SequentialModel
    tail: SequentialModel
    seg_index: int

    @property
    def gate_shape(self) -> tuple[int, ...]:
        return self.head.output_shape

    def as_model(self) -> SequentialModel:
        """The protected network t(h(x)) as a single sequential model."""
        layers = [layer for layer in self.head.copy().layers] + [layer for layer in self.tail.copy().layers]
        model = SequentialModel(layers, self.head.input_shape, self.tail.num_classes, seed=None)
        model.stages = self.head.stages + tuple(s + len(self.head) for s in self.tail.stages)
        return model


def stage_to_seg_index(model: SequentialModel, stage: int) -> int:
    """Map a 1-based stage position (``Seq_seg``) to the flat gate-layer index."""
    if not 1 <= stage <= len(model.stages):
        raise SplitError(f"stage {stage} outside 1..{len(model.stages)}")
    return model.stages[stage - 1] - 1


def split_model(model: SequentialModel, seg_index: int) -> SplitModel:
    """Split after layer ``seg_index`` (the gate layer) into head and tail."""
    n = len(model.layers)
    if not 0 <= seg_index < n - 1:
        raise SplitError(f"seg_index {seg_index} leaves an empty head or tail (model has {n} layers)")
    gate = model.layers[seg_index]
    if len(gate.out_shape) != 3:
        raise SplitError(f"gate layer {seg_index} output {gate.out_shape} is not a [C,H,W] map")
    if not any(isinstance(layer, Conv2d) for layer in model.layers[seg_index + 1:]):
        raise SplitError("tail must keep at least one convolution layer")
    src = model.copy()
    head_layers, tail_layers = src.layers[:seg_index + 1], src.layers[seg_index + 1:]
    head = SequentialModel(head_layers, model.input_shape, None, seed=None)
    tail = SequentialModel(tail_layers, gate.out_shape, model.num_classes, seed=None)
    head.stages = tuple(s for s in model.stages if s <= seg_index + 1)
    tail.stages = tuple(s - seg_index - 1 for s in model.stages if s > seg_index + 1)
    return SplitModel(head, tail, seg_index)


# --- gate statistics ----------------------------------------------------------

def squeeze(featmap: np.ndarray) -> np.ndarray:
    """Per-channel mean over batch and spatial axes of an [N, C, H, W] map."""
    featmap = np.asarray(featmap)
    if featmap.ndim != 4:
        raise ValueError(f"squeeze expects a 4-D feature map, got shape {featmap.shape}")
    return featmap.mean(axis=(0, 2, 3))


@dataclass
class GateProfile:
    z: np.ndarray

    @property
    def norm_inf(self) -> float:
        return float(np.max(np.abs(self.z)))


def gate_profile(head: SequentialModel, images: np.ndarray, chunk: int = 1000) -> GateProfile:
    total, count = 0.0, 0
    for i in range(0, len(images), chunk):
        batch = images[i:i + chunk]
        total = total + squeeze(forward(head, batch)) * len(batch)
        count += len(batch)
    if count == 0:
        raise ValueError("empty sample set")
    return GateProfile(np.asarray(total) / count)


def auth_bits_from_profile(z: np.ndarray, l: int) -> tuple[int, ...]:
    c = len(z)
    if not 1 <= l < c:
        raise ValueError(f"number of authentication bits {l} must lie in [1, {c - 1}]")
    # stable sort: equal activations resolve to the lower channel index
    return tuple(sorted(int(i) for i in np.argsort(z, kind="stable")[:l]))


def select_auth_bits(head: SequentialModel, sample_images: np.ndarray, l: int) -> tuple[int, ...]:
    """The ``l`` gate channels with the smallest squeezed activation."""
    if len(sample_images) == 0:
        raise ValueError("empty sample set")
    return auth_bits_from_profile(gate_profile(head, sample_images).z, l)


def gamma_target(profile: GateProfile | np.ndarray, gamma: float, auth_bits) -> np.ndarray:
    z = profile.z if isinstance(profile, GateProfile) else np.asarray(profile)
    norm = float(np.max(np.abs(z)))
    target = np.zeros(len(z))
    target[list(auth_bits)] = gamma * norm
    return target


# --- keys -------------------------------------------------------------------

@dataclass
class AuthKey:
    """Secret key: keyed image = clip(mask * image + offset, 0, 1).

    In ``deviation`` mode the mask lives in [1 - eps_m, 1 + eps_m]; in
    ``literal`` mode in (0, eps_m].  The offset lives in [-eps_u, eps_u].
    """

    mask: np.ndarray  # [H, W]
    offset: np.ndarray  # [C, H, W]
    eps_m: float
    eps_u: float
    auth_bits: tuple[int, ...] = ()
    seg_index: int = -1
    gamma_target: float = 0.0
    mask_mode: str = "deviation"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.auth_bits = tuple(int(b) for b in self.auth_bits)
        if self.mask_mode not in MASK_MODES:
            raise KeyConstraintError(f"unknown mask mode {self.mask_mode!r}")
        if self.mask.ndim != 2 or self.offset.ndim != 3 or self.offset.shape[1:] != self.mask.shape:
            raise KeyConstraintError(f"mask {self.mask.shape} / offset {self.offset.shape} shapes disagree")
        lo, hi = mask_bounds(self.eps_m, self.mask_mode)
        if np.any(self.mask < lo) or np.any(self.mask > hi) or not np.all(np.isfinite(self.mask)):
            raise KeyConstraintError("mask outside its box constraint")
        if np.any(np.abs(self.offset) > self.eps_u) or not np.all(np.isfinite(self.offset)):
            raise KeyConstraintError("offset outside its box constraint")

    @classmethod
    def identity(cls, image_shape, eps_m=0.5, eps_u=0.5, **kw) -> "AuthKey":
        c, h, w = image_shape
        return cls(np.ones((h, w)), np.zeros((c, h, w)), eps_m, eps_u, **kw)

    @property
    def image_shape(self):
        return self.offset.shape


def mask_bounds(eps_m: float, mode: str = "deviation") -> tuple[float, float]:
    if mode == "literal":
        return 1e-12, eps_m
    return 1.0 - eps_m, 1.0 + eps_m


def apply_key(images: np.ndarray, key: AuthKey) -> np.ndarray:
    """Keyed image(s): mask broadcast over channels, then clamped to [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != key.offset.shape:
        raise ValueError(f"image shape {images.shape[-3:]} does not match key {key.offset.shape}")
    return np.clip(images * key.mask + key.offset, 0.0, 1.0)


def discrimination(head: SequentialModel, x: np.ndarray, key: AuthKey, auth_bits=None) -> float:
    """Relative L-inf shift of the squeezed authentication-bit activations."""
    if len(x) == 0:
        raise ValueError("empty batch")
    bits = list(key.auth_bits if auth_bits is None else auth_bits)
    z0 = gate_profile(head, x).z
    z1 = gate_profile(head, apply_key(x, key)).z
    norm = float(np.max(np.abs(z0)))
    if norm == 0.0:
        raise ZeroDivisionError("clean gate activations are all zero; discrimination undefined")
    return float(np.max(np.abs(z1[bits] - z0[bits]))) / norm


@dataclass
class InversionResult:
    key: AuthKey
    final_loss: float
    final_gamma: float
    history: list[dict] = field(default_factory=list)
    warning: str | None = None


def _key_loss_and_grads(head, x, z0, target, mask, offset, want_grad=True):
    raw = x * mask + offset
    keyed = np.clip(raw, 0.0, 1.0)
    feat = forward(head, keyed, record=want_grad)
    delta = squeeze(feat) - z0
    loss, gdelta = mse(delta[None, :], target[None, :])
    if not want_grad:
        return loss, None, None
    n, c, h, w = feat.shape
    gfeat = np.broadcast_to((gdelta[0] / (n * h * w))[None, :, None, None], feat.shape)
    gx = backward(head, np.ascontiguousarray(gfeat))
    head.clear()
    gx = np.where((raw > 0.0) & (raw < 1.0), gx, 0.0)
    return loss, (gx * x).sum(axis=(0, 1)), gx.sum(axis=0)


def invert_key(head: SequentialModel, sample_images: np.ndarray, auth_bits, gamma: float,
               eps_m: float = 0.5, eps_u: float = 0.5, lr_m: float = 0.01, lr_u: float = 0.003,
               iters: int = 300, seed: int = 0, batch_size: int = 256,
               mask_mode: str = "deviation", seg_index: int = -1, on_step=None) -> InversionResult:
    """Optimize {mask, offset} so the gate shift matches the target vector.

    The target raises the authentication bits by ``gamma * ||z||_inf`` and
    leaves every other channel at zero shift.  Adam runs with separate step
    sizes for mask and offset; both are projected into their boxes after
    each step.  ``Gamma`` is recomputed from each batch's own clean profile.
    ``on_step(step, mask, offset)`` sees the projected key after every step.
    """
    from authnet.nncore import AdamState, adam_step

    if eps_m <= 0 or eps_u <= 0:
        raise ValueError("key bounds must be positive")
    head = head.copy().freeze()
    c, h, w = head.input_shape
    lo, hi = mask_bounds(eps_m, mask_mode)
    mask = np.clip(np.ones((h, w)), lo, hi)
    offset = np.zeros((c, h, w))
    rng = np.random.default_rng(seed)
    n = len(sample_images)
    if n == 0:
        raise ValueError("empty sample set")
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    z0s = [squeeze(forward(head, sample_images[b])) for b in batches]
    targets = [gamma_target(z0, gamma, auth_bits) for z0 in z0s]
    state = AdamState.for_params([mask, offset])
    history = []
    for step in range(iters):
        j = step % len(batches)
        x = sample_images[batches[j]]
        loss, gmask, goffset = _key_loss_and_grads(head, x, z0s[j], targets[j], mask, offset)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite inversion loss at step {step}")
        adam_step([mask, offset], [gmask, goffset], state, [lr_m, lr_u])
        np.clip(mask, lo, hi, out=mask)
        np.clip(offset, -eps_u, eps_u, out=offset)
        if on_step is not None:
            on_step(step, mask, offset)
        if step % 50 == 0 or step == iters - 1:
            history.append({"step": step, "loss": loss})
            log.info("inversion step %d loss %.6f", step, loss)
    key = AuthKey(mask, offset, eps_m, eps_u, auth_bits, seg_index, gamma, mask_mode)
    losses = [_key_loss_and_grads(head, sample_images[b], z0, t, mask, offset, want_grad=False)[0]
              for b, z0, t in zip(batches, z0s, targets)]
    final_loss = float(np.mean(losses))
    final_gamma = discrimination(head, sample_images, key, auth_bits)
    note = None
    if final_gamma < 0.5 * gamma:
        note = f"inversion reached gamma {final_gamma:.3f} < half of target {gamma}"
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return InversionResult(key, final_loss, final_gamma, history, note)


def balanced_sample(labels: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    """Indices of ``per_class`` random examples from every class."""
    rng = np.random.default_rng(seed)
    picks = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        picks.append(rng.choice(idx, size=min(per_class, len(idx)), replace=False))
    return np.sort(np.concatenate(picks))


def gate_activation_deltas(head: SequentialModel, images: np.ndarray, key: AuthKey) -> dict:
    """Relative change of squeezed gate activations caused by the key."""
    z0 = gate_profile(head, images).z
    z1 = gate_profile(head, apply_key(images, key)).z
    bits = np.zeros(len(z0), dtype=bool)
    bits[list(key.auth_bits)] = True
    scale = max(float(np.mean(np.abs(z0))), 1e-12)
    delta = z1 - z0
    return {
        "delta": delta,
        "mean_abs_delta_ab": float(np.mean(np.abs(delta[bits]))),
        "mean_abs_delta_rest": float(np.mean(np.abs(delta[~bits]))),
        "mean_delta_ab": float(np.mean(delta[bits])),
        "rel_change_all": float(np.mean(np.abs(delta))) / scale,
        "rel_change_ab": float(np.mean(np.abs(delta[bits]))) / scale,
    }


# --- mixed data set and tail fine-tuning ------------------------------------

@dataclass
class MixedDataset:
    images: np.ndarray
    labels: np.ndarray
    legit: np.ndarray  # bool flags

    @property
    def n_leg(self) -> int:
        return int(self.legit.sum())

    @property
    def n_ill(self) -> int:
        return int((~self.legit).sum())

    def __len__(self):
        return len(self.labels)


def build_dmix(images: np.ndarray, labels: np.ndarray, key: AuthKey | None, k: int, seed: int,
               include_illegal: bool = True) -> MixedDataset:
    """Keyed images with true labels mixed with raw images with uniform random labels."""
    if k < 2:
        raise ValueError("need K >= 2")
    rng = np.random.default_rng(seed)
    n = len(images)
    parts_x = [apply_key(images, key) if key is not None else np.asarray(images, dtype=np.float64)]
    parts_y = [np.asarray(labels, dtype=np.int64)]
    parts_f = [np.ones(n, dtype=bool)]
    random_labels = rng.integers(0, k, size=n)
    if include_illegal:
        parts_x.append(np.asarray(images, dtype=np.float64))
        parts_y.append(random_labels)
        parts_f.append(np.zeros(n, dtype=bool))
    x = np.concatenate(parts_x)
    y = np.concatenate(parts_y)
    f = np.concatenate(parts_f)
    order = rng.permutation(len(y))
    return MixedDataset(x[order], y[order], f[order])


def finetune_tail(split: SplitModel, key: AuthKey, dmix: MixedDataset, cfg: TrainConfig,
                  test_images=None, test_labels=None):
    """Fine-tune only the tail on the mixed set; returns (SplitModel, history).

    When a test set is given, each history row also carries acc_leg/acc_ill.
    """
    if key.seg_index not in (-1, split.seg_index):
        raise SplitError(f"key was inverted at layer {key.seg_index}, model split at {split.seg_index}")
    model = split.as_model()
    head_len = len(split.head)
    prefix = head_len
    while prefix < len(model.layers) and not model.layers[prefix].has_params:
        prefix += 1
    for layer in model.layers[:head_len]:
        layer.frozen = True

    on_epoch = None
    if test_images is not None:
        keyed_test = apply_key(test_images, key)

        def on_epoch(m, epoch):
            leg = accuracy(m, keyed_test, test_labels)
            ill = accuracy(m, test_images, test_labels)
            return {"acc_leg": leg, "acc_ill": ill, "gap": leg - ill}

    history = fit(model, dmix.images, dmix.labels, cfg, loss="ce", frozen_prefix=prefix,
                  on_epoch=on_epoch)
    for layer in model.layers:
        layer.frozen = False
    return split_model(model, split.seg_index), history


# --- evaluation ---------------------------------------------------------------

@dataclass
class Metrics:
    acc_leg: float
    acc_ill: float
    cc: float | None = None
    gap: float = field(init=False)

    def __post_init__(self):
        self.gap = self.acc_leg - self.acc_ill


def _timed(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0


def evaluate(split: SplitModel | SequentialModel, key: AuthKey, test_images: np.ndarray,
             test_labels: np.ndarray, timing_reps: int = 10,
             baseline: SequentialModel | None = None) -> Metrics:
    """ACC_leg on keyed inputs, ACC_ill on raw inputs, and relative inference cost.

    ``cc`` compares keyed inference (key application included) with plain
    inference of ``baseline`` (the protected network itself if omitted),
    alternating the two over ``timing_reps`` full passes of the test set.
    """
    if len(test_images) == 0:
        raise ValueError("empty test set")
    model = split.as_model() if isinstance(split, SplitModel) else split
    acc_leg = accuracy(model, apply_key(test_images, key), test_labels)
    acc_ill = accuracy(model, test_images, test_labels)
    cc = None
    if timing_reps > 0:
        base = baseline if baseline is not None else model

        def keyed_pass():
            predict(model, apply_key(test_images, key))

        t_base = t_auth = 0.0
        for _ in range(timing_reps):
            t_base += _timed(predict, base, test_images)
            t_auth += _timed(keyed_pass)
        cc = (t_auth - t_base) / t_base
    return Metrics(acc_leg, acc_ill, cc)
