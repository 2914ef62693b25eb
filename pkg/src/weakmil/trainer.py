"""Seeded mini-batch training of MIL heads and the finite-difference gradient check."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import mathcore as mc
from .errors import ConfigError, InvalidInputError
from .milhead import (
    HeadParams,
    HeadVariant,
    LogitsPair,
    Variant,
    _forward,
    head_backward,
    head_linear_forward,
    total_loss,
)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

FD_STEP = 1e-6
GRADCHECK_TOL = 1e-5
GRAD_FLOOR = 1e-3
LOGIT_GROUPS = ("classification", "detection", "objectness")


@dataclass
class TrainConfig:
    variant: str = "full"
    lam: float = 1000.0
    epochs: int = 30
    batch_size: int = 8
    lr_head: float = 1e-3
    lr_drop_epoch: int = 15
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-4
    seed: int = 0
    objectness_frozen: bool = True
    axis_convention: str = "prose"

    def __post_init__(self):
        self.head_variant  # validates variant, lambda and axis convention
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr_drop_epoch < 1:
            raise ConfigError("lr_drop_epoch must be positive")
        if self.epochs > 0 and self.lr_drop_epoch > self.epochs:
            raise ConfigError(f"lr_drop_epoch ({self.lr_drop_epoch}) exceeds epochs ({self.epochs})")
        for name in ("lr_head", "lr_drop_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def head_variant(self):
        try:
            kind = Variant(self.variant)
        except ValueError as exc:
            raise ConfigError(f"unknown variant {self.variant!r}") from exc
        return HeadVariant(kind, self.lam, self.axis_convention)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def lr_at(self, epoch):
        """Learning rate in effect during ``epoch`` (0-based)."""
        if epoch >= self.lr_drop_epoch:
            return self.lr_head / self.lr_drop_factor
        return self.lr_head


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr, weight_decay):
    """One AdamW update. Returns new ``(params, state)``; inputs are not mutated.

    Weight decay is decoupled: each parameter is first scaled by
    ``1 - lr * weight_decay`` and then moved by the bias-corrected Adam step.
    """
    if set(params) != set(grads):
        raise InvalidInputError(f"parameter groups {sorted(params)} != gradient groups {sorted(grads)}")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidInputError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1**step)
        v_hat = v / (1.0 - BETA2**step)
        new_params[name] = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(new_m, new_v, step)


def init_params(d, n_classes, seed, objectness_frozen=True) -> HeadParams:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) initialization from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    bound = 1.0 / np.sqrt(d)
    kw = {
        "w_cls": rng.uniform(-bound, bound, (d, n_classes)),
        "b_cls": rng.uniform(-bound, bound, n_classes),
        "w_det": rng.uniform(-bound, bound, (d, n_classes)),
        "b_det": rng.uniform(-bound, bound, n_classes),
    }
    if not objectness_frozen:
        kw["w_obj"] = rng.uniform(-bound, bound, d)
        kw["b_obj"] = rng.uniform(-bound, bound)
    return HeadParams(objectness_frozen=objectness_frozen, **kw)


@dataclass
class TrainResult:
    params: HeadParams
    variant: HeadVariant
    log: list


def _sample_arrays(sample):
    return (
        np.asarray(sample.features, dtype=np.float64),
        np.asarray(sample.objectness, dtype=np.float64),
        np.asarray(sample.labels, dtype=np.float64),
    )


def _check_dataset(arrays):
    if not arrays:
        raise InvalidInputError("training requires at least one sample")
    d = arrays[0][0].shape[1]
    n_cls = arrays[0][2].shape[0]
    for idx, (feats, _, labels) in enumerate(arrays):
        if feats.ndim != 2 or feats.shape[1] != d:
            raise InvalidInputError(f"sample {idx}: feature dimension {feats.shape[-1]} != {d}")
        if labels.shape != (n_cls,):
            raise InvalidInputError(f"sample {idx}: {labels.shape[0]} labels != {n_cls}")
    return d, n_cls


def _batch_gradients(variant, params, arrays):
    # stack when proposal counts agree, otherwise average per-image gradients
    if len({a[0].shape[0] for a in arrays}) == 1:
        feats = np.stack([a[0] for a in arrays])
        obj = np.stack([a[1] for a in arrays])
        labels = np.stack([a[2] for a in arrays])
        g = head_backward(variant, feats, params, labels, obj)
        return g.loss, g.params
    total = None
    loss = 0.0
    for feats, obj, labels in arrays:
        g = head_backward(variant, feats, params, labels, obj)
        loss += g.loss / len(arrays)
        scaled = {k: v / len(arrays) for k, v in g.params.items()}
        total = scaled if total is None else {k: total[k] + scaled[k] for k in total}
    return loss, total


def train(dataset, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train a head on weakly labelled samples.

    Only ``features``, ``objectness`` and ``labels`` are read from each
    sample; ground-truth boxes never are. ``on_epoch`` receives each
    log record as it is produced.
    """
    variant = config.head_variant
    arrays = [_sample_arrays(s) for s in dataset]
    d, n_cls = _check_dataset(arrays)
    params = init_params(d, n_cls, config.seed, config.objectness_frozen)
    state = OptimizerState()
    shuffler = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    log = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffler.permutation(len(arrays))
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [arrays[i] for i in order[lo : lo + config.batch_size]]
            loss, grads = _batch_gradients(variant, params, batch)
            loss_sum += loss * len(batch)
            new, state = adam_step(params.groups(), grads, state, lr, config.weight_decay)
            params = params.replace(**new)
        record = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": loss_sum / len(arrays),
            "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, variant, log)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckResult:
    variant: str
    max_rel_error: dict
    trials: int
    skipped: int
    tol: float = GRADCHECK_TOL

    @property
    def passed(self):
        return all(err < self.tol for err in self.max_rel_error.values())

    @property
    def failing_groups(self):
        return [name for name, err in self.max_rel_error.items() if not err < self.tol]


def _kink_signature(variant: HeadVariant, logits: LogitsPair):
    """Discrete state the loss is only piecewise smooth in, per batch element."""
    a, weights, raw, y_hat = _forward(variant, logits)
    parts = [raw != y_hat]
    if variant.kind.sparse:
        parts.append(weights > 0)
    if variant.uses_objectness_reg and variant.lam > 0:
        parts.append(np.argmax(logits.det, axis=-1))
    lead = logits.cls.shape[:-2]
    return np.concatenate([p.reshape(lead + (-1,)).astype(np.int64) for p in parts], axis=-1)


def _stack_logits(items):
    return LogitsPair(
        np.stack([x.cls for x in items]), np.stack([x.det for x in items]), np.stack([x.obj for x in items])
    )


def _perturbations(params: HeadParams, features, objectness, logits: LogitsPair, step):
    """(group, index, sign) labels and the perturbed logits for every coordinate."""
    labels, items = [], []
    for name, arr in params.groups().items():
        for k in range(arr.size):
            for sign in (1.0, -1.0):
                flat = arr.reshape(-1).copy()
                flat[k] += sign * step
                changed = params.replace(**{name: flat.reshape(arr.shape)})
                labels.append((name, k, sign))
                items.append(head_linear_forward(features, changed, objectness))
    for name, attr in zip(LOGIT_GROUPS, ("cls", "det", "obj")):
        base = getattr(logits, attr)
        for k in range(base.size):
            for sign in (1.0, -1.0):
                flat = base.reshape(-1).copy()
                flat[k] += sign * step
                kw = {"cls": logits.cls, "det": logits.det, "obj": logits.obj, attr: flat.reshape(base.shape)}
                labels.append((name, k, sign))
                items.append(LogitsPair(**kw))
    return labels, _stack_logits(items)


def _random_instance(rng, variant: HeadVariant, objectness_frozen):
    n = int(rng.integers(1, 51))
    n_cls = int(rng.integers(2, 11))
    d = int(rng.integers(1, 17))
    features = rng.normal(size=(n, d))
    kw = {
        "w_cls": rng.normal(scale=0.7, size=(d, n_cls)),
        "b_cls": rng.normal(scale=0.5, size=n_cls),
        "w_det": rng.normal(scale=0.7, size=(d, n_cls)),
        "b_det": rng.normal(scale=0.5, size=n_cls),
    }
    if not objectness_frozen:
        kw["w_obj"] = rng.normal(scale=0.7, size=d)
        kw["b_obj"] = rng.normal(scale=0.5)
    params = HeadParams(objectness_frozen=objectness_frozen, **kw)
    objectness = rng.normal(scale=2.0, size=n) if objectness_frozen else None
    labels = (rng.random(n_cls) < 0.5).astype(np.float64)
    if labels.sum() == 0:
        labels[int(rng.integers(n_cls))] = 1.0
    return features, params, objectness, labels


def check_instance(
    variant: HeadVariant, features, params, objectness, labels, backward=head_backward, step=FD_STEP, tol=GRADCHECK_TOL
):
    """Per-group max relative error of ``backward`` against central differences.

    Returns ``None`` when a perturbation crosses a non-smooth point (sparsemax
    support change, argmax switch or clipping) and the comparison is undefined.
    Relative error is ``max|analytic - numeric|`` divided by the group's
    largest gradient magnitude. The denominator is floored at ``GRAD_FLOOR``
    and at the smallest gradient the central difference resolves to ``tol``
    (round-off ``eps * (|L| + 1) / step`` divided by ``tol``), so groups whose
    true gradient vanishes are compared in absolute terms.
    """
    logits = head_linear_forward(features, params, objectness)
    tags, batch = _perturbations(params, features, objectness, logits, step)
    sig = _kink_signature(variant, logits)
    if not np.all(_kink_signature(variant, batch) == sig[None]):
        return None
    losses = np.atleast_1d(total_loss(variant, batch, np.broadcast_to(labels, (len(tags),) + labels.shape)))
    numeric = {}
    for (name, k, sign), loss in zip(tags, losses):
        numeric.setdefault(name, {}).setdefault(k, [0.0, 0.0])[0 if sign > 0 else 1] = loss
    grads = backward(variant, features, params, labels, objectness)
    analytic = dict(grads.params)
    analytic.update(classification=grads.d_cls, detection=grads.d_det, objectness=grads.d_obj)
    floor = max(GRAD_FLOOR, np.finfo(np.float64).eps * (np.abs(losses).max() + 1.0) / step / tol)
    errors = {}
    for name, entries in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        f = np.array([(entries[k][0] - entries[k][1]) / (2.0 * step) for k in range(a.size)])
        scale = max(np.abs(a).max(), np.abs(f).max(), floor)
        errors[name] = float(np.abs(a - f).max() / scale)
    return errors


def gradcheck(config: TrainConfig, trials, variants=None, backward=head_backward, max_attempts=None):
    """Compare analytic and finite-difference gradients on seeded random instances.

    Runs ``trials`` smooth instances per variant (``variants`` defaults to
    ``config.variant``) and returns one :class:`GradcheckResult` per variant.
    """
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    variants = [config.variant] if variants is None else list(variants)
    max_attempts = max_attempts or 20 * trials
    results = []
    for v_name in variants:
        variant = HeadVariant(Variant(v_name), config.lam, config.axis_convention)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, list(Variant).index(variant.kind)]))
        worst = {}
        done = skipped = 0
        while done < trials and done + skipped < max_attempts:
            inst = _random_instance(rng, variant, config.objectness_frozen)
            errors = check_instance(variant, *inst, backward=backward)
            if errors is None:
                skipped += 1
                continue
            done += 1
            for name, err in errors.items():
                worst[name] = max(worst.get(name, 0.0), err)
        if done < trials:
            raise RuntimeError(f"{v_name}: only {done} of {trials} instances were smooth")
        results.append(GradcheckResult(v_name, worst, done, skipped))
    return results
