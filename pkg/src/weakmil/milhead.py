"""MIL detection heads: Base, Sparse, Joint and Full.

All four heads turn per-proposal classification logits ``C`` (N x classes),
detection logits ``D`` (N x classes) and objectness logits ``s`` (N) into an
image-level prediction ``y_hat`` with entries in (0, 1):

* Base:   y_hat_j = sum_i A_ij B_ij, A = softmax of C over classes,
          B = softmax of D over detections; trained with an objectness
          regularizer weighted by ``lam``.
* Sparse: Base with B computed by sparsemax instead of softmax.
* Joint:  y_hat_j = sum_i A_ij softmax(s)_i, no regularizer.
* Full:   Joint with sparsemax(s).

Every function accepts either a single image (``C`` of shape (N, K)) or a
stacked batch (B, N, K); batched losses are reported per image and
:func:`head_backward` differentiates their mean.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import mathcore as mc
from .errors import ConfigError, InvalidInputError, ParseError

CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-12
AXIS_CONVENTIONS = ("prose", "notation")

# representable open interval (0, 1)
_Y_LO = np.finfo(np.float64).tiny
_Y_HI = np.nextafter(1.0, 0.0)


class Variant(str, Enum):
    BASE = "base"
    SPARSE = "sparse"
    JOINT = "joint"
    FULL = "full"

    @property
    def sparse(self):
        return self in (Variant.SPARSE, Variant.FULL)

    @property
    def joint(self):
        return self in (Variant.JOINT, Variant.FULL)


@dataclass(frozen=True)
class HeadVariant:
    """Head family member plus its loss/normalization settings.

    ``lam`` weights the objectness regularizer and only affects Base and
    Sparse. ``axis_convention='prose'`` normalizes classification logits over
    classes and detection logits over detections; ``'notation'`` swaps both.
    """

    kind: Variant
    lam: float = 1000.0
    axis_convention: str = "prose"

    def __post_init__(self):
        object.__setattr__(self, "kind", Variant(self.kind))
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be a non-negative finite number, got {self.lam}")
        if self.axis_convention not in AXIS_CONVENTIONS:
            raise ConfigError(f"unknown axis convention {self.axis_convention!r}")

    @property
    def uses_objectness_reg(self):
        return not self.kind.joint

    @property
    def cls_axis(self):
        return -1 if self.axis_convention == "prose" else -2

    @property
    def det_axis(self):
        return -2 if self.axis_convention == "prose" else -1


@dataclass(frozen=True)
class LogitsPair:
    """Classification ``cls`` and detection ``det`` logits plus objectness ``obj``."""

    cls: np.ndarray
    det: np.ndarray
    obj: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.cls, dtype=np.float64)
        det = np.asarray(self.det, dtype=np.float64)
        obj = np.asarray(self.obj, dtype=np.float64)
        if cls.ndim < 2 or cls.shape != det.shape:
            raise InvalidInputError(
                f"classification {cls.shape} and detection {det.shape} logits must share an (N, C) shape"
            )
        if obj.shape != cls.shape[:-1]:
            raise InvalidInputError(f"objectness shape {obj.shape} does not match N={cls.shape[-2]}")
        if cls.shape[-2] < 1:
            raise InvalidInputError("need at least one proposal")
        if cls.shape[-1] < 2:
            raise InvalidInputError("need at least two classes")
        for name, arr in (("classification", cls), ("detection", det), ("objectness", obj)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} logits contain NaN or Inf")
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "det", det)
        object.__setattr__(self, "obj", obj)

    @property
    def n_proposals(self):
        return self.cls.shape[-2]

    @property
    def n_classes(self):
        return self.cls.shape[-1]


@dataclass
class HeadParams:
    """Linear classification, detection and (optional) objectness layers."""

    w_cls: np.ndarray
    b_cls: np.ndarray
    w_det: np.ndarray
    b_det: np.ndarray
    w_obj: Optional[np.ndarray] = None
    b_obj: Optional[np.ndarray] = None
    objectness_frozen: bool = True

    def __post_init__(self):
        for name in ("w_cls", "b_cls", "w_det", "b_det", "w_obj", "b_obj"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.array(value, dtype=np.float64))
        if self.b_obj is not None:
            self.b_obj = self.b_obj.reshape(())
        d, c = self.dims
        if self.w_cls.ndim != 2 or self.w_det.shape != (d, c):
            raise InvalidInputError("w_cls and w_det must both be (d, C) matrices")
        if self.b_cls.shape != (c,) or self.b_det.shape != (c,):
            raise InvalidInputError("biases must have length C")
        if self.objectness_frozen:
            if self.w_obj is not None or self.b_obj is not None:
                raise InvalidInputError("frozen objectness must not carry an objectness layer")
        else:
            if self.w_obj is None or self.b_obj is None:
                raise InvalidInputError("trainable objectness requires w_obj and b_obj")
            if self.w_obj.shape != (d,):
                raise InvalidInputError(f"w_obj must have length d={d}")

    @property
    def dims(self):
        return self.w_cls.shape

    def groups(self):
        """Trainable arrays by name, in a fixed order."""
        out = {"w_cls": self.w_cls, "b_cls": self.b_cls, "w_det": self.w_det, "b_det": self.b_det}
        if not self.objectness_frozen:
            out["w_obj"] = self.w_obj
            out["b_obj"] = self.b_obj
        return out

    def replace(self, **arrays):
        kw = {name: arr.copy() for name, arr in self.groups().items()}
        kw.update(arrays)
        return HeadParams(objectness_frozen=self.objectness_frozen, **kw)

    def copy(self):
        return self.replace()


@dataclass
class Gradients:
    """Loss value with gradients for every trainable group and the logits."""

    loss: float
    params: dict
    d_cls: np.ndarray
    d_det: np.ndarray
    d_obj: np.ndarray


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_index: int
    confidence: float


@dataclass(frozen=True)
class MismatchRecord:
    c: float
    d: float
    argmax_cls: int
    argmax_det: int
    matched: bool


def _as_variant(variant):
    if isinstance(variant, HeadVariant):
        return variant
    return HeadVariant(Variant(variant))


# ---------------------------------------------------------------------------
# forward


def head_linear_forward(features, params: HeadParams, objectness=None) -> LogitsPair:
    """Affine maps from proposal features to the three logit streams.

    With frozen objectness the dataset's ``objectness`` logits pass through
    unchanged; otherwise they are produced by the objectness layer.
    """
    f = np.asarray(features, dtype=np.float64)
    d, _ = params.dims
    if f.ndim < 2 or f.shape[-1] != d:
        raise InvalidInputError(f"features of shape {f.shape} do not match feature dimension {d}")
    cls = f @ params.w_cls + params.b_cls
    det = f @ params.w_det + params.b_det
    if params.objectness_frozen:
        if objectness is None:
            raise InvalidInputError("frozen objectness requires dataset objectness logits")
        obj = np.asarray(objectness, dtype=np.float64)
    else:
        obj = f @ params.w_obj + params.b_obj
    return LogitsPair(cls, det, obj)


def _normalize(logits, axis, sparse):
    return mc.sparsemax(logits, axis=axis) if sparse else mc.softmax(logits, axis=axis)


def _forward(variant: HeadVariant, logits: LogitsPair):
    kind = variant.kind
    a = mc.softmax(logits.cls, axis=variant.cls_axis)
    if kind.joint:
        weights = _normalize(logits.obj, -1, kind.sparse)
        raw = np.einsum("...nc,...n->...c", a, weights)
    else:
        weights = _normalize(logits.det, variant.det_axis, kind.sparse)
        raw = (a * weights).sum(axis=-2)
    y_hat = np.clip(raw, _Y_LO, _Y_HI)
    return a, weights, raw, y_hat


def mil_forward(variant, logits: LogitsPair) -> np.ndarray:
    """Image-level prediction ``y_hat`` of shape (..., C), entries in (0, 1)."""
    return _forward(_as_variant(variant), logits)[3]


# ---------------------------------------------------------------------------
# losses


def _check_labels(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise InvalidInputError(f"label shape {y.shape} does not match prediction shape {y_hat.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("labels must be binary")
    return y_hat, y


def mil_loss(y_hat, y):
    """Mean binary negative log-likelihood over classes, logs floored at 1e-12."""
    y_hat, y = _check_labels(y_hat, y)
    pos = np.log(np.maximum(y_hat, LOG_FLOOR))
    neg = np.log(np.maximum(1.0 - y_hat, LOG_FLOOR))
    out = -(y * pos + (1.0 - y) * neg).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def _mil_loss_grad(y_hat, y):
    n_cls = y_hat.shape[-1]
    pos = np.where(y_hat > LOG_FLOOR, 1.0 / y_hat, 0.0)
    neg = np.where(1.0 - y_hat > LOG_FLOOR, 1.0 / (1.0 - y_hat), 0.0)
    return -(y * pos - (1.0 - y) * neg) / n_cls


def objectness_reg_loss(logits: LogitsPair):
    """Mean squared gap between max_j S(D_ij) and S(s_i) over proposals."""
    gap = mc.sigmoid(logits.det.max(axis=-1)) - mc.sigmoid(logits.obj)
    out = np.mean(gap**2, axis=-1)
    return float(out) if out.ndim == 0 else out


def total_loss(variant, logits: LogitsPair, y):
    """MIL loss, plus ``lam`` times the objectness regularizer for Base/Sparse."""
    variant = _as_variant(variant)
    loss = mil_loss(mil_forward(variant, logits), y)
    if variant.uses_objectness_reg:
        loss = loss + variant.lam * objectness_reg_loss(logits)
    return loss


# ---------------------------------------------------------------------------
# backward


def logits_backward(variant, logits: LogitsPair, y):
    """Loss and gradients with respect to the three logit streams.

    For batched logits the loss and gradients are those of the batch mean.
    """
    variant = _as_variant(variant)
    kind = variant.kind
    a, weights, raw, y_hat = _forward(variant, logits)
    y_hat, y = _check_labels(y_hat, y)
    batch = int(np.prod(y_hat.shape[:-1], dtype=np.int64))

    losses = mil_loss(y_hat, y)
    g = _mil_loss_grad(y_hat, y) * (raw == y_hat) / batch
    g = g[..., None, :]

    weights_vjp = mc.sparsemax_vjp if kind.sparse else mc.softmax_vjp
    if kind.joint:
        d_a = g * weights[..., :, None]
        d_obj = weights_vjp(weights, (g * a).sum(axis=-1), axis=-1)
        d_det = np.zeros_like(logits.det)
    else:
        d_a = g * weights
        d_det = weights_vjp(weights, g * a, axis=variant.det_axis)
        d_obj = np.zeros_like(logits.obj)
        if variant.lam > 0:
            losses = losses + variant.lam * objectness_reg_loss(logits)
            n = logits.n_proposals
            top = np.argmax(logits.det, axis=-1)
            d_max = np.take_along_axis(logits.det, top[..., None], axis=-1)[..., 0]
            gap = mc.sigmoid(d_max) - mc.sigmoid(logits.obj)
            scale = variant.lam * 2.0 * gap / (n * batch)
            np.put_along_axis(
                d_det,
                top[..., None],
                np.take_along_axis(d_det, top[..., None], axis=-1) + (scale * mc.sigmoid_grad(d_max))[..., None],
                axis=-1,
            )
            d_obj = d_obj - scale * mc.sigmoid_grad(logits.obj)
    d_cls = mc.softmax_vjp(a, d_a, axis=variant.cls_axis)
    loss = float(np.mean(losses))
    return loss, d_cls, d_det, d_obj


def head_backward(variant, features, params: HeadParams, y, objectness=None) -> Gradients:
    """Exact gradients of :func:`total_loss` for every trainable parameter.

    ``features`` is (N, d) or a batch (B, N, d); for a batch the gradient is
    that of the mean per-image loss.
    """
    f = np.asarray(features, dtype=np.float64)
    logits = head_linear_forward(f, params, objectness)
    loss, d_cls, d_det, d_obj = logits_backward(variant, logits, y)
    flat_f = f.reshape(-1, f.shape[-1])
    n_cls = d_cls.shape[-1]
    grads = {
        "w_cls": flat_f.T @ d_cls.reshape(-1, n_cls),
        "b_cls": d_cls.reshape(-1, n_cls).sum(axis=0),
        "w_det": flat_f.T @ d_det.reshape(-1, n_cls),
        "b_det": d_det.reshape(-1, n_cls).sum(axis=0),
    }
    if not params.objectness_frozen:
        grads["w_obj"] = flat_f.T @ d_obj.reshape(-1)
        grads["b_obj"] = np.asarray(d_obj.sum())
    return Gradients(loss=loss, params=grads, d_cls=d_cls, d_det=d_det, d_obj=d_obj)


# ---------------------------------------------------------------------------
# inference and diagnostics


def score_matrix(variant, logits: LogitsPair) -> np.ndarray:
    """Per-proposal, per-class inference scores (..., N, C)."""
    variant = _as_variant(variant)
    a = mc.softmax(logits.cls, axis=variant.cls_axis)
    if variant.kind.joint:
        return a * mc.sigmoid(logits.obj)[..., None]
    return a * _normalize(logits.det, variant.det_axis, variant.kind.sparse)


def infer(variant, logits: LogitsPair, boxes) -> list:
    """One :class:`Detection` per proposal, scored by the variant; no NMS."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if logits.cls.ndim != 2:
        raise InvalidInputError("infer expects a single image")
    if boxes.shape != (logits.n_proposals, 4):
        raise InvalidInputError(f"expected {logits.n_proposals} boxes, got shape {boxes.shape}")
    scores = score_matrix(variant, logits)
    labels = np.argmax(scores, axis=-1)
    conf = scores[np.arange(len(labels)), labels]
    return [
        Detection(tuple(float(v) for v in box), int(k), float(c))
        for box, k, c in zip(boxes, labels, conf)
    ]


def mismatch_report(logits: LogitsPair, axis_convention="prose") -> list:
    """Compare each proposal's best class probability with its best detection score."""
    if logits.cls.ndim != 2:
        raise InvalidInputError("mismatch_report expects a single image")
    cls_axis = -1 if axis_convention == "prose" else -2
    probs = mc.softmax(logits.cls, axis=cls_axis)
    det = mc.sigmoid(logits.det)
    arg_c = np.argmax(probs, axis=-1)
    arg_d = np.argmax(det, axis=-1)
    return [
        MismatchRecord(float(probs[i, ac]), float(det[i, ad]), int(ac), int(ad), bool(ac == ad))
        for i, (ac, ad) in enumerate(zip(arg_c, arg_d))
    ]


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params: HeadParams, variant) -> dict:
    variant = _as_variant(variant)
    d, c = params.dims
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "variant": variant.kind.value,
        "lambda": float(variant.lam),
        "axis_convention": variant.axis_convention,
        "dims": {"d": int(d), "C": int(c)},
        "objectness_frozen": bool(params.objectness_frozen),
        "w_cls": params.w_cls.tolist(),
        "b_cls": params.b_cls.tolist(),
        "w_det": params.w_det.tolist(),
        "b_det": params.b_det.tolist(),
    }
    if not params.objectness_frozen:
        doc["w_obj"] = params.w_obj.tolist()
        doc["b_obj"] = float(params.b_obj)
    return doc


def checkpoint_from_dict(doc: dict):
    """Inverse of :func:`checkpoint_dict`; returns ``(params, variant)``."""
    try:
        if doc["format_version"] != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {doc['format_version']}")
        variant = HeadVariant(Variant(doc["variant"]), float(doc["lambda"]), doc["axis_convention"])
        frozen = bool(doc["objectness_frozen"])
        params = HeadParams(
            w_cls=doc["w_cls"],
            b_cls=doc["b_cls"],
            w_det=doc["w_det"],
            b_det=doc["b_det"],
            w_obj=None if frozen else doc["w_obj"],
            b_obj=None if frozen else doc["b_obj"],
            objectness_frozen=frozen,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from exc
    if params.dims != (doc["dims"]["d"], doc["dims"]["C"]):
        raise ParseError(f"checkpoint dims {doc['dims']} disagree with weights {params.dims}")
    return params, variant


def dumps_checkpoint(params: HeadParams, variant) -> str:
    return json.dumps(checkpoint_dict(params, variant)) + "\n"


def save_checkpoint(path, params: HeadParams, variant):
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(dumps_checkpoint(params, variant))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"checkpoint is not valid JSON: {exc}") from exc
    return checkpoint_from_dict(doc)
