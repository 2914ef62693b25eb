"""Synthetic weak-supervision scenarios and the JSON-lines dataset format.

Each generated image holds one object. Its proposals are the full-object box
(IoU near 1, high objectness, class signal 1), a "distinctive part" box inside
the object (IoU ``part_iou``, objectness lowered by ``objectness_gap``, class
signal ``part_feature_gain``) and background distractors (no class signal, low
objectness). Features are class prototypes scaled by the class signal plus
Gaussian noise. When ``objectness_feature_gain`` is positive, every feature
vector also carries its proposal's objectness logit along a fixed random
direction, so a detection layer can learn to tell objects from background.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .evalkit import GroundTruthBox, iou_matrix
from .milhead import LogitsPair

FORMAT_VERSION = 1
EVAL_ONLY_FIELDS = ("gt",)

# sub-seed tags
_PROTOTYPES = 0
_SPLIT = 1
_IMAGE = 2
_OBJECTNESS_DIRECTION = 3


@dataclass(frozen=True)
class ScenarioConfig:
    n_classes: int = 10
    images_per_class: int = 40
    n_proposals: int = 300
    feature_dim: int = 16
    part_feature_gain: float = 4.0
    objectness_gap: float = 4.0
    part_iou: float = 0.2
    noise_std: float = 0.1
    class_signal: float = 2.0
    objectness_feature_gain: float = 0.0
    seed: int = 0
    image_width: int = 640
    image_height: int = 480
    object_objectness: float = 3.0
    distractor_objectness: float = -4.0
    distractor_objectness_std: float = 1.0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.images_per_class < 1:
            raise ConfigError("images_per_class must be positive")
        if self.n_proposals < 3:
            raise ConfigError("n_proposals must be at least 3 (object, part, distractor)")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if not self.part_feature_gain >= 1:
            raise ConfigError("part_feature_gain must be >= 1")
        if not 0 < self.part_iou < 0.5:
            raise ConfigError("part_iou must lie in (0, 0.5)")
        if not self.class_signal > 0:
            raise ConfigError("class_signal must be positive")
        if self.objectness_feature_gain < 0:
            raise ConfigError("objectness_feature_gain must be non-negative")
        if self.noise_std < 0 or self.distractor_objectness_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        # smallest object is 30% of each side; its part must still span a pixel
        side = 0.3 * min(self.image_width, self.image_height) * math.sqrt(self.part_iou)
        if side < 1.0:
            raise ConfigError(
                f"part_iou={self.part_iou} needs a part box of {side:.3f} px in a "
                f"{self.image_width}x{self.image_height} image"
            )

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Proposal:
    box: tuple
    objectness: float
    features: tuple


class WeakImageSample:
    """Proposals and image-level labels; ``gt`` is for evaluation only."""

    __slots__ = ("image_id", "image_size", "boxes", "objectness", "features", "labels", "gt")

    def __init__(self, image_id, image_size, boxes, objectness, features, labels, gt=()):
        self.image_id = int(image_id)
        self.image_size = (int(image_size[0]), int(image_size[1]))
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        self.features = np.asarray(features, dtype=np.float64).reshape(n, -1)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.gt = tuple(gt)
        if len(self.objectness) != n:
            raise SchemaError(f"image {self.image_id}: {len(self.objectness)} objectness values for {n} boxes")
        if not np.all((self.labels == 0) | (self.labels == 1)) or self.labels.sum() < 1:
            raise SchemaError(f"image {self.image_id}: labels must be binary with at least one positive")

    @property
    def proposals(self):
        return [
            Proposal(tuple(b.tolist()), float(o), tuple(f.tolist()))
            for b, o, f in zip(self.boxes, self.objectness, self.features)
        ]

    @property
    def n_proposals(self):
        return len(self.boxes)

    def __eq__(self, other):
        if not isinstance(other, WeakImageSample):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.image_size == other.image_size
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.objectness, other.objectness)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.gt == other.gt
        )

    def __repr__(self):
        return (
            f"WeakImageSample(image_id={self.image_id}, n_proposals={self.n_proposals}, "
            f"labels={self.labels.tolist()}, n_gt={len(self.gt)})"
        )


# ---------------------------------------------------------------------------
# generation


def prototypes(config: ScenarioConfig):
    """Class prototypes (n_classes, feature_dim), each of norm ``class_signal``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _PROTOTYPES]))
    protos = rng.normal(size=(config.n_classes, config.feature_dim))
    return config.class_signal * protos / np.linalg.norm(protos, axis=1, keepdims=True)


def objectness_direction(config: ScenarioConfig):
    """Unit vector along which features carry the objectness logit."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _OBJECTNESS_DIRECTION]))
    v = rng.normal(size=config.feature_dim)
    return v / np.linalg.norm(v)


def _object_box(rng, width, height):
    w = rng.uniform(0.3, 0.7) * width
    h = rng.uniform(0.3, 0.7) * height
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _jittered_box(rng, box, width, height, frac=0.02):
    w, h = box[2] - box[0], box[3] - box[1]
    jitter = rng.uniform(-frac, frac, 4) * np.array([w, h, w, h])
    out = box + jitter
    out[[0, 2]] = np.clip(out[[0, 2]], 0.0, width)
    out[[1, 3]] = np.clip(out[[1, 3]], 0.0, height)
    return out


def _part_box(rng, box, part_iou):
    # a sub-box scaled by sqrt(part_iou) on each side has IoU part_iou with the object
    scale = math.sqrt(part_iou)
    w, h = (box[2] - box[0]) * scale, (box[3] - box[1]) * scale
    x1 = rng.uniform(box[0], box[2] - w)
    y1 = rng.uniform(box[1], box[3] - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _distractor_boxes(rng, count, gt_box, width, height):
    out = np.empty((0, 4))
    while len(out) < count:
        n = count - len(out)
        w = rng.uniform(0.05, 0.5, n) * width
        h = rng.uniform(0.05, 0.5, n) * height
        x1 = rng.uniform(0.0, 1.0, n) * (width - w)
        y1 = rng.uniform(0.0, 1.0, n) * (height - h)
        boxes = np.stack([x1, y1, x1 + w, y1 + h], axis=1)
        keep = iou_matrix(boxes, gt_box[None])[:, 0] < 0.5
        out = np.concatenate([out, boxes[keep]])
    return out


def generate_image(config: ScenarioConfig, image_id, class_index, protos=None) -> WeakImageSample:
    """One image, fully determined by ``(config.seed, image_id)``."""
    if protos is None:
        protos = prototypes(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _IMAGE, image_id]))
    width, height = config.image_width, config.image_height
    n, d = config.n_proposals, config.feature_dim

    gt_box = _object_box(rng, width, height)
    full_box = _jittered_box(rng, gt_box, width, height)
    part_box = _part_box(rng, gt_box, config.part_iou)
    distractors = _distractor_boxes(rng, n - 2, gt_box, width, height)

    full_obj = config.object_objectness
    obj = np.concatenate(
        [
            [full_obj, full_obj - config.objectness_gap],
            rng.normal(config.distractor_objectness, config.distractor_objectness_std, n - 2),
        ]
    )
    signal = np.zeros(n)
    signal[0] = 1.0
    signal[1] = config.part_feature_gain
    feats = signal[:, None] * protos[class_index][None, :] + config.noise_std * rng.normal(size=(n, d))
    if config.objectness_feature_gain > 0:
        feats = feats + config.objectness_feature_gain * obj[:, None] * objectness_direction(config)[None, :]
    boxes = np.concatenate([full_box[None], part_box[None], distractors])

    # hide the object and part among the distractors
    order = rng.permutation(n)
    labels = np.zeros(config.n_classes, dtype=np.int64)
    labels[class_index] = 1
    return WeakImageSample(
        image_id=image_id,
        image_size=(width, height),
        boxes=boxes[order],
        objectness=obj[order],
        features=feats[order],
        labels=labels,
        gt=(GroundTruthBox(tuple(gt_box.tolist()), int(class_index)),),
    )


def generate(config: ScenarioConfig):
    """Build ``(train, test)`` with a per-class 80/20 split derived from the seed."""
    protos = prototypes(config)
    split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SPLIT]))
    n_test = max(1, int(round(config.test_fraction * config.images_per_class)))
    test_ids = set()
    for k in range(config.n_classes):
        ids = k * config.images_per_class + split_rng.permutation(config.images_per_class)
        test_ids.update(int(i) for i in ids[:n_test])
    train, test = [], []
    for image_id in range(config.n_classes * config.images_per_class):
        sample = generate_image(config, image_id, image_id // config.images_per_class, protos)
        (test if image_id in test_ids else train).append(sample)
    return train, test


def mismatch_instance(n_proposals=300, n_classes=10, object_objectness=3.0):
    """Logits where the one confidently classified proposal lost its detection mass.

    Proposal 0 is the object: its class softmax peaks at class 0 and its
    objectness is high. The class-0 detection column puts its mass on
    proposal 1, whose own class-0 probability is tiny. Every other logit is
    flat, so no other proposal has a dominant class.
    """
    cls = np.zeros((n_proposals, n_classes))
    det = np.zeros((n_proposals, n_classes))
    obj = np.full(n_proposals, -3.0)
    cls[0, 0] = 12.0
    det[0, 0] = -12.0
    det[1, 0] = 12.0
    cls[1, 0] = -12.0
    obj[0] = object_objectness
    return LogitsPair(cls, det, obj)


# ---------------------------------------------------------------------------
# I/O


def _header(n_classes, feature_dim, n_proposals):
    return {
        "format_version": FORMAT_VERSION,
        "n_classes": int(n_classes),
        "feature_dim": int(feature_dim),
        "n_proposals": int(n_proposals),
        "eval_only": list(EVAL_ONLY_FIELDS),
    }


def _record(sample: WeakImageSample):
    return {
        "image_id": sample.image_id,
        "width": sample.image_size[0],
        "height": sample.image_size[1],
        "labels": sample.labels.tolist(),
        "proposals": [
            {"box": b.tolist(), "objectness": float(o), "features": f.tolist()}
            for b, o, f in zip(sample.boxes, sample.objectness, sample.features)
        ],
        "gt": [{"box": list(g.box), "class": int(g.class_index)} for g in sample.gt],
    }


def dumps_dataset(samples) -> str:
    samples = list(samples)
    if not samples:
        return ""
    first = samples[0]
    lines = [json.dumps(_header(len(first.labels), first.features.shape[1], first.n_proposals))]
    lines.extend(json.dumps(_record(s)) for s in samples)
    return "\n".join(lines) + "\n"


def write_dataset(samples, path):
    with open(path, "w") as fh:
        fh.write(dumps_dataset(samples))


def _parse_record(doc, lineno, header):
    try:
        props = doc["proposals"]
        for idx, p in enumerate(props):
            if len(p["features"]) != header["feature_dim"]:
                raise SchemaError(
                    f"proposal {idx} has {len(p['features'])} features, header declares {header['feature_dim']}"
                )
        sample = WeakImageSample(
            image_id=doc["image_id"],
            image_size=(doc["width"], doc["height"]),
            boxes=[p["box"] for p in props],
            objectness=[p["objectness"] for p in props],
            features=[p["features"] for p in props],
            labels=doc["labels"],
            gt=tuple(GroundTruthBox(tuple(g["box"]), int(g["class"])) for g in doc.get("gt", ())),
        )
    except SchemaError as exc:
        raise SchemaError(str(exc), lineno) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed image record: {exc!r}", lineno) from exc
    if len(sample.labels) != header["n_classes"]:
        raise SchemaError(f"{len(sample.labels)} labels, header declares {header['n_classes']}", lineno)
    if sample.n_proposals != header["n_proposals"]:
        raise SchemaError(f"{sample.n_proposals} proposals, header declares {header['n_proposals']}", lineno)
    if sample.features.shape[1] != header["feature_dim"]:
        raise SchemaError(
            f"feature length {sample.features.shape[1]}, header declares {header['feature_dim']}", lineno
        )
    return sample


def parse_dataset(lines):
    header = None
    samples = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
        if not isinstance(doc, dict):
            raise ParseError("expected a JSON object", lineno)
        if header is None:
            try:
                if doc["format_version"] != FORMAT_VERSION:
                    raise ParseError(f"unsupported format_version {doc['format_version']}", lineno)
                header = {k: int(doc[k]) for k in ("n_classes", "feature_dim", "n_proposals")}
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed dataset header: {exc!r}", lineno) from exc
            continue
        sample = _parse_record(doc, lineno, header)
        if sample.image_id in seen:
            raise SchemaError(f"duplicate image_id {sample.image_id}", lineno)
        seen.add(sample.image_id)
        samples.append(sample)
    return samples


def read_dataset(path):
    with open(path) as fh:
        return parse_dataset(fh)


def config_dict(config: ScenarioConfig):
    return asdict(config)


# Named scenarios. "adversarial" gives the distinctive part four times the
# object's class evidence; "distractor-heavy" keeps part and object equally
# distinctive but buries them in noisy background proposals whose features
# reveal their low objectness.
SCENARIOS = {
    "adversarial": {},
    "distractor-heavy": {"part_feature_gain": 1.0, "noise_std": 0.5, "objectness_feature_gain": 0.5},
}


def scenario(name, **overrides) -> ScenarioConfig:
    """A named scenario preset, with field overrides applied on top."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    unknown = set(overrides) - set(ScenarioConfig.field_names())
    if unknown:
        raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
    return ScenarioConfig(**{**SCENARIOS[name], **overrides})
