import json

import numpy as np
import pytest

from weakmil import datagen as dg
from weakmil.errors import ConfigError, ParseError, SchemaError
from weakmil.evalkit import iou, iou_matrix

SMALL = dict(n_classes=3, images_per_class=5, n_proposals=20, feature_dim=6)


@pytest.fixture(scope="module")
def default_sets():
    return dg.generate(dg.ScenarioConfig())


def locate(sample, config):
    """Indices of the full-object and part proposals, found from geometry and objectness."""
    gt_box = sample.gt[0].box
    overlaps = iou_matrix(sample.boxes, [gt_box])[:, 0]
    full = int(np.argmax(overlaps))
    part = int(np.flatnonzero(sample.objectness == config.object_objectness - config.objectness_gap)[0])
    return full, part, overlaps


class TestConfig:
    def test_defaults(self):
        c = dg.ScenarioConfig()
        assert (c.n_proposals, c.part_feature_gain, c.objectness_gap, c.part_iou) == (300, 4.0, 4.0, 0.2)

    @pytest.mark.parametrize(
        "kw",
        [
            {"n_classes": 1},
            {"n_proposals": 2},
            {"part_iou": 0.5},
            {"part_iou": 0.0},
            {"part_feature_gain": 0.5},
            {"noise_std": -0.1},
            {"seed": -3},
            {"image_width": 8, "image_height": 8, "part_iou": 0.01},
            {"objectness_feature_gain": -1.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            dg.ScenarioConfig(**kw)

    def test_named_scenarios(self):
        assert dg.scenario("adversarial") == dg.ScenarioConfig()
        heavy = dg.scenario("distractor-heavy", seed=2)
        assert heavy.seed == 2 and heavy.n_proposals == 300 and heavy.noise_std > dg.ScenarioConfig().noise_std
        with pytest.raises(ConfigError):
            dg.scenario("nope")
        with pytest.raises(ConfigError):
            dg.scenario("adversarial", colour="red")


class TestGenerate:
    def test_split_sizes_and_disjoint(self, default_sets):
        train, test = default_sets
        assert len(train) == 320 and len(test) == 80
        assert not {s.image_id for s in train} & {s.image_id for s in test}
        per_class = np.bincount([int(np.argmax(s.labels)) for s in test], minlength=10)
        assert per_class.tolist() == [8] * 10

    def test_deterministic(self):
        cfg = dg.ScenarioConfig(**SMALL, seed=4)
        a, b = dg.generate(cfg), dg.generate(cfg)
        assert dg.dumps_dataset(a[0] + a[1]) == dg.dumps_dataset(b[0] + b[1])

    def test_split_stable_and_seed_dependent(self):
        ids = lambda seed: sorted(s.image_id for s in dg.generate(dg.ScenarioConfig(**SMALL, seed=seed))[1])
        assert ids(1) == ids(1)
        assert ids(1) != ids(2) or ids(1) != ids(3)

    def test_image_independent_of_order(self):
        cfg = dg.ScenarioConfig(**SMALL)
        train, test = dg.generate(cfg)
        sample = (train + test)[7]
        alone = dg.generate_image(cfg, sample.image_id, int(np.argmax(sample.labels)))
        assert alone == sample

    def test_per_image_invariants(self, default_sets):
        cfg = dg.ScenarioConfig()
        for s in default_sets[0] + default_sets[1]:
            w, h = s.image_size
            assert s.n_proposals == 300 and s.features.shape == (300, 16)
            assert np.all(s.boxes[:, 0] >= 0) and np.all(s.boxes[:, 2] <= w)
            assert np.all(s.boxes[:, 1] >= 0) and np.all(s.boxes[:, 3] <= h)
            assert np.all(s.boxes[:, 0] < s.boxes[:, 2]) and np.all(s.boxes[:, 1] < s.boxes[:, 3])
            assert s.labels.sum() == 1 and len(s.gt) == 1
            full, part, overlaps = locate(s, cfg)
            # exactly one proposal is a hit at IoU 0.5
            assert np.sum(overlaps >= 0.5) == 1 and overlaps[full] > 0.9
            assert overlaps[part] == pytest.approx(cfg.part_iou, rel=1e-9)
            assert s.objectness[full] - s.objectness[part] == cfg.objectness_gap

    def test_part_carries_gain_times_class_evidence(self):
        cfg = dg.ScenarioConfig(**SMALL, noise_std=0.0)
        protos = dg.prototypes(cfg)
        train, test = dg.generate(cfg)
        for s in train + test:
            k = int(np.argmax(s.labels))
            full, part, _ = locate(s, cfg)
            full_dot = s.features[full] @ protos[k]
            part_dot = s.features[part] @ protos[k]
            assert part_dot == pytest.approx(cfg.part_feature_gain * full_dot, rel=1e-12)
            others = np.delete(np.arange(s.n_proposals), [full, part])
            assert np.all(s.features[others] == 0.0)

    def test_part_outscores_full_with_noise(self, default_sets):
        cfg = dg.ScenarioConfig()
        protos = dg.prototypes(cfg)
        for s in default_sets[0]:
            k = int(np.argmax(s.labels))
            full, part, _ = locate(s, cfg)
            assert s.features[part] @ protos[k] > s.features[full] @ protos[k]

    def test_degenerate_config_full_and_part_share_features(self):
        cfg = dg.ScenarioConfig(**SMALL, noise_std=0.0, part_feature_gain=1.0, objectness_gap=0.0)
        s = dg.generate(cfg)[0][0]
        top = np.flatnonzero(s.objectness == cfg.object_objectness)
        assert len(top) == 2
        np.testing.assert_array_equal(s.features[top[0]], s.features[top[1]])
        assert {round(iou(s.boxes[i], s.gt[0].box), 6) for i in top} != {1.0}

    def test_objectness_feature_direction(self):
        cfg = dg.ScenarioConfig(**SMALL, noise_std=0.0, objectness_feature_gain=0.5)
        v = dg.objectness_direction(cfg)
        assert np.linalg.norm(v) == pytest.approx(1.0)
        s = dg.generate(cfg)[0][0]
        plain = dg.generate(dg.ScenarioConfig(**SMALL, noise_std=0.0))[0][0]
        # the only difference is the objectness logit along v
        np.testing.assert_allclose(s.features - plain.features, 0.5 * np.outer(s.objectness, v), atol=1e-12)
        np.testing.assert_array_equal(s.boxes, plain.boxes)

    def test_objectness_feature_off_by_default(self):
        cfg = dg.ScenarioConfig(**SMALL)
        assert cfg.objectness_feature_gain == 0.0


class TestMismatchInstance:
    def test_shape_and_construction(self):
        lp = dg.mismatch_instance()
        assert lp.cls.shape == (300, 10)
        assert np.argmax(lp.cls[0]) == 0 and np.argmax(lp.det[:, 0]) == 1


class TestIO:
    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        dg.write_dataset([], path)
        assert path.read_text() == ""
        assert dg.read_dataset(path) == []

    def test_round_trip(self, tmp_path, default_sets):
        path = tmp_path / "test.jsonl"
        dg.write_dataset(default_sets[1], path)
        back = dg.read_dataset(path)
        assert len(back) == len(default_sets[1])
        for a, b in zip(back, default_sets[1]):
            assert a.image_id == b.image_id and a.image_size == b.image_size
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.objectness, b.objectness)
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.gt == b.gt
            assert a == b

    def test_header_marks_ground_truth_eval_only(self):
        text = dg.dumps_dataset(dg.generate(dg.ScenarioConfig(**SMALL))[1])
        header = json.loads(text.splitlines()[0])
        assert header["eval_only"] == ["gt"]
        assert header["n_proposals"] == 20 and header["feature_dim"] == 6 and header["n_classes"] == 3

    def test_truncated_last_line(self, tmp_path):
        text = dg.dumps_dataset(dg.generate(dg.ScenarioConfig(**SMALL))[1])
        lines = text.splitlines()
        path = tmp_path / "cut.jsonl"
        path.write_text("\n".join(lines[:-1] + [lines[-1][: len(lines[-1]) // 2]]))
        with pytest.raises(ParseError) as info:
            dg.read_dataset(path)
        assert info.value.line == len(lines)
        assert f"line {len(lines)}" in str(info.value)

    def test_dimension_mismatch_is_schema_error(self):
        lines = dg.dumps_dataset(dg.generate(dg.ScenarioConfig(**SMALL))[1]).splitlines()
        doc = json.loads(lines[2])
        doc["proposals"][0]["features"] = doc["proposals"][0]["features"][:-1]
        lines[2] = json.dumps(doc)
        with pytest.raises(SchemaError) as info:
            dg.parse_dataset(lines)
        assert info.value.line == 3

    def test_duplicate_id_is_schema_error(self):
        lines = dg.dumps_dataset(dg.generate(dg.ScenarioConfig(**SMALL))[1]).splitlines()
        with pytest.raises(SchemaError):
            dg.parse_dataset(lines + [lines[1]])

    def test_missing_header_field(self):
        with pytest.raises(ParseError):
            dg.parse_dataset(['{"format_version": 1}'])

    def test_not_an_object(self):
        with pytest.raises(ParseError):
            dg.parse_dataset(["[1, 2]"])
