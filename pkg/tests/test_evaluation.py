import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convseg.dataset import Scene, synth_generate
from convseg.errors import (CategoryMismatchError, ConfigError, ConflictError, DimensionError,
                            LabelError, ParseError)
from convseg.evaluation import (SubmissionRecord, accuracy, confusion_matrix, emit_submission,
                                evaluate_model, iou, merge_submissions, parse_submission,
                                predict_records, predict_scene)
from convseg.model import model_init


def oracle(pred, gt, n):
    """Independent brute force: set arithmetic per class."""
    pred, gt = list(pred), list(gt)
    acc = sum(p == g for p, g in zip(pred, gt)) / len(gt)
    per = []
    for c in range(n):
        P = {i for i, p in enumerate(pred) if p == c}
        G = {i for i, g in enumerate(gt) if g == c}
        per.append(len(P & G) / len(P | G) if P | G else None)
    present = [v for v in per if v is not None]
    return acc, per, sum(present) / len(present)


class TestMetrics:
    def test_worked_example(self):
        per, mean = iou([0, 0, 1], [0, 1, 1], 2)
        assert per.tolist() == [0.5, 0.5] and mean == 0.5
        assert accuracy([0, 0, 1], [0, 1, 1]) == pytest.approx(2 / 3)

    def test_absent_class_excluded(self):
        per, mean = iou([0, 0], [0, 0], 2)
        assert mean == 1.0 and np.isnan(per[1])
        assert iou([0, 1], [0, 0], 3, include_absent=True)[1] == pytest.approx((0.5 + 0 + 1) / 3)

    def test_perfect(self):
        per, mean = iou([2, 1, 0, 2], [2, 1, 0, 2], 3)
        assert per.tolist() == [1.0, 1.0, 1.0] and mean == 1.0

    def test_errors(self):
        with pytest.raises(LabelError, match="index 1"):
            confusion_matrix([0, 3], [0, 0], 3)
        with pytest.raises(DimensionError):
            accuracy([0, 1], [0])
        with pytest.raises(DimensionError):
            accuracy([], [])

    def test_matches_oracle_on_100_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n_cls = int(rng.integers(2, 6))
            size = int(rng.integers(1, 40))
            pred, gt = rng.integers(0, n_cls, size), rng.integers(0, n_cls, size)
            acc, per, mean = oracle(pred, gt, n_cls)
            got_per, got_mean = iou(pred, gt, n_cls)
            assert accuracy(pred, gt) == acc
            assert [None if np.isnan(v) else v for v in got_per] == per
            assert got_mean == pytest.approx(mean, abs=1e-15)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30), st.integers(2, 5))
    def test_iou_one_iff_identical_sets(self, seed, n, n_cls):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, n_cls, n)
        pred = np.where(rng.random(n) < 0.7, gt, rng.integers(0, n_cls, n))
        per, _ = iou(pred, gt, n_cls)
        for c in range(n_cls):
            if np.isnan(per[c]):
                continue
            assert (per[c] == 1.0) == np.array_equal(pred == c, gt == c)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30), st.integers(2, 5))
    def test_relabel_invariance(self, seed, n, n_cls):
        rng = np.random.default_rng(seed)
        pred, gt = rng.integers(0, n_cls, n), rng.integers(0, n_cls, n)
        perm = rng.permutation(n_cls)
        assert iou(perm[pred], perm[gt], n_cls)[1] == pytest.approx(iou(pred, gt, n_cls)[1],
                                                                     abs=1e-15)

    def test_confusion_row_sums(self):
        rng = np.random.default_rng(3)
        pred, gt = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        conf = confusion_matrix(pred, gt, 4)
        assert conf.sum(axis=1).tolist() == np.bincount(gt, minlength=4).tolist()
        assert conf.sum(axis=0).tolist() == np.bincount(pred, minlength=4).tolist()

    def test_random_label_baseline(self):
        rng = np.random.default_rng(11)
        scenes = synth_generate("chair", 50, 64, seed=4)
        gt = np.concatenate([s.labels for s in scenes])
        pred = rng.integers(0, 4, gt.size)
        assert abs(accuracy(pred, gt) - 0.25) < 0.05


class TestEvaluateModel:
    @pytest.fixture
    def model(self, small_config):
        return model_init(small_config, 2)

    def relabelled(self, model, scenes):
        """Scenes whose ground truth is the model's own prediction."""
        out = []
        for s in scenes:
            pred = predict_scene(model, s)
            out.append(Scene(s.scene_id, s.category, s.points, s.component_ids,
                             [pred[int(c)] for c in s.component_ids]))
        return out

    def test_self_consistent_is_perfect(self, model):
        scenes = self.relabelled(model, synth_generate("lamp", 3, 40, seed=1))
        rep = evaluate_model(model, scenes)
        assert rep.point_accuracy == 1.0 and rep.component_accuracy == 1.0
        assert rep.mean_iou == 1.0 and rep.component_mean_iou == 1.0

    def test_report_bookkeeping(self, model, tmp_path):
        scenes = synth_generate("lamp", 3, 40, seed=1)
        rep = evaluate_model(model, scenes)
        gt = np.concatenate([s.labels for s in scenes])
        assert rep.counts.sum(axis=1).tolist() == np.bincount(gt, minlength=3).tolist()
        assert rep.component_counts.sum() == 9
        rep.write_json(tmp_path / "r.json")
        import json
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["confusion"] == rep.counts.tolist()

    def test_category_mismatch(self, model):
        with pytest.raises(CategoryMismatchError):
            evaluate_model(model, synth_generate("bed", 1, 40, seed=1))

    def test_needs_labels_and_scenes(self, model):
        s = synth_generate("lamp", 1, 40, seed=1)[0]
        s.labels = None
        with pytest.raises(LabelError):
            evaluate_model(model, [s])
        with pytest.raises(ConfigError):
            evaluate_model(model, [])


def write(tmp_path, name, rows):
    p = tmp_path / name
    emit_submission([SubmissionRecord(*r) for r in rows], p)
    return p


class TestSubmission:
    def test_emit_sorted_and_round_trip(self, tmp_path):
        recs = [SubmissionRecord("b", 2, 0), SubmissionRecord("a", 10, 1), SubmissionRecord("a", 9, 2)]
        emit_submission(recs, tmp_path / "s.csv")
        text = (tmp_path / "s.csv").read_text()
        assert text == "scene_id,component_id,label\na,9,2\na,10,1\nb,2,0\n"
        assert parse_submission(tmp_path / "s.csv") == sorted(recs)

    def test_duplicate_within_file(self, tmp_path):
        with pytest.raises(ConflictError, match="scene_id='a' component_id=1"):
            emit_submission([SubmissionRecord("a", 1, 0), SubmissionRecord("a", 1, 2)],
                            tmp_path / "s.csv")

    def test_parse_errors(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("scene,component,label\n")
        with pytest.raises(ParseError):
            parse_submission(p)
        p.write_text("scene_id,component_id,label\na,1\n")
        with pytest.raises(ParseError, match=":2:"):
            parse_submission(p)
        p.write_text("scene_id,component_id,label\na,x,1\n")
        with pytest.raises(ParseError):
            parse_submission(p)

    def test_merge_order_independent(self, tmp_path):
        paths = [write(tmp_path, f"{i}.csv", [(f"s{i}_{j}", j, i % 3) for j in range(3)])
                 for i in range(5)]
        outputs = set()
        for k, order in enumerate(itertools.permutations(paths)):
            if k % 7:
                continue
            out = tmp_path / f"m{k}.csv"
            assert merge_submissions(list(order), out) == 15
            outputs.add(out.read_bytes())
        assert len(outputs) == 1

    def test_merge_conflict_names_key(self, tmp_path):
        paths = [write(tmp_path, f"{i}.csv", [(f"s{i}", 0, 0)]) for i in range(4)]
        paths.append(write(tmp_path, "dup.csv", [("s2", 0, 1)]))
        with pytest.raises(ConflictError, match="s2"):
            merge_submissions(paths, tmp_path / "m.csv")

    def test_merge_count(self, tmp_path):
        with pytest.raises(ConfigError):
            merge_submissions([write(tmp_path, "a.csv", [("a", 0, 0)])], tmp_path / "m.csv")

    def test_predict_records(self, small_config):
        mp = model_init(small_config, 0)
        scenes = synth_generate("lamp", 2, 30, seed=3)
        recs = predict_records(mp, scenes)
        assert len(recs) == 6
        assert {(r.scene_id, r.component_id) for r in recs} == {
            (s.scene_id, c) for s in scenes for c in s.components.tolist()}
