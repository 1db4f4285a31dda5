import json

import numpy as np
import pytest

from pqauth import chaos01, net, pipeline, signal
from pqauth.errors import ParameterError

MICRO = {
    "seed": 5,
    "dataset": {"subjects": 2, "duration_s": 24.0},
    "featurizer": {"segments_per_subject": 12},
    "model": {"preset": "tiny"},
    "train": {"epochs": 2, "steps_per_epoch": 3, "batch_size": 4, "val_pairs": 8},
    "eval": {"genuine_pairs": 12, "impostor_pairs": 12},
}


class TestRunConfig:
    def test_defaults_filled(self):
        cfg = pipeline.load_run_config({"seed": 1})
        assert cfg["dataset"]["subjects"] == 8
        assert cfg["preprocess"]["mode"] == "band-0.5-8-norm"
        assert cfg["train"]["batch_size"] == 5
        assert cfg["eval"]["split"] == "data-disjoint"
        assert cfg["featurizer"]["window_s"] == 12.0

    def test_seed_mandatory(self):
        with pytest.raises(ParameterError):
            pipeline.load_run_config({})
        with pytest.raises(ParameterError):
            pipeline.load_run_config({"seed": "seven"})

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ParameterError) as err:
            pipeline.load_run_config({"seed": 1, "surprise": 2})
        assert "surprise" in str(err.value)

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ParameterError) as err:
            pipeline.load_run_config({"seed": 1, "train": {"lr": 0.1}})
        assert "train.lr" in str(err.value)

    def test_bad_mode_rejected(self):
        with pytest.raises(ParameterError):
            pipeline.load_run_config({"seed": 1, "preprocess": {"mode": "nope"}})

    def test_bad_preset_rejected(self):
        with pytest.raises(ParameterError):
            pipeline.load_run_config({"seed": 1, "model": {"preset": "giant"}})

    def test_json_file_source(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(MICRO))
        cfg = pipeline.load_run_config(path)
        assert cfg["dataset"]["subjects"] == 2


class TestFeaturizeBank:
    def make_records(self):
        cfg = pipeline.load_run_config(MICRO)
        return pipeline.synth_records(cfg)

    def test_shapes_and_determinism(self):
        records = self.make_records()
        params = [chaos01.PqParams()] * 3
        mode = signal.PreprocessMode.Band05_8Norm
        a = pipeline.featurize_bank(records, mode, params, 16, 12, seed=3)
        b = pipeline.featurize_bank(records, mode, params, 16, 12, seed=3)
        assert sorted(a) == ["s00", "s01"]
        for sid in a:
            assert a[sid].shape == (12, 3, 16, 16)
            assert np.array_equal(a[sid], b[sid])

    def test_windowed_vs_whole_record_differ(self):
        records = self.make_records()
        params = [chaos01.PqParams()] * 3
        mode = signal.PreprocessMode.Band05_8Norm
        windowed = pipeline.featurize_bank(records, mode, params, 16, 8, seed=3, window_s=12.0)
        whole = pipeline.featurize_bank(records, mode, params, 16, 8, seed=3, window_s=None)
        assert not all(np.array_equal(windowed[s], whole[s]) for s in windowed)

    def test_window_shorter_than_segment_rejected(self):
        records = self.make_records()
        with pytest.raises(ParameterError):
            pipeline.featurize_bank(
                records, signal.PreprocessMode.Raw, [chaos01.PqParams()] * 3, 16, 4,
                seed=0, window_s=1.0,
            )


class TestMergeParts:
    def test_data_disjoint_merge(self):
        parts = net.split_data({"a": 10, "b": 10}, net.SplitMode.DataDisjoint, [0.6, 0.2, 0.2], 0)
        merged = pipeline.merge_parts(parts[1:])
        assert sorted(merged) == ["a", "b"]
        assert merged["a"].size == 4
        together = pipeline.merge_parts([parts[0], merged])
        assert np.array_equal(np.sort(together["a"]), np.arange(10))


class TestExperiment:
    @pytest.fixture(scope="class")
    def result(self):
        return pipeline.run_experiment(MICRO)

    def test_report_complete(self, result):
        d = result.report.to_dict()
        for key in ("eer", "eer_threshold", "precision", "recall", "f1", "auc_roc", "rank1"):
            assert key in d
        assert 0.0 <= d["eer"] <= 1.0
        assert d["run_config"]["seed"] == 5

    def test_history_recorded(self, result):
        assert len(result.history) == 2
        assert set(result.history[0]) == {"epoch", "train_loss", "val_loss"}

    def test_score_set_sizes(self, result):
        assert result.score_set.genuine.size == 12
        assert result.score_set.impostor.size == 12

    def test_bit_reproducible(self, result, tmp_path):
        again = pipeline.run_experiment(MICRO)
        assert net.model_version_hash(again.model) == net.model_version_hash(result.model)
        assert again.report.to_json() == result.report.to_json()
        assert again.history == result.history
        p1, p2 = tmp_path / "a.snm", tmp_path / "b.snm"
        net.save_model(result.model, p1, eer_threshold=result.eer_threshold, run_config=result.run_config)
        net.save_model(again.model, p2, eer_threshold=again.eer_threshold, run_config=again.run_config)
        assert p1.read_bytes() == p2.read_bytes()

    def test_evaluate_model_on_both_splits(self, result):
        for split in ("data-disjoint", "user-disjoint"):
            report, roc_curve, prf_curve, scores = pipeline.evaluate_model(
                result.model, MICRO, split=split
            )
            assert 0.0 <= report.eer <= 1.0
            assert roc_curve.thresholds.size == prf_curve.thresholds.size
            assert scores.genuine.size == 12

    def test_image_size_mismatch_rejected(self):
        bad = dict(MICRO)
        bad = json.loads(json.dumps(MICRO))
        bad["featurizer"]["image_size"] = 64
        with pytest.raises(ParameterError):
            pipeline.run_experiment(bad)
