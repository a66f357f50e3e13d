import json
import math

import pytest
from numpy.testing import assert_array_equal

from app.pipeline.evaluate import evaluate
from app.store.checkpoint import CheckpointError, check_dims, load_checkpoint, save_checkpoint


@pytest.fixture
def saved(small_model, tmp_path):
    path = str(tmp_path / "ckpt" / "checkpoint.json")
    save_checkpoint(path, small_model, seed=11, config={"train": {"epochs": 2}})
    return path


def _edit(path, fn):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    fn(doc)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


class TestCheckpoint:
    def test_parameters_restored_exactly(self, small_model, saved):
        model, meta = load_checkpoint(saved)
        original = small_model.named_parameters()
        for name, p in model.named_parameters().items():
            assert_array_equal(p.value, original[name].value)
        assert meta["seed"] == 11
        assert meta["config"]["train"]["epochs"] == 2
        assert "parameters" not in meta

    def test_restored_model_predicts_identically(self, small_model, small_dataset, saved):
        model, _ = load_checkpoint(saved)
        test = small_dataset.select("test")
        assert evaluate(model, test, "awgn", math.inf) == evaluate(small_model, test, "awgn", math.inf)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "nope.json"))

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_wrong_format(self, saved):
        _edit(saved, lambda d: d.update(format="something-else"))
        with pytest.raises(CheckpointError, match="unknown format"):
            load_checkpoint(saved)

    def test_minor_version_accepted(self, saved):
        _edit(saved, lambda d: d.update(version="1.3"))
        load_checkpoint(saved)

    def test_major_version_rejected(self, saved):
        _edit(saved, lambda d: d.update(version="2.0"))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(saved)

    def test_shape_mismatch(self, saved):
        def shrink(doc):
            entry = doc["parameters"]["encoder.0.bias"]
            entry["shape"] = [entry["shape"][0] - 1]
            entry["values"] = entry["values"][:-1]

        _edit(saved, shrink)
        with pytest.raises(CheckpointError, match="encoder.0.bias"):
            load_checkpoint(saved)

    def test_missing_parameter(self, saved):
        _edit(saved, lambda d: d["parameters"].pop("encoder.0.bias"))
        with pytest.raises(CheckpointError, match="parameter names differ"):
            load_checkpoint(saved)

    def test_dims_mismatch(self, small_model):
        with pytest.raises(CheckpointError, match="do not match"):
            check_dims(small_model, {"image": 5, "text": 4, "audio": 9})

    def test_dims_match(self, small_model, small_dataset):
        check_dims(small_model, small_dataset.dims)
