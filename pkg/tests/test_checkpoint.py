"""Checkpoint JSON round trips for all three model kinds."""

import json

import numpy as np
import pytest

from labeldep.baselines import ChainConfig, ChainModel, IndependentConfig, IndependentModel
from labeldep.checkpoint import (
    CheckpointError,
    checkpoint_doc,
    load_checkpoint,
    save_checkpoint,
)
from labeldep.cvae import CvaeConfig, CvaeModel


def models():
    cvae = CvaeModel.build(
        CvaeConfig(
            feature_dim=3, label_count=2, latent_dim=2,
            feature_widths=(6,), prior_widths=(5,), recognition_widths=(5,),
            decoder_widths=(7,), label_names=["a", "b"],
        ),
        seed=1,
    )
    ind = IndependentModel.build(
        IndependentConfig(feature_dim=3, label_count=2, hidden_widths=(6,)), seed=2
    )
    chain = ChainModel.build(
        ChainConfig(feature_dim=3, label_count=2, label_order=(1, 0), hidden_widths=(4,)),
        seed=3,
    )
    return [cvae, ind, chain]


@pytest.mark.parametrize("model", models(), ids=["cvae", "independent", "pcc"])
def test_save_load_save_byte_identical(model, tmp_path):
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    save_checkpoint(model, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    for (name_a, arr_a), (name_b, arr_b) in zip(model.param_items(), loaded.param_items()):
        assert name_a == name_b
        np.testing.assert_array_equal(arr_a, arr_b)


def test_loaded_cvae_behaves_identically(tmp_path):
    model = models()[0]
    path = tmp_path / "m.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    rng = np.random.default_rng(4)
    x = rng.random((3, 3))
    y = rng.integers(0, 2, (3, 2))
    noise = rng.standard_normal((3, 2))
    a = model.elbo(x[0], y[0], noise[0])
    b = loaded.elbo(x[0], y[0], noise[0])
    assert (a.reconstruction, a.kl, a.elbo) == (b.reconstruction, b.kl, b.elbo)
    assert loaded.config.label_names == ["a", "b"]


def test_canonical_parameter_names():
    doc = checkpoint_doc(models()[0])
    assert doc["model_kind"] == "cvae"
    assert "decoder.layer1.weight" in doc["parameters"]
    assert "recognition.layer2.bias" in doc["parameters"]
    entry = doc["parameters"]["decoder.layer1.weight"]
    assert entry["shape"] == [6 + 2, 7]
    assert len(entry["data"]) == (6 + 2) * 7


def test_chain_parameter_names_follow_order():
    doc = checkpoint_doc(models()[2])
    assert "classifier1.layer1.weight" in doc["parameters"]
    assert doc["model_config"]["label_order"] == [1, 0]


def test_unknown_kind_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format_version": 1, "model_kind": "mystery", "model_config": {}}))
    with pytest.raises(CheckpointError, match="model_kind"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format_version": 99, "model_kind": "cvae", "model_config": {}}))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_missing_parameter_rejected(tmp_path):
    doc = checkpoint_doc(models()[1])
    doc["parameters"].pop("net.layer1.weight")
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path):
    doc = checkpoint_doc(models()[1])
    doc["parameters"]["net.layer1.weight"]["shape"] = [1, 1]
    doc["parameters"]["net.layer1.weight"]["data"] = [0.0]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_non_json_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("not json at all")
    with pytest.raises(CheckpointError, match="JSON"):
        load_checkpoint(path)
