"""Single-file JSON checkpoints for every model kind.

Envelope: {format_version: 1, model_kind, model_config, parameters} where
parameters maps canonical names (e.g. "decoder.layer1.weight") to
{shape: [...], data: [row-major floats]}. Floats serialize via repr, so a
save -> load -> save round trip is byte-identical."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .baselines import ChainConfig, ChainModel, IndependentConfig, IndependentModel
from .cvae import CvaeConfig, CvaeModel

FORMAT_VERSION = 1
MODEL_KINDS = ("cvae", "independent", "pcc")


class CheckpointError(ValueError):
    pass


def _params_to_doc(items) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}
        for name, arr in items
    }


def _config_doc(model) -> dict:
    c = model.config
    if isinstance(model, CvaeModel):
        return {
            "feature_dim": c.feature_dim,
            "label_count": c.label_count,
            "latent_dim": c.latent_dim,
            "feature_widths": list(c.feature_widths),
            "prior_widths": list(c.prior_widths),
            "recognition_widths": list(c.recognition_widths),
            "decoder_widths": list(c.decoder_widths),
            "hidden_activation": c.hidden_activation,
            "keep_prob": c.keep_prob,
            "logvar_bound": c.logvar_bound,
            "label_names": c.label_names,
        }
    if isinstance(model, IndependentModel):
        return {
            "feature_dim": c.feature_dim,
            "label_count": c.label_count,
            "hidden_widths": list(c.hidden_widths),
            "hidden_activation": c.hidden_activation,
            "keep_prob": c.keep_prob,
            "label_names": c.label_names,
        }
    if isinstance(model, ChainModel):
        return {
            "feature_dim": c.feature_dim,
            "label_count": c.label_count,
            "label_order": list(c.label_order),
            "hidden_widths": list(c.hidden_widths),
            "hidden_activation": c.hidden_activation,
            "keep_prob": c.keep_prob,
            "label_names": c.label_names,
        }
    raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")


def checkpoint_doc(model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "model_config": _config_doc(model),
        "parameters": _params_to_doc(model.param_items()),
    }


def save_checkpoint(model, path) -> None:
    doc = checkpoint_doc(model)
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def _build_empty(kind: str, config_doc: dict):
    cfg = dict(config_doc)
    if kind == "cvae":
        return CvaeModel.build(CvaeConfig(**cfg), seed=0)
    if kind == "independent":
        return IndependentModel.build(IndependentConfig(**cfg), seed=0)
    if kind == "pcc":
        return ChainModel.build(ChainConfig(**cfg), seed=0)
    raise CheckpointError(f"unknown model_kind {kind!r}")


def model_from_doc(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {doc.get('format_version')!r}"
        )
    kind = doc.get("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model_kind {kind!r}")
    model = _build_empty(kind, doc["model_config"])
    params = doc.get("parameters", {})
    expected = dict(model.param_items())
    missing = set(expected) - set(params)
    unknown = set(params) - set(expected)
    if missing or unknown:
        raise CheckpointError(
            f"parameter names do not match: missing {sorted(missing)}, "
            f"unknown {sorted(unknown)}"
        )
    for name, target in expected.items():
        entry = params[name]
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {shape} vs model shape {target.shape}"
            )
        values = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        np.copyto(target, values)
    return model


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {path}: {e}") from e
    return model_from_doc(doc)
