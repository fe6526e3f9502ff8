"""Shared fixtures: synthetic two-mode data and trained models.

The quick fixtures (tiny_*) keep module tests fast; the acceptance_bundle
trains all three model kinds at the full oracle scale and is built lazily,
only when acceptance tests request it.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from labeldep.baselines import (
    ChainConfig,
    ChainModel,
    IndependentConfig,
    IndependentModel,
    train_independent,
    train_pcc,
)
from labeldep.cvae import CvaeConfig, CvaeModel, train_cvae
from labeldep.data import LabeledDataset, SyntheticSpec, generate_synthetic, split
from labeldep.training import TrainConfig

TWO_MODE_PATTERNS = [[0, 1], [1, 0]]


def two_mode_spec(n, seed, noise=0.0, k=4):
    return SyntheticSpec(
        kind="multimode",
        patterns=TWO_MODE_PATTERNS,
        weights=[0.5, 0.5],
        noise=noise,
        context_dim=k,
        n=n,
        seed=seed,
    )


def small_cvae_config(k=4, l=2):
    return CvaeConfig(
        feature_dim=k,
        label_count=l,
        latent_dim=2,
        feature_widths=(16,),
        prior_widths=(16,),
        recognition_widths=(16,),
        decoder_widths=(32,),
        keep_prob=1.0,
    )


@dataclass
class TwoModeData:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    table: dict


@dataclass
class TrainedBundle:
    data: TwoModeData
    cvae: CvaeModel
    independent: IndependentModel
    chain: ChainModel
    cvae_history: list
    train_seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def tiny_two_mode() -> TwoModeData:
    full, table = generate_synthetic(two_mode_spec(n=2500, seed=101))
    train, val = split(full, (0.9, 0.1), seed=7)
    test, _ = generate_synthetic(two_mode_spec(n=600, seed=303))
    return TwoModeData(train, val, test, table)


@pytest.fixture(scope="session")
def tiny_cvae(tiny_two_mode) -> tuple[CvaeModel, list]:
    model = CvaeModel.build(small_cvae_config(), seed=3)
    config = TrainConfig(
        epochs=300, batch_size=256, learning_rate=2e-3, seed=5, patience=40
    )
    history = train_cvae(model, tiny_two_mode.train, tiny_two_mode.val, config)
    return model, history


@pytest.fixture(scope="session")
def acceptance_bundle() -> TrainedBundle:
    """Two-mode oracle data at full scale with all three trained models."""
    full, table = generate_synthetic(two_mode_spec(n=10000, seed=101))
    train, val = split(full, (0.9, 0.1), seed=7)
    test, _ = generate_synthetic(two_mode_spec(n=2000, seed=404))
    data = TwoModeData(train, val, test, table)
    seconds = {}

    t0 = time.monotonic()
    cvae = CvaeModel.build(small_cvae_config(), seed=3)
    cvae_history = train_cvae(
        cvae,
        train,
        val,
        TrainConfig(epochs=400, batch_size=512, learning_rate=2e-3, seed=5, patience=60),
    )
    seconds["cvae"] = time.monotonic() - t0

    t0 = time.monotonic()
    independent, _ = train_independent(
        train,
        val,
        TrainConfig(epochs=150, batch_size=512, learning_rate=2e-3, seed=13, patience=30),
        IndependentConfig(feature_dim=4, label_count=2, hidden_widths=(32,), keep_prob=1.0),
    )
    seconds["independent"] = time.monotonic() - t0

    t0 = time.monotonic()
    chain, _ = train_pcc(
        train,
        val,
        TrainConfig(epochs=200, batch_size=512, learning_rate=2e-3, seed=17, patience=30),
        arch=ChainConfig(feature_dim=4, label_count=2, hidden_widths=(16,), keep_prob=1.0),
    )
    seconds["pcc"] = time.monotonic() - t0

    return TrainedBundle(data, cvae, independent, chain, cvae_history, seconds)
