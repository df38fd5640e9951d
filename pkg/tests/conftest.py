"""Shared fixtures: one tiny dataset and one two-stage training run."""

import dataclasses

import pytest

from helpers import make_dataset, tiny_config
from splitisp.training import run_stage1, run_stage2


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Synthetic two-train/one-val dataset; returns the manifest path."""
    out = tmp_path_factory.mktemp("dataset")
    return make_dataset(out, n_train=2, n_val=1, size=64, seed=0)


@pytest.fixture(scope="session")
def stage1_run(tiny_dataset, tmp_path_factory):
    """(final checkpoint path, history, cfg) of a short codec fit."""
    out = tmp_path_factory.mktemp("stage1")
    cfg = tiny_config(tiny_dataset)
    path, history = run_stage1(cfg, out)
    return path, history, cfg


@pytest.fixture(scope="session")
def stage2_run(tiny_dataset, stage1_run, tmp_path_factory):
    """(final checkpoint path, history, cfg) of a short joint fit."""
    stage1_path, _, _ = stage1_run
    out = tmp_path_factory.mktemp("stage2")
    cfg = tiny_config(tiny_dataset)
    path, history = run_stage2(cfg, out, stage1_path)
    return path, history, cfg
