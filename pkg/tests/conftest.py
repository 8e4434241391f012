# tests/conftest.py
import numpy as np
import pytest

from ml.tensor import precision
from schemas.config import RunConfig


@pytest.fixture(autouse=True)
def _restore_precision():
    # train_eval and load paths switch the process-wide precision
    with precision("float32"):
        yield


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_run_config(**overrides) -> RunConfig:
    """One block of width 16 with 2 ranks per module, on a short copy task."""
    base = {
        "model": {"layers": 1, "d": 16, "heads": 2, "d_ff": 32, "vocab": 8, "max_seq_len": 8},
        "allocator": {"R_target": 12, "r1": 1, "K1": 1, "K2": 1, "N_A": 2, "val_batch_size": 16},
        "optimizer": {"batch_size": 16, "lr": 1e-2},
        "task": {"kind": "copy", "vocab": 8, "seq_len": 7, "train_size": 64, "val_size": 32, "test_size": 32},
        "precision": "float64",
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            base[section] = {**base.get(section, {}), **values}
        else:
            base[section] = values
    return RunConfig.model_validate(base)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return tiny_run_config(output_dir=str(tmp_path))
