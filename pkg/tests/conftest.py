"""Shared fixtures: small scene configs, tiny datasets, a narrow detector."""
import sys

import numpy as np
import pytest
import torch

from disdet import synthdata
from disdet.config import DomainShiftParams, ModelConfig, SceneConfig
from disdet.model import DetectorModel

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def scene_cfg():
    # 64 px scenes keep rendering and forward passes fast
    return SceneConfig(resolution=64, min_size=16, max_size=28, max_objects=2)


@pytest.fixture(scope="session")
def shift_cfg():
    return DomainShiftParams()


@pytest.fixture(scope="session")
def model_cfg():
    return ModelConfig(width_mult=0.125)


@pytest.fixture(scope="session")
def model(model_cfg):
    return DetectorModel(model_cfg, num_classes=3, seed=0)


@pytest.fixture(scope="session")
def samples(scene_cfg, shift_cfg):
    src = [synthdata.generate_scene(i, synthdata.SOURCE, shift_cfg, scene_cfg) for i in range(4)]
    tgt = [
        synthdata.generate_scene(100 + j, synthdata.TARGET, shift_cfg, scene_cfg)
        for j in range(4)
    ]
    return src, tgt


@pytest.fixture()
def dataset_pair(tmp_path, scene_cfg, shift_cfg):
    """Small on-disk source/target dataset pair."""
    return synthdata.generate_pair(
        tmp_path / "data", n_source=4, n_target=4, seed=0, shift=shift_cfg, scene_cfg=scene_cfg
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per release-gate check, printed even under capture."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("release gate")
    for num in sorted(results):
        name, ok, note = results[num]
        suffix = f"  [{note}]" if note else ""
        terminalreporter.write_line(f"{num}. {name}: {'PASS' if ok else 'FAIL'}{suffix}")
