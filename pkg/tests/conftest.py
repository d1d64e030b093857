from __future__ import annotations

import numpy as np
import pytest

import videojam as vj
from videojam.synthdata import DatasetItem
from videojam.trainer import prepare_items


@pytest.fixture(scope="session")
def micro_items():
    """Two tiny scenes (T=2, 4x4) for gradient checks and loss plumbing."""
    specs = [
        vj.SceneSpec("square", "translate", 2, 2, 4, 4, (2.0, 2.0), velocity=(1.0, 0.0)),
        vj.SceneSpec("disc", "rotate", 2, 2, 4, 4, (2.0, 2.0), angular_rate=0.5),
    ]
    return [
        DatasetItem(video=vj.render_video(s), flow=vj.analytic_flow(s), class_id=s.class_id)
        for s in specs
    ]


@pytest.fixture(scope="session")
def micro_prepared(micro_items):
    return prepare_items(micro_items)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24+6 item corpus at the default 16x16x8 resolution."""
    out = tmp_path_factory.mktemp("smalldata")
    manifest = vj.build_dataset(out, vj.DatasetConfig(n_train=24, n_holdout=6), seed=0)
    return vj.load_dataset(manifest)


@pytest.fixture(scope="session")
def base_model():
    return vj.init_base(seed=0)


@pytest.fixture(scope="session")
def joint_model(base_model):
    return vj.extend_joint(base_model, seed=1)
