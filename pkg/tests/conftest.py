#!/usr/bin/env python

"""
This is pytest fixtures.
"""

import os
import pytest
import torch
import yaml
import assoctrack
from assoctrack.common.config import load_run_config
from assoctrack.common.file_io import VideoRecord
from assoctrack.common.lineage import Detection, LineageGraph
from assoctrack.common.simulator import load_preset, simulate
from assoctrack.common.transformer import ModelConfig


TEST_DIR = os.path.join(
        os.path.dirname(os.path.dirname(assoctrack.__file__)),
        'tests',
        )


def _read_yaml(filename:str) -> dict:
    with open(filename) as f:
        return yaml.safe_load(f)


if os.path.exists(os.path.join(TEST_DIR,
                               'settings.yaml')):
    PARAMETERS = _read_yaml(os.path.join(TEST_DIR,
                                         'settings.yaml'))
else:
    PARAMETERS = _read_yaml(os.path.join(TEST_DIR,
                                         '..',
                                         'template',
                                         'template-pytest_settings.yaml',
                                         ))

torch.set_num_threads(PARAMETERS.get('threads', 1))


def pytest_collection_modifyitems(config, items):
    if PARAMETERS.get('run_acceptance', False):
        return
    skip = pytest.mark.skip(reason="set run_acceptance in tests/settings.yaml")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def make_det(det_id:int, t:int, x:float, y:float=0., **z) -> Detection:
    """
    Detection with full features unless given explicitly.
    """
    features = {'area': 100., 'intensity': 1., 'ixx': 10., 'iyy': 8.,
                'ixy': 1.}
    features.update(z)
    return Detection(id=det_id, t=t, p=(float(x), float(y)), z=features)


@pytest.fixture(autouse=True, scope='session')
def env_parameters() -> dict:
    """
    Test settings.
    """
    return PARAMETERS


@pytest.fixture(scope='session')
def toy_video() -> tuple:
    """
    Eight detections over three frames with one division.

    Frame 0 holds 1 and 2, 1 continues to 3 -> 6, 2 divides into 4 and 5
    which continue to 7 and 8.
    """
    dets = [
        make_det(1, 0, 10., 10.),
        make_det(2, 0, 40., 12.),
        make_det(3, 1, 12., 11.),
        make_det(4, 1, 36., 10., area=50.),
        make_det(5, 1, 44., 14., area=50.),
        make_det(6, 2, 13., 12.),
        make_det(7, 2, 34., 9., area=55.),
        make_det(8, 2, 47., 15., area=55.),
        ]
    lineage = LineageGraph(nodes=range(1, 9),
                           edges=[(1, 3), (3, 6), (2, 4), (2, 5), (4, 7),
                                  (5, 8)])
    return dets, lineage


@pytest.fixture(scope='session')
def tiny_model_config() -> ModelConfig:
    """
    Small model for fast tests.
    """
    return ModelConfig(dim=16, layers=1, heads=2, n_freq=4, d_max=40.,
                       window=3, max_tokens=256, seed=0)


@pytest.fixture(scope='session')
def easy_video():
    """
    Short simulated video of the easy preset.
    """
    return simulate(load_preset('easy', frames=8, n_objects=6, seed=3))


@pytest.fixture
def tiny_run_config() -> dict:
    """
    Run configuration with a tiny model and a few training steps.
    """
    return load_run_config({
        'data': {'dist_max': 15., 'delta_max': 10.},
        'model': {'dim': 16, 'layers': 1, 'heads': 2, 'n_freq': 4,
                  'd_max': 40., 'window': 3, 'max_tokens': 256},
        'train': {'steps': 3, 'batch_size': 2, 'warmup_steps': 1,
                  'val_every': 1, 'log_every': 1},
        'augment': {'subsample': [1]},
        })


@pytest.fixture(scope='session')
def easy_record(easy_video) -> VideoRecord:
    """
    The easy video as a record with ground truth lineage.
    """
    return VideoRecord('easy', easy_video.detections, easy_video.lineage)
