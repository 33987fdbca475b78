#!/usr/bin/env python

"""
This is pytest for assoctrack.workflows.training.
"""

from copy import deepcopy
import pytest
from assoctrack.common.file_io import VideoRecord
from assoctrack.workflows.training import TrainWorkflow


def test_TrainWorkflow(easy_record, tiny_run_config):
    """
    Check TrainWorkflow.
    """
    config = deepcopy(tiny_run_config)
    workflow = TrainWorkflow([easy_record], [easy_record], config)
    outputs = workflow.run()
    history = outputs['history']
    assert history.steps == [0, 1, 2]
    assert all(loss is not None for loss in history.val_loss)
    assert outputs['initial_val_loss'] > 0
    assert outputs['final_val_loss'] > 0
    model = outputs['model']
    assert model.config.dim == 16
    assert model.config.channels == ('area', 'intensity', 'ixx', 'iyy', 'ixy')
    assert not model.training


def test_TrainWorkflow_ablations(easy_record, tiny_run_config):
    """
    Check sigmoid-only and points-only overrides.
    """
    config = deepcopy(tiny_run_config)
    workflow = TrainWorkflow([easy_record], [], config,
                             parental_softmax=False, points_only=True)
    outputs = workflow.run()
    assert workflow.ctx.train_config.lam == 1.
    assert not outputs['model'].config.parental_softmax
    assert outputs['model'].config.channels == ()
    assert outputs['initial_val_loss'] is None
    assert outputs['history'].val_loss == [None, None, None]


def test_TrainWorkflow_without_detections(tiny_run_config):
    empty = VideoRecord('empty', [], None)
    with pytest.raises(ValueError):
        TrainWorkflow([empty], [], deepcopy(tiny_run_config)).run()
