#!/usr/bin/env python

"""
This is pytest for assoctrack.common.training.
"""

from dataclasses import replace
import numpy as np
import pytest
import torch
from assoctrack.common import training
from assoctrack.common.lineage import Window
from assoctrack.common.matching import build_target, build_weights
from assoctrack.common.tokenizer import AugmentConfig
from assoctrack.common.training import (FixedWindowDataset, TrainConfig,
                                        TrainingSample, VideoWindowDataset,
                                        gradcheck, logit_gradient,
                                        make_training_video, train)
from assoctrack.common.transformer import AssociationTransformer, ModelConfig
from assoctrack.common.utils import TrainingDivergedError


def _toy_sample(toy_video, lambda_div:float=10.) -> TrainingSample:
    dets, lineage = toy_video
    video = make_training_video('toy', dets, dets, lineage, 10.)
    window = Window(0, 3, dets)
    target = build_target(window, video.matching, lineage)
    weights = build_weights(window, target, lineage, video.matching,
                            delta_t=2, lambda_div=lambda_div)
    return TrainingSample(window, target, weights)


def test_gradcheck_without_layers(toy_video, tiny_model_config):
    model = AssociationTransformer(replace(tiny_model_config, layers=0))
    report = gradcheck(model, _toy_sample(toy_video), max_entries=20)
    assert report.passed, report


def test_gradcheck_full_model(toy_video):
    """
    Check every parameter tensor of a two-layer model.
    """
    config = ModelConfig(dim=32, layers=2, heads=2, n_freq=4, d_max=40.,
                         window=3, seed=1)
    model = AssociationTransformer(config)
    report = gradcheck(model, _toy_sample(toy_video), max_entries=10)
    assert report.passed, report
    assert set(report.per_parameter) \
        == { name for name, _ in model.named_parameters() }


def test_gradcheck_small_distance(toy_video, tiny_model_config):
    model = AssociationTransformer(replace(tiny_model_config, d_max=5.))
    report = gradcheck(model, _toy_sample(toy_video), max_entries=10)
    assert report.passed, report


def test_overfit_single_window(toy_video):
    """
    Check the model can memorize one window.
    """
    sample = _toy_sample(toy_video)
    config = TrainConfig(batch_size=1, steps=1000, learning_rate=5e-3,
                         warmup_steps=10, log_every=500)
    model_config = ModelConfig(dim=32, layers=1, heads=2, n_freq=8,
                               d_max=40., window=3)
    _, history = train(FixedWindowDataset([sample]), config, model_config)
    assert history.train_loss[-1] < 1e-2
    assert history.train_loss[-1] < history.train_loss[0]


def test_training_is_deterministic(toy_video, tiny_model_config):
    sample = _toy_sample(toy_video)
    config = TrainConfig(batch_size=2, steps=5, learning_rate=1e-3,
                         warmup_steps=1)
    model_a, history_a = train(FixedWindowDataset([sample]), config,
                               tiny_model_config)
    model_b, history_b = train(FixedWindowDataset([sample]), config,
                               tiny_model_config)
    assert history_a.train_loss == history_b.train_loss
    for p_a, p_b in zip(model_a.parameters(), model_b.parameters()):
        assert torch.equal(p_a, p_b)


def test_division_weight_raises_gradient_share(toy_video, tiny_model_config):
    """
    Check a larger division weight shifts the gradient to the dividing row.
    """
    model = AssociationTransformer(tiny_model_config)
    config = TrainConfig()
    shares = []
    for lambda_div in (0., 10.):
        sample = _toy_sample(toy_video, lambda_div)
        grad = np.abs(logit_gradient(model, sample, config))
        row = sample.window.index[2]
        shares.append(grad[row].sum() / grad.sum())
    assert shares[1] > shares[0]


def test_diverged_training_raises(toy_video, tiny_model_config, monkeypatch):
    def nan_loss(model, sample, config):
        return torch.tensor(float('nan'), requires_grad=True)

    monkeypatch.setattr(training, 'sample_loss', nan_loss)
    with pytest.raises(TrainingDivergedError):
        train(FixedWindowDataset([_toy_sample(toy_video)]),
              TrainConfig(steps=2, batch_size=1), tiny_model_config)


def test_video_window_dataset(easy_video):
    """
    Check sampled windows carry consistent targets and weights.
    """
    video = make_training_video('easy', easy_video.detections,
                                easy_video.detections, easy_video.lineage,
                                10.)
    dataset = VideoWindowDataset([video], 3, TrainConfig(),
                                 augment=AugmentConfig())
    assert len(dataset) == 6
    rng = np.random.default_rng(0)
    for _ in range(20):
        sample = dataset.sample(rng)
        n = len(sample.window)
        assert sample.window.span == 3
        assert sample.target.values.shape == (n, n)
        assert sample.weights.values.shape == (n, n)
        np.testing.assert_array_equal(sample.target.values,
                                      sample.target.values.T)
        gap = sample.window.frames[None, :] - sample.window.frames[:, None]
        assert not sample.weights.values[gap < 1].any()
    assert len(dataset.all_samples()) == 6


def test_video_window_dataset_empty():
    with pytest.raises(ValueError):
        FixedWindowDataset([])
