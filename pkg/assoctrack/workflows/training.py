#!/usr/bin/env python

"""
This module provides TrainWorkflow.
"""

from dataclasses import replace
from typing import Optional, Sequence
from assoctrack.common.builder import (get_augment_config, get_model_config,
                                       get_train_config)
from assoctrack.common.file_io import VideoRecord
from assoctrack.common.tokenizer import FeatureStandardizer
from assoctrack.common.training import (VideoWindowDataset, evaluate_loss,
                                        make_training_video, train)
from assoctrack.common.transformer import AssociationTransformer
from assoctrack.workflows.base import Workflow


class TrainWorkflow(Workflow):
    """
    Workflow fitting an association model on videos with ground truth.

    Examples:
        Workflow is as follows,

        >>> # outline
        >>> [ self.initialize,
        >>>   self.build_datasets,
        >>>   self.fit,
        >>>   self.terminate ]

    Args:
        train_videos: Training videos. Detections double as ground truth.
        val_videos: Validation videos, may be empty.
        config: Validated run configuration.
        parental_softmax: Overrides config['model']['parental_softmax'].
                          False also sets lam to 1.
        points_only: Overrides config['model']['points_only'].

    Outputs:
        model: Trained AssociationTransformer.
        history: TrainHistory.
        initial_val_loss: Validation loss before the first step.
        final_val_loss: Validation loss after the last step.
    """

    def __init__(self, train_videos:Sequence[VideoRecord],
                 val_videos:Sequence[VideoRecord],
                 config:dict,
                 parental_softmax:Optional[bool]=None,
                 points_only:Optional[bool]=None):
        super().__init__()
        self.train_videos = list(train_videos)
        self.val_videos = list(val_videos)
        self.config = config
        self.parental_softmax = parental_softmax
        self.points_only = points_only

    def define(self):
        return [
            self.initialize,
            self.build_datasets,
            self.fit,
            self.terminate,
            ]

    def initialize(self):
        self.banner("Start TrainWorkflow.")
        model_conf = dict(self.config['model'])
        if self.parental_softmax is not None:
            model_conf['parental_softmax'] = self.parental_softmax
        if self.points_only is not None:
            model_conf['points_only'] = self.points_only
        train_config = get_train_config(self.config)
        model_config = get_model_config(model_conf, seed=train_config.seed)
        if not model_config.parental_softmax:
            train_config = replace(train_config, lam=1.)
            self.report("# Parental softmax off, lam set to 1.")
        self.ctx.model_config = model_config
        self.ctx.train_config = train_config
        self.ctx.augment = get_augment_config(self.config['augment'])
        self.report("# Train videos: {}, val videos: {}".format(
            len(self.train_videos), len(self.val_videos)))
        self.report("# Model: dim {}, layers {}, window {}, channels {}"
                    .format(model_config.dim, model_config.layers,
                            model_config.window,
                            list(model_config.channels)))

    def _dataset(self, videos, augment):
        cfg = self.ctx.train_config
        matched = [ make_training_video(video.name, video.detections,
                                        video.detections, video.lineage,
                                        cfg.delta_max)
                    for video in videos if video.detections ]
        if not matched:
            return None
        return VideoWindowDataset(matched, self.ctx.model_config.window, cfg,
                                  augment=augment,
                                  max_tokens=self.ctx.model_config.max_tokens,
                                  margin=self.ctx.model_config.d_max)

    def build_datasets(self):
        self.banner("Build datasets.")
        self.ctx.train_set = self._dataset(self.train_videos,
                                           self.ctx.augment)
        if self.ctx.train_set is None:
            raise ValueError("no training detections")
        self.ctx.val_set = self._dataset(self.val_videos, None)
        self.report("# Training windows: {}".format(len(self.ctx.train_set)))

    def fit(self):
        self.banner("Fit model.")
        model_config = self.ctx.model_config
        standardizer = FeatureStandardizer.fit(
                self.ctx.train_set.detections(), model_config.channels)
        model = AssociationTransformer(model_config, standardizer)
        initial = None
        if self.ctx.val_set is not None:
            self.ctx.val_samples = self.ctx.val_set.all_samples()
            initial = evaluate_loss(model, self.ctx.val_samples,
                                    self.ctx.train_config)
            self.report("# Initial val loss: {:.6f}".format(initial))
        model, history = train(self.ctx.train_set, self.ctx.train_config,
                               model_config, val_dataset=self.ctx.val_set,
                               model=model)
        final = None
        if self.ctx.val_set is not None:
            final = evaluate_loss(model, self.ctx.val_samples,
                                  self.ctx.train_config)
            self.report("# Final val loss: {:.6f}".format(final))
        self.out('model', model)
        self.out('history', history)
        self.out('initial_val_loss', initial)
        self.out('final_val_loss', final)

    def terminate(self):
        self.banner("TrainWorkflow has finished successfully.")
