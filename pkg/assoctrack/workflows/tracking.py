#!/usr/bin/env python

"""
This module provides TrackWorkflow.
"""

from typing import Optional, Sequence
from assoctrack.common.aggregator import (build_candidate_graph,
                                          distance_scores, infer_video)
from assoctrack.common.builder import get_linker
from assoctrack.common.lineage import Detection
from assoctrack.workflows.base import Workflow


class TrackWorkflow(Workflow):
    """
    Workflow tracking the detections of one video.

    Examples:
        Workflow is as follows,

        >>> # outline
        >>> [ self.initialize,
        >>>   self.infer_scores,
        >>>   self.build_candidates,
        >>>   self.link,
        >>>   self.terminate ]

    Args:
        detections: Detections of one video.
        config: Validated run configuration.
        model: Trained AssociationTransformer. None scores by distance.
        algorithm: Overrides config['linker']['algorithm'].
        dist_max: Overrides config['data']['dist_max'].

    Outputs:
        scores: ScoreTable.
        candidates: CandidateGraph.
        solution: TrackingSolution.
    """

    def __init__(self, detections:Sequence[Detection], config:dict,
                 model=None, algorithm:Optional[str]=None,
                 dist_max:Optional[float]=None):
        super().__init__()
        self.detections = list(detections)
        self.config = config
        self.model = model
        self.algorithm = algorithm or config['linker']['algorithm']
        self.dist_max = dist_max or config['data']['dist_max']

    def define(self):
        return [
            self.initialize,
            self.infer_scores,
            self.build_candidates,
            self.link,
            self.terminate,
            ]

    def initialize(self):
        self.banner("Start TrackWorkflow.")
        if self.dist_max is None:
            if self.model is None:
                raise ValueError("dist_max is required for distance scores")
            self.dist_max = self.model.config.d_max
            self.report("# dist_max not set, using d_max {}".format(
                self.dist_max))
        if self.model is not None and self.dist_max > self.model.config.d_max:
            raise ValueError(
                "dist_max {} exceeds the model d_max {}; pairs beyond d_max "
                "are never scored".format(self.dist_max,
                                          self.model.config.d_max))
        self.ctx.linker = get_linker(self.config['linker'], self.algorithm)
        self.report("# Detections: {}".format(len(self.detections)))
        self.report("# Linker: {}".format(self.algorithm))

    def infer_scores(self):
        """
        Score associations by the model or by distance.
        """
        self.banner("Infer association scores.")
        if self.model is None:
            self.ctx.scores = distance_scores(self.detections, self.dist_max)
        else:
            self.ctx.scores = infer_video(
                    self.model, self.detections,
                    delta_t=self.config['train']['delta_t'],
                    literal_mean=self.config['linker']['literal_mean'])
        self.out('scores', self.ctx.scores)
        self.report("# Scored pairs: {}".format(len(self.ctx.scores)))

    def build_candidates(self):
        self.banner("Build candidate graph.")
        self.ctx.candidates = build_candidate_graph(
                self.ctx.scores, self.detections, self.dist_max,
                self.config['linker']['alpha'])
        self.out('candidates', self.ctx.candidates)
        self.report("# Candidate edges: {}".format(
            self.ctx.candidates.number_of_edges()))

    def link(self):
        self.banner("Link candidate graph.")
        solution = self.ctx.linker(self.ctx.candidates)
        self.out('solution', solution)
        self.report("# Selected edges: {}".format(
            solution.lineage.number_of_edges()))

    def terminate(self):
        self.banner("TrackWorkflow has finished successfully.")
