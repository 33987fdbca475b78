#!/usr/bin/env python

"""
This module provides exceptions and small helpers shared by all modules.
"""

import logging
import os
import numpy as np

logger = logging.getLogger(__name__)

SEED_ENV = 'TRACK_SEED'


class AssocTrackError(Exception):
    """
    Base class of all errors raised by assoctrack.
    """


class LineageError(AssocTrackError):
    """
    Structural error of a lineage graph, e.g. an unknown node id.
    """


class FeatureError(AssocTrackError):
    """
    A detection lacks a feature channel the model is configured with.
    """

    def __init__(self, detection_id:int, channel:str):
        self.detection_id = detection_id
        self.channel = channel
        super().__init__(
            "detection {} has no feature '{}'".format(detection_id, channel))


class ConfigError(AssocTrackError):
    """
    Configuration failed schema validation.
    """


class TrainingDivergedError(AssocTrackError):
    """
    Loss became NaN or infinite during training.
    """


class LinkingError(AssocTrackError):
    """
    Linking problem cannot be solved under the configured budget.
    """


class CheckpointError(AssocTrackError):
    """
    Checkpoint file is malformed.
    """


def resolve_seed(seed:int) -> int:
    """
    Return seed, overridden by environment variable TRACK_SEED if it is set.
    """
    value = os.environ.get(SEED_ENV)
    if value is None or value == '':
        return int(seed)
    try:
        return int(value)
    except ValueError:
        raise ConfigError(
            "{} must be an integer, got '{}'".format(SEED_ENV, value))


def spawn_seeds(seed:int, num:int) -> list:
    """
    Derive num independent integer seeds from seed.

    Args:
        seed: Root seed.
        num: Number of child seeds.

    Returns:
        list: Integer seeds, pairwise distinct.
    """
    children = np.random.SeedSequence(seed).spawn(num)
    seeds = [ int(child.generate_state(1, dtype=np.uint32)[0])
              for child in children ]
    assert len(set(seeds)) == len(seeds), \
            "Seed collision while spawning from {}.".format(seed)
    return seeds
