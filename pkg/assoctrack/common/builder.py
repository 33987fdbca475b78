#!/usr/bin/env python

"""
This module turns validated configuration sections into runtime objects.
"""

from dataclasses import replace
from functools import partial
import logging
from typing import Callable, List, Optional
from assoctrack.common.aggregator import CandidateGraph
from assoctrack.common.linkers import (IlpCosts, LapConfig, TrackingSolution,
                                       link_greedy, link_ilp, link_lap)
from assoctrack.common.simulator import SimConfig, load_preset
from assoctrack.common.tokenizer import AugmentConfig
from assoctrack.common.training import TrainConfig
from assoctrack.common.transformer import ModelConfig
from assoctrack.common.utils import ConfigError

logger = logging.getLogger(__name__)


def get_model_config(model_conf:dict, seed:int=0) -> ModelConfig:
    """
    Get model hyperparameters.

    Args:
        model_conf: Validated 'model' section.
        seed: Initialization seed.
    """
    conf = dict(model_conf)
    points_only = conf.pop('points_only', False)
    try:
        config = ModelConfig(seed=seed, **conf)
    except ValueError as err:
        raise ConfigError("invalid model section: {}".format(err))
    if points_only:
        config = replace(config, channels=())
    return config


def get_train_config(run_conf:dict) -> TrainConfig:
    conf = dict(run_conf['train'])
    return TrainConfig(delta_max=run_conf['data']['delta_max'], **conf)


def get_augment_config(augment_conf:dict) -> Optional[AugmentConfig]:
    """
    Get augmentation ranges, None if augmentation is disabled.
    """
    conf = dict(augment_conf)
    if not conf.pop('enabled', True):
        return None
    return AugmentConfig(
            flip=conf['flip'],
            rotate=conf['rotate'],
            shift=conf['shift'],
            shear=conf['shear'],
            scale=tuple(conf['scale']),
            intensity_shift=conf['intensity_shift'],
            intensity_scale=tuple(conf['intensity_scale']),
            subsample=tuple(conf['subsample']))


def get_ilp_costs(linker_conf:dict) -> IlpCosts:
    return IlpCosts(c_app=linker_conf['c_app'],
                    c_dis=linker_conf['c_dis'],
                    c_div=linker_conf['c_div'])


def get_linker(linker_conf:dict,
               algorithm:Optional[str]=None
               ) -> Callable[[CandidateGraph], TrackingSolution]:
    """
    Get linker callable.

    Args:
        linker_conf: Validated 'linker' section.
        algorithm: Overrides linker_conf['algorithm'], choose 'greedy',
                   'lap' or 'ilp'.

    Raises:
        ValueError: Unknown algorithm.
    """
    algorithm = algorithm or linker_conf['algorithm']
    if algorithm == 'greedy':
        return partial(link_greedy, theta=linker_conf['theta'])
    if algorithm == 'lap':
        lap = linker_conf.get('lap', {})
        return partial(link_lap, config=LapConfig(
            theta=linker_conf['theta'],
            percentile=lap.get('percentile', 90.),
            factor=lap.get('factor', 1.05)))
    if algorithm == 'ilp':
        return partial(link_ilp, costs=get_ilp_costs(linker_conf),
                       max_edges=linker_conf['max_edges'],
                       time_limit=linker_conf['time_limit'])
    raise ValueError("linker: %s is not supported" % algorithm)


def get_sim_configs(sim_conf:dict) -> List[SimConfig]:
    """
    One SimConfig per video from a validated simulation configuration.
    """
    try:
        config = load_preset(sim_conf['preset'], **sim_conf['overrides'])
    except (TypeError, ValueError) as err:
        raise ConfigError("invalid simulation overrides: {}".format(err))
    return [ config ] * sim_conf['videos']
