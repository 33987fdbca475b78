#!/usr/bin/env python

"""
This module validates run and simulation configurations.

Both are JSON documents. Missing keys are filled with defaults and unknown
keys are rejected.
"""

import json
import logging
import math
from typing import Union
import warnings
from voluptuous import (All, Any, Coerce, In, Invalid, Length, MultipleInvalid,
                        Optional, Range, Required, Schema)
from assoctrack.common.simulator import available_presets
from assoctrack.common.utils import ConfigError, SEED_ENV, resolve_seed

logger = logging.getLogger(__name__)

LINKERS = ('greedy', 'lap', 'ilp')

positive = All(Coerce(float), Range(min=0., min_included=False))
non_negative = All(Coerce(float), Range(min=0.))
probability = All(Coerce(float), Range(min=0., max=1.))
count = All(int, Range(min=1))


def _pair(value):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise Invalid("expected a pair of numbers")
    low, high = float(value[0]), float(value[1])
    if low > high:
        raise Invalid("lower bound exceeds upper bound")
    return [low, high]


def _ratios(value):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise Invalid("expected three ratios (train, val, test)")
    ratios = [ float(r) for r in value ]
    if min(ratios) < 0 or not math.isclose(sum(ratios), 1., abs_tol=1e-9):
        raise Invalid("ratios must be non-negative and sum to 1, "
                      "got {}".format(ratios))
    return ratios


DATA_SCHEMA = Schema({
    Optional('dist_max', default=None): Any(None, positive),
    Optional('delta_max', default=10.): positive,
    })

MODEL_SCHEMA = Schema({
    Optional('dim', default=256): count,
    Optional('layers', default=6): All(int, Range(min=0)),
    Optional('heads', default=4): count,
    Optional('n_freq', default=32): count,
    Optional('d_max', default=60.): positive,
    Optional('window', default=6): All(int, Range(min=2)),
    Optional('max_tokens', default=2048): count,
    Optional('mlp_ratio', default=2): count,
    Optional('fourier_scale', default=512.): positive,
    Optional('parental_softmax', default=True): bool,
    Optional('points_only', default=False): bool,
    })

TRAIN_SCHEMA = Schema({
    Optional('lam', default=1e-2): positive,
    Optional('delta_t', default=2): count,
    Optional('lambda_div', default=10.): non_negative,
    Optional('lambda_cont', default=1.): non_negative,
    Optional('learning_rate', default=1e-4): positive,
    Optional('warmup_steps', default=100): All(int, Range(min=0)),
    Optional('steps', default=2000): All(int, Range(min=0)),
    Optional('batch_size', default=8): count,
    Optional('seed', default=0): int,
    Optional('grad_clip', default=1.): non_negative,
    Optional('val_every', default=50): count,
    Optional('log_every', default=10): count,
    })

AUGMENT_SCHEMA = Schema({
    Optional('enabled', default=True): bool,
    Optional('flip', default=True): bool,
    Optional('rotate', default=True): bool,
    Optional('shift', default=10.): non_negative,
    Optional('shear', default=0.1): non_negative,
    Optional('scale', default=[0.8, 1.25]): _pair,
    Optional('intensity_shift', default=0.1): non_negative,
    Optional('intensity_scale', default=[0.8, 1.25]): _pair,
    Optional('subsample', default=[1, 2]): All([count], Length(min=1)),
    })

LAP_SCHEMA = Schema({
    Optional('percentile', default=90.): All(Coerce(float),
                                             Range(min=0., max=100.)),
    Optional('factor', default=1.05): positive,
    })

LINKER_SCHEMA = Schema({
    Optional('algorithm', default='greedy'): In(LINKERS),
    Optional('theta', default=0.5): probability,
    Optional('alpha', default=0.05): All(Coerce(float),
                                         Range(min=0., max=1.,
                                               max_included=False)),
    Optional('c_app', default=math.log(3.)): non_negative,
    Optional('c_dis', default=math.log(3.)): non_negative,
    Optional('c_div', default=1.): non_negative,
    Optional('max_edges', default=50000): count,
    Optional('time_limit', default=None): Any(None, positive),
    Optional('literal_mean', default=False): bool,
    Optional('lap', default={}): LAP_SCHEMA,
    })

EVAL_SCHEMA = Schema({
    Optional('r_eval', default=None): Any(None, positive),
    Optional('division_tol', default=1): All(int, Range(min=0)),
    })

RUN_SCHEMA = Schema({
    Optional('data', default={}): DATA_SCHEMA,
    Optional('model', default={}): MODEL_SCHEMA,
    Optional('train', default={}): TRAIN_SCHEMA,
    Optional('augment', default={}): AUGMENT_SCHEMA,
    Optional('linker', default={}): LINKER_SCHEMA,
    Optional('eval', default={}): EVAL_SCHEMA,
    })

SIMULATION_SCHEMA = Schema({
    Optional('preset', default='easy'): str,
    Optional('videos', default=10): count,
    Optional('ratios', default=[0.8, 0.1, 0.1]): _ratios,
    Optional('seed', default=0): int,
    Optional('overrides', default={}): dict,
    })


def _load(source:Union[str, dict, None]) -> dict:
    if source is None:
        return {}
    if isinstance(source, dict):
        return source
    try:
        with open(source, encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError("cannot read config {}: {}".format(source, err))


def _validate(schema:Schema, data:dict, name:str) -> dict:
    try:
        return schema(data)
    except MultipleInvalid as err:
        raise ConfigError("invalid {}: {}".format(name, err))


def load_run_config(source:Union[str, dict, None]=None) -> dict:
    """
    Validate a run configuration and fill defaults.

    The seed is overridden by the environment variable TRACK_SEED. Without
    eval.r_eval the matching radius data.delta_max is used.

    Args:
        source: Path to a JSON file, a dict or None for all defaults.

    Raises:
        ConfigError: Schema validation failed.
    """
    config = _validate(RUN_SCHEMA, _load(source), 'run config')
    seed = resolve_seed(config['train']['seed'])
    if seed != config['train']['seed']:
        warnings.warn("train.seed {} is overwritten by {}={}".format(
            config['train']['seed'], SEED_ENV, seed))
        config['train']['seed'] = seed
    if config['eval']['r_eval'] is None:
        config['eval']['r_eval'] = config['data']['delta_max']
    return config


def load_simulation_config(source:Union[str, dict, None]=None) -> dict:
    """
    Validate a simulation configuration.

    Raises:
        ConfigError: Schema validation failed or the preset is unknown.
    """
    config = _validate(SIMULATION_SCHEMA, _load(source), 'simulation config')
    presets = available_presets()
    if config['preset'] not in presets:
        raise ConfigError("preset: {} is not supported, choose from {}"
                          .format(config['preset'], presets))
    seed = resolve_seed(config['seed'])
    if seed != config['seed']:
        warnings.warn("seed {} is overwritten by {}={}".format(
            config['seed'], SEED_ENV, seed))
        config['seed'] = seed
    return config
