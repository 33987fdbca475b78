#!/usr/bin/env python

"""
This is pytest for assoctrack.common.config and assoctrack.common.builder.
"""

import json
import warnings
import pytest
from assoctrack.common.builder import (get_augment_config, get_ilp_costs,
                                       get_linker, get_model_config,
                                       get_sim_configs, get_train_config)
from assoctrack.common.config import load_run_config, load_simulation_config
from assoctrack.common.linkers import link_ilp, link_lap
from assoctrack.common.utils import ConfigError


def test_run_config_defaults():
    config = load_run_config()
    assert config['model']['dim'] == 256
    assert config['model']['d_max'] == 60.
    assert config['model']['window'] == 6
    assert config['data']['dist_max'] is None
    assert config['linker']['algorithm'] == 'greedy'
    assert config['linker']['lap']['percentile'] == 90.
    assert config['linker']['max_edges'] == 50000
    assert config['linker']['time_limit'] is None
    assert config['train']['lambda_div'] == 10.
    assert config['eval']['r_eval'] == config['data']['delta_max'] == 10.


def test_run_config_from_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'model': {'dim': 64},
                                'eval': {'r_eval': 4.}}))
    config = load_run_config(str(path))
    assert config['model']['dim'] == 64
    assert config['eval']['r_eval'] == 4.
    path.write_text('{not json')
    with pytest.raises(ConfigError):
        load_run_config(str(path))


@pytest.mark.parametrize('data', [
    {'model': {'depth': 3}},
    {'shapes': {}},
    {'linker': {'algorithm': 'hungarian'}},
    {'linker': {'alpha': 1.}},
    {'linker': {'max_edges': 0}},
    {'linker': {'time_limit': -1.}},
    {'model': {'window': 1}},
    {'train': {'lam': 0.}},
    {'augment': {'scale': [2., 1.]}},
    ])
def test_run_config_rejects(data):
    with pytest.raises(ConfigError):
        load_run_config(data)


def test_seed_from_environment(monkeypatch):
    """
    Check TRACK_SEED overrides the configured seed with a warning.
    """
    monkeypatch.setenv('TRACK_SEED', '7')
    with pytest.warns(UserWarning):
        config = load_run_config({'train': {'seed': 1}})
    assert config['train']['seed'] == 7
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        assert load_run_config({'train': {'seed': 7}})['train']['seed'] == 7
    monkeypatch.setenv('TRACK_SEED', 'seven')
    with pytest.raises(ConfigError):
        load_run_config()


def test_simulation_config(monkeypatch):
    monkeypatch.delenv('TRACK_SEED', raising=False)
    config = load_simulation_config({'preset': 'hard', 'videos': 3})
    assert config['ratios'] == [0.8, 0.1, 0.1]
    assert config['seed'] == 0
    configs = get_sim_configs(config)
    assert len(configs) == 3
    assert configs[0].boundary == 'absorb'
    with pytest.raises(ConfigError):
        load_simulation_config({'ratios': [0.5, 0.5, 0.5]})
    with pytest.raises(ConfigError):
        load_simulation_config({'preset': 'medium'})
    with pytest.raises(ConfigError):
        get_sim_configs(load_simulation_config(
            {'overrides': {'frames': 10, 'colour': 'red'}}))


def test_get_model_config():
    config = load_run_config({'model': {'points_only': True, 'dim': 32}})
    model_config = get_model_config(config['model'], seed=4)
    assert model_config.channels == ()
    assert model_config.dim == 32
    assert model_config.seed == 4
    with pytest.raises(ConfigError):
        get_model_config(load_run_config(
            {'model': {'dim': 30, 'heads': 4}})['model'])


def test_get_train_and_augment_config():
    config = load_run_config({'data': {'delta_max': 7.},
                              'augment': {'subsample': [1, 3]}})
    train_config = get_train_config(config)
    assert train_config.delta_max == 7.
    assert train_config.lam == 1e-2
    augment = get_augment_config(config['augment'])
    assert augment.subsample == (1, 3)
    assert augment.scale == (0.8, 1.25)
    config = load_run_config({'augment': {'enabled': False}})
    assert get_augment_config(config['augment']) is None


def test_get_linker():
    linker_conf = load_run_config({'linker': {'c_div': 2., 'max_edges': 800,
                                              'time_limit': 5.}})['linker']
    assert get_linker(linker_conf, 'lap').func is link_lap
    ilp = get_linker(linker_conf, 'ilp')
    assert ilp.func is link_ilp
    assert ilp.keywords['costs'].c_div == 2.
    assert ilp.keywords['max_edges'] == 800
    assert ilp.keywords['time_limit'] == 5.
    assert get_ilp_costs(linker_conf).c_app == pytest.approx(1.0986122887)
    with pytest.raises(ValueError):
        get_linker(linker_conf, 'hungarian')
