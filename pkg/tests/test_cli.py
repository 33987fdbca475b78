#!/usr/bin/env python

"""
This is pytest for assoctrack.cli.
"""

import json
import os
import numpy as np
import pandas as pd
import pytest
import torch
from click.testing import CliRunner
from assoctrack.cli import main
from assoctrack.common.checkpoint import read_header
from assoctrack.common.file_io import (read_detections, read_edges,
                                       read_json, read_lineage,
                                       write_detections, write_edges)


TINY_RUN = {
    'data': {'dist_max': 15., 'delta_max': 10.},
    'model': {'dim': 16, 'layers': 1, 'heads': 2, 'n_freq': 4,
              'd_max': 40., 'window': 3, 'max_tokens': 256},
    'train': {'steps': 2, 'batch_size': 2, 'warmup_steps': 1,
              'val_every': 1, 'log_every': 1},
    'augment': {'subsample': [1]},
    }

TINY_SIM = {
    'preset': 'easy',
    'videos': 5,
    'ratios': [0.6, 0.2, 0.2],
    'seed': 11,
    'overrides': {'frames': 6, 'n_objects': 4},
    }


def _invoke(args):
    result = CliRunner().invoke(main, [ str(arg) for arg in args ])
    return result


def _write(path, data:dict) -> str:
    with open(str(path), 'w') as f:
        json.dump(data, f)
    return str(path)


@pytest.fixture(scope='module')
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp('cli')


@pytest.fixture(scope='module')
def run_config(workdir) -> str:
    return _write(workdir / 'run.json', TINY_RUN)


@pytest.fixture(scope='module')
def dataset(workdir) -> str:
    """
    Small simulated dataset written by the simulate command.
    """
    sim = _write(workdir / 'sim.json', TINY_SIM)
    out = str(workdir / 'data')
    result = _invoke(['simulate', '--config', sim, out])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope='module')
def checkpoint(workdir, dataset, run_config) -> str:
    path = str(workdir / 'model.trax')
    result = _invoke(['train', '--config', run_config, dataset, path])
    assert result.exit_code == 0, result.output
    return path


def _read_bytes(path:str) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def test_simulate(workdir, dataset):
    """
    Check the dataset layout and its regeneration from the manifest.
    """
    manifest = read_json(os.path.join(dataset, 'manifest.json'))
    assert manifest['preset'] == 'easy'
    assert [ entry['split'] for entry in manifest['videos'] ] == \
        ['train', 'train', 'train', 'val', 'test']
    again = str(workdir / 'again')
    result = _invoke(['simulate', '--manifest',
                      os.path.join(dataset, 'manifest.json'), again])
    assert result.exit_code == 0, result.output
    for entry in manifest['videos']:
        for kind in ('detections', 'lineage'):
            name = '{}_{}.csv'.format(entry['name'], kind)
            assert _read_bytes(os.path.join(dataset, entry['split'], name)) \
                == _read_bytes(os.path.join(again, entry['split'], name))


def test_simulate_bad_ratios(workdir):
    sim = _write(workdir / 'bad_sim.json',
                 dict(TINY_SIM, ratios=[0.5, 0.5, 0.5]))
    result = _invoke(['simulate', '--config', sim, str(workdir / 'bad')])
    assert result.exit_code == 2


def test_train(checkpoint):
    header = read_header(_read_bytes(checkpoint))[0]
    assert header['feature_config'] == ['area', 'intensity', 'ixx', 'iyy',
                                        'ixy']
    assert header['metadata']['dist_max'] is not None
    assert header['metadata']['initial_val_loss'] > 0
    log = pd.read_csv(checkpoint + '.loss.csv')
    assert len(log) == 2


def test_train_points_only(workdir, dataset, run_config):
    path = str(workdir / 'points.trax')
    log = str(workdir / 'points.csv')
    result = _invoke(['train', '--config', run_config, '--points-only',
                      '--no-parental-softmax', '--loss-log', log, dataset,
                      path])
    assert result.exit_code == 0, result.output
    header = read_header(_read_bytes(path))[0]
    assert header['feature_config'] == []
    assert os.path.isfile(log)


def test_train_missing_dataset(workdir, run_config):
    result = _invoke(['train', '--config', run_config,
                      str(workdir / 'nowhere'), str(workdir / 'x.trax')])
    assert result.exit_code == 2


@pytest.mark.parametrize('linker', ['greedy', 'lap', 'ilp'])
def test_track(workdir, dataset, checkpoint, run_config, linker):
    """
    Check track writes a valid lineage over the input detections.
    """
    detections = os.path.join(dataset, 'test', 'video_004_detections.csv')
    out = str(workdir / 'tracks_{}'.format(linker))
    result = _invoke(['track', '--config', run_config, '--checkpoint',
                      checkpoint, '--linker', linker, '--scores',
                      detections, out])
    assert result.exit_code == 0, result.output
    dets = read_detections(detections)
    edges = read_edges(os.path.join(out, 'video_004_edges.csv'),
                       [ det.id for det in dets ])
    frames = { det.id: det.t for det in dets }
    for parent, child in edges.edges:
        assert frames[child] > frames[parent]
    for node in edges.nodes:
        assert edges.in_degree(node) <= 1
        assert edges.out_degree(node) <= 2
    tracks = pd.read_csv(os.path.join(out, 'video_004_tracks.csv'))
    assert list(tracks.columns) == ['track_id', 'start_frame', 'end_frame',
                                    'parent_track_id']
    assert os.path.isfile(os.path.join(out, 'video_004_scores.csv'))


def test_track_distance(workdir, dataset):
    detections = os.path.join(dataset, 'test', 'video_004_detections.csv')
    out = str(workdir / 'distance')
    result = _invoke(['track', '--dist-max', 15, detections, out])
    assert result.exit_code == 0, result.output
    assert 'greedy' in result.output
    result = _invoke(['track', detections, out])
    assert result.exit_code == 2


def test_track_dist_max_beyond_d_max(workdir, dataset, checkpoint, run_config):
    detections = os.path.join(dataset, 'test', 'video_004_detections.csv')
    result = _invoke(['track', '--config', run_config, '--checkpoint',
                      checkpoint, '--dist-max', 100, detections,
                      str(workdir / 'far')])
    assert result.exit_code == 2
    assert 'exceeds the model d_max' in result.output


def test_track_empty(workdir):
    detections = str(workdir / 'empty_detections.csv')
    write_detections(detections, [])
    out = str(workdir / 'empty')
    result = _invoke(['track', '--dist-max', 10, detections, out])
    assert result.exit_code == 0, result.output
    assert read_edges(os.path.join(out, 'empty_edges.csv'), []).edges == []


def test_track_missing_feature(workdir, dataset, checkpoint):
    dets = read_detections(
        os.path.join(dataset, 'test', 'video_004_detections.csv'))
    detections = str(workdir / 'bare_detections.csv')
    write_detections(detections, dets, ())
    result = _invoke(['track', '--checkpoint', checkpoint, detections,
                      str(workdir / 'bare')])
    assert result.exit_code == 2
    assert "'area'" in result.output


def test_eval_perfect(workdir, dataset):
    """
    Check a prediction equal to the ground truth scores TRA 1.
    """
    split = os.path.join(dataset, 'test')
    detections = os.path.join(split, 'video_004_detections.csv')
    lineage = os.path.join(split, 'video_004_lineage.csv')
    pred = str(workdir / 'perfect_edges.csv')
    write_edges(pred, read_lineage(lineage))
    report_path = str(workdir / 'perfect.json')
    tree = str(workdir / 'perfect_tree.csv')
    result = _invoke(['eval', '--pred', pred, '--detections', detections,
                      '--gt-lineage', lineage, '--error-tree', tree,
                      report_path])
    assert result.exit_code == 0, result.output
    report = read_json(report_path)
    assert report['aogm'] == 0.
    assert report['tra'] == 1.
    assert report['config'] == {'r_eval': 10., 'division_tol': 1}
    assert set(pd.read_csv(tree)['label']) <= {'TP'}


def test_eval_table(workdir, dataset):
    gt_dir = os.path.join(dataset, 'val')
    pred_dir = str(workdir / 'pred_val')
    os.makedirs(pred_dir)
    write_edges(os.path.join(pred_dir, 'video_003_edges.csv'),
                read_lineage(os.path.join(gt_dir, 'video_003_lineage.csv')))
    report_path = str(workdir / 'val.json')
    table = str(workdir / 'val.csv')
    result = _invoke(['eval', '--gt-dir', gt_dir, '--pred-dir', pred_dir,
                      '--table', table, report_path])
    assert result.exit_code == 0, result.output
    summary = read_json(report_path)
    assert summary['aogm_mean'] == 0.
    frame = pd.read_csv(table)
    assert list(frame['video']) == ['video_003', 'mean']
    np.testing.assert_allclose(frame['tra'], [1., 1.])


def test_eval_table_threads(workdir, dataset):
    """
    Check table mode with worker threads keeps one row per video in order.
    """
    gt_dir = os.path.join(dataset, 'train')
    names = sorted(name[:-len('_lineage.csv')] for name in os.listdir(gt_dir)
                   if name.endswith('_lineage.csv'))
    pred_dir = str(workdir / 'pred_train')
    os.makedirs(pred_dir)
    for name in names:
        write_edges(os.path.join(pred_dir, name + '_edges.csv'),
                    read_lineage(os.path.join(gt_dir, name + '_lineage.csv')))
    table = str(workdir / 'train.csv')
    threads = torch.get_num_threads()
    try:
        result = _invoke(['--threads', 2, 'eval', '--gt-dir', gt_dir,
                          '--pred-dir', pred_dir, '--table', table,
                          str(workdir / 'train.json')])
    finally:
        torch.set_num_threads(threads)
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(table)
    assert len(names) == 3
    assert list(frame['video']) == names + ['mean']
    np.testing.assert_allclose(frame['aogm'], 0.)


def test_eval_missing_gt(workdir, dataset):
    detections = os.path.join(dataset, 'test', 'video_004_detections.csv')
    result = _invoke(['eval', '--pred', detections, '--detections',
                      detections, '--gt-lineage', str(workdir / 'none.csv'),
                      str(workdir / 'none.json')])
    assert result.exit_code == 2
    result = _invoke(['eval', str(workdir / 'none.json')])
    assert result.exit_code == 2


def test_ablate_unknown_suite(workdir, dataset):
    result = _invoke(['ablate', 'heads', dataset, str(workdir / 'a.csv')])
    assert result.exit_code == 2


def test_regionprops(workdir):
    labels = workdir / 'labels'
    labels.mkdir()
    frames = [ np.array([[0, 1, 1, 0], [0, 1, 1, 0]], dtype=np.uint16),
               np.array([[0, 0, 1, 1], [0, 0, 1, 1]], dtype=np.uint16) ]
    for k, frame in enumerate(frames):
        with open(str(labels / 'mask{:03d}.pgm'.format(k)), 'wb') as f:
            f.write(b'P5\n4 2\n65535\n')
            f.write(frame.astype('>u2').tobytes())
    out = str(workdir / 'regions_detections.csv')
    result = _invoke(['regionprops', str(labels), out])
    assert result.exit_code == 0, result.output
    dets = read_detections(out)
    assert [ det.t for det in dets ] == [0, 1]
    assert dets[0].p == pytest.approx((1.5, 0.5))
    assert dets[1].p == pytest.approx((2.5, 0.5))
    assert dets[0].z['area'] == 4.
