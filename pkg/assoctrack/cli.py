#!/usr/bin/env python

"""
Command line interface of assoctrack.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

import functools
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional
import click
import torch
from assoctrack.common.builder import get_sim_configs
from assoctrack.common.checkpoint import load_checkpoint, save_checkpoint
from assoctrack.common.config import load_run_config, load_simulation_config
from assoctrack.common.file_io import (VideoRecord, load_videos,
                                       read_detections, read_edges,
                                       read_image_sequence, read_json,
                                       read_lineage, region_detections,
                                       write_detections, write_edges,
                                       write_error_tree, write_json,
                                       write_loss_log, write_score_dump,
                                       write_tracks, write_video)
from assoctrack.common.lineage import FEATURE_CHANNELS
from assoctrack.common.metrics import (compute_aogm, export_error_tree,
                                       match_nodes_for_eval, summarize_reports)
from assoctrack.common.simulator import make_dataset, regenerate
from assoctrack.common.utils import (CheckpointError, ConfigError,
                                     FeatureError, LinkingError,
                                     TrainingDivergedError)
from assoctrack.workflows.ablation import (RESULT_COLUMNS, SUITES,
                                           AblationWorkflow)
from assoctrack.workflows.tracking import TrackWorkflow
from assoctrack.workflows.training import TrainWorkflow

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def exit_codes(func):
    """
    Map assoctrack errors to exit codes.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, FeatureError, CheckpointError,
                FileNotFoundError, ValueError) as err:
            click.echo("Error: {}".format(err), err=True)
            raise click.exceptions.Exit(EXIT_USAGE)
        except (TrainingDivergedError, LinkingError) as err:
            click.echo("Error: {}".format(err), err=True)
            raise click.exceptions.Exit(EXIT_NUMERIC)
    return wrapper


def _require_file(path:str):
    if not os.path.isfile(path):
        raise FileNotFoundError("no such file: {}".format(path))


def _manifest(dataset:str) -> dict:
    path = os.path.join(dataset, MANIFEST)
    _require_file(path)
    return read_json(path)


def _dataset_dist_max(manifest:dict) -> Optional[float]:
    videos = manifest.get('videos', [])
    if not videos:
        return None
    return videos[0]['config'].get('dist_max')


def _split(dataset:str, split:str,
           channels:Optional[List[str]]=None) -> List[VideoRecord]:
    directory = os.path.join(dataset, split)
    if not os.path.isdir(directory):
        return []
    return load_videos(directory, channels)


def _video_name(path:str) -> str:
    name = os.path.splitext(os.path.basename(path))[0]
    tail = '_detections'
    return name[:-len(tail)] if name.endswith(tail) else name


@click.group()
@click.option('--verbose', '-v', is_flag=True, help="Log debug messages.")
@click.option('--threads', type=click.IntRange(min=1), default=None,
              help="Threads for torch ops and for videos processed "
                   "concurrently, default all cores.")
@click.pass_context
def main(ctx:click.Context, verbose:bool, threads:Optional[int]):
    """
    Track dividing objects by learned association.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr)
    ctx.obj = {'workers': threads or os.cpu_count() or 1}
    if threads is not None:
        torch.set_num_threads(threads)


def _workers() -> int:
    """
    Video worker threads set by --threads.
    """
    obj = click.get_current_context().find_root().obj or {}
    return obj.get('workers', 1)


@main.command()
@click.option('--config', 'config_path', type=click.Path(),
              help="Simulation config JSON.")
@click.option('--manifest', 'manifest_path', type=click.Path(),
              help="Regenerate the dataset recorded in this manifest.")
@click.argument('out_dir', type=click.Path())
@exit_codes
def simulate(config_path:Optional[str], manifest_path:Optional[str],
             out_dir:str):
    """
    Simulate a dataset into OUT_DIR/<split>/ with a manifest.
    """
    if manifest_path is not None:
        _require_file(manifest_path)
        manifest = read_json(manifest_path)
        splits = regenerate(manifest)
    else:
        conf = load_simulation_config(config_path)
        splits, manifest = make_dataset(get_sim_configs(conf),
                                        conf['ratios'], conf['seed'])
        manifest['preset'] = conf['preset']
    for split, videos in splits.items():
        for video in videos:
            write_video(os.path.join(out_dir, split), video.name,
                        video.result.detections, video.result.lineage)
    write_json(os.path.join(out_dir, MANIFEST), manifest)
    click.echo("{} videos written to {}".format(
        sum(len(videos) for videos in splits.values()), out_dir))


@main.command(name='train')
@click.option('--config', 'config_path', type=click.Path(),
              help="Run config JSON.")
@click.option('--points-only', is_flag=True,
              help="Ignore all feature channels.")
@click.option('--no-parental-softmax', is_flag=True,
              help="Sigmoid-only training, lam set to 1.")
@click.option('--loss-log', type=click.Path(),
              help="Loss CSV, default <checkpoint>.loss.csv.")
@click.option('--log-file', type=click.Path(),
              help="Sidecar log with timestamps.")
@click.argument('dataset', type=click.Path())
@click.argument('checkpoint', type=click.Path())
@exit_codes
def train_command(config_path, points_only, no_parental_softmax, loss_log,
                  log_file, dataset, checkpoint):
    """
    Train a model on DATASET and write CHECKPOINT.
    """
    manifest = _manifest(dataset)
    config = load_run_config(config_path)
    if log_file:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger('assoctrack').addHandler(handler)
    outputs = TrainWorkflow(
            _split(dataset, 'train'), _split(dataset, 'val'), config,
            parental_softmax=False if no_parental_softmax else None,
            points_only=points_only or None).run()
    metadata = {
        'run_config': config,
        'dist_max': _dataset_dist_max(manifest),
        'initial_val_loss': outputs['initial_val_loss'],
        'final_val_loss': outputs['final_val_loss'],
        }
    save_checkpoint(checkpoint, outputs['model'], metadata)
    write_loss_log(loss_log or checkpoint + '.loss.csv', outputs['history'])
    click.echo("checkpoint written to {}".format(checkpoint))


@main.command()
@click.option('--config', 'config_path', type=click.Path(),
              help="Run config JSON.")
@click.option('--checkpoint', type=click.Path(),
              help="Model checkpoint. Without it scores are distances.")
@click.option('--linker', type=click.Choice(['greedy', 'lap', 'ilp']),
              default=None, help="Linking algorithm.")
@click.option('--dist-max', type=float, default=None,
              help="Maximum linking distance in pixels.")
@click.option('--scores', 'dump_scores', is_flag=True,
              help="Also write the aggregated score table.")
@click.argument('detections', type=click.Path())
@click.argument('out_dir', type=click.Path())
@exit_codes
def track(config_path, checkpoint, linker, dist_max, dump_scores,
          detections, out_dir):
    """
    Track DETECTIONS and write <name>_edges.csv and <name>_tracks.csv to
    OUT_DIR.
    """
    config = load_run_config(config_path)
    _require_file(detections)
    model = None
    channels = None
    if checkpoint is not None:
        _require_file(checkpoint)
        model, header = load_checkpoint(checkpoint)
        channels = list(model.config.channels)
        dist_max = dist_max or config['data']['dist_max'] \
            or header['metadata'].get('dist_max')
    elif not (dist_max or config['data']['dist_max']):
        raise click.UsageError("--dist-max is required without --checkpoint")
    dets = read_detections(detections, channels)
    outputs = TrackWorkflow(dets, config, model=model, algorithm=linker,
                            dist_max=dist_max).run()
    os.makedirs(out_dir, exist_ok=True)
    name = _video_name(detections)
    lineage = outputs['solution'].lineage
    frames = { det.id: det.t for det in dets }
    write_edges(os.path.join(out_dir, name + '_edges.csv'), lineage)
    write_tracks(os.path.join(out_dir, name + '_tracks.csv'), lineage, frames)
    if dump_scores:
        write_score_dump(os.path.join(out_dir, name + '_scores.csv'),
                         outputs['scores'])
    click.echo("{}: {} edges ({})".format(name, lineage.number_of_edges(),
                                          outputs['solution'].solver))


def _evaluate(pred_edges:str, pred_dets_path:str, gt_dets_path:str,
              gt_lineage_path:str, config:dict):
    for path in (pred_edges, pred_dets_path, gt_dets_path, gt_lineage_path):
        _require_file(path)
    gt_dets = read_detections(gt_dets_path, ())
    pred_dets = read_detections(pred_dets_path, ())
    gt = read_lineage(gt_lineage_path)
    pred = read_edges(pred_edges, [ det.id for det in pred_dets ])
    matching = match_nodes_for_eval(pred_dets, gt_dets,
                                    config['eval']['r_eval'])
    report = compute_aogm(pred, pred_dets, gt, gt_dets,
                          r_eval=config['eval']['r_eval'],
                          division_tol=config['eval']['division_tol'],
                          matching=matching)
    tree = export_error_tree(pred, gt, matching,
                             { det.id: det.t for det in pred_dets },
                             { det.id: det.t for det in gt_dets })
    return report, tree


@main.command(name='eval')
@click.option('--config', 'config_path', type=click.Path(),
              help="Run config JSON (eval section).")
@click.option('--pred-dir', type=click.Path(),
              help="Table mode: directory of <name>_edges.csv.")
@click.option('--gt-dir', type=click.Path(),
              help="Table mode: directory of <name>_detections.csv and "
                   "<name>_lineage.csv.")
@click.option('--pred', 'pred_edges', type=click.Path(),
              help="Predicted edges CSV.")
@click.option('--detections', type=click.Path(),
              help="Detections the prediction was made on.")
@click.option('--gt-lineage', type=click.Path(), help="Gt lineage CSV.")
@click.option('--gt-detections', type=click.Path(),
              help="Gt detections CSV, default --detections.")
@click.option('--error-tree', type=click.Path(),
              help="Error-tree CSV (single video).")
@click.option('--table', type=click.Path(),
              help="Per-video CSV with a mean row (table mode).")
@click.argument('report_path', type=click.Path())
@exit_codes
def evaluate(config_path, pred_dir, gt_dir, pred_edges, detections,
             gt_lineage, gt_detections, error_tree, table, report_path):
    """
    Evaluate predictions and write the report JSON to REPORT_PATH.
    """
    config = load_run_config(config_path)
    settings = {'r_eval': config['eval']['r_eval'],
                'division_tol': config['eval']['division_tol']}
    if gt_dir is not None:
        if pred_dir is None:
            raise click.UsageError("--gt-dir needs --pred-dir")
        if not os.path.isdir(gt_dir):
            raise FileNotFoundError("no such directory: {}".format(gt_dir))
        gt_videos = [ video.name for video in load_videos(gt_dir, ()) ]

        def evaluate_video(name:str):
            gt_dets_path = os.path.join(gt_dir, name + '_detections.csv')
            pred_dets_path = os.path.join(pred_dir, name + '_detections.csv')
            if not os.path.isfile(pred_dets_path):
                pred_dets_path = gt_dets_path
            report, _ = _evaluate(
                    os.path.join(pred_dir, name + '_edges.csv'),
                    pred_dets_path, gt_dets_path,
                    os.path.join(gt_dir, name + '_lineage.csv'), config)
            return report

        with ThreadPoolExecutor(max_workers=_workers()) as executor:
            reports = dict(zip(gt_videos,
                               executor.map(evaluate_video, gt_videos)))
        summary = summarize_reports(reports)
        summary['config'] = settings
        write_json(report_path, summary)
        if table:
            _write_table(table, summary)
        click.echo("mean AOGM {:.3f} over {} videos".format(
            summary.get('aogm_mean', 0.), len(reports)))
        return
    if pred_edges is None or detections is None or gt_lineage is None:
        raise click.UsageError("give --pred, --detections and --gt-lineage "
                               "or --pred-dir and --gt-dir")
    report, tree = _evaluate(pred_edges, detections,
                             gt_detections or detections, gt_lineage, config)
    result = report.to_dict()
    result['config'] = settings
    write_json(report_path, result)
    if error_tree:
        write_error_tree(error_tree, tree)
    click.echo("AOGM {:.3f}, TRA {:.6f}".format(report.aogm, report.tra))


def _write_table(path:str, summary:dict):
    import pandas as pd
    columns = ['video', 'aogm', 'tra', 'aogm_plus', 'ns', 'fn', 'fp', 'ed',
               'ea', 'ec', 'fp_divs', 'fn_divs', 'division_f1']
    frame = pd.DataFrame([ { col: row[col] for col in columns }
                           for row in summary['videos'] ], columns=columns)
    if len(frame):
        mean = frame[columns[1:]].mean().to_dict()
        mean['video'] = 'mean'
        frame = pd.concat([frame, pd.DataFrame([mean])], ignore_index=True)
    frame.to_csv(path, index=False, lineterminator='\n')


@main.command()
@click.option('--config', 'config_path', type=click.Path(),
              help="Run config JSON.")
@click.option('--seeds', default='0', show_default=True,
              help="Comma separated training seeds.")
@click.argument('suite', type=click.Choice(sorted(SUITES)))
@click.argument('dataset', type=click.Path())
@click.argument('out_csv', type=click.Path())
@exit_codes
def ablate(config_path, seeds, suite, dataset, out_csv):
    """
    Run the ablation SUITE on DATASET and write the result table.
    """
    import pandas as pd
    manifest = _manifest(dataset)
    config = load_run_config(config_path)
    try:
        seed_list = [ int(seed) for seed in seeds.split(',') ]
    except ValueError:
        raise click.BadParameter("seeds must be integers: {}".format(seeds))
    outputs = AblationWorkflow(
            suite, config,
            _split(dataset, 'train'), _split(dataset, 'val'),
            _split(dataset, 'test'), seeds=seed_list,
            dist_max=config['data']['dist_max']
                     or _dataset_dist_max(manifest),
            workers=_workers()).run()
    pd.DataFrame(outputs['rows'], columns=list(RESULT_COLUMNS)).to_csv(
        out_csv, index=False, lineterminator='\n')
    click.echo("{} rows written to {}".format(len(outputs['rows']), out_csv))


@main.command()
@click.option('--images', type=click.Path(),
              help="Directory of raw PGM frames for mean intensity.")
@click.argument('labels', type=click.Path())
@click.argument('out_csv', type=click.Path())
@exit_codes
def regionprops(images, labels, out_csv):
    """
    Convert a directory of 16-bit PGM label frames into a detections CSV.
    """
    if not os.path.isdir(labels):
        raise FileNotFoundError("no such directory: {}".format(labels))
    label_frames = read_image_sequence(labels)
    raw = read_image_sequence(images) if images else None
    dets = region_detections(label_frames, raw)
    write_detections(out_csv, dets, FEATURE_CHANNELS)
    click.echo("{} detections in {} frames".format(len(dets),
                                                   len(label_frames)))


if __name__ == '__main__':
    main()
