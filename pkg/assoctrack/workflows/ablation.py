#!/usr/bin/env python

"""
This module provides AblationWorkflow and the ablation suites.
"""

import copy
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import Dict, List, Optional, Sequence
import numpy as np
from assoctrack.common.file_io import VideoRecord
from assoctrack.common.metrics import compute_aogm
from assoctrack.workflows.base import Workflow
from assoctrack.workflows.tracking import TrackWorkflow
from assoctrack.workflows.training import TrainWorkflow

# suite -> (linkers, [(variant, config overrides or None for distance)])
SUITES = {
    'softmax': (('greedy', 'ilp'), [
        ('parental_softmax', {'model': {'parental_softmax': True}}),
        ('sigmoid_only', {'model': {'parental_softmax': False}}),
        ]),
    'layers': (('greedy',), [
        ('layers_{}'.format(n), {'model': {'layers': n}})
        for n in (0, 1, 3, 6) ]),
    'width': (('greedy',), [
        ('dim_{}'.format(d), {'model': {'dim': d}})
        for d in (32, 64, 128, 256) ]),
    'window': (('greedy',), [
        ('window_{}'.format(s), {'model': {'window': s}})
        for s in (2, 3, 4, 6) ]),
    'baseline': (('greedy', 'ilp'), [
        ('distance', None),
        ('model', {}),
        ]),
    }

RESULT_COLUMNS = ('suite', 'variant', 'linker', 'seeds', 'videos',
                  'aogm_mean', 'aogm_std', 'tra_mean', 'division_f1_mean',
                  'fp_divs', 'fn_divs')


def merge_config(config:dict, overrides:dict) -> dict:
    """
    Copy of config with overrides merged section by section.
    """
    merged = copy.deepcopy(config)
    for section, values in overrides.items():
        merged[section].update(values)
    return merged


def summarize_runs(suite:str, runs:Dict[tuple, List[dict]]) -> List[dict]:
    """
    One row per (variant, linker) over all seeds and videos.

    Args:
        suite: Suite name.
        runs: (variant, linker) -> list of per-video report dicts, each
              with an extra 'seed' key.
    """
    rows = []
    for (variant, linker), reports in runs.items():
        aogm = np.array([ report['aogm'] for report in reports ])
        rows.append({
            'suite': suite,
            'variant': variant,
            'linker': linker,
            'seeds': len({ report['seed'] for report in reports }),
            'videos': len(reports),
            'aogm_mean': float(aogm.mean()) if len(aogm) else 0.,
            'aogm_std': float(aogm.std()) if len(aogm) else 0.,
            'tra_mean': float(np.mean([ r['tra'] for r in reports ]))
                        if reports else 1.,
            'division_f1_mean': float(np.mean([ r['division_f1']
                                                for r in reports ]))
                                if reports else 1.,
            'fp_divs': int(sum(r['fp_divs'] for r in reports)),
            'fn_divs': int(sum(r['fn_divs'] for r in reports)),
            })
    return rows


class AblationWorkflow(Workflow):
    """
    Workflow training and evaluating the variants of one ablation suite.

    Examples:
        Workflow is as follows,

        >>> # outline
        >>> [ self.initialize,
        >>>   self.run_variants,
        >>>   self.collect_results,
        >>>   self.terminate ]

    Args:
        suite: One of SUITES.
        config: Validated run configuration.
        train_videos: Training videos.
        val_videos: Validation videos.
        test_videos: Test videos with ground truth.
        seeds: Training seeds, one model per seed and variant.
        dist_max: Linking distance, overrides config['data']['dist_max'].
        workers: Threads tracking and scoring test videos concurrently.

    Outputs:
        rows: Result table rows, see RESULT_COLUMNS.
        reports: (variant, linker) -> per-video report dicts.
    """

    def __init__(self, suite:str, config:dict,
                 train_videos:Sequence[VideoRecord],
                 val_videos:Sequence[VideoRecord],
                 test_videos:Sequence[VideoRecord],
                 seeds:Sequence[int]=(0,),
                 dist_max:Optional[float]=None,
                 workers:int=1):
        super().__init__()
        if suite not in SUITES:
            raise ValueError("suite: %s is not supported, choose from %s"
                             % (suite, sorted(SUITES)))
        self.suite = suite
        self.config = config
        self.train_videos = list(train_videos)
        self.val_videos = list(val_videos)
        self.test_videos = list(test_videos)
        self.seeds = list(seeds)
        self.dist_max = dist_max
        self.workers = workers

    def define(self):
        return [
            self.initialize,
            self.run_variants,
            self.collect_results,
            self.terminate,
            ]

    def initialize(self):
        self.banner("Start AblationWorkflow.")
        self.ctx.linkers, self.ctx.variants = SUITES[self.suite]
        self.ctx.runs = {}
        self.report("# Suite: {}".format(self.suite))
        self.report("# Variants: {}".format(
            [ name for name, _ in self.ctx.variants ]))
        self.report("# Linkers: {}, seeds: {}".format(
            list(self.ctx.linkers), self.seeds))

    def _track_video(self, video:VideoRecord, config:dict, model,
                     linker:str) -> dict:
        outputs = TrackWorkflow(video.detections, config, model=model,
                                algorithm=linker,
                                dist_max=self.dist_max).run()
        report = compute_aogm(
                outputs['solution'].lineage, video.detections,
                video.lineage, video.detections,
                r_eval=config['eval']['r_eval'],
                division_tol=config['eval']['division_tol'])
        return report.to_dict()

    def _evaluate(self, variant:str, config:dict, model, seed:int):
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            for linker in self.ctx.linkers:
                reports = self.ctx.runs.setdefault((variant, linker), [])
                track = partial(self._track_video, config=config, model=model,
                                linker=linker)
                # map keeps the order of test_videos
                for video, report in zip(self.test_videos,
                                         executor.map(track, self.test_videos)):
                    reports.append(dict(report, seed=seed, video=video.name))
                self.report("# {} / {} (seed {}): mean AOGM {:.2f}".format(
                    variant, linker, seed,
                    np.mean([ r['aogm'] for r in reports
                              if r['seed'] == seed ])))

    def run_variants(self):
        self.banner("Run variants.")
        for variant, overrides in self.ctx.variants:
            for seed in self.seeds:
                if overrides is None:
                    self._evaluate(variant, self.config, None, seed)
                    continue
                config = merge_config(self.config, overrides)
                config['train']['seed'] = seed
                trained = TrainWorkflow(self.train_videos, self.val_videos,
                                        config).run()
                self._evaluate(variant, config, trained['model'], seed)

    def collect_results(self):
        self.banner("Collect results.")
        rows = summarize_runs(self.suite, self.ctx.runs)
        for row in rows:
            self.report("# {variant:>18s} {linker:>6s}: AOGM {aogm_mean:.2f}"
                        " TRA {tra_mean:.4f}".format(**row))
        self.out('rows', rows)
        self.out('reports', self.ctx.runs)

    def terminate(self):
        self.banner("AblationWorkflow has finished successfully.")
