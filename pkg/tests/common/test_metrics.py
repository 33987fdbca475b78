#!/usr/bin/env python

"""
This is pytest for assoctrack.common.metrics.
"""

import numpy as np
import pytest
from assoctrack.common.lineage import Detection, LineageGraph, MaskRef
from assoctrack.common.matching import LabelImageMasks
from assoctrack.common.metrics import (AogmReport, compute_aogm,
                                       division_errors, export_error_tree,
                                       match_nodes_for_eval,
                                       summarize_reports)

GT_OFFSET = 100


def _dets(points, offset=0):
    """
    points: {id: (t, x)}
    """
    return [ Detection(id=node + offset, t=t, p=(float(x), 0.))
             for node, (t, x) in sorted(points.items()) ]


def _graph(points, edges, offset=0):
    return LineageGraph(nodes=[ node + offset for node in points ],
                        edges=[ (p + offset, c + offset) for p, c in edges ])


def _evaluate(points, gt_edges, pred_edges, pred_points=None, **kwargs):
    pred_points = points if pred_points is None else pred_points
    return compute_aogm(_graph(pred_points, pred_edges),
                        _dets(pred_points),
                        _graph(points, gt_edges, GT_OFFSET),
                        _dets(points, GT_OFFSET),
                        r_eval=5., **kwargs)


DIVISION = {1: (0, 0.), 2: (1, -10.), 3: (1, 10.), 4: (2, -12.),
            5: (2, 12.)}
DIVISION_EDGES = [(1, 2), (1, 3), (2, 4), (3, 5)]


def test_perfect_prediction():
    report = _evaluate(DIVISION, DIVISION_EDGES, DIVISION_EDGES)
    assert report.aogm == 0.
    assert report.tra == 1.
    assert report.aogm0 == pytest.approx(10. * 5 + 1.5 * 4)
    assert report.division_f1 == 1.
    assert report.tp_divs == 1


def test_missing_edge():
    points = {1: (0, 0.), 2: (1, 1.)}
    report = _evaluate(points, [(1, 2)], [])
    assert report.ea == 1
    assert report.aogm == pytest.approx(1.5)


def test_spurious_edge():
    points = {1: (0, 0.), 2: (1, 1.)}
    report = _evaluate(points, [], [(1, 2)])
    assert report.ed == 1
    assert report.aogm == pytest.approx(1.)
    assert report.tra == pytest.approx(1. - 1. / 20.)


def test_missing_node_with_edge():
    """
    Check a missing node costs the node and its edge.
    """
    points = {1: (0, 0.), 2: (1, 1.)}
    report = _evaluate(points, [(1, 2)], [], pred_points={1: (0, 0.)})
    assert (report.fn, report.ea) == (1, 1)
    assert report.aogm == pytest.approx(11.5)


def test_empty_prediction():
    report = _evaluate(DIVISION, DIVISION_EDGES, [], pred_points={})
    assert report.aogm == pytest.approx(10. * 5 + 1.5 * 4)
    assert report.aogm == report.aogm0
    assert report.tra == 0.
    assert report.fn_divs == 1


def test_empty_ground_truth_warns():
    with pytest.warns(UserWarning):
        report = compute_aogm(LineageGraph(), [], LineageGraph(), [], 5.)
    assert report.gt_empty
    assert report.tra == 1.


def test_node_beyond_radius():
    report = _evaluate({1: (0, 0.)}, [], [], pred_points={1: (0, 20.)})
    assert (report.fn, report.fp) == (1, 1)
    assert report.aogm == pytest.approx(11.)


def test_spurious_node_edges_not_deleted():
    """
    Check edges of a false positive node are not counted as deletions.
    """
    points = {1: (0, 0.), 2: (1, 1.)}
    pred_points = {1: (0, 0.), 2: (1, 1.), 3: (1, 50.)}
    report = _evaluate(points, [(1, 2)], [(1, 2), (1, 3)],
                       pred_points=pred_points)
    assert report.fp == 1
    assert report.ed == 0
    assert report.ec == 1
    assert report.aogm == pytest.approx(1. + 1.)


def test_mask_node_split():
    """
    Check one predicted region covering two objects is a split.
    """
    pred_image = np.zeros((4, 8), dtype=np.int64)
    pred_image[:, :] = 1
    gt_image = np.zeros((4, 8), dtype=np.int64)
    gt_image[:, :4] = 1
    gt_image[:, 4:] = 2
    masks = LabelImageMasks({'pred_0': pred_image, 'gt_0': gt_image})
    pred = [Detection(id=1, t=0, p=(3.5, 1.5), mask_ref=MaskRef('pred_0', 1))]
    gt = [Detection(id=101, t=0, p=(1.5, 1.5), mask_ref=MaskRef('gt_0', 1)),
          Detection(id=102, t=0, p=(5.5, 1.5), mask_ref=MaskRef('gt_0', 2))]
    matching = match_nodes_for_eval(pred, gt, 5., masks)
    assert matching.mode == 'mask'
    assert matching.pred_to_gt == {1: [101, 102]}
    report = compute_aogm(LineageGraph(nodes=[1]), pred,
                          LineageGraph(nodes=[101, 102]), gt, 5., masks)
    assert report.ns == 1
    assert report.aogm == pytest.approx(5.)


def test_changed_edge_semantics():
    """
    Check a division predicted as a plain link.
    """
    points = {1: (0, 0.), 2: (1, -10.), 3: (1, 10.)}
    report = _evaluate(points, [(1, 2), (1, 3)], [(1, 2)])
    assert (report.ec, report.ea) == (1, 1)
    assert report.aogm == pytest.approx(2.5)
    assert report.fn_divs == 1


def test_false_positive_division():
    points = {1: (0, 0.), 2: (1, -10.), 3: (1, 10.)}
    report = _evaluate(points, [(1, 2)], [(1, 2), (1, 3)])
    assert (report.fp_divs, report.fn_divs, report.tp_divs) == (1, 0, 0)
    assert report.division_f1 == 0.


def test_late_division_tolerance():
    """
    Check a division predicted one frame late.
    """
    pred_edges = [(1, 2), (2, 4), (2, 5)]
    pred = _graph(DIVISION, pred_edges)
    gt = _graph(DIVISION, DIVISION_EDGES, GT_OFFSET)
    matching = match_nodes_for_eval(_dets(DIVISION),
                                    _dets(DIVISION, GT_OFFSET), 5.)
    frames = { node: t for node, (t, _) in DIVISION.items() }
    gt_frames = { node + GT_OFFSET: t for node, (t, _) in DIVISION.items() }
    assert division_errors(pred, gt, matching, frames, gt_frames,
                           tol=1) == (0, 0, 1., 1)
    assert division_errors(pred, gt, matching, frames, gt_frames,
                           tol=0) == (1, 1, 0., 0)
    with pytest.raises(ValueError):
        division_errors(pred, gt, matching, frames, gt_frames, tol=-1)


def test_lineage_node_without_detection():
    """
    Check lineage nodes need a detection with a frame.
    """
    pred = LineageGraph(nodes=[ node for node in DIVISION ] + [99],
                        edges=DIVISION_EDGES + [(5, 99)])
    gt = _graph(DIVISION, DIVISION_EDGES, GT_OFFSET)
    matching = match_nodes_for_eval(_dets(DIVISION),
                                    _dets(DIVISION, GT_OFFSET), 5.)
    frames = { node: t for node, (t, _) in DIVISION.items() }
    gt_frames = { node + GT_OFFSET: t for node, (t, _) in DIVISION.items() }
    with pytest.raises(ValueError, match='predicted lineage node 99'):
        division_errors(pred, gt, matching, frames, gt_frames)
    with pytest.raises(ValueError, match='predicted lineage node 99'):
        compute_aogm(pred, _dets(DIVISION), gt, _dets(DIVISION, GT_OFFSET),
                     r_eval=5.)
    del gt_frames[GT_OFFSET + 4]
    with pytest.raises(ValueError, match='gt lineage node 104'):
        division_errors(_graph(DIVISION, DIVISION_EDGES), gt, matching,
                        frames, gt_frames)


def test_removing_correct_edges_increases_aogm():
    perfect = _evaluate(DIVISION, DIVISION_EDGES, DIVISION_EDGES).aogm
    for k in range(len(DIVISION_EDGES)):
        partial = DIVISION_EDGES[:k] + DIVISION_EDGES[k + 1:]
        assert _evaluate(DIVISION, DIVISION_EDGES, partial).aogm > perfect


def test_aogm_plus():
    """
    Check detector misses are discounted only with separate inputs.
    """
    points = {1: (0, 0.), 2: (1, 1.)}
    report = _evaluate(points, [(1, 2)], [], pred_points={1: (0, 0.)})
    assert report.aogm_plus == report.aogm
    inputs = _dets({1: (0, 0.)})
    report = _evaluate(points, [(1, 2)], [], pred_points={1: (0, 0.)},
                       input_detections=inputs)
    assert report.aogm_plus == pytest.approx(report.aogm - 10.)


def test_export_error_tree():
    points = {1: (0, 0.), 2: (1, -10.), 3: (1, 10.)}
    pred = _graph(points, [(1, 2)])
    gt = _graph(points, [(1, 2), (1, 3)], GT_OFFSET)
    matching = match_nodes_for_eval(_dets(points), _dets(points, GT_OFFSET),
                                    5.)
    frames = { node: t for node, (t, _) in points.items() }
    gt_frames = { node + GT_OFFSET: t for node, (t, _) in points.items() }
    rows = export_error_tree(pred, gt, matching, frames, gt_frames)
    assert rows == [('TP', 'pred', 1, 2, 0), ('FN', 'gt', 101, 103, 0)]


def test_summarize_reports():
    points = {1: (0, 0.), 2: (1, 1.)}
    reports = {
        'b': _evaluate(points, [(1, 2)], []),
        'a': _evaluate(points, [(1, 2)], [(1, 2)]),
        }
    summary = summarize_reports(reports)
    assert [ row['video'] for row in summary['videos'] ] == ['a', 'b']
    assert summary['aogm_total'] == pytest.approx(1.5)
    assert summary['aogm_mean'] == pytest.approx(0.75)
    assert summarize_reports({}) == {'videos': []}


def test_report_checks_weighted_sum():
    with pytest.raises(ValueError):
        AogmReport(ns=0, fn=1, fp=0, ed=0, ea=0, ec=0, aogm=1., aogm0=10.,
                   tra=0.9, aogm_plus=1., fp_edges=0, fn_edges=0)
