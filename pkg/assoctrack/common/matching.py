#!/usr/bin/env python

"""
This module matches detections to ground truth objects and builds
the per-window training targets A and loss weights W.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
from scipy.optimize import linear_sum_assignment
from assoctrack.common.lineage import (AssociationMatrix, Detection,
                                       LineageGraph, MaskRef, Window,
                                       group_by_frame)

MATCH_GATE = 0.5


class LabelImageMasks:
    """
    Resolve MaskRef to boolean region masks.

    Args:
        images: Mapping key -> 2D integer label image.
    """

    def __init__(self, images:Optional[Mapping[str, np.ndarray]]=None):
        self._images = dict(images or {})

    def add(self, key:str, image:np.ndarray):
        self._images[key] = np.asarray(image)

    def __contains__(self, ref:MaskRef) -> bool:
        return ref is not None and ref.key in self._images

    def region(self, ref:MaskRef) -> np.ndarray:
        return self._images[ref.key] == ref.label


def mask_iou(det:Detection, gt:Detection,
             masks:Optional[LabelImageMasks]) -> float:
    """
    IoU of the two regions. 0 when either mask is absent or empty.
    """
    if masks is None or det.mask_ref not in masks \
            or gt.mask_ref not in masks:
        return 0.
    m_det = masks.region(det.mask_ref)
    m_gt = masks.region(gt.mask_ref)
    if m_det.shape != m_gt.shape:
        return 0.
    union = np.count_nonzero(m_det | m_gt)
    if union == 0:
        return 0.
    return np.count_nonzero(m_det & m_gt) / union


def match_score(det:Detection,
                gt:Detection,
                delta_max:float,
                masks:Optional[LabelImageMasks]=None) -> Tuple[bool, float]:
    """
    Matching criterion between a detection and a ground truth object.

    score = max(IoU, 1 - |p_det - p_gt| / delta_max) and the pair is
    matched iff score > 0.5.

    Returns:
        tuple: (matched, score)
    """
    if delta_max <= 0:
        raise ValueError("delta_max must be positive, got {}".format(
            delta_max))
    dist = np.hypot(det.p[0] - gt.p[0], det.p[1] - gt.p[1])
    score = max(mask_iou(det, gt, masks), 1. - dist / delta_max)
    return score > MATCH_GATE, float(score)


@dataclass
class Matching:
    """
    One-to-one matching between detections and ground truth objects.
    """
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    unmatched_detections: List[int] = field(default_factory=list)
    unmatched_gt: List[int] = field(default_factory=list)

    def det_to_gt(self) -> Dict[int, int]:
        return dict(self.pairs)

    def gt_to_det(self) -> Dict[int, int]:
        return { gt: det for det, gt in self.pairs }

    def merge(self, other:'Matching') -> 'Matching':
        return Matching(
            pairs=sorted(self.pairs + other.pairs),
            unmatched_detections=sorted(self.unmatched_detections
                                        + other.unmatched_detections),
            unmatched_gt=sorted(self.unmatched_gt + other.unmatched_gt))


def score_matrix(dets:Sequence[Detection],
                 gts:Sequence[Detection],
                 delta_max:float,
                 masks:Optional[LabelImageMasks]=None) -> np.ndarray:
    """
    Matching scores for all pairs, shape (len(dets), len(gts)).
    """
    scores = np.zeros((len(dets), len(gts)))
    if not dets or not gts:
        return scores
    p_det = np.array([ det.p for det in dets ], dtype=float)
    p_gt = np.array([ gt.p for gt in gts ], dtype=float)
    dist = np.linalg.norm(p_det[:, None, :] - p_gt[None, :, :], axis=-1)
    scores = 1. - dist / delta_max
    if masks is not None:
        for i, det in enumerate(dets):
            if det.mask_ref not in masks:
                continue
            for k, gt in enumerate(gts):
                scores[i, k] = max(scores[i, k], mask_iou(det, gt, masks))
    return scores


def match_frame(dets:Sequence[Detection],
                gts:Sequence[Detection],
                delta_max:float,
                masks:Optional[LabelImageMasks]=None) -> Matching:
    """
    Minimum cost bipartite matching of one frame.

    Pair cost is 1 - score. Pairs failing the 0.5 gate get cost 1, the cost
    of leaving both sides unmatched, and are dropped from the result.

    Args:
        dets: Detections of one frame.
        gts: Ground truth objects of the same frame.
        delta_max: Distance threshold in pixels.
        masks: Optional mask store for IoU.

    Returns:
        Matching: One-to-one assignment.
    """
    if delta_max <= 0:
        raise ValueError("delta_max must be positive, got {}".format(
            delta_max))
    if not dets or not gts:
        return Matching(unmatched_detections=sorted(d.id for d in dets),
                        unmatched_gt=sorted(g.id for g in gts))
    frames = { det.t for det in dets } | { gt.t for gt in gts }
    if len(frames) != 1:
        raise ValueError("match_frame expects one frame, got {}".format(
            sorted(frames)))
    scores = score_matrix(dets, gts, delta_max, masks)
    allowed = scores > MATCH_GATE
    cost = np.where(allowed, 1. - scores, 1.)
    rows, cols = linear_sum_assignment(cost)
    pairs = [ (dets[i].id, gts[k].id) for i, k in zip(rows, cols)
              if allowed[i, k] ]
    matched_det = { det for det, _ in pairs }
    matched_gt = { gt for _, gt in pairs }
    return Matching(
        pairs=sorted(pairs),
        unmatched_detections=sorted(d.id for d in dets
                                    if d.id not in matched_det),
        unmatched_gt=sorted(g.id for g in gts if g.id not in matched_gt))


def match_video(dets:Sequence[Detection],
                gts:Sequence[Detection],
                delta_max:float,
                masks:Optional[LabelImageMasks]=None) -> Matching:
    """
    Run match_frame on every frame of a video and merge the results.
    """
    det_frames = group_by_frame(dets)
    gt_frames = group_by_frame(gts)
    matching = Matching()
    for t in sorted(set(det_frames) | set(gt_frames)):
        matching = matching.merge(match_frame(det_frames.get(t, []),
                                              gt_frames.get(t, []),
                                              delta_max, masks))
    return matching


def _ancestors_within(gt_graph:LineageGraph, node:int, depth:int) -> List[int]:
    ancestors = []
    current = node
    for _ in range(depth):
        parents = gt_graph.parents(current)
        if not parents:
            break
        current = parents[0]
        ancestors.append(current)
    return ancestors


def build_target(window:Window,
                 matching:Matching,
                 gt_graph:LineageGraph) -> AssociationMatrix:
    """
    Target association matrix of a window.

    a_ij = 1 iff detections i and j are matched and one matched ground
    truth node is an ancestor or descendant of the other.

    Args:
        window: Window.
        matching: Matching covering all frames of the window.
        gt_graph: Ground truth lineage.

    Returns:
        AssociationMatrix: Role 'target'.
    """
    n = len(window)
    target = np.zeros((n, n), dtype=np.float64)
    det_to_gt = matching.det_to_gt()
    gt_rows = {}
    for row, det in enumerate(window.detections):
        gt = det_to_gt.get(det.id)
        if gt is not None and gt in gt_graph:
            gt_rows[gt] = row
    for gt, row in gt_rows.items():
        for ancestor in _ancestors_within(gt_graph, gt, window.span - 1):
            other = gt_rows.get(ancestor)
            if other is not None:
                target[row, other] = target[other, row] = 1.
    np.fill_diagonal(target, 0.)
    return AssociationMatrix(target, 'target', window.frames)


def build_weights(window:Window,
                  target:AssociationMatrix,
                  gt_graph:LineageGraph,
                  matching:Matching,
                  delta_t:int=2,
                  lambda_div:float=10.,
                  lambda_cont:float=1.) -> AssociationMatrix:
    """
    Loss weights of a window.

    w_ij is 0 unless 1 <= t_j - t_i <= delta_t. Otherwise the weight is
    1 + lambda_div if the ground truth node matched to row i divides
    (out-degree 2, or more in a temporally subsampled graph),
    1 + lambda_cont if it continues and 1 else (including unmatched rows).
    Out-degrees are read from the full ground truth graph.
    """
    if delta_t < 1:
        raise ValueError("delta_t must be >= 1, got {}".format(delta_t))
    if lambda_div < 0 or lambda_cont < 0:
        raise ValueError("lambda_div and lambda_cont must be non-negative")
    frames = window.frames
    det_to_gt = matching.det_to_gt()
    row_weight = np.ones(len(window))
    for row, det in enumerate(window.detections):
        gt = det_to_gt.get(det.id)
        if gt is None or gt not in gt_graph:
            continue
        degree = gt_graph.out_degree(gt)
        if degree >= 2:
            row_weight[row] = 1. + lambda_div
        elif degree == 1:
            row_weight[row] = 1. + lambda_cont
    gap = frames[None, :] - frames[:, None]
    forward = (gap >= 1) & (gap <= delta_t)
    weights = np.where(forward, row_weight[:, None], 0.)
    if target.size != len(window):
        raise ValueError("target does not match window")
    return AssociationMatrix(weights, 'weights', frames)
