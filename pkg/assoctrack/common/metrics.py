#!/usr/bin/env python

"""
This module evaluates predicted lineages against ground truth with the
acyclic oriented graph matching measure (AOGM), TRA and division scores.
"""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import warnings
import numpy as np
from scipy.optimize import linear_sum_assignment
from assoctrack.common.lineage import (Detection, LineageGraph,
                                       group_by_frame, lineage_closure)
from assoctrack.common.matching import LabelImageMasks

logger = logging.getLogger(__name__)

AOGM_WEIGHTS = {
    'ns': 5.,
    'fn': 10.,
    'fp': 1.,
    'ed': 1.,
    'ea': 1.5,
    'ec': 1.,
    }


@dataclass
class EvalMatching:
    """
    Node correspondence between prediction and ground truth.

    Attributes:
        pred_to_gt: Pred id -> sorted gt ids it covers.
        fn_nodes: Gt ids without a prediction.
        fp_nodes: Pred ids without a gt node.
        mode: 'mask' or 'point'.
    """
    pred_to_gt: Dict[int, List[int]] = field(default_factory=dict)
    fn_nodes: List[int] = field(default_factory=list)
    fp_nodes: List[int] = field(default_factory=list)
    mode: str = 'point'

    @property
    def gt_to_pred(self) -> Dict[int, int]:
        return { gt: pred for pred, gts in self.pred_to_gt.items()
                 for gt in gts }

    @property
    def ns(self) -> int:
        return sum(len(gts) - 1 for gts in self.pred_to_gt.values())


def _has_masks(dets:Sequence[Detection],
               masks:Optional[LabelImageMasks]) -> bool:
    return masks is not None and bool(dets) \
        and all(det.mask_ref in masks for det in dets)


def _match_masks(preds:Sequence[Detection], gts:Sequence[Detection],
                 masks:LabelImageMasks) -> Dict[int, List[int]]:
    covered = defaultdict(list)
    regions = [ masks.region(pred.mask_ref) for pred in preds ]
    for gt in gts:
        m_gt = masks.region(gt.mask_ref)
        area = np.count_nonzero(m_gt)
        if area == 0:
            continue
        for pred, m_pred in zip(preds, regions):
            if m_pred.shape == m_gt.shape \
                    and np.count_nonzero(m_pred & m_gt) > 0.5 * area:
                covered[pred.id].append(gt.id)
                break
    return covered


def _match_points(preds:Sequence[Detection], gts:Sequence[Detection],
                  r_eval:float) -> Dict[int, List[int]]:
    if not preds or not gts:
        return {}
    p_pred = np.array([ det.p for det in preds ], dtype=float)
    p_gt = np.array([ det.p for det in gts ], dtype=float)
    dist = np.linalg.norm(p_pred[:, None, :] - p_gt[None, :, :], axis=-1)
    allowed = dist <= r_eval
    cost = np.where(allowed, dist, 2. * r_eval + 1.)
    rows, cols = linear_sum_assignment(cost)
    return { preds[i].id: [gts[k].id] for i, k in zip(rows, cols)
             if allowed[i, k] }


def match_nodes_for_eval(pred_dets:Sequence[Detection],
                         gt_dets:Sequence[Detection],
                         r_eval:float,
                         masks:Optional[LabelImageMasks]=None
                         ) -> EvalMatching:
    """
    Per-frame node matching.

    With masks for every detection, a prediction matches each gt node it
    covers by more than half of the gt area; covering k > 1 gt nodes is a
    node split. Otherwise points are matched one-to-one by minimum total
    distance within r_eval.
    """
    if r_eval <= 0:
        raise ValueError("r_eval must be positive, got {}".format(r_eval))
    mode = 'mask' if _has_masks(list(pred_dets) + list(gt_dets), masks) \
        else 'point'
    pred_frames = group_by_frame(pred_dets)
    gt_frames = group_by_frame(gt_dets)
    pred_to_gt = {}
    for t in sorted(set(pred_frames) | set(gt_frames)):
        preds = pred_frames.get(t, [])
        gts = gt_frames.get(t, [])
        if mode == 'mask':
            pred_to_gt.update(_match_masks(preds, gts, masks))
        else:
            pred_to_gt.update(_match_points(preds, gts, r_eval))
    pred_to_gt = { pred: sorted(gts) for pred, gts in pred_to_gt.items() }
    matched_gt = { gt for gts in pred_to_gt.values() for gt in gts }
    return EvalMatching(
        pred_to_gt=pred_to_gt,
        fn_nodes=sorted(det.id for det in gt_dets
                        if det.id not in matched_gt),
        fp_nodes=sorted(det.id for det in pred_dets
                        if det.id not in pred_to_gt),
        mode=mode)


@dataclass
class AogmReport:
    """
    Graph edit counts and derived scores of one video.
    """
    ns: int
    fn: int
    fp: int
    ed: int
    ea: int
    ec: int
    aogm: float
    aogm0: float
    tra: float
    aogm_plus: float
    fp_edges: int
    fn_edges: int
    fp_divs: int = 0
    fn_divs: int = 0
    tp_divs: int = 0
    division_f1: float = 1.
    gt_empty: bool = False
    weights: Dict[str, float] = field(
            default_factory=lambda: dict(AOGM_WEIGHTS))

    def __post_init__(self):
        counts = { key: getattr(self, key) for key in AOGM_WEIGHTS }
        if min(counts.values()) < 0:
            raise ValueError("negative AOGM count: {}".format(counts))
        total = sum(self.weights[key] * value
                    for key, value in counts.items())
        if not np.isclose(total, self.aogm, rtol=0., atol=1e-9):
            raise ValueError("AOGM {} is not the weighted sum {}".format(
                self.aogm, total))
        if not 0. <= self.tra <= 1.:
            raise ValueError("TRA {} outside [0, 1]".format(self.tra))

    def to_dict(self) -> dict:
        return asdict(self)


def _edge_semantics(graph:LineageGraph, parent:int) -> str:
    return 'division' if graph.out_degree(parent) == 2 else 'link'


def classify_edges(pred:LineageGraph, gt:LineageGraph,
                   matching:EvalMatching
                   ) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]],
                              List[Tuple[int, int]], int]:
    """
    Split edges into correct, spurious and missing.

    Returns:
        tuple: (tp pred edges, fp pred edges, fn gt edges, number of
               correct edges with changed semantics)
    """
    tp, fp = [], []
    found_gt = set()
    ec = 0
    for parent, child in pred.edges:
        hit = None
        for g_parent in matching.pred_to_gt.get(parent, []):
            for g_child in matching.pred_to_gt.get(child, []):
                if gt.has_edge(g_parent, g_child) \
                        and (g_parent, g_child) not in found_gt:
                    hit = (g_parent, g_child)
                    break
            if hit:
                break
        if hit is None:
            fp.append((parent, child))
            continue
        tp.append((parent, child))
        found_gt.add(hit)
        if _edge_semantics(pred, parent) != _edge_semantics(gt, hit[0]):
            ec += 1
    fn = [ edge for edge in gt.edges if edge not in found_gt ]
    return tp, fp, fn, ec


def _check_frames(graph:LineageGraph, frames:Mapping[int, int], name:str):
    missing = sorted(node for node in graph.nodes if node not in frames)
    if missing:
        raise ValueError("{} lineage node {} has no detection".format(
            name, missing[0]))


def division_errors(pred:LineageGraph, gt:LineageGraph,
                    matching:EvalMatching,
                    frames:Mapping[int, int],
                    gt_frames:Mapping[int, int],
                    tol:int=1) -> Tuple[int, int, float, int]:
    """
    Compare predicted and ground truth divisions.

    A gt division g is recovered by a predicted division q when q matches
    g or an ancestor or descendant of g at most tol frames away, and the
    two children of q match nodes in the two different daughter
    sub-lineages of g. Each predicted division recovers at most one gt
    division.

    Args:
        pred: Predicted lineage.
        gt: Ground truth lineage.
        matching: Node matching.
        frames: Pred id -> frame.
        gt_frames: Gt id -> frame.
        tol: Temporal tolerance in frames.

    Returns:
        tuple: (fp_divs, fn_divs, division F1, tp_divs)
    """
    if tol < 0:
        raise ValueError("tol must be >= 0, got {}".format(tol))
    _check_frames(pred, frames, 'predicted')
    _check_frames(gt, gt_frames, 'gt')
    gt_divs = sorted(gt.divisions(),
                     key=lambda node: (gt_frames[node], node))
    pred_divs = sorted(pred.divisions(),
                       key=lambda node: (frames[node], node))
    used = set()
    tp = 0
    for g in gt_divs:
        ancestors, descendants = lineage_closure(gt, g)
        near = ({g} | ancestors | descendants)
        daughters = []
        for d in gt.children(g):
            daughters.append({d} | lineage_closure(gt, d)[1])
        candidates = []
        for q in pred_divs:
            if q in used:
                continue
            hits = [ h for h in matching.pred_to_gt.get(q, [])
                     if h in near and abs(gt_frames[h] - gt_frames[g]) <= tol ]
            if not hits:
                continue
            if _children_split(pred, q, matching, daughters):
                dt = min(abs(gt_frames[h] - gt_frames[g]) for h in hits)
                candidates.append((dt, q))
        if candidates:
            _, q = min(candidates)
            used.add(q)
            tp += 1
    fn_divs = len(gt_divs) - tp
    fp_divs = len(pred_divs) - tp
    denom = 2 * tp + fp_divs + fn_divs
    f1 = 1. if denom == 0 else 2. * tp / denom
    return fp_divs, fn_divs, f1, tp


def _children_split(pred:LineageGraph, q:int, matching:EvalMatching,
                    daughters:Sequence[set]) -> bool:
    """
    True if the children of q fall into two different daughter sets.
    """
    children = pred.children(q)
    if len(children) != 2 or len(daughters) != 2:
        return False
    sides = []
    for child in children:
        gts = matching.pred_to_gt.get(child, [])
        sides.append({ k for k, sub in enumerate(daughters)
                       if any(g in sub for g in gts) })
    return (0 in sides[0] and 1 in sides[1]) \
        or (1 in sides[0] and 0 in sides[1])


def compute_aogm(pred:LineageGraph,
                 pred_dets:Sequence[Detection],
                 gt:LineageGraph,
                 gt_dets:Sequence[Detection],
                 r_eval:float,
                 masks:Optional[LabelImageMasks]=None,
                 division_tol:int=1,
                 matching:Optional[EvalMatching]=None,
                 input_detections:Optional[Sequence[Detection]]=None
                 ) -> AogmReport:
    """
    Evaluate a predicted lineage.

    Node splits, false negative and false positive nodes come from the
    node matching. Predicted edges between matched nodes without a gt
    counterpart are deleted (ED), gt edges without a predicted counterpart
    are added (EA) and matched edges whose parent divides in only one of
    the graphs change semantics (EC). Edges of false positive nodes go
    with the node.

    Args:
        pred: Predicted lineage.
        pred_dets: Predicted detections.
        gt: Ground truth lineage.
        gt_dets: Ground truth detections.
        r_eval: Point matching radius.
        masks: Optional masks for coverage matching.
        division_tol: Temporal tolerance of division_errors.
        matching: Precomputed node matching.
        input_detections: Detections given to the linker, defaults to
                          pred_dets. Gt nodes they cannot match are
                          excluded from AOGM+.

    Returns:
        AogmReport: Counts and scores.
    """
    _check_frames(pred, { det.id: det.t for det in pred_dets }, 'predicted')
    _check_frames(gt, { det.id: det.t for det in gt_dets }, 'gt')
    if matching is None:
        matching = match_nodes_for_eval(pred_dets, gt_dets, r_eval, masks)
    tp, fp_edges, fn_edges, ec = classify_edges(pred, gt, matching)
    fp_nodes = set(matching.fp_nodes)
    ed = sum(1 for parent, child in fp_edges
             if parent not in fp_nodes and child not in fp_nodes)
    counts = {
        'ns': matching.ns,
        'fn': len(matching.fn_nodes),
        'fp': len(matching.fp_nodes),
        'ed': ed,
        'ea': len(fn_edges),
        'ec': ec,
        }
    aogm = sum(AOGM_WEIGHTS[key] * value for key, value in counts.items())
    aogm0 = AOGM_WEIGHTS['fn'] * len(gt_dets) \
        + AOGM_WEIGHTS['ea'] * gt.number_of_edges()
    gt_empty = aogm0 == 0
    if gt_empty:
        warnings.warn("ground truth is empty, TRA reported as 1")
        tra = 1.
    else:
        tra = 1. - min(aogm, aogm0) / aogm0
    if input_detections is None or input_detections is pred_dets:
        fn_detector = counts['fn']
    else:
        fn_detector = len(match_nodes_for_eval(
            input_detections, gt_dets, r_eval, masks).fn_nodes)
    frames = { det.id: det.t for det in pred_dets }
    gt_frames = { det.id: det.t for det in gt_dets }
    fp_divs, fn_divs, f1, tp_divs = division_errors(
            pred, gt, matching, frames, gt_frames, division_tol)
    report = AogmReport(
            aogm=aogm,
            aogm0=aogm0,
            tra=tra,
            aogm_plus=aogm - AOGM_WEIGHTS['fn'] * fn_detector,
            fp_edges=len(fp_edges),
            fn_edges=len(fn_edges),
            fp_divs=fp_divs,
            fn_divs=fn_divs,
            tp_divs=tp_divs,
            division_f1=f1,
            gt_empty=gt_empty,
            **counts)
    logger.debug("AOGM %.2f (TRA %.4f): %s", aogm, tra, counts)
    return report


def export_error_tree(pred:LineageGraph, gt:LineageGraph,
                      matching:EvalMatching,
                      frames:Mapping[int, int],
                      gt_frames:Mapping[int, int]
                      ) -> List[Tuple[str, str, int, int, int]]:
    """
    Edges labeled for error-tree plots.

    Returns:
        list: Rows (label, graph, parent_id, child_id, parent_frame). TP
              and FP rows carry pred ids, FN rows gt ids.
    """
    tp, fp, fn, _ = classify_edges(pred, gt, matching)
    rows = [ ('TP', 'pred', p, c, frames[p]) for p, c in tp ]
    rows += [ ('FP', 'pred', p, c, frames[p]) for p, c in fp ]
    rows += [ ('FN', 'gt', p, c, gt_frames[p]) for p, c in fn ]
    return sorted(rows, key=lambda row: (row[4], row[2], row[3], row[0]))


def summarize_reports(reports:Mapping[str, AogmReport]) -> dict:
    """
    Per-video rows and the totals and means over videos.
    """
    names = sorted(reports)
    rows = [ dict(video=name, **reports[name].to_dict()) for name in names ]
    summary = {'videos': rows}
    if not names:
        return summary
    aogm = np.array([ reports[name].aogm for name in names ])
    tra = np.array([ reports[name].tra for name in names ])
    f1 = np.array([ reports[name].division_f1 for name in names ])
    summary.update({
        'aogm_total': float(aogm.sum()),
        'aogm_mean': float(aogm.mean()),
        'tra_mean': float(tra.mean()),
        'division_f1_mean': float(f1.mean()),
        'fp_divs_total': int(sum(reports[n].fp_divs for n in names)),
        'fn_divs_total': int(sum(reports[n].fn_divs for n in names)),
        })
    return summary
