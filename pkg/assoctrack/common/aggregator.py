#!/usr/bin/env python

"""
This module runs sliding-window inference over a video, averages the
window probabilities into global association scores and builds the
candidate graph.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
import networkx as nx
from scipy.spatial import cKDTree
from assoctrack.common.lineage import Detection, check_unique_ids, make_windows
from assoctrack.common.tokenizer import crop_window_tiles

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05


class ScoreTable:
    """
    Sparse accumulator of association scores over global detection ids.

    Pairs are keyed (parent_id, child_id) with the parent in the earlier
    frame. Contributions are collected per window and collapsed on demand.

    Args:
        span: Window size used for inference. Only needed by the literal
              mean, which divides every sum by span - 1.
        literal_mean: Divide by span - 1 instead of the number of
                      contributing windows.
    """

    def __init__(self, span:Optional[int]=None, literal_mean:bool=False):
        if literal_mean and (span is None or span < 2):
            raise ValueError("literal mean needs span >= 2")
        self.span = span
        self.literal_mean = literal_mean
        self._chunks = []
        self._collapsed = None

    def add(self, parents:np.ndarray, children:np.ndarray,
            gaps:np.ndarray, values:np.ndarray):
        """
        Add one contribution per pair. A pair must occur at most once per
        call.
        """
        values = np.asarray(values, dtype=np.float64)
        if values.size and (values.min() < 0 or values.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        self._chunks.append((np.asarray(parents, dtype=np.int64),
                             np.asarray(children, dtype=np.int64),
                             np.asarray(gaps, dtype=np.int64),
                             values))
        self._collapsed = None

    def _collapse(self):
        if self._collapsed is not None:
            return self._collapsed
        if not self._chunks:
            empty = np.zeros(0, dtype=np.int64)
            self._collapsed = (np.zeros((0, 2), dtype=np.int64), empty,
                               np.zeros(0), empty)
            return self._collapsed
        parents, children, gaps, values = (
            np.concatenate(arrays) for arrays in zip(*self._chunks))
        keys = np.stack([parents, children], axis=1)
        pairs, first, inverse = np.unique(keys, axis=0, return_index=True,
                                          return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.bincount(inverse, weights=values, minlength=len(pairs))
        counts = np.bincount(inverse, minlength=len(pairs))
        self._collapsed = (pairs, gaps[first], sums, counts)
        return self._collapsed

    def __len__(self) -> int:
        return len(self._collapse()[0])

    @property
    def pairs(self) -> np.ndarray:
        return self._collapse()[0]

    @property
    def gaps(self) -> np.ndarray:
        return self._collapse()[1]

    @property
    def sums(self) -> np.ndarray:
        return self._collapse()[2]

    @property
    def counts(self) -> np.ndarray:
        return self._collapse()[3]

    @property
    def means(self) -> np.ndarray:
        _, _, sums, counts = self._collapse()
        if self.literal_mean:
            return np.minimum(sums / (self.span - 1), 1.)
        return sums / np.maximum(counts, 1)

    def to_dict(self) -> Dict[Tuple[int, int], float]:
        """
        Mapping (parent_id, child_id) -> mean score.
        """
        return { (int(p), int(c)): float(m)
                 for (p, c), m in zip(self.pairs, self.means) }

    def rows(self) -> List[Tuple[int, int, int, float, int]]:
        """
        Rows (parent_id, child_id, frame_gap, mean_score, window_count)
        ordered by (parent_id, child_id).
        """
        return [ (int(p), int(c), int(g), float(m), int(n))
                 for (p, c), g, m, n in zip(self.pairs, self.gaps,
                                            self.means, self.counts) ]


def near_pairs(positions:np.ndarray, frames:np.ndarray, radius:float,
               delta_t:int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row pairs (earlier, later) within radius and 1 <= frame gap <= delta_t.
    """
    if len(positions) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    tree = cKDTree(positions)
    pairs = tree.query_pairs(r=radius, output_type='ndarray')
    if len(pairs) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    a, b = pairs[:, 0], pairs[:, 1]
    swap = frames[a] > frames[b]
    rows = np.where(swap, b, a)
    cols = np.where(swap, a, b)
    gap = frames[cols] - frames[rows]
    keep = (gap >= 1) & (gap <= delta_t)
    return rows[keep], cols[keep]


def infer_video(model,
                detections:Sequence[Detection],
                span:Optional[int]=None,
                delta_t:int=2,
                max_tokens:Optional[int]=None,
                literal_mean:bool=False) -> ScoreTable:
    """
    Sliding-window inference over a video.

    Each window (or each spatial tile of an oversized window) is scored by
    model.predict. Pairs within the attention radius and 1 <= frame gap <=
    delta_t are accumulated into a ScoreTable whose mean is taken over the
    windows containing the pair.

    Args:
        model: Trained AssociationTransformer.
        detections: Detections of one video.
        span: Window size, defaults to the model's window. Videos shorter
              than span are scored in a single window.
        delta_t: Largest frame gap stored.
        max_tokens: Tile windows above this size, defaults to the model's
                    max_tokens.
        literal_mean: See ScoreTable.
    """
    config = model.config
    span = span or config.window
    max_tokens = max_tokens or config.max_tokens
    check_unique_ids(detections)
    windows = make_windows(detections, span)
    effective = windows[0].span if windows else span
    table = ScoreTable(span=effective, literal_mean=literal_mean)
    model.eval()
    for window in windows:
        found = []
        for tile in crop_window_tiles(window, max_tokens, config.d_max):
            if len(tile) < 2:
                continue
            probs = model.predict(tile).values
            rows, cols = near_pairs(tile.positions, tile.frames,
                                    config.d_max, delta_t)
            ids = tile.ids
            frames = tile.frames
            found.append(np.stack([ids[rows], ids[cols],
                                   frames[cols] - frames[rows],
                                   probs[rows, cols]], axis=1))
        if not found:
            continue
        block = np.concatenate(found)
        _, first = np.unique(block[:, :2].astype(np.int64), axis=0,
                             return_index=True)
        block = block[first]
        table.add(block[:, 0], block[:, 1], block[:, 2],
                  np.clip(block[:, 3], 0., 1.))
        logger.debug("window at frame %d: %d detections, %d pairs",
                     window.start, len(window), len(block))
    logger.info("inferred %d windows, %d scored pairs", len(windows),
                len(table))
    return table


def distance_scores(detections:Sequence[Detection],
                    dist_max:float,
                    delta_t:int=1) -> ScoreTable:
    """
    Distance baseline: score = max(0, 1 - |p_i - p_j| / dist_max).
    """
    if dist_max <= 0:
        raise ValueError("dist_max must be positive, got {}".format(dist_max))
    dets = list(detections)
    table = ScoreTable()
    if len(dets) < 2:
        return table
    positions = np.array([ det.p for det in dets ], dtype=np.float64)
    frames = np.array([ det.t for det in dets ], dtype=np.int64)
    ids = np.array([ det.id for det in dets ], dtype=np.int64)
    rows, cols = near_pairs(positions, frames, dist_max, delta_t)
    dist = np.linalg.norm(positions[rows] - positions[cols], axis=1)
    table.add(ids[rows], ids[cols], frames[cols] - frames[rows],
              np.clip(1. - dist / dist_max, 0., 1.))
    return table


class CandidateGraph:
    """
    Candidate links between detections of adjacent frames.

    Backed by a networkx.DiGraph. Nodes carry 't' and 'p', edges 'score'.
    """

    def __init__(self, detections:Iterable[Detection],
                 edges:Iterable[Tuple[int, int, float]]=()):
        graph = nx.DiGraph()
        for det in detections:
            graph.add_node(det.id, t=det.t, p=tuple(det.p))
        for parent, child, score in edges:
            parent, child = int(parent), int(child)
            if parent not in graph or child not in graph:
                raise ValueError("edge ({}, {}) references unknown "
                                 "detection".format(parent, child))
            if graph.nodes[child]['t'] != graph.nodes[parent]['t'] + 1:
                raise ValueError("edge ({}, {}) does not join adjacent "
                                 "frames".format(parent, child))
            graph.add_edge(parent, child, score=float(score))
        self._graph = graph

    @property
    def graph(self) -> nx.DiGraph:
        return self._graph

    @property
    def nodes(self) -> List[int]:
        return sorted(self._graph.nodes)

    @property
    def edges(self) -> List[Tuple[int, int, float]]:
        """
        Edges (parent, child, score) ordered by (parent, child).
        """
        return sorted((p, c, d['score'])
                      for p, c, d in self._graph.edges(data=True))

    @property
    def frames(self) -> Dict[int, int]:
        return { node: data['t'] for node, data in self._graph.nodes(data=True) }

    def score(self, parent:int, child:int) -> float:
        return self._graph.edges[parent, child]['score']

    def number_of_edges(self) -> int:
        return self._graph.number_of_edges()

    def __contains__(self, edge) -> bool:
        return self._graph.has_edge(*edge)

    def with_edges(self,
                   edges:Iterable[Tuple[int, int, float]]) -> 'CandidateGraph':
        """
        Copy with the same nodes and the given edges.
        """
        other = CandidateGraph([])
        other._graph.add_nodes_from(self._graph.nodes(data=True))
        for parent, child, score in edges:
            if not self._graph.has_edge(parent, child):
                raise ValueError("edge ({}, {}) is not a candidate".format(
                    parent, child))
            other._graph.add_edge(parent, child, score=float(score))
        return other

    def components(self) -> List[List[int]]:
        """
        Weakly connected components, each sorted, ordered by smallest id.
        """
        comps = [ sorted(comp) for comp
                  in nx.weakly_connected_components(self._graph) ]
        return sorted(comps, key=lambda comp: comp[0])


def build_candidate_graph(table:ScoreTable,
                          detections:Sequence[Detection],
                          dist_max:float,
                          alpha:float=DEFAULT_ALPHA) -> CandidateGraph:
    """
    Keep adjacent-frame pairs with mean score >= alpha and distance <=
    dist_max. Every detection becomes a node.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1), got {}".format(alpha))
    if dist_max <= 0:
        raise ValueError("dist_max must be positive, got {}".format(dist_max))
    dets = { det.id: det for det in detections }
    edges = []
    for (parent, child), gap, mean in zip(table.pairs, table.gaps,
                                          table.means):
        if gap != 1 or mean < alpha:
            continue
        p, c = dets.get(int(parent)), dets.get(int(child))
        if p is None or c is None or c.t != p.t + 1:
            continue
        if np.hypot(p.p[0] - c.p[0], p.p[1] - c.p[1]) > dist_max:
            continue
        edges.append((p.id, c.id, float(mean)))
    graph = CandidateGraph(dets.values(), edges)
    logger.info("candidate graph: %d nodes, %d edges", len(dets),
                graph.number_of_edges())
    return graph
