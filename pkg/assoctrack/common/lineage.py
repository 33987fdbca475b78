#!/usr/bin/env python

"""
This module provides the core domain types: detections, windows,
lineage graphs and association matrices.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple
import numpy as np
import networkx as nx
from assoctrack.common.utils import LineageError

FEATURE_CHANNELS = ('area', 'intensity', 'ixx', 'iyy', 'ixy')
MATRIX_ROLES = ('target', 'logits', 'probabilities', 'weights', 'aggregated')
PSD_TOLERANCE = 1e-6


@dataclass(frozen=True)
class MaskRef:
    """
    Reference to one labeled region in a label image.
    """
    key: str
    label: int


@dataclass(frozen=True)
class Detection:
    """
    One object in one frame.

    Attributes:
        id: Unique id within a video, > 0.
        t: Frame index.
        p: Position (x, y) in pixels.
        z: Shallow features keyed by channel name, see FEATURE_CHANNELS.
           Empty in points-only mode.
        mask_ref: Optional reference to the labeled region.
    """
    id: int
    t: int
    p: Tuple[float, float]
    z: Mapping[str, float] = field(default_factory=dict)
    mask_ref: Optional[MaskRef] = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("detection {}: negative frame {}".format(
                self.id, self.t))
        if len(self.p) != 2:
            raise ValueError("detection {}: position must be 2D".format(
                self.id))
        z = self.z
        if z.get('area', 0.) < 0:
            raise ValueError("detection {}: negative area".format(self.id))
        if 'ixx' in z and 'iyy' in z:
            ixx, iyy, ixy = z['ixx'], z['iyy'], z.get('ixy', 0.)
            if ixx < -PSD_TOLERANCE or iyy < -PSD_TOLERANCE \
                    or ixx * iyy - ixy ** 2 < -PSD_TOLERANCE:
                raise ValueError(
                    "detection {}: inertia tensor is not positive "
                    "semidefinite".format(self.id))

    def feature(self, channel:str) -> float:
        return self.z[channel]


def group_by_frame(detections:Iterable[Detection]) -> Dict[int, List[Detection]]:
    """
    Group detections by frame, each frame sorted by id.
    """
    frames = {}
    for det in detections:
        frames.setdefault(det.t, []).append(det)
    for t in frames:
        frames[t].sort(key=lambda d: d.id)
    return frames


def check_unique_ids(detections:Iterable[Detection]):
    seen = set()
    for det in detections:
        if det.id in seen:
            raise LineageError("duplicate detection id {}".format(det.id))
        seen.add(det.id)


class LineageGraph:
    """
    Directed forest over detection ids. Edges point parent -> child.

    The graph is backed by a networkx.DiGraph. Scores, if any, are stored as
    edge attribute 'score'.
    """

    def __init__(self,
                 nodes:Iterable[int]=(),
                 edges:Iterable[Tuple[int, int]]=(),
                 scores:Optional[Mapping[Tuple[int, int], float]]=None):
        graph = nx.DiGraph()
        graph.add_nodes_from(int(node) for node in nodes)
        for parent, child in edges:
            attrs = {}
            if scores is not None and (parent, child) in scores:
                attrs['score'] = float(scores[(parent, child)])
            graph.add_edge(int(parent), int(child), **attrs)
        self._graph = graph

    @classmethod
    def from_parent_map(cls, parents:Mapping[int, int]) -> 'LineageGraph':
        """
        Build graph from id -> parent_id mapping, parent_id 0 meaning none.
        """
        edges = [ (parent, node) for node, parent in parents.items()
                  if parent != 0 ]
        return cls(nodes=parents.keys(), edges=edges)

    @property
    def graph(self) -> nx.DiGraph:
        return self._graph

    @property
    def nodes(self) -> frozenset:
        return frozenset(self._graph.nodes)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted(self._graph.edges)

    def scores(self) -> Dict[Tuple[int, int], float]:
        return { (u, v): data['score']
                 for u, v, data in self._graph.edges(data=True)
                 if 'score' in data }

    def __contains__(self, node) -> bool:
        return node in self._graph

    def __eq__(self, other) -> bool:
        if not isinstance(other, LineageGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    def __repr__(self):
        return "LineageGraph(nodes={}, edges={})".format(
            self._graph.number_of_nodes(), self._graph.number_of_edges())

    def number_of_nodes(self) -> int:
        return self._graph.number_of_nodes()

    def number_of_edges(self) -> int:
        return self._graph.number_of_edges()

    def has_edge(self, parent:int, child:int) -> bool:
        return self._graph.has_edge(parent, child)

    def parents(self, node:int) -> List[int]:
        return sorted(self._graph.predecessors(node))

    def children(self, node:int) -> List[int]:
        return sorted(self._graph.successors(node))

    def in_degree(self, node:int) -> int:
        return self._graph.in_degree(node)

    def out_degree(self, node:int) -> int:
        return self._graph.out_degree(node)

    def divisions(self) -> List[int]:
        return sorted(node for node in self._graph
                      if self._graph.out_degree(node) == 2)

    def parent_map(self) -> Dict[int, int]:
        """
        id -> parent id, 0 for nodes without parent.
        """
        parents = {}
        for node in sorted(self._graph.nodes):
            preds = list(self._graph.predecessors(node))
            parents[node] = preds[0] if preds else 0
        return parents

    def subgraph(self, nodes:Iterable[int]) -> 'LineageGraph':
        sub = self._graph.subgraph(nodes)
        sub_graph = LineageGraph()
        sub_graph._graph = nx.DiGraph(sub)
        return sub_graph


def validate_lineage(graph:LineageGraph, frames:Mapping[int, int]) -> List[str]:
    """
    Check lineage constraints.

    Args:
        graph: Lineage graph.
        frames: Mapping detection id -> frame index.

    Returns:
        list: Violations as messages. Empty iff graph is valid.

    Raises:
        LineageError: An edge references an id missing in frames.
    """
    for parent, child in graph.edges:
        for node in (parent, child):
            if node not in frames:
                raise LineageError(
                    "edge ({}, {}) references unknown node {}".format(
                        parent, child, node))
    violations = []
    g = graph.graph
    for node in sorted(g.nodes):
        if g.in_degree(node) > 1:
            violations.append("in-degree {} at node {}".format(
                g.in_degree(node), node))
        if g.out_degree(node) > 2:
            violations.append("out-degree {} at node {}".format(
                g.out_degree(node), node))
    for parent, child in graph.edges:
        gap = frames[child] - frames[parent]
        if gap != 1:
            violations.append("frame gap {} on edge ({}, {})".format(
                gap, parent, child))
    return violations


def lineage_closure(graph:LineageGraph, node:int) -> Tuple[set, set]:
    """
    Get ancestors and descendants of node, node itself excluded.

    Raises:
        LineageError: node is not in graph.
    """
    if node not in graph:
        raise LineageError("unknown node {}".format(node))
    return (set(nx.ancestors(graph.graph, node)),
            set(nx.descendants(graph.graph, node)))


class Window:
    """
    Consecutive frames of a video and their detections.

    Rows are ordered by (frame, id). Instances are treated as immutable.
    """

    def __init__(self, start:int, span:int, detections:Iterable[Detection]):
        if span < 2:
            raise ValueError("window span must be >= 2, got {}".format(span))
        dets = tuple(sorted(detections, key=lambda d: (d.t, d.id)))
        for det in dets:
            if not start <= det.t < start + span:
                raise ValueError(
                    "detection {} at frame {} outside window [{}, {})".format(
                        det.id, det.t, start, start + span))
        self.start = int(start)
        self.span = int(span)
        self.detections = dets
        self.index = { det.id: i for i, det in enumerate(dets) }
        if len(self.index) != len(dets):
            raise LineageError("duplicate detection ids in window")

    def __len__(self) -> int:
        return len(self.detections)

    def __repr__(self):
        return "Window(start={}, span={}, n={})".format(
            self.start, self.span, len(self))

    @property
    def ids(self) -> np.ndarray:
        return np.array([ det.id for det in self.detections ], dtype=np.int64)

    @property
    def frames(self) -> np.ndarray:
        return np.array([ det.t for det in self.detections ], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([ det.p for det in self.detections ],
                        dtype=np.float64).reshape(-1, 2)

    def select(self, rows:Iterable[int]) -> 'Window':
        return Window(self.start, self.span,
                      [ self.detections[i] for i in rows ])


def make_windows(detections:Iterable[Detection], span:int) -> List[Window]:
    """
    Group a video into overlapping windows S_1, ..., S_{T-s+1}.

    Frames are taken from the detections; the video covers frames
    min..max. A video shorter than span gives a single window over the
    whole video.
    """
    dets = list(detections)
    if not dets:
        return []
    first = min(det.t for det in dets)
    last = max(det.t for det in dets)
    num_frames = last - first + 1
    span = max(2, min(span, num_frames))
    by_frame = group_by_frame(dets)
    windows = []
    for start in range(first, max(first, last - span + 1) + 1):
        members = []
        for t in range(start, start + span):
            members.extend(by_frame.get(t, []))
        windows.append(Window(start, span, members))
    return windows


@dataclass
class AssociationMatrix:
    """
    Dense pairwise matrix over the rows of a window.
    """
    values: np.ndarray
    role: str
    frames: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        frames = np.asarray(self.frames)
        if self.role not in MATRIX_ROLES:
            raise ValueError("role: %s is not supported" % self.role)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("association matrix must be square")
        if frames.shape != (values.shape[0],):
            raise ValueError("frame vector does not match matrix size")
        if self.role == 'target' and not np.isin(values, (0, 1)).all():
            raise ValueError("target entries must be 0 or 1")
        if self.role in ('probabilities', 'aggregated') and values.size \
                and (values.min() < 0 or values.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.role == 'weights' and values.size and values.min() < 0:
            raise ValueError("weights must be non-negative")
        self.values = values
        self.frames = frames

    @property
    def size(self) -> int:
        return self.values.shape[0]
