#!/usr/bin/env python

"""
This module prunes a candidate graph into a lineage by greedy selection,
two-step linear assignment or exact integer programming.
"""

from collections import defaultdict
from dataclasses import asdict, dataclass
import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
from scipy import sparse
from scipy.optimize import (Bounds, LinearConstraint, linear_sum_assignment,
                            milp)
from assoctrack.common.aggregator import CandidateGraph
from assoctrack.common.lineage import LineageGraph, validate_lineage
from assoctrack.common.utils import LinkingError

logger = logging.getLogger(__name__)

SOLVERS = ('greedy', 'lap', 'ilp')
MAX_IN_DEGREE = 1
MAX_OUT_DEGREE = 2
_BIG = 1e6


@dataclass
class TrackingSolution:
    """
    Lineage selected from a candidate graph.

    Attributes:
        lineage: Selected edges over all candidate nodes, with scores.
        solver: One of SOLVERS.
        objective: Integer program objective, ilp only.
    """
    lineage: LineageGraph
    solver: str
    objective: Optional[float] = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError("solver: %s is not supported" % self.solver)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return self.lineage.edges


@dataclass
class IlpCosts:
    """
    Costs of the linking integer program.

    An edge with mean score a costs -logit(clamp(a, eps, 1 - eps)).
    Defaults: c_app = c_dis = logit(0.75) = ln 3, c_div = 1.
    """
    c_app: float = math.log(3.)
    c_dis: float = math.log(3.)
    c_div: float = 1.
    eps: float = 1e-6

    def __post_init__(self):
        for name in ('c_app', 'c_dis', 'c_div'):
            if getattr(self, name) < 0:
                raise ValueError("{} must be non-negative".format(name))
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")

    def edge_cost(self, score:float) -> float:
        a = min(max(score, self.eps), 1. - self.eps)
        return -math.log(a / (1. - a))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LapConfig:
    """
    Two-step assignment settings.

    Links need score >= theta. The no-link cost of a step is factor times
    the given percentile of its link costs, but not below factor *
    (1 - theta).
    """
    theta: float = 0.5
    percentile: float = 90.
    factor: float = 1.05

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")
        if not 0 <= self.percentile <= 100 or self.factor <= 0:
            raise ValueError("invalid no-link cost rule")

    def no_link_cost(self, link_costs:np.ndarray) -> float:
        floor = 1. - self.theta
        if link_costs.size:
            floor = max(floor, float(np.percentile(link_costs,
                                                   self.percentile)))
        return self.factor * max(floor, 1e-9)


def _solution(cand:CandidateGraph, edges:Iterable[Tuple[int, int]],
              solver:str, objective:Optional[float]=None) -> TrackingSolution:
    edges = sorted(edges)
    scores = { edge: cand.score(*edge) for edge in edges }
    lineage = LineageGraph(nodes=cand.nodes, edges=edges, scores=scores)
    violations = validate_lineage(lineage, cand.frames)
    if violations:
        raise LinkingError("{} produced an invalid lineage: {}".format(
            solver, "; ".join(violations)))
    return TrackingSolution(lineage, solver, objective)


def _greedy_edges(edges:Sequence[Tuple[int, int, float]],
                  theta:float) -> List[Tuple[int, int]]:
    in_deg = defaultdict(int)
    out_deg = defaultdict(int)
    selected = []
    for parent, child, score in sorted(edges,
                                       key=lambda e: (-e[2], e[0], e[1])):
        if score < theta:
            break
        if in_deg[child] >= MAX_IN_DEGREE or out_deg[parent] >= MAX_OUT_DEGREE:
            continue
        in_deg[child] += 1
        out_deg[parent] += 1
        selected.append((parent, child))
    return selected


def link_greedy(cand:CandidateGraph, theta:float=0.5) -> TrackingSolution:
    """
    Accept edges by descending score, ties by (parent, child), while
    in-degree stays <= 1 and out-degree <= 2.
    """
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1], got {}".format(theta))
    selected = _greedy_edges(cand.edges, theta)
    logger.info("greedy: %d of %d edges", len(selected),
                cand.number_of_edges())
    return _solution(cand, selected, 'greedy')


def _augmented_assignment(link:np.ndarray,
                          no_link:float) -> List[Tuple[int, int]]:
    """
    Solve the augmented assignment of a link cost block.

    link has np.inf where linking is forbidden. Rows and columns left
    unlinked pay no_link each.
    """
    n_rows, n_cols = link.shape
    if n_rows == 0 or n_cols == 0:
        return []
    allowed = np.isfinite(link)
    size = n_rows + n_cols
    cost = np.full((size, size), _BIG)
    cost[:n_rows, :n_cols] = np.where(allowed, link, _BIG)
    cost[np.arange(n_rows), n_cols + np.arange(n_rows)] = no_link
    cost[n_rows + np.arange(n_cols), np.arange(n_cols)] = no_link
    cost[n_rows:, n_cols:] = np.where(allowed.T, link.T, _BIG)
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError:
        logger.warning("assignment infeasible, no links made")
        return []
    return [ (int(r), int(c)) for r, c in zip(rows, cols)
             if r < n_rows and c < n_cols and allowed[r, c] ]


def _link_block(rows:Sequence[int], cols:Sequence[int],
                cand:CandidateGraph, config:LapConfig) -> List[Tuple[int, int]]:
    col_index = { node: k for k, node in enumerate(cols) }
    link = np.full((len(rows), len(cols)), np.inf)
    graph = cand.graph
    for i, parent in enumerate(rows):
        for child in graph.successors(parent):
            k = col_index.get(child)
            score = graph.edges[parent, child]['score']
            if k is not None and score >= config.theta:
                link[i, k] = 1. - score
    finite = link[np.isfinite(link)]
    if finite.size == 0:
        return []
    pairs = _augmented_assignment(link, config.no_link_cost(finite))
    return [ (rows[i], cols[k]) for i, k in pairs ]


def link_lap(cand:CandidateGraph,
             config:Optional[LapConfig]=None) -> TrackingSolution:
    """
    Two-step linear assignment linking.

    Step 1 links each pair of adjacent frames by one augmented assignment
    and forms linear segments. Step 2 assigns segment starts to segment
    ends and to nodes with exactly one child in the previous frame; the
    latter create divisions.
    """
    config = config or LapConfig()
    frames = cand.frames
    by_frame = defaultdict(list)
    for node in cand.nodes:
        by_frame[frames[node]].append(node)
    selected = []
    for t in sorted(by_frame):
        if t + 1 in by_frame:
            selected.extend(_link_block(by_frame[t], by_frame[t + 1],
                                        cand, config))
    out_deg = defaultdict(int)
    has_parent = set()
    for parent, child in selected:
        out_deg[parent] += 1
        has_parent.add(child)
    ends = [ node for node in cand.nodes if out_deg[node] < MAX_OUT_DEGREE ]
    starts = [ node for node in cand.nodes if node not in has_parent ]
    merges = _link_block(ends, starts, cand, config)
    logger.info("lap: %d links in step 1, %d in step 2 (%d divisions)",
                len(selected), len(merges),
                sum(1 for parent, _ in merges if out_deg[parent] == 1))
    return _solution(cand, selected + merges, 'lap')


def ilp_objective(cand:CandidateGraph,
                  edges:Iterable[Tuple[int, int]],
                  costs:IlpCosts) -> float:
    """
    Objective of an edge selection, see link_ilp.
    """
    frames = cand.frames
    if not frames:
        return 0.
    first, last = min(frames.values()), max(frames.values())
    in_deg = defaultdict(int)
    out_deg = defaultdict(int)
    value = 0.
    for parent, child in edges:
        value += costs.edge_cost(cand.score(parent, child))
        in_deg[child] += 1
        out_deg[parent] += 1
    for node, t in frames.items():
        if in_deg[node] == 0 and t != first:
            value += costs.c_app
        if out_deg[node] == 0 and t != last:
            value += costs.c_dis
        if out_deg[node] == 2:
            value += costs.c_div
    return value


def _component_program(nodes:Sequence[int],
                       edges:Sequence[Tuple[int, int, float]],
                       app:Dict[int, float], dis:Dict[int, float],
                       c_div:float) -> Tuple[np.ndarray, LinearConstraint]:
    """
    Objective and constraints of one component.

    Variables are the edges, then per node an appearance, a disappearance
    and a division indicator. Per node: incoming edges + appearance == 1,
    outgoing edges + disappearance >= 1, outgoing edges - division <= 1.
    """
    n_edges, n_nodes = len(edges), len(nodes)
    index = { node: k for k, node in enumerate(nodes) }
    app_col = n_edges + np.arange(n_nodes)
    dis_col = app_col + n_nodes
    div_col = dis_col + n_nodes
    c = np.concatenate([
        [ cost for _, _, cost in edges ],
        [ app[node] for node in nodes ],
        [ dis[node] for node in nodes ],
        np.full(n_nodes, c_div),
        ])
    rows, cols, vals = [], [], []
    for k, (parent, child, _) in enumerate(edges):
        rows += [ index[child], n_nodes + index[parent],
                  2 * n_nodes + index[parent] ]
        cols += [k, k, k]
        vals += [1., 1., 1.]
    node_rows = np.arange(n_nodes)
    rows += list(node_rows) + list(n_nodes + node_rows) \
        + list(2 * n_nodes + node_rows)
    cols += list(app_col) + list(dis_col) + list(div_col)
    vals += [1.] * (2 * n_nodes) + [-1.] * n_nodes
    matrix = sparse.csr_matrix((vals, (rows, cols)),
                               shape=(3 * n_nodes, len(c)))
    lower = np.concatenate([np.ones(2 * n_nodes), np.full(n_nodes, -np.inf)])
    upper = np.concatenate([np.ones(n_nodes), np.full(n_nodes, np.inf),
                            np.ones(n_nodes)])
    return c, LinearConstraint(matrix, lower, upper)


def _solve_component(nodes:Sequence[int],
                     edges:Sequence[Tuple[int, int, float]],
                     app:Dict[int, float], dis:Dict[int, float],
                     c_div:float,
                     time_limit:Optional[float]=None) -> List[Tuple[int, int]]:
    c, constraint = _component_program(nodes, edges, app, dis, c_div)
    options = {'mip_rel_gap': 0.}
    if time_limit is not None:
        options['time_limit'] = float(time_limit)
    res = milp(c, constraints=constraint, integrality=np.ones(len(c)),
               bounds=Bounds(0., 1.), options=options)
    if res.status != 0 or res.x is None:
        raise LinkingError("ilp component with {} nodes and {} edges not "
                           "solved to optimality: {}".format(
                               len(nodes), len(edges), res.message))
    return [ (parent, child) for (parent, child, _), x
             in zip(edges, res.x[:len(edges)]) if x > 0.5 ]


def link_ilp(cand:CandidateGraph,
             costs:Optional[IlpCosts]=None,
             max_edges:int=50000,
             time_limit:Optional[float]=None) -> TrackingSolution:
    """
    Exact integer programming linker.

    Minimizes sum of edge costs of the selected edges + c_app per node
    without a parent (first frame excluded) + c_dis per node without a
    child (last frame excluded) + c_div per node with two children,
    subject to in-degree <= 1 and out-degree <= 2. Detections are fixed.

    Edges costlier than c_app + c_dis are never part of an optimum and are
    dropped. The remaining graph is solved per weakly connected component
    with scipy.optimize.milp.

    Args:
        max_edges: Edge budget of one component after pruning.
        time_limit: Seconds per component, no limit by default.

    Raises:
        LinkingError: A component exceeds max_edges or is not solved to
                      optimality within time_limit.
    """
    costs = costs or IlpCosts()
    frames = cand.frames
    first = min(frames.values()) if frames else 0
    last = max(frames.values()) if frames else 0
    app = { node: (costs.c_app if t != first else 0.)
            for node, t in frames.items() }
    dis = { node: (costs.c_dis if t != last else 0.)
            for node, t in frames.items() }
    weighted = []
    for parent, child, score in cand.edges:
        cost = costs.edge_cost(score)
        if cost <= costs.c_app + costs.c_dis:
            weighted.append((parent, child, cost, score))
    pruned = cand.with_edges((p, c, score) for p, c, _, score in weighted)
    by_parent = defaultdict(list)
    for p, c, cost, _ in weighted:
        by_parent[p].append((p, c, cost))
    selected = []
    comps = pruned.components()
    for comp in comps:
        if len(comp) == 1:
            continue
        edges = [ edge for node in comp for edge in by_parent[node] ]
        if len(edges) > max_edges:
            raise LinkingError(
                "candidate component has {} edges, more than the budget of "
                "{}; link the video in temporal chunks".format(
                    len(edges), max_edges))
        selected.extend(_solve_component(comp, edges, app, dis, costs.c_div,
                                         time_limit))
    objective = ilp_objective(cand, selected, costs)
    logger.info("ilp: %d of %d edges in %d components, objective %.6f",
                len(selected), cand.number_of_edges(),
                len(comps), objective)
    return _solution(cand, selected, 'ilp', objective)
