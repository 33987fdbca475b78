#!/usr/bin/env python

"""
This module reads and writes the CSV and JSON files of the command line
and extracts detections from label images.
"""

from dataclasses import dataclass
import json
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from skimage import io as skio
from skimage.measure import regionprops
from assoctrack.common.lineage import (FEATURE_CHANNELS, Detection,
                                       LineageGraph, MaskRef)
from assoctrack.common.utils import FeatureError

logger = logging.getLogger(__name__)

BASE_COLUMNS = ('frame', 'id', 'x', 'y')
LINEAGE_COLUMNS = ('id', 'parent_id')
EDGE_COLUMNS = ('parent_id', 'child_id', 'score')
TRACK_COLUMNS = ('track_id', 'start_frame', 'end_frame', 'parent_track_id')
SCORE_COLUMNS = ('parent_id', 'child_id', 'frame_gap', 'mean_score',
                 'window_count')
LOSS_COLUMNS = ('step', 'train_loss', 'val_loss')
ERROR_TREE_COLUMNS = ('label', 'graph', 'parent_id', 'child_id',
                      'parent_frame')


def _write_csv(path:str, rows:Iterable[Sequence], columns:Sequence[str]):
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')


def _read_csv(path:str, columns:Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns))
    missing = [ col for col in columns if col not in frame.columns ]
    if missing:
        raise ValueError("{}: missing columns {}".format(path, missing))
    return frame


def feature_columns(columns:Sequence[str]) -> Tuple[str, ...]:
    """
    Feature channels of a detections header.

    Features follow the base columns as a contiguous prefix of
    FEATURE_CHANNELS.
    """
    columns = list(columns)
    if tuple(columns[:len(BASE_COLUMNS)]) != BASE_COLUMNS:
        raise ValueError("detections header must start with {}".format(
            ",".join(BASE_COLUMNS)))
    extra = tuple(columns[len(BASE_COLUMNS):])
    if extra != FEATURE_CHANNELS[:len(extra)]:
        raise ValueError("feature columns {} must be a prefix of {}".format(
            list(extra), list(FEATURE_CHANNELS)))
    return extra


def read_detections(path:str,
                    channels:Optional[Sequence[str]]=None) -> List[Detection]:
    """
    Read a detections CSV.

    Args:
        path: CSV with header frame,id,x,y[,area,intensity,ixx,iyy,ixy].
        channels: Channels the caller needs. Defaults to those present.

    Raises:
        FeatureError: A needed channel has no column.
    """
    frame = _read_csv(path, BASE_COLUMNS)
    present = feature_columns(frame.columns)
    channels = present if channels is None else tuple(channels)
    if not len(frame):
        return []
    for channel in channels:
        if channel not in present:
            raise FeatureError(int(frame['id'].iloc[0]), channel)
    dets = []
    for row in frame.itertuples(index=False):
        values = row._asdict()
        dets.append(Detection(
            id=int(values['id']),
            t=int(values['frame']),
            p=(float(values['x']), float(values['y'])),
            z={ channel: float(values[channel]) for channel in channels }))
    return dets


def write_detections(path:str, detections:Sequence[Detection],
                     channels:Sequence[str]=FEATURE_CHANNELS):
    channels = tuple(channels)
    feature_columns(BASE_COLUMNS + channels)
    rows = [ [det.t, det.id, det.p[0], det.p[1]]
             + [ det.z[channel] for channel in channels ]
             for det in sorted(detections, key=lambda d: (d.t, d.id)) ]
    _write_csv(path, rows, BASE_COLUMNS + channels)


def read_lineage(path:str) -> LineageGraph:
    """
    Read a lineage CSV id,parent_id with parent_id 0 for no parent.
    """
    frame = _read_csv(path, LINEAGE_COLUMNS)
    return LineageGraph.from_parent_map(
        { int(node): int(parent)
          for node, parent in zip(frame['id'], frame['parent_id']) })


def write_lineage(path:str, graph:LineageGraph):
    _write_csv(path, sorted(graph.parent_map().items()), LINEAGE_COLUMNS)


def write_edges(path:str, graph:LineageGraph):
    scores = graph.scores()
    rows = [ (parent, child, scores.get((parent, child), 1.))
             for parent, child in graph.edges ]
    _write_csv(path, rows, EDGE_COLUMNS)


def read_edges(path:str, nodes:Iterable[int]) -> LineageGraph:
    """
    Read an edges CSV into a lineage over nodes.
    """
    frame = _read_csv(path, EDGE_COLUMNS)
    edges = [ (int(p), int(c))
              for p, c in zip(frame['parent_id'], frame['child_id']) ]
    scores = { edge: float(s) for edge, s in zip(edges, frame['score']) }
    return LineageGraph(nodes=nodes, edges=edges, scores=scores)


def compute_tracks(graph:LineageGraph,
                   frames:Mapping[int, int]) -> List[Tuple[int, int, int, int]]:
    """
    Split a lineage into tracks, the linear segments between divisions.

    Tracks are numbered from 1 in order of (start frame, first id).

    Returns:
        list: Rows (track_id, start_frame, end_frame, parent_track_id),
              parent_track_id 0 for tracks without mother.
    """
    starts = sorted((node for node in graph.nodes
                     if graph.in_degree(node) == 0
                     or graph.out_degree(graph.parents(node)[0]) != 1),
                    key=lambda node: (frames[node], node))
    track_of = {}
    segments = []
    for track_id, first in enumerate(starts, start=1):
        node = first
        track_of[node] = track_id
        while graph.out_degree(node) == 1:
            node = graph.children(node)[0]
            track_of[node] = track_id
        segments.append((track_id, first, node))
    rows = []
    for track_id, first, last in segments:
        parents = graph.parents(first)
        rows.append((track_id, frames[first], frames[last],
                     track_of[parents[0]] if parents else 0))
    return rows


def write_tracks(path:str, graph:LineageGraph, frames:Mapping[int, int]):
    _write_csv(path, compute_tracks(graph, frames), TRACK_COLUMNS)


def write_score_dump(path:str, table):
    _write_csv(path, table.rows(), SCORE_COLUMNS)


def write_loss_log(path:str, history):
    rows = [ (step, train, '' if val is None else val)
             for step, train, val in history.rows() ]
    _write_csv(path, rows, LOSS_COLUMNS)


def read_loss_log(path:str) -> pd.DataFrame:
    return _read_csv(path, LOSS_COLUMNS)


def write_error_tree(path:str, rows:Sequence[Tuple]):
    _write_csv(path, rows, ERROR_TREE_COLUMNS)


def write_json(path:str, data:dict):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path:str) -> dict:
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def region_detections(labels:Sequence[np.ndarray],
                      images:Optional[Sequence[np.ndarray]]=None,
                      mask_key:str='frame_{}') -> List[Detection]:
    """
    Detections from a sequence of label images.

    Centroid, area, mean intensity (1 without raw image) and central
    second moments normalized by area. Ids run from 1 in (frame, label)
    order.
    """
    if images is not None and len(images) != len(labels):
        raise ValueError("got {} label images and {} raw images".format(
            len(labels), len(images)))
    dets = []
    next_id = 1
    for t, label in enumerate(labels):
        label = np.asarray(label)
        if label.ndim != 2:
            raise ValueError("frame {}: label image must be 2D".format(t))
        image = None if images is None else np.asarray(images[t], dtype=float)
        for region in regionprops(label.astype(np.int64),
                                  intensity_image=image):
            mu = region.moments_central
            area = float(region.area)
            row, col = region.centroid
            z = {
                'area': area,
                'intensity': (float(region.intensity_mean)
                              if image is not None else 1.),
                'ixx': float(mu[0, 2] / mu[0, 0]),
                'iyy': float(mu[2, 0] / mu[0, 0]),
                'ixy': float(mu[1, 1] / mu[0, 0]),
                }
            dets.append(Detection(id=next_id, t=t, p=(float(col), float(row)),
                                  z=z, mask_ref=MaskRef(mask_key.format(t),
                                                        region.label)))
            next_id += 1
    logger.info("extracted %d detections from %d frames", len(dets),
                len(labels))
    return dets


def read_image_sequence(directory:str, suffix:str='.pgm') -> List[np.ndarray]:
    """
    Read all images with suffix in directory, sorted by file name.
    """
    names = sorted(name for name in os.listdir(directory)
                   if name.lower().endswith(suffix))
    return [ skio.imread(os.path.join(directory, name)) for name in names ]


def video_files(directory:str) -> Dict[str, Dict[str, str]]:
    """
    Map video name -> {'detections': path, 'lineage': path} for files named
    <name>_detections.csv and <name>_lineage.csv.
    """
    videos = {}
    for name in sorted(os.listdir(directory)):
        for kind in ('detections', 'lineage'):
            tail = '_{}.csv'.format(kind)
            if name.endswith(tail):
                videos.setdefault(name[:-len(tail)], {})[kind] = \
                    os.path.join(directory, name)
    return videos


@dataclass
class VideoRecord:
    """
    Detections and ground truth lineage of one video on disk.
    """
    name: str
    detections: List[Detection]
    lineage: Optional[LineageGraph] = None


def write_video(directory:str, name:str, detections:Sequence[Detection],
                lineage:LineageGraph,
                channels:Sequence[str]=FEATURE_CHANNELS):
    os.makedirs(directory, exist_ok=True)
    write_detections(os.path.join(directory, name + '_detections.csv'),
                     detections, channels)
    write_lineage(os.path.join(directory, name + '_lineage.csv'), lineage)


def load_videos(directory:str,
                channels:Optional[Sequence[str]]=None) -> List[VideoRecord]:
    """
    Load every <name>_detections.csv of directory with its lineage file,
    if present.
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError("no such directory: {}".format(directory))
    records = []
    for name, paths in video_files(directory).items():
        if 'detections' not in paths:
            continue
        lineage = read_lineage(paths['lineage']) \
            if 'lineage' in paths else None
        records.append(VideoRecord(
            name, read_detections(paths['detections'], channels), lineage))
    return records
