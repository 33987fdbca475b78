#!/usr/bin/env python

"""
This module turns window detections into transformer input tokens and
applies feature-level augmentations.
"""

from dataclasses import dataclass, replace
import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import numpy as np
import torch
from torch import nn
from assoctrack.common.lineage import (FEATURE_CHANNELS, Detection,
                                       LineageGraph, Window)
from assoctrack.common.utils import FeatureError

logger = logging.getLogger(__name__)


def window_features(window:Window, channels:Sequence[str]) -> np.ndarray:
    """
    Feature matrix of a window, shape (n, len(channels)).

    Raises:
        FeatureError: A detection lacks one of the channels.
    """
    feats = np.zeros((len(window), len(channels)), dtype=np.float64)
    for row, det in enumerate(window.detections):
        for col, channel in enumerate(channels):
            if channel not in det.z:
                raise FeatureError(det.id, channel)
            feats[row, col] = det.z[channel]
    return feats


class FeatureStandardizer:
    """
    Per-channel standardization with statistics frozen at training time.
    """

    def __init__(self, channels:Sequence[str],
                 mean:Optional[Sequence[float]]=None,
                 std:Optional[Sequence[float]]=None):
        for channel in channels:
            if channel not in FEATURE_CHANNELS:
                raise ValueError("feature: %s is not supported" % channel)
        self.channels = tuple(channels)
        num = len(self.channels)
        self.mean = np.zeros(num) if mean is None else np.asarray(mean, float)
        self.std = np.ones(num) if std is None else np.asarray(std, float)

    @classmethod
    def fit(cls, detections:Iterable[Detection],
            channels:Sequence[str]) -> 'FeatureStandardizer':
        values = [ [ det.z[c] for c in channels ] for det in detections
                   if all(c in det.z for c in channels) ]
        if not channels or not values:
            return cls(channels)
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0)
        std[std < 1e-12] = 1.
        return cls(channels, values.mean(axis=0), std)

    def transform(self, features:np.ndarray) -> np.ndarray:
        if not self.channels:
            return np.zeros((features.shape[0], 0))
        return (features - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            'channels': list(self.channels),
            'mean': [ float(v) for v in self.mean ],
            'std': [ float(v) for v in self.std ],
            }

    @classmethod
    def from_dict(cls, dic:Mapping) -> 'FeatureStandardizer':
        return cls(dic['channels'], dic['mean'], dic['std'])


class FourierEncoder(nn.Module):
    """
    Learned Fourier positional encoding [sin(2 pi B p), cos(2 pi B p)].

    Args:
        n_freq: Number of frequencies, output has 2 * n_freq entries.
        scale: Expected scene extent in pixels. B is initialized from
               N(0, 1 / scale).
        seed: Seed of the initialization.
    """

    def __init__(self, n_freq:int=32, scale:float=512., seed:int=0):
        super().__init__()
        if n_freq < 1:
            raise ValueError("n_freq must be >= 1, got {}".format(n_freq))
        generator = torch.Generator().manual_seed(seed)
        freqs = torch.randn(n_freq, 2, generator=generator) / scale
        self.freqs = nn.Parameter(freqs)

    @property
    def n_freq(self) -> int:
        return self.freqs.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.n_freq

    def forward(self, positions:torch.Tensor) -> torch.Tensor:
        phase = 2. * math.pi * positions @ self.freqs.T
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


def encode_position(encoder:FourierEncoder, p:Sequence[float]) -> torch.Tensor:
    """
    Encode a single position, vector of length 2 * n_freq.
    """
    pos = torch.as_tensor(p, dtype=encoder.freqs.dtype).reshape(1, 2)
    return encoder(pos)[0]


@dataclass
class TokenBatch:
    """
    Tokens of one window with the geometry attention needs.
    """
    tokens: torch.Tensor
    positions: torch.Tensor
    frames: torch.Tensor
    d_max: float

    def __len__(self) -> int:
        return self.tokens.shape[0]


def build_tokens(window:Window,
                 encoder:FourierEncoder,
                 standardizer:FeatureStandardizer,
                 projection:nn.Linear,
                 d_max:float) -> TokenBatch:
    """
    Tokens x_i = W_inp [Theta(p_i), z_i] of a window.

    Args:
        window: Window.
        encoder: Fourier positional encoder.
        standardizer: Feature channels and their frozen statistics. No
                      channels means points-only mode.
        projection: Linear layer W_inp.
        d_max: Attention distance threshold in pixels.

    Returns:
        TokenBatch: Rows aligned with the window.
    """
    dtype = projection.weight.dtype
    dim = projection.out_features
    positions = torch.as_tensor(window.positions, dtype=dtype)
    frames = torch.as_tensor(window.frames, dtype=torch.long)
    if len(window) == 0:
        return TokenBatch(torch.zeros(0, dim, dtype=dtype),
                          positions.reshape(0, 2), frames, d_max)
    feats = standardizer.transform(
            window_features(window, standardizer.channels))
    inputs = torch.cat([encoder(positions),
                        torch.as_tensor(feats, dtype=dtype)], dim=-1)
    return TokenBatch(projection(inputs), positions, frames, d_max)


@dataclass(frozen=True)
class AugmentConfig:
    """
    Ranges of the feature-level augmentations.

    Angles are in radians, shifts in pixels. extent is the (width, height)
    of the image used as flip and rotation center; None uses the centroid
    of the window.
    """
    flip: bool = True
    rotate: bool = True
    shift: float = 10.
    shear: float = 0.1
    scale: Tuple[float, float] = (0.8, 1.25)
    intensity_shift: float = 0.1
    intensity_scale: Tuple[float, float] = (0.8, 1.25)
    subsample: Tuple[int, ...] = (1, 2)
    extent: Optional[Tuple[float, float]] = None

    @classmethod
    def disabled(cls) -> 'AugmentConfig':
        return cls(flip=False, rotate=False, shift=0., shear=0.,
                   scale=(1., 1.), intensity_shift=0.,
                   intensity_scale=(1., 1.), subsample=(1,))


def sample_affine(rng:np.random.Generator,
                  config:AugmentConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample linear part and shift of a spatial augmentation.

    Degenerate samples (|det| < 1e-6) are rejected and drawn again.
    """
    for _ in range(100):
        linear = np.eye(2)
        if config.flip:
            linear = np.diag([ rng.choice([-1., 1.]),
                               rng.choice([-1., 1.]) ]) @ linear
        if config.rotate:
            angle = rng.uniform(0., 2. * np.pi)
            cos, sin = np.cos(angle), np.sin(angle)
            linear = np.array([[cos, -sin], [sin, cos]]) @ linear
        if config.shear:
            shear = rng.uniform(-config.shear, config.shear)
            linear = np.array([[1., shear], [0., 1.]]) @ linear
        low, high = config.scale
        if low != 1. or high != 1.:
            linear = np.diag(np.exp(rng.uniform(np.log(low), np.log(high),
                                                size=2))) @ linear
        if abs(np.linalg.det(linear)) > 1e-6:
            shift = rng.uniform(-config.shift, config.shift, size=2) \
                    if config.shift else np.zeros(2)
            return linear, shift
    raise RuntimeError("could not sample a non-degenerate affine transform")


def transform_detection(det:Detection,
                        linear:np.ndarray,
                        shift:np.ndarray,
                        center:np.ndarray,
                        intensity:Tuple[float, float]=(1., 0.)) -> Detection:
    """
    Apply p' = L (p - c) + c + shift to a detection and its features.

    Area scales with |det L|, the area-normalized inertia tensor T becomes
    L T L^T and intensity i becomes scale * i + shift.
    """
    pos = linear @ (np.asarray(det.p, dtype=float) - center) + center + shift
    z = dict(det.z)
    if 'area' in z:
        z['area'] = abs(np.linalg.det(linear)) * z['area']
    if 'ixx' in z and 'iyy' in z:
        ixy = z.get('ixy', 0.)
        tensor = linear @ np.array([[z['ixx'], ixy],
                                    [ixy, z['iyy']]]) @ linear.T
        z['ixx'], z['iyy'] = float(tensor[0, 0]), float(tensor[1, 1])
        if 'ixy' in z:
            z['ixy'] = float(tensor[0, 1])
    if 'intensity' in z:
        scale, offset = intensity
        z['intensity'] = scale * z['intensity'] + offset
    return replace(det, p=(float(pos[0]), float(pos[1])), z=z)


def subsample_window(window:Window, factor:int) -> Window:
    """
    Keep every factor-th frame of a window and renumber frames to be
    consecutive from window.start.
    """
    if factor == 1:
        return window
    span = -(-window.span // factor)
    if span < 2:
        raise ValueError("window of span {} cannot be subsampled by {}".format(
            window.span, factor))
    kept = [ replace(det, t=window.start + (det.t - window.start) // factor)
             for det in window.detections
             if (det.t - window.start) % factor == 0 ]
    return Window(window.start, span, kept)


def subsample_lineage(graph:LineageGraph,
                      frames:Mapping[int, int],
                      factor:int,
                      start:int=0) -> Tuple[LineageGraph, Dict[int, int]]:
    """
    Compose lineage edges over factor frames.

    Nodes at frames start, start + factor, ... are kept and renumbered like
    subsample_window does. A kept node links to every descendant exactly
    factor frames later.

    Returns:
        tuple: (subsampled graph, new frames of kept nodes)
    """
    kept = [ node for node in graph.nodes
             if frames[node] >= start and (frames[node] - start) % factor == 0 ]
    new_frames = { node: start + (frames[node] - start) // factor
                   for node in kept }
    edges = []
    for node in kept:
        frontier = [node]
        for _ in range(factor):
            frontier = [ child for parent in frontier
                         for child in graph.children(parent) ]
        edges.extend((node, child) for child in frontier)
    return LineageGraph(kept, edges), new_frames


def augment_window(window:Window,
                   rng:np.random.Generator,
                   config:AugmentConfig) -> Window:
    """
    Apply one sampled augmentation jointly to all frames of a window.

    Spatial transform, intensity transform and temporal subsampling are
    shared by all detections of the window.
    """
    factor = int(rng.choice(config.subsample)) if config.subsample else 1
    if -(-window.span // factor) < 2:
        factor = 1
    window = subsample_window(window, factor)
    if len(window) == 0:
        return window
    linear, shift = sample_affine(rng, config)
    if config.extent is not None:
        center = np.asarray(config.extent, dtype=float) / 2.
    else:
        center = window.positions.mean(axis=0)
    low, high = config.intensity_scale
    intensity = (float(np.exp(rng.uniform(np.log(low), np.log(high)))),
                 float(rng.uniform(-config.intensity_shift,
                                   config.intensity_shift)))
    dets = [ transform_detection(det, linear, shift, center, intensity)
             for det in window.detections ]
    return Window(window.start, window.span, dets)


def crop_window_tiles(window:Window, max_tokens:int,
                      margin:float) -> List[Window]:
    """
    Split an oversized window into overlapping spatial tiles.

    Tiles are cut at the median of the wider axis and extended by margin on
    both sides, recursively until every tile holds at most max_tokens rows.
    """
    if len(window) <= max_tokens:
        return [window]
    positions = window.positions

    def _split(rows):
        if len(rows) <= max_tokens:
            return [rows]
        pos = positions[rows]
        axis = int(np.argmax(np.ptp(pos, axis=0)))
        median = np.median(pos[:, axis])
        left = rows[pos[:, axis] <= median + margin]
        right = rows[pos[:, axis] >= median - margin]
        if len(left) >= len(rows) or len(right) >= len(rows):
            left = rows[pos[:, axis] <= median]
            right = rows[pos[:, axis] > median]
        if len(left) == 0 or len(right) == 0:
            half = len(rows) // 2
            left, right = rows[:half], rows[half:]
        return _split(left) + _split(right)

    tiles = _split(np.arange(len(window)))
    logger.debug("split window at frame %d (%d rows) into %d tiles",
                 window.start, len(window), len(tiles))
    return [ window.select(sorted(rows)) for rows in tiles ]
