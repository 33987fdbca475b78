#!/usr/bin/env python

"""
This module generates synthetic lineage videos: moving, dividing and
appearing objects with shallow features and their ground truth lineage.
"""

from dataclasses import asdict, dataclass, field, replace
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple
import warnings
import numpy as np
from assoctrack.common.lineage import Detection, LineageGraph
from assoctrack.common.utils import spawn_seeds

logger = logging.getLogger(__name__)

PRESET_DIR = os.path.join(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__))), 'presets')
BOUNDARIES = ('reflect', 'absorb')
PLACEMENT_ATTEMPTS = 100
SPLITS = ('train', 'val', 'test')


@dataclass
class SimConfig:
    """
    Synthetic video parameters.

    Attributes:
        frames: Number of frames T.
        n_objects: Objects placed in the first frame.
        width: Arena width in pixels.
        height: Arena height in pixels.
        sigma: Per-step Gaussian displacement in pixels.
        drift: Global displacement (dx, dy) per frame.
        p_divide: Division probability per object and frame.
        p_disappear: Disappearance probability per object and frame.
        appearance_rate: Mean number of objects appearing per frame.
        min_spacing: Minimum distance of placed objects.
        boundary: 'reflect' keeps objects inside, 'absorb' ends tracks
                  leaving the arena.
        area_mean: Mean object area in px^2.
        area_sigma: Std of the initial area.
        intensity_mean: Mean intensity.
        intensity_sigma: Std of the initial intensity.
        elongation: Range of the major/minor axis ratio.
        feature_noise: Multiplicative feature noise per frame.
        division_offset: Distance of daughters from the mother position.
        dist_max: Linking distance suited for this regime.
        seed: Random seed.
    """
    frames: int = 30
    n_objects: int = 20
    width: float = 256.
    height: float = 256.
    sigma: float = 1.5
    drift: Tuple[float, float] = (0., 0.)
    p_divide: float = 0.01
    p_disappear: float = 0.
    appearance_rate: float = 0.
    min_spacing: float = 8.
    boundary: str = 'reflect'
    area_mean: float = 100.
    area_sigma: float = 10.
    intensity_mean: float = 1.
    intensity_sigma: float = 0.1
    elongation: Tuple[float, float] = (1., 2.)
    feature_noise: float = 0.02
    division_offset: float = 4.
    dist_max: float = 20.
    seed: int = 0

    def __post_init__(self):
        self.drift = tuple(float(v) for v in self.drift)
        self.elongation = tuple(float(v) for v in self.elongation)
        if self.frames < 2:
            raise ValueError("frames must be >= 2, got {}".format(self.frames))
        for name in ('p_divide', 'p_disappear'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError("{} must lie in [0, 1], got {}".format(
                    name, value))
        if self.p_divide + self.p_disappear > 1:
            raise ValueError("p_divide + p_disappear must be <= 1")
        if self.sigma < 0 or self.appearance_rate < 0 \
                or self.min_spacing < 0 or self.feature_noise < 0:
            raise ValueError("sigma, appearance_rate, min_spacing and "
                             "feature_noise must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("arena must have positive size")
        if self.boundary not in BOUNDARIES:
            raise ValueError("boundary: %s is not supported" % self.boundary)
        if len(self.drift) != 2 or len(self.elongation) != 2 \
                or not 1 <= self.elongation[0] <= self.elongation[1]:
            raise ValueError("invalid drift or elongation range")

    def to_dict(self) -> dict:
        dic = asdict(self)
        dic['drift'] = list(self.drift)
        dic['elongation'] = list(self.elongation)
        return dic


def load_preset(name:str, **overrides) -> SimConfig:
    """
    Read a preset shipped in assoctrack/presets.

    Raises:
        ValueError: Unknown preset.
    """
    path = os.path.join(PRESET_DIR, '{}.json'.format(name))
    if not os.path.isfile(path):
        raise ValueError("preset: %s is not supported, choose from %s"
                         % (name, available_presets()))
    with open(path) as f:
        params = json.load(f)
    params.update(overrides)
    return SimConfig(**params)


def available_presets() -> List[str]:
    return sorted(os.path.splitext(name)[0] for name in os.listdir(PRESET_DIR)
                  if name.endswith('.json'))


@dataclass
class _Object:
    id: int
    pos: np.ndarray
    area: float
    intensity: float
    elongation: float
    angle: float


@dataclass
class SimResult:
    """
    One simulated video.

    Attributes:
        detections: Detections ordered by (frame, id).
        lineage: Ground truth lineage over detection ids.
        stats: Tallies 'object_frames' (objects that could divide),
               'divisions', 'appearances' and 'skipped' placements.
    """
    detections: List[Detection]
    lineage: LineageGraph
    config: SimConfig
    stats: Dict[str, int] = field(default_factory=dict)

    @property
    def frames(self) -> Dict[int, int]:
        return { det.id: det.t for det in self.detections }


def ellipse_inertia(area:float, elongation:float,
                    angle:float) -> Tuple[float, float, float]:
    """
    Covariance (ixx, iyy, ixy) of a uniform ellipse of given area, axis
    ratio and orientation.
    """
    minor = np.sqrt(area / (np.pi * elongation))
    major = elongation * minor
    c, s = np.cos(angle), np.sin(angle)
    a2, b2 = major ** 2 / 4., minor ** 2 / 4.
    return (float(a2 * c * c + b2 * s * s),
            float(a2 * s * s + b2 * c * c),
            float((a2 - b2) * s * c))


class _Simulation:

    def __init__(self, config:SimConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.next_id = 1
        self.edges = []
        self.detections = []
        self.stats = {'object_frames': 0, 'divisions': 0,
                      'appearances': 0, 'skipped': 0}

    def _new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def _place(self, occupied:List[np.ndarray], t:int) -> Optional[np.ndarray]:
        cfg = self.config
        for _ in range(PLACEMENT_ATTEMPTS):
            pos = self.rng.uniform((0., 0.), (cfg.width, cfg.height))
            if all(np.hypot(*(pos - other)) >= cfg.min_spacing
                   for other in occupied):
                return pos
        self.stats['skipped'] += 1
        warnings.warn("frame {}: no free position after {} attempts, "
                      "object skipped".format(t, PLACEMENT_ATTEMPTS))
        return None

    def _spawn(self, occupied:List[np.ndarray], t:int) -> Optional[_Object]:
        cfg = self.config
        pos = self._place(occupied, t)
        if pos is None:
            return None
        occupied.append(pos)
        return _Object(
            id=self._new_id(),
            pos=pos,
            area=max(1., float(self.rng.normal(cfg.area_mean,
                                               cfg.area_sigma))),
            intensity=max(0., float(self.rng.normal(cfg.intensity_mean,
                                                    cfg.intensity_sigma))),
            elongation=float(self.rng.uniform(*cfg.elongation)),
            angle=float(self.rng.uniform(0., np.pi)))

    def _confine(self, pos:np.ndarray) -> Optional[np.ndarray]:
        size = np.array([self.config.width, self.config.height])
        if self.config.boundary == 'absorb':
            if np.any(pos < 0) or np.any(pos > size):
                return None
            return pos
        pos = np.where(pos < 0, -pos, pos)
        pos = np.where(pos > size, 2 * size - pos, pos)
        return np.clip(pos, 0, size)

    def _evolve(self, obj:_Object, pos:np.ndarray, area:float) -> _Object:
        cfg = self.config
        noise = cfg.feature_noise
        area = area + 0.1 * (cfg.area_mean - area)
        return _Object(
            id=self._new_id(),
            pos=pos,
            area=max(1., area * float(np.exp(noise * self.rng.normal()))),
            intensity=max(0., obj.intensity
                          * float(np.exp(noise * self.rng.normal()))),
            elongation=obj.elongation,
            angle=obj.angle + float(self.rng.normal(0., 0.1)))

    def _emit(self, obj:_Object, t:int):
        ixx, iyy, ixy = ellipse_inertia(obj.area, obj.elongation, obj.angle)
        self.detections.append(Detection(
            id=obj.id, t=t, p=(float(obj.pos[0]), float(obj.pos[1])),
            z={'area': obj.area, 'intensity': obj.intensity,
               'ixx': ixx, 'iyy': iyy, 'ixy': ixy}))

    def _step(self, objects:List[_Object], t:int) -> List[_Object]:
        cfg = self.config
        drift = np.array(cfg.drift)
        nxt = []
        for obj in objects:
            self.stats['object_frames'] += 1
            draw = self.rng.random()
            step = drift + self.rng.normal(0., cfg.sigma, size=2)
            if draw < cfg.p_disappear:
                continue
            if draw < cfg.p_disappear + cfg.p_divide:
                self.stats['divisions'] += 1
                axis = np.array([np.cos(obj.angle), np.sin(obj.angle)])
                for sign in (1., -1.):
                    pos = self._confine(obj.pos + step
                                        + sign * cfg.division_offset * axis)
                    if pos is None:
                        continue
                    child = self._evolve(obj, pos, obj.area / 2.)
                    self.edges.append((obj.id, child.id))
                    nxt.append(child)
                continue
            pos = self._confine(obj.pos + step)
            if pos is None:
                continue
            child = self._evolve(obj, pos, obj.area)
            self.edges.append((obj.id, child.id))
            nxt.append(child)
        occupied = [ obj.pos for obj in nxt ]
        for _ in range(int(self.rng.poisson(cfg.appearance_rate))):
            obj = self._spawn(occupied, t + 1)
            if obj is not None:
                self.stats['appearances'] += 1
                nxt.append(obj)
        return nxt

    def run(self) -> SimResult:
        cfg = self.config
        occupied = []
        objects = []
        for _ in range(cfg.n_objects):
            obj = self._spawn(occupied, 0)
            if obj is not None:
                objects.append(obj)
        for t in range(cfg.frames):
            for obj in objects:
                self._emit(obj, t)
            if t < cfg.frames - 1:
                objects = self._step(objects, t)
        lineage = LineageGraph(nodes=[ det.id for det in self.detections ],
                               edges=self.edges)
        return SimResult(self.detections, lineage, cfg, dict(self.stats))


def simulate(config:SimConfig) -> SimResult:
    """
    Simulate one video. Same config and seed give identical output.
    """
    result = _Simulation(config).run()
    logger.info("simulated %d frames, %d detections, %d divisions (seed %d)",
                config.frames, len(result.detections),
                result.stats['divisions'], config.seed)
    return result


def split_counts(num:int, ratios:Sequence[float]) -> List[int]:
    """
    Split num items by ratios with the largest remainder method.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.min() < 0 or not np.isclose(ratios.sum(), 1.):
        raise ValueError("ratios must be non-negative and sum to 1, "
                         "got {}".format(ratios.tolist()))
    raw = ratios * num
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind='stable')
    for k in order[:num - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


@dataclass
class SimVideo:
    name: str
    split: str
    result: SimResult


def make_dataset(configs:Sequence[SimConfig],
                 ratios:Sequence[float]=(0.8, 0.1, 0.1),
                 seed:int=0) -> Tuple[Dict[str, List[SimVideo]], dict]:
    """
    Simulate independent videos and split them into train, val and test.

    Every video gets its own seed spawned from seed. The first videos go
    to train, then val, then test.

    Returns:
        tuple: (split name -> videos, manifest)
    """
    if len(ratios) != len(SPLITS):
        raise ValueError("ratios need one value per split {}".format(SPLITS))
    counts = split_counts(len(configs), ratios)
    seeds = spawn_seeds(seed, len(configs))
    labels = [ split for split, count in zip(SPLITS, counts)
               for _ in range(count) ]
    splits = { split: [] for split in SPLITS }
    entries = []
    for k, (config, label, video_seed) in enumerate(zip(configs, labels,
                                                        seeds)):
        name = 'video_{:03d}'.format(k)
        config = replace(config, seed=int(video_seed))
        splits[label].append(SimVideo(name, label, simulate(config)))
        entries.append({'name': name, 'split': label,
                        'seed': int(video_seed),
                        'config': config.to_dict()})
    manifest = {
        'seed': int(seed),
        'ratios': [ float(r) for r in ratios ],
        'videos': entries,
        }
    return splits, manifest


def regenerate(manifest:dict) -> Dict[str, List[SimVideo]]:
    """
    Rebuild a dataset from its manifest.
    """
    splits = { split: [] for split in SPLITS }
    for entry in manifest['videos']:
        config = SimConfig(**entry['config'])
        splits[entry['split']].append(
            SimVideo(entry['name'], entry['split'], simulate(config)))
    return splits
