#!/usr/bin/env python

"""
This module trains the association model and checks its gradients.
"""

import copy
from dataclasses import asdict, dataclass, field, replace
import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
import torch
from assoctrack.common.lineage import (AssociationMatrix, Detection,
                                       LineageGraph, Window, group_by_frame,
                                       make_windows)
from assoctrack.common.matching import (LabelImageMasks, Matching,
                                        build_target, build_weights,
                                        match_video)
from assoctrack.common.tokenizer import (AugmentConfig, FeatureStandardizer,
                                         augment_window, crop_window_tiles,
                                         subsample_lineage, subsample_window)
from assoctrack.common.transformer import (AssociationTransformer,
                                           ModelConfig, association_loss)
from assoctrack.common.utils import TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    Attributes:
        batch_size: Windows per optimizer step.
        steps: Optimizer steps.
        learning_rate: Peak learning rate of Adam.
        warmup_steps: Steps of linear learning-rate warmup.
        seed: Seed of sampling, augmentation and initialization.
        lam: Weight of the sigmoid loss term.
        delta_t: Temporal cutoff of the loss weights in frames.
        lambda_div: Extra weight of dividing rows.
        lambda_cont: Extra weight of continuing rows.
        delta_max: Matching distance threshold in pixels.
        grad_clip: Max gradient norm, 0 disables clipping.
        val_every: Steps between validation losses.
        log_every: Steps between log lines.
    """
    batch_size: int = 8
    steps: int = 2000
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    seed: int = 0
    lam: float = 1e-2
    delta_t: int = 2
    lambda_div: float = 10.
    lambda_cont: float = 1.
    delta_max: float = 10.
    grad_clip: float = 1.
    val_every: int = 50
    log_every: int = 10

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive, got {}".format(self.lam))
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSample:
    """
    One window with its target and loss weights.
    """
    window: Window
    target: AssociationMatrix
    weights: AssociationMatrix


@dataclass
class TrainingVideo:
    """
    Detections of a video matched to its ground truth lineage.
    """
    name: str
    detections: List[Detection]
    gt_graph: LineageGraph
    gt_frames: Dict[int, int]
    matching: Matching

    @property
    def num_frames(self) -> int:
        frames = [ det.t for det in self.detections ]
        return max(frames) - min(frames) + 1 if frames else 0

    @property
    def first_frame(self) -> int:
        return min(det.t for det in self.detections)


def make_training_video(name:str,
                        detections:Sequence[Detection],
                        gt_detections:Sequence[Detection],
                        gt_graph:LineageGraph,
                        delta_max:float,
                        masks:Optional[LabelImageMasks]=None) -> TrainingVideo:
    """
    Match detections to ground truth, frame by frame.
    """
    matching = match_video(detections, gt_detections, delta_max, masks)
    gt_frames = { det.id: det.t for det in gt_detections }
    return TrainingVideo(name, list(detections), gt_graph, gt_frames,
                         matching)


class FixedWindowDataset:
    """
    Dataset over precomputed samples, no augmentation.
    """

    def __init__(self, samples:Sequence[TrainingSample]):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, rng:np.random.Generator) -> TrainingSample:
        return self.samples[int(rng.integers(len(self.samples)))]

    def all_samples(self) -> List[TrainingSample]:
        return list(self.samples)

    def detections(self) -> List[Detection]:
        seen = {}
        for sample in self.samples:
            for det in sample.window.detections:
                seen[det.id] = det
        return list(seen.values())


class VideoWindowDataset:
    """
    Draw augmented windows from matched videos.

    Args:
        videos: Training videos.
        window: Window size s.
        config: Train configuration (loss weights).
        augment: Augmentation ranges, None disables augmentation.
        max_tokens: Windows above this size are cropped to a random tile.
        margin: Tile overlap in pixels.
    """

    def __init__(self, videos:Sequence[TrainingVideo], window:int,
                 config:TrainConfig,
                 augment:Optional[AugmentConfig]=None,
                 max_tokens:int=2048, margin:float=0.):
        self.videos = [ video for video in videos if video.detections ]
        if not self.videos:
            raise ValueError("dataset is empty")
        self.window = window
        self.config = config
        self.augment = augment
        self.max_tokens = max_tokens
        self.margin = margin

    def __len__(self) -> int:
        return sum(max(1, video.num_frames - self.window + 1)
                   for video in self.videos)

    def detections(self) -> List[Detection]:
        return [ det for video in self.videos for det in video.detections ]

    def _make_sample(self, video:TrainingVideo, window:Window,
                     factor:int) -> TrainingSample:
        cfg = self.config
        if factor == 1:
            gt_graph = video.gt_graph
        else:
            last = window.start + window.span * factor
            nodes = [ node for node, t in video.gt_frames.items()
                      if window.start <= t <= last ]
            gt_graph, _ = subsample_lineage(video.gt_graph.subgraph(nodes),
                                            video.gt_frames, factor,
                                            window.start)
            window = subsample_window(window, factor)
        target = build_target(window, video.matching, gt_graph)
        weights = build_weights(window, target, gt_graph, video.matching,
                                cfg.delta_t, cfg.lambda_div, cfg.lambda_cont)
        return TrainingSample(window, target, weights)

    def _window_at(self, video:TrainingVideo, start:int, factor:int) -> Window:
        span = min(self.window, -(-video.num_frames // factor))
        wide = (span - 1) * factor + 1
        by_frame = group_by_frame(video.detections)
        members = [ det for t in range(start, start + wide)
                    for det in by_frame.get(t, []) ]
        return Window(start, wide, members)

    def sample(self, rng:np.random.Generator) -> TrainingSample:
        video = self.videos[int(rng.integers(len(self.videos)))]
        factor = 1
        if self.augment is not None and self.augment.subsample:
            factor = int(rng.choice(self.augment.subsample))
        if (self.window - 1) * factor + 1 > video.num_frames:
            factor = 1
        span = min(self.window, video.num_frames)
        wide = (span - 1) * factor + 1
        start = video.first_frame + int(rng.integers(
                video.num_frames - wide + 1))
        window = self._window_at(video, start, factor)
        if len(window) > self.max_tokens:
            tiles = crop_window_tiles(window, self.max_tokens, self.margin)
            window = tiles[int(rng.integers(len(tiles)))]
        sample = self._make_sample(video, window, factor)
        if self.augment is None:
            return sample
        spatial = replace(self.augment, subsample=(1,))
        return TrainingSample(augment_window(sample.window, rng, spatial),
                              sample.target, sample.weights)

    def all_samples(self) -> List[TrainingSample]:
        """
        Every window of every video without augmentation.
        """
        samples = []
        for video in self.videos:
            for window in make_windows(video.detections, self.window):
                for tile in crop_window_tiles(window, self.max_tokens,
                                              self.margin):
                    samples.append(self._make_sample(video, tile, 1))
        return samples


def sample_loss(model:AssociationTransformer,
                sample:TrainingSample,
                config:TrainConfig) -> torch.Tensor:
    dtype = model.projection.weight.dtype
    batch = model.tokenize(sample.window)
    logits = model(batch)
    return association_loss(
            torch.as_tensor(sample.target.values, dtype=dtype),
            logits,
            torch.as_tensor(sample.weights.values, dtype=dtype),
            batch.frames,
            lam=config.lam,
            parental=model.config.parental_softmax)


def logit_gradient(model:AssociationTransformer,
                   sample:TrainingSample,
                   config:TrainConfig) -> np.ndarray:
    """
    Gradient of the sample loss with respect to the logits.
    """
    dtype = model.projection.weight.dtype
    batch = model.tokenize(sample.window)
    logits = model(batch).detach().requires_grad_(True)
    loss = association_loss(
            torch.as_tensor(sample.target.values, dtype=dtype),
            logits,
            torch.as_tensor(sample.weights.values, dtype=dtype),
            batch.frames, lam=config.lam,
            parental=model.config.parental_softmax)
    grad, = torch.autograd.grad(loss, logits)
    return grad.double().numpy()


def evaluate_loss(model:AssociationTransformer,
                  samples:Iterable[TrainingSample],
                  config:TrainConfig) -> float:
    losses = []
    with torch.no_grad():
        for sample in samples:
            if sample.weights.values.sum() > 0:
                losses.append(float(sample_loss(model, sample, config)))
    return float(np.mean(losses)) if losses else 0.


@dataclass
class TrainHistory:
    """
    Per-step losses. val_loss is None on steps without validation.
    """
    steps: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)

    def rows(self) -> List[Tuple[int, float, Optional[float]]]:
        return list(zip(self.steps, self.train_loss, self.val_loss))


def _warmup(warmup_steps:int):
    def factor(step):
        if warmup_steps <= 0:
            return 1.
        return min(1., (step + 1) / warmup_steps)
    return factor


def train(dataset,
          config:TrainConfig,
          model_config:ModelConfig,
          val_dataset=None,
          model:Optional[AssociationTransformer]=None
          ) -> Tuple[AssociationTransformer, TrainHistory]:
    """
    Fit the association model by mini-batch Adam.

    Args:
        dataset: FixedWindowDataset or VideoWindowDataset.
        config: Train configuration.
        model_config: Model hyperparameters. Its seed is replaced by
                      config.seed.
        val_dataset: Optional dataset whose unaugmented windows give the
                     validation loss.
        model: Optional model to continue training.

    Returns:
        tuple: (trained model, history)

    Raises:
        TrainingDivergedError: Loss became NaN or infinite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        standardizer = FeatureStandardizer.fit(dataset.detections(),
                                               model_config.channels)
        model = AssociationTransformer(replace(model_config,
                                               seed=config.seed),
                                       standardizer)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, _warmup(config.warmup_steps))
    val_samples = val_dataset.all_samples() if val_dataset is not None else []
    history = TrainHistory()
    for step in range(config.steps):
        optimizer.zero_grad()
        losses = []
        for _ in range(config.batch_size):
            sample = dataset.sample(rng)
            if sample.weights.values.sum() > 0:
                losses.append(sample_loss(model, sample, config))
        if not losses:
            continue
        loss = torch.stack(losses).mean()
        value = float(loss)
        if not math.isfinite(value):
            raise TrainingDivergedError(
                "loss is {} at step {}".format(value, step))
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           config.grad_clip)
        optimizer.step()
        scheduler.step()
        val_loss = None
        if val_samples and (step % config.val_every == 0
                            or step == config.steps - 1):
            model.eval()
            val_loss = evaluate_loss(model, val_samples, config)
            model.train()
        history.steps.append(step)
        history.train_loss.append(value)
        history.val_loss.append(val_loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            logger.info("step %d: train loss %.6f%s", step, value,
                        "" if val_loss is None
                        else ", val loss {:.6f}".format(val_loss))
    model.eval()
    return model, history


@dataclass
class GradcheckReport:
    """
    Result of comparing analytic and finite-difference gradients.
    """
    passed: bool
    max_rel_error: float
    worst_parameter: str
    worst_index: int
    per_parameter: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4


def gradcheck(model:AssociationTransformer,
              sample:TrainingSample,
              config:Optional[TrainConfig]=None,
              step:float=1e-5,
              tolerance:float=1e-4,
              floor:float=1e-4,
              max_entries:Optional[int]=None,
              seed:int=0) -> GradcheckReport:
    """
    Compare backprop gradients to central finite differences.

    Runs in double precision on a copy of model. The relative error of an
    entry is |g_a - g_n| / max(|g_a|, |g_n|, floor).

    Args:
        model: Model to check.
        sample: Small window with target and weights.
        config: Loss constants, defaults to TrainConfig().
        step: Finite-difference step.
        tolerance: Maximum accepted relative error.
        floor: Gradient magnitude below which the error is absolute.
        max_entries: Check at most this many random entries per tensor,
                     None checks all.
        seed: Seed of the entry selection.
    """
    config = config or TrainConfig()
    model = copy.deepcopy(model).double()
    model.eval()
    rng = np.random.default_rng(seed)
    model.zero_grad()
    sample_loss(model, sample, config).backward()
    per_parameter = {}
    worst = (0., '', -1)
    for name, param in model.named_parameters():
        if param.grad is None:
            analytic = torch.zeros_like(param).reshape(-1)
        else:
            analytic = param.grad.detach().reshape(-1).clone()
        flat = param.data.reshape(-1)
        indices = np.arange(flat.numel())
        if max_entries is not None and len(indices) > max_entries:
            indices = np.sort(rng.choice(indices, max_entries,
                                         replace=False))
        max_err = 0.
        for idx in indices:
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
                plus = float(sample_loss(model, sample, config))
                flat[idx] = orig - step
                minus = float(sample_loss(model, sample, config))
                flat[idx] = orig
            numeric = (plus - minus) / (2. * step)
            value = float(analytic[idx])
            err = abs(value - numeric) / max(abs(value), abs(numeric), floor)
            if err > max_err:
                max_err = err
            if err > worst[0]:
                worst = (err, name, int(idx))
        per_parameter[name] = max_err
    report = GradcheckReport(passed=worst[0] <= tolerance,
                             max_rel_error=worst[0],
                             worst_parameter=worst[1],
                             worst_index=worst[2],
                             per_parameter=per_parameter,
                             tolerance=tolerance)
    if not report.passed:
        logger.warning("gradcheck failed: rel error %.3e at %s[%d]",
                       report.max_rel_error, report.worst_parameter,
                       report.worst_index)
    return report
