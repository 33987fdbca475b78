#!/usr/bin/env python

"""
This module provides the association model: distance-masked attention
with rotary embeddings, the encoder-decoder stack, the outer-product logit
head, parental softmax and the weighted loss.
"""

from dataclasses import asdict, dataclass
import math
from typing import Optional, Sequence, Tuple
import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from assoctrack.common.lineage import FEATURE_CHANNELS, AssociationMatrix, Window
from assoctrack.common.tokenizer import (FeatureStandardizer, FourierEncoder,
                                         TokenBatch, build_tokens)


@dataclass
class ModelConfig:
    """
    Hyperparameters of AssociationTransformer.

    Attributes:
        dim: Token dimension d.
        layers: Number L of encoder and of decoder layers.
        heads: Attention heads, must divide dim.
        n_freq: Fourier frequencies of the positional encoding.
        d_max: Attention distance threshold in pixels.
        window: Window size s.
        max_tokens: Maximum tokens per window |D|.
        mlp_ratio: Hidden width of the layer MLPs relative to dim.
        fourier_scale: Expected scene extent in pixels.
        rope_wavelengths: Longest rotary wavelength for x, y (pixels) and
                          t (frames).
        channels: Feature channels, empty for points-only.
        parental_softmax: If False, probabilities use a plain sigmoid.
        seed: Initialization seed.
    """
    dim: int = 256
    layers: int = 6
    heads: int = 4
    n_freq: int = 32
    d_max: float = 60.
    window: int = 6
    max_tokens: int = 2048
    mlp_ratio: int = 2
    fourier_scale: float = 512.
    rope_wavelengths: Tuple[float, float, float] = (512., 512., 32.)
    channels: Tuple[str, ...] = FEATURE_CHANNELS
    parental_softmax: bool = True
    seed: int = 0

    def __post_init__(self):
        self.rope_wavelengths = tuple(self.rope_wavelengths)
        self.channels = tuple(self.channels)
        if self.dim % self.heads:
            raise ValueError("heads ({}) must divide dim ({})".format(
                self.heads, self.dim))
        if (self.dim // self.heads) % 2:
            raise ValueError("head dimension must be even")
        if self.window < 2:
            raise ValueError("window must be >= 2, got {}".format(
                self.window))
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    def to_dict(self) -> dict:
        dic = asdict(self)
        dic['rope_wavelengths'] = list(self.rope_wavelengths)
        dic['channels'] = list(self.channels)
        return dic


class RotaryEmbedding3D(nn.Module):
    """
    Rotary embedding over (x, y, t).

    Channel pairs of a head are split into three contiguous groups, rotated
    by x, y and t respectively. Each group uses a geometric ladder of
    wavelengths from 2 up to the configured maximum.
    """

    def __init__(self, head_dim:int,
                 wavelengths:Sequence[float]=(512., 512., 32.)):
        super().__init__()
        if head_dim % 2:
            raise ValueError("head_dim must be even")
        n_pairs = head_dim // 2
        freqs = np.zeros(n_pairs)
        axes = np.zeros(n_pairs, dtype=np.int64)
        for axis, group in enumerate(np.array_split(np.arange(n_pairs), 3)):
            num = len(group)
            if num == 0:
                continue
            ratio = np.arange(num) / max(num - 1, 1)
            lengths = 2. * (wavelengths[axis] / 2.) ** ratio
            freqs[group] = 2. * np.pi / lengths
            axes[group] = axis
        self.register_buffer('freqs', torch.tensor(freqs), persistent=False)
        self.register_buffer('axes', torch.tensor(axes), persistent=False)

    def forward(self, x:torch.Tensor, coords:torch.Tensor) -> torch.Tensor:
        """
        Rotate x of shape (..., n, head_dim) by coords of shape (n, 3).
        """
        angles = coords[:, self.axes].to(x.dtype) * self.freqs.to(x.dtype)
        cos, sin = torch.cos(angles), torch.sin(angles)
        x_even = x[..., 0::2]
        x_odd = x[..., 1::2]
        rotated = torch.stack([x_even * cos - x_odd * sin,
                               x_even * sin + x_odd * cos], dim=-1)
        return rotated.flatten(-2)


def distance_mask(positions:torch.Tensor, d_max:float) -> torch.Tensor:
    """
    Boolean (n, n) mask, True where attention is allowed.
    """
    return torch.cdist(positions, positions) <= d_max


class AttentionLayer(nn.Module):
    """
    Multi-head attention block with post-norm residuals and a GeLU MLP.

    Used with source = x for encoder self-attention and with the encoder
    output as source for decoder cross-attention.
    """

    def __init__(self, dim:int, heads:int, rope:RotaryEmbedding3D,
                 mlp_ratio:int=2):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.rope = rope
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_attn = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim),
                                 nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))
        self.norm_mlp = nn.LayerNorm(dim)

    def _split(self, x:torch.Tensor) -> torch.Tensor:
        return x.view(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def attention_weights(self, x:torch.Tensor, source:torch.Tensor,
                          coords:torch.Tensor,
                          mask:torch.Tensor) -> torch.Tensor:
        """
        Attention matrix per head, shape (heads, n, n).
        """
        query = self.rope(self._split(self.query(x)), coords)
        key = self.rope(self._split(self.key(source)), coords)
        scores = query @ key.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float('-inf'))
        return torch.softmax(scores, dim=-1)

    def forward(self, x:torch.Tensor, source:torch.Tensor,
                coords:torch.Tensor, mask:torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(x, source, coords, mask)
        mixed = (attn @ self._split(self.value(source))).transpose(0, 1)
        x = self.norm_attn(x + self.out(mixed.reshape(x.shape[0], self.dim)))
        return self.norm_mlp(x + self.mlp(x))


def _head(dim:int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))


class AssociationTransformer(nn.Module):
    """
    Encoder-decoder transformer predicting association logits of a window.

    Args:
        config: Model hyperparameters.
        standardizer: Frozen feature statistics. Defaults to identity
                      statistics over config.channels.
    """

    def __init__(self, config:ModelConfig,
                 standardizer:Optional[FeatureStandardizer]=None):
        super().__init__()
        self.config = config
        if standardizer is None:
            standardizer = FeatureStandardizer(config.channels)
        if tuple(standardizer.channels) != tuple(config.channels):
            raise ValueError("standardizer channels {} differ from model "
                             "channels {}".format(standardizer.channels,
                                                  config.channels))
        self.standardizer = standardizer
        self.fourier = FourierEncoder(config.n_freq, config.fourier_scale,
                                      seed=config.seed)
        # initialization draws from a forked RNG, the caller's state is kept
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self._build_layers()

    def _build_layers(self):
        config = self.config
        self.projection = nn.Linear(self.fourier.out_dim
                                    + len(config.channels), config.dim)
        rope = RotaryEmbedding3D(config.dim // config.heads,
                                 config.rope_wavelengths)
        self.encoder = nn.ModuleList(
            AttentionLayer(config.dim, config.heads, rope, config.mlp_ratio)
            for _ in range(config.layers))
        self.decoder = nn.ModuleList(
            AttentionLayer(config.dim, config.heads, rope, config.mlp_ratio)
            for _ in range(config.layers))
        self.head_y = _head(config.dim)
        self.head_z = _head(config.dim)

    def tokenize(self, window:Window) -> TokenBatch:
        return build_tokens(window, self.fourier, self.standardizer,
                            self.projection, self.config.d_max)

    def encode(self, batch:TokenBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Encoder and decoder representations (Y, Z).
        """
        coords = torch.cat([batch.positions,
                            batch.frames[:, None].to(batch.positions.dtype)],
                           dim=-1)
        mask = distance_mask(batch.positions, batch.d_max)
        y = batch.tokens
        for layer in self.encoder:
            y = layer(y, y, coords, mask)
        z = batch.tokens
        for layer in self.decoder:
            z = layer(z, y, coords, mask)
        return y, z

    def forward(self, batch:TokenBatch) -> torch.Tensor:
        """
        Association logits, shape (n, n).
        """
        y, z = self.encode(batch)
        return self.head_y(y) @ self.head_z(z).T

    def probabilities(self, logits:torch.Tensor,
                      frames:torch.Tensor) -> torch.Tensor:
        if self.config.parental_softmax:
            return parental_softmax(logits, frames)
        return torch.sigmoid(logits)

    @torch.no_grad()
    def predict(self, window:Window) -> AssociationMatrix:
        """
        Association probabilities of a window.
        """
        if len(window) == 0:
            return AssociationMatrix(np.zeros((0, 0)), 'probabilities',
                                     window.frames)
        batch = self.tokenize(window)
        probs = self.probabilities(self(batch), batch.frames)
        return AssociationMatrix(probs.double().cpu().numpy(),
                                 'probabilities', window.frames)


def parent_mask(frames:torch.Tensor) -> torch.Tensor:
    """
    (n, n) mask, True where row i lies in the frame directly before column j.
    """
    return frames[:, None] == frames[None, :] - 1


def _log_normalizer(logits:torch.Tensor, frames:torch.Tensor) -> torch.Tensor:
    # column-wise log(1 + sum_{i in P_j} exp(logits_ij)), the +1 enters as a
    # pseudo-logit of value 0
    masked = logits.masked_fill(~parent_mask(frames), float('-inf'))
    zeros = torch.zeros(1, logits.shape[1], dtype=logits.dtype,
                        device=logits.device)
    return torch.logsumexp(torch.cat([zeros, masked], dim=0), dim=0)


def parental_log_probabilities(logits:torch.Tensor, frames:torch.Tensor
                               ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    log(Phi(A)) and log(1 - Phi(A)), both finite.
    """
    log_p = torch.clamp(logits - _log_normalizer(logits, frames)[None, :],
                        max=0.)
    tiny = torch.finfo(logits.dtype).tiny ** 0.5
    x = torch.clamp(log_p, max=-tiny)
    log_1mp = torch.where(x > -math.log(2.),
                          torch.log(-torch.expm1(x)),
                          torch.log1p(-torch.exp(x)))
    return log_p, log_1mp


def parental_softmax(logits:torch.Tensor, frames:torch.Tensor) -> torch.Tensor:
    """
    Parental softmax Phi.

    Phi_ij = exp(A_ij) / (1 + sum_{i' in P_j} exp(A_i'j)) with P_j the rows
    in frame t_j - 1. Entries outside P_j follow the same formula and are
    clipped to [0, 1].

    Args:
        logits: (n, n) logits.
        frames: (n,) frame indices.

    Returns:
        torch.Tensor: Probabilities, same shape as logits.
    """
    return torch.exp(parental_log_probabilities(logits, frames)[0])


def association_loss(target:torch.Tensor,
                     logits:torch.Tensor,
                     weights:torch.Tensor,
                     frames:torch.Tensor,
                     lam:float=1e-2,
                     parental:bool=True) -> torch.Tensor:
    """
    Weighted loss BCE(A, Phi(A_hat), W) + lam * BCE(A, sigmoid(A_hat), W).

    Both terms are normalized by sum(W). Without parental softmax only the
    sigmoid term remains (the ablation sets lam = 1).

    Returns:
        torch.Tensor: Scalar loss, 0 with zero gradient if sum(W) == 0.
    """
    total = weights.sum()
    if total <= 0:
        return (logits * 0.).sum()
    active = weights > 0
    sig = F.binary_cross_entropy_with_logits(logits, target,
                                             reduction='none')
    loss = lam * (torch.where(active, sig, torch.zeros_like(sig))
                  * weights).sum() / total
    if parental:
        log_p, log_1mp = parental_log_probabilities(logits, frames)
        bce = -(target * log_p + (1. - target) * log_1mp)
        loss = loss + (torch.where(active, bce, torch.zeros_like(bce))
                       * weights).sum() / total
    return loss


def loss_and_grad(target:np.ndarray,
                  logits:np.ndarray,
                  weights:np.ndarray,
                  frames:np.ndarray,
                  lam:float=1e-2,
                  parental:bool=True) -> Tuple[float, np.ndarray]:
    """
    Loss value and its exact gradient with respect to the logits.

    Computed in double precision.
    """
    logit_t = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    loss = association_loss(torch.tensor(target, dtype=torch.float64),
                            logit_t,
                            torch.tensor(weights, dtype=torch.float64),
                            torch.as_tensor(frames, dtype=torch.long),
                            lam=lam, parental=parental)
    grad, = torch.autograd.grad(loss, logit_t)
    return float(loss), grad.numpy()
