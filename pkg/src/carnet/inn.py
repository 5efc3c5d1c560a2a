"""Invertible enhancement network built from dynamic-convolution coupling blocks."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import (
    DimensionError,
    NumericError,
    as_tensor,
    check_image_batch,
    check_same_shape,
)
from .apd import DynamicConv2d
from .haar import haar_squeeze, haar_unsqueeze

LR_CHANNELS = 3
HF_CHANNELS = 9


class SubnetPair(nn.Module):
    """Two independent DCL stacks that read the same input.

    Both stacks run as one grouped convolution per layer; the first layer
    stacks their output channels, later layers use ``groups=2``, so weights
    never mix between the two. The final layer of each stack is zero so a
    fresh coupling block is the identity map.
    """

    def __init__(self, in_channels, out_channels, hidden=16, num_layers=3, num_patterns=3):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.out_channels = out_channels
        layers = []
        c_in = in_channels
        for i in range(num_layers):
            last = i == num_layers - 1
            c_out = 2 * (out_channels if last else hidden)
            layers.append(
                DynamicConv2d(
                    c_in, c_out, num_patterns, groups=1 if i == 0 else 2, zero_init=last
                )
            )
            c_in = c_out
        self.layers = nn.ModuleList(layers)

    def forward(self, x, probs):
        for i, layer in enumerate(self.layers):
            x = layer(x, probs)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x[:, : self.out_channels], x[:, self.out_channels :]


def coupling_forward(u1, u2, first, second, log_scale):
    """One affine coupling step.

    ``first(u2)`` returns the raw (log-scale, shift) pair for ``u1`` and
    ``second(v1)`` the pair for ``u2``::

        v1 = exp(log_scale(D1(u2))) * u1 + D2(u2)
        v2 = exp(log_scale(D3(v1))) * u2 + D4(v1)
    """
    s1, t1 = first(u2)
    v1 = torch.exp(log_scale(s1)) * u1 + t1
    s2, t2 = second(v1)
    v2 = torch.exp(log_scale(s2)) * u2 + t2
    return v1, v2


def coupling_inverse(v1, v2, first, second, log_scale):
    s2, t2 = second(v1)
    u2 = (v2 - t2) / torch.exp(log_scale(s2))
    s1, t1 = first(u2)
    u1 = (v1 - t1) / torch.exp(log_scale(s1))
    return u1, u2


class CouplingBlock(nn.Module):
    """Affine coupling over the (3, 9) channel split.

    ``d12`` holds the subnets D1 (log-scale) and D2 (shift) applied to the
    9-channel half; ``d34`` holds D3 and D4 applied to the 3-channel half.
    Log-scales are squashed by ``s_max * tanh(v / s_max)``.
    """

    def __init__(
        self, hidden=16, num_layers=3, num_patterns=3, s_max=2.0, index=0, hf_log_scale=0.0
    ):
        super().__init__()
        if abs(hf_log_scale) >= s_max:
            raise ValueError("hf_log_scale must lie strictly inside (-s_max, s_max)")
        self.s_max = s_max
        self.index = index
        kw = dict(hidden=hidden, num_layers=num_layers, num_patterns=num_patterns)
        self.d12 = SubnetPair(HF_CHANNELS, LR_CHANNELS, **kw)
        self.d34 = SubnetPair(LR_CHANNELS, HF_CHANNELS, **kw)
        if hf_log_scale:
            # D3 starts as a constant log-scale: the forward pass amplifies the
            # detail channels and the inverse damps a sampled latent equally
            raw = s_max * math.atanh(hf_log_scale / s_max)
            with torch.no_grad():
                self.d34.layers[-1].bias[:, :HF_CHANNELS] = raw

    def log_scale(self, v):
        return self.s_max * torch.tanh(v / self.s_max)

    def _subnets(self, probs):
        def run(pair, name):
            def f(x):
                s, t = pair(x, probs)
                if not (torch.isfinite(s).all() and torch.isfinite(t).all()):
                    raise NumericError(f"non-finite output of {name} in block {self.index}")
                return s, t

            return f

        return run(self.d12, "D1/D2"), run(self.d34, "D3/D4")

    def forward(self, u, probs):
        first, second = self._subnets(probs)
        v1, v2 = coupling_forward(
            u[:, :LR_CHANNELS], u[:, LR_CHANNELS:], first, second, self.log_scale
        )
        return torch.cat([v1, v2], dim=1)

    def inverse(self, v, probs):
        first, second = self._subnets(probs)
        u1, u2 = coupling_inverse(
            v[:, :LR_CHANNELS], v[:, LR_CHANNELS:], first, second, self.log_scale
        )
        return torch.cat([u1, u2], dim=1)


def block_forward(u, probs, block):
    return block(u, probs)


def block_backward(v, probs, block):
    return block.inverse(v, probs)


class Enhancer(nn.Module):
    """Haar squeeze followed by ``num_blocks`` coupling blocks."""

    def __init__(
        self,
        num_blocks=6,
        hidden=16,
        num_layers=3,
        num_patterns=3,
        s_max=2.0,
        hf_log_scale=0.0,
        seed=0,
    ):
        super().__init__()
        if num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
        self.num_blocks = num_blocks
        self.hidden = hidden
        self.num_layers = num_layers
        self.num_patterns = num_patterns
        self.s_max = s_max
        self.hf_log_scale = hf_log_scale
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList(
                CouplingBlock(hidden, num_layers, num_patterns, s_max, i, hf_log_scale)
                for i in range(num_blocks)
            )

    def config(self):
        return dict(
            num_blocks=self.num_blocks,
            hidden=self.hidden,
            num_layers=self.num_layers,
            num_patterns=self.num_patterns,
            s_max=self.s_max,
            hf_log_scale=self.hf_log_scale,
            seed=self.seed,
        )

    def _check_probs(self, probs, n):
        if probs.shape != (n, self.num_patterns):
            raise DimensionError(
                f"probs must be ({n}, {self.num_patterns}), got {tuple(probs.shape)}"
            )

    def decompose(self, y, probs):
        """Forward pass; returns ``(x_lr, x_hf)`` at half resolution."""
        self._check_probs(probs, y.shape[0])
        u = haar_squeeze(y)
        for block in self.blocks:
            u = block(u, probs)
        return u[:, :LR_CHANNELS], u[:, LR_CHANNELS:]

    def reconstruct(self, x_lr, v_hf, probs, clamp=False):
        """Backward pass from a low-resolution image and a high-frequency latent."""
        if x_lr.ndim != 4 or x_lr.shape[1] != LR_CHANNELS:
            raise DimensionError(f"x_lr must be (batch, 3, h, w), got {tuple(x_lr.shape)}")
        if v_hf.ndim != 4 or v_hf.shape[1] != HF_CHANNELS:
            raise DimensionError(f"v_hf must be (batch, 9, h, w), got {tuple(v_hf.shape)}")
        if x_lr.shape[0] != v_hf.shape[0] or x_lr.shape[2:] != v_hf.shape[2:]:
            raise DimensionError(
                f"x_lr {tuple(x_lr.shape)} and v_hf {tuple(v_hf.shape)} disagree"
            )
        self._check_probs(probs, x_lr.shape[0])
        u = torch.cat([x_lr, v_hf], dim=1)
        for block in reversed(self.blocks):
            u = block.inverse(u, probs)
        out = haar_unsqueeze(u)
        return out.clamp(0, 1) if clamp else out


def decompose(y, probs, model):
    y = check_image_batch(y, check_range=False)
    return model.decompose(y, probs)


def reconstruct(x_lr, v_hf, probs, model, clamp=True):
    return model.reconstruct(x_lr, v_hf, probs, clamp=clamp)


class LatentPrior:
    """Standard normal prior over the high-frequency latent.

    ``mode="zeros"`` returns the prior mode instead of sampling.
    """

    def __init__(self, seed=0, mode="sample"):
        if mode not in ("sample", "zeros"):
            raise ValueError(f"unknown prior mode {mode!r}")
        self.seed = seed
        self.mode = mode

    def sample(self, like, generator=None):
        """Draw ``v_hf`` with the shape, dtype and device of ``like``."""
        if self.mode == "zeros":
            return torch.zeros_like(like)
        if generator is None:
            generator = torch.Generator().manual_seed(self.seed)
        v = torch.randn(like.shape, generator=generator, dtype=like.dtype)
        return v.to(like.device)


def bicubic_downsample(img, factor=2):
    """Anti-aliased bicubic resize by ``1/factor`` using the a = -0.5 kernel."""
    img = as_tensor(img)
    h, w = img.shape[-2:]
    return F.interpolate(
        img, size=(h // factor, w // factor), mode="bicubic", align_corners=False, antialias=True
    )


def loss_forward(x_lr_pred, z):
    z_lr = bicubic_downsample(as_tensor(z, x_lr_pred.dtype))
    check_same_shape(x_lr_pred, z_lr, ("x_lr", "bicubic(z)"))
    return (x_lr_pred - z_lr).abs().mean()


def loss_backward(u_pred, z):
    z = as_tensor(z, u_pred.dtype)
    check_same_shape(u_pred, z, ("reconstruction", "z"))
    return (u_pred - z).abs().mean()
