"""Attack Pattern Discriminator, divergences, triplet constraint, dynamic convolution."""

import itertools
import math
import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import DimensionError, NumericError, ParameterError, as_tensor

ATTACK_LABELS = ("clean", "vision", "perception")
ENERGY_FLOOR = 1e-4
KL_FLOOR = 1e-8


def kl_divergence(p1, p2, eta=KL_FLOOR):
    """KL(p1 || p2) along the last axis.

    Probabilities are floored at ``eta`` inside the logarithm only, and
    entries with ``p1 == 0`` contribute nothing. Strictly positive inputs
    are therefore unaffected by the floor and ``KL(P, P) == 0`` exactly.
    """
    p1, p2 = as_tensor(p1), as_tensor(p2)
    if p1.shape[-1] != p2.shape[-1]:
        raise DimensionError(f"length mismatch: {p1.shape[-1]} vs {p2.shape[-1]}")
    ratio = torch.log(p1.clamp_min(eta)) - torch.log(p2.clamp_min(eta))
    return torch.where(p1 > 0, p1 * ratio, torch.zeros_like(ratio)).sum(-1)


def js_divergence(p1, p2, eta=KL_FLOOR):
    p1, p2 = as_tensor(p1), as_tensor(p2)
    if p1.shape[-1] != p2.shape[-1]:
        raise DimensionError(f"length mismatch: {p1.shape[-1]} vs {p2.shape[-1]}")
    m = (p1 + p2) / 2
    return 0.5 * kl_divergence(p1, m, eta) + 0.5 * kl_divergence(p2, m, eta)


def aggregate_kernel(weight, bias, probs):
    """Convex combination of a bank of ``k`` kernels.

    ``weight`` is (k, out, in, kh, kw) and ``bias`` (k, out). ``probs`` of
    shape (k,) yields a single kernel; shape (batch, k) yields one kernel per
    batch element.
    """
    probs = as_tensor(probs, weight.dtype)
    k = weight.shape[0]
    if probs.shape[-1] != k:
        raise DimensionError(f"bank has {k} kernels but probs has length {probs.shape[-1]}")
    w = torch.tensordot(probs, weight, dims=([-1], [0]))
    b = None if bias is None else torch.tensordot(probs, bias, dims=([-1], [0]))
    return w, b


class DynamicConv2d(nn.Module):
    """Convolution whose kernel is the ``probs``-weighted mix of ``num_patterns`` kernels.

    ``groups`` splits channels into independent convolutions exactly as in
    :func:`torch.nn.functional.conv2d`; the mixing weights are shared.
    """

    def __init__(
        self, in_channels, out_channels, num_patterns=3, kernel_size=3, groups=1, zero_init=False
    ):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ValueError("channel counts must be divisible by groups")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_patterns = num_patterns
        self.kernel_size = kernel_size
        self.groups = groups
        self.weight = nn.Parameter(
            torch.empty(num_patterns, out_channels, in_channels // groups, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(num_patterns, out_channels))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            for w in self.weight:
                nn.init.kaiming_uniform_(w, a=math.sqrt(5))

    def forward(self, x, probs):
        n, c, h, w = x.shape
        if probs.shape != (n, self.num_patterns):
            raise DimensionError(
                f"probs must be ({n}, {self.num_patterns}), got {tuple(probs.shape)}"
            )
        weight, bias = aggregate_kernel(self.weight, self.bias, probs)
        ks = self.kernel_size
        out = F.conv2d(
            x.reshape(1, n * c, h, w),
            weight.reshape(n * self.out_channels, c // self.groups, ks, ks),
            bias.reshape(-1),
            padding=ks // 2,
            groups=n * self.groups,
        )
        return out.reshape(n, self.out_channels, h, w)


class Discriminator(nn.Module):
    """CNN mapping an image to a distribution over attack patterns.

    The first stage measures local high-frequency energy: a fixed 3x3 box
    high-pass, a bias-free conv, ``|.|``, 2x2 average pooling and a log.
    Perturbations live at the noise floor of a smooth image, so log-energy
    separates them where normalized conv features do not. Strided convs,
    global mean pooling and a linear head follow.
    """

    def __init__(self, num_patterns=3, widths=(16, 32, 32, 32), init_scale=1.0, seed=0):
        super().__init__()
        if len(widths) < 1:
            raise ParameterError("widths needs at least one entry")
        self.num_patterns = num_patterns
        self.widths = tuple(widths)
        self.init_scale = init_scale
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.energy = nn.Conv2d(3, widths[0], 3, padding=1, bias=False)
            layers = []
            c_in = widths[0]
            for c_out in widths[1:]:
                layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.SiLU()]
                c_in = c_out
            self.features = nn.Sequential(*layers)
            self.head = nn.Linear(c_in, num_patterns)
            # the JS triplet loss has zero gradient when all outputs coincide,
            # so the head must start input-dependent rather than near zero
            nn.init.normal_(self.head.weight, std=init_scale)
            nn.init.zeros_(self.head.bias)

    def config(self):
        return dict(
            num_patterns=self.num_patterns,
            widths=list(self.widths),
            init_scale=self.init_scale,
            seed=self.seed,
        )

    def logits(self, img):
        smooth = F.avg_pool2d(F.pad(img, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        e = F.avg_pool2d(self.energy(img - smooth).abs(), 2, ceil_mode=True)
        feats = self.features(torch.log(ENERGY_FLOOR + e)).mean(dim=(-2, -1))
        return self.head(feats)

    def forward(self, img):
        logits = self.logits(img)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite discriminator activations")
        return torch.softmax(logits, dim=-1)


def discriminate(img, model):
    return model(as_tensor(img))


def triplet_hinge(anchor, positive, negative, margin=0.2):
    """Mean of ``(JS(a, p) - JS(a, n) + margin)_+`` over aligned probability rows."""
    if margin < 0:
        raise ParameterError(f"margin must be nonnegative, got {margin}")
    if anchor.shape[0] == 0:
        warnings.warn("empty triplet batch; triplet loss is 0", RuntimeWarning, stacklevel=2)
        return anchor.new_zeros(())
    gap = js_divergence(anchor, positive) - js_divergence(anchor, negative) + margin
    return F.relu(gap).mean()


def triplet_loss(anchors, positives, negatives, model, margin=0.2):
    """Online triplet constraint on the discriminator's outputs for aligned image batches."""
    return triplet_hinge(model(anchors), model(positives), model(negatives), margin)


def batch_all_triplets(labels):
    """Every (anchor, positive, negative) index triple valid for ``labels``."""
    labels = [int(v) for v in labels]
    out = []
    for a, p in itertools.permutations(range(len(labels)), 2):
        if labels[a] != labels[p]:
            continue
        out.extend((a, p, n) for n in range(len(labels)) if labels[n] != labels[a])
    return out


def batch_all_triplet_loss(probs, labels, margin=0.2):
    """Batch-all mining: average hinge over every valid triplet in the minibatch."""
    triples = batch_all_triplets(labels)
    if not triples:
        return probs.new_zeros(())
    idx = torch.tensor(triples, dtype=torch.long)
    return triplet_hinge(probs[idx[:, 0]], probs[idx[:, 1]], probs[idx[:, 2]], margin)
