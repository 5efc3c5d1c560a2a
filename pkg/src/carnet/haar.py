"""Single-level Haar squeeze: (B, 3, H, W) <-> (B, 12, H/2, W/2).

Channel layout is ``[LL_rgb, LH_rgb, HL_rgb, HH_rgb]``. For a 2x2 block
``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 4    # block average
    LH = (a - b + c - d) / 4    # column difference
    HL = (a + b - c - d) / 4    # row difference
    HH = (a - b - c + d) / 4

The transform matrix is orthogonal up to a factor of 1/2, so
``||squeeze(x)|| == ||x|| / 2``.
"""

import torch

from ._validation import DimensionError, as_tensor


def haar_squeeze(img):
    img = as_tensor(img)
    if img.ndim != 4:
        raise DimensionError(f"expected (batch, C, H, W), got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"Haar squeeze needs even spatial dims, got {h}x{w}")
    a = img[..., 0::2, 0::2]
    b = img[..., 0::2, 1::2]
    c = img[..., 1::2, 0::2]
    d = img[..., 1::2, 1::2]
    ll = (a + b + c + d) / 4
    lh = (a - b + c - d) / 4
    hl = (a + b - c - d) / 4
    hh = (a - b - c + d) / 4
    return torch.cat([ll, lh, hl, hh], dim=1)


def haar_unsqueeze(lat):
    lat = as_tensor(lat)
    if lat.ndim != 4:
        raise DimensionError(f"expected (batch, C, h, w), got {tuple(lat.shape)}")
    if lat.shape[1] != 12:
        raise DimensionError(f"Haar unsqueeze needs 12 channels, got {lat.shape[1]}")
    ll, lh, hl, hh = lat.chunk(4, dim=1)
    n, c, h, w = ll.shape
    out = lat.new_empty(n, c, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = ll + lh + hl + hh
    out[..., 0::2, 1::2] = ll - lh + hl - hh
    out[..., 1::2, 0::2] = ll + lh - hl - hh
    out[..., 1::2, 1::2] = ll - lh - hl + hh
    return out
