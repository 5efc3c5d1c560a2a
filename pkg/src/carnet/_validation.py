"""Input validation helpers and the package's exception types."""

import math

import numpy as np
import torch


class CarnetError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(CarnetError, ValueError):
    pass


class NumericError(CarnetError, FloatingPointError):
    pass


class ParameterError(CarnetError, ValueError):
    pass


class ConfigError(CarnetError):
    pass


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def check_image_batch(x, *, check_range=True, name="images"):
    """Validate an image batch of shape (batch, 3, H, W) and return it as a tensor.

    H and W must be even and at least 8. With ``check_range`` every entry
    must lie in [0, 1].
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"{name}: expected shape (batch, 3, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"{name}: spatial dims must be even, got {h}x{w}")
    if h < 8 or w < 8:
        raise DimensionError(f"{name}: spatial dims must be >= 8, got {h}x{w}")
    if not torch.isfinite(x).all():
        raise NumericError(f"{name}: contains non-finite values")
    if check_range and (x.min() < 0 or x.max() > 1):
        raise ParameterError(f"{name}: values must lie in [0, 1]")
    return x


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(
            f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}"
        )


def check_probs(probs, k=None, atol=1e-6, name="probs"):
    """Validate rows of ``probs`` as points on the probability simplex."""
    probs = as_tensor(probs)
    if k is not None and probs.shape[-1] != k:
        raise DimensionError(f"{name}: expected length {k}, got {probs.shape[-1]}")
    if not torch.isfinite(probs).all():
        raise NumericError(f"{name}: contains non-finite values")
    if (probs < -atol).any():
        raise ParameterError(f"{name}: negative entries")
    sums = probs.sum(-1)
    if ((sums - 1).abs() > atol).any():
        raise ParameterError(f"{name}: rows must sum to 1 (got {sums.tolist()})")
    return probs


def check_finite(t, what):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def is_inf(value):
    return isinstance(value, float) and math.isinf(value)
