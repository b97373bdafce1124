"""Input validation helpers.

Small check_* functions in the spirit of sklearn's validation utilities:
each returns a canonicalized ``np.ndarray`` (float64, C-contiguous) or
raises one of the :mod:`phosinv.errors` exceptions.
"""

import numpy as np

from .errors import DimensionError, ParameterError


def as_float_array(x, name="array"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_stimulus(s, n_electrodes=None):
    """Validate a per-electrode (freq, amp, pdur) matrix.

    Accepts shape (n_e, 3); returns float64. Entries must be finite and
    nonnegative.
    """
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"stimulus must have shape (n_electrodes, 3), got {arr.shape}")
    if n_electrodes is not None and arr.shape[0] != n_electrodes:
        raise DimensionError(
            f"stimulus has {arr.shape[0]} electrode rows, expected {n_electrodes}"
        )
    if not np.all(np.isfinite(arr)):
        raise ParameterError("stimulus contains non-finite values")
    if np.any(arr < 0):
        raise ParameterError("stimulus entries must be nonnegative")
    return np.ascontiguousarray(arr)


def check_stimulus_batch(s, n_electrodes=None):
    """Validate a batch of stimuli, shape (n, n_e, 3)."""
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"stimulus batch must have shape (n, n_e, 3), got {arr.shape}")
    if n_electrodes is not None and arr.shape[1] != n_electrodes:
        raise DimensionError(
            f"stimulus batch has {arr.shape[1]} electrode rows, expected {n_electrodes}"
        )
    if not np.all(np.isfinite(arr)):
        raise ParameterError("stimulus batch contains non-finite values")
    if np.any(arr < 0):
        raise ParameterError("stimulus entries must be nonnegative")
    return np.ascontiguousarray(arr)


def check_percept(t, shape=None, name="percept"):
    """Validate an H x W brightness image (finite, nonnegative)."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_same_shape(a, b, name_a="first image", name_b="second image"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{name_a} shape {a.shape} != {name_b} shape {b.shape}")
    return a, b


def check_odd_kernel(k):
    k = int(k)
    if k < 3 or k % 2 == 0:
        raise ParameterError(f"filter size must be odd and >= 3, got {k}")
    return k


def check_range(lo, hi, name="range"):
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ParameterError(f"invalid {name}: ({lo}, {hi})")
    return float(lo), float(hi)
