"""Joint perceptual objective: per-pixel MAE, Laplacian smoothness, and a
feature (perceptual) term over a pluggable convolutional extractor, plus
the phased alpha/beta weighting schedule.

The feature extractor defaults to a small fixed-seed random conv stack (a
perceptual proxy); real pretrained weights can be loaded from the tensor
container, selecting the tap layer by name.
"""

import json
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import config as cfg
from . import io as pio
from .errors import DataFormatError, ParameterError
from .validation import check_odd_kernel, check_same_shape


@dataclass(frozen=True)
class LossWeights:
    alpha: float = cfg.REPORT_ALPHA
    beta: float = cfg.REPORT_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"loss weights must be nonnegative, got {self}")


def mae(t, t_hat):
    """Mean absolute per-pixel difference."""
    a, b = check_same_shape(t, t_hat, "target", "reconstruction")
    return float(np.mean(np.abs(a - b)))


def mae_grad(t, t_hat):
    """d mae / d t_hat (subgradient 0 where the images agree exactly)."""
    a, b = check_same_shape(t, t_hat, "target", "reconstruction")
    return np.sign(b - a) / a.size


def laplacian_kernel(k):
    """Second-derivative filter of odd size k >= 3: the Sobel-style
    composition outer(smooth, d2) + outer(d2, smooth), where smooth is the
    binomial row of length k and d2 is [1, -2, 1] spread to length k.
    Weights sum to zero, so constant images give exactly zero response.
    """
    k = check_odd_kernel(k)
    smooth = np.array([1.0])
    for _ in range(k - 1):
        smooth = np.convolve(smooth, [1.0, 1.0])
    d2 = np.array([1.0, -2.0, 1.0])
    for _ in range(k - 3):
        d2 = np.convolve(d2, [1.0, 1.0])
    return np.outer(smooth, d2) + np.outer(d2, smooth)


def _smooth_t(img_t, kernel_t, signed):
    resp = F.conv2d(img_t[None, None], kernel_t[None, None])[0, 0]
    return resp.mean() if signed else resp.abs().mean()


def laplacian_smooth(t_hat, k=cfg.LAPLACIAN_K, signed=False):
    """Mean Laplacian response of the image (valid region only).

    By default the absolute response is averaged, so the penalty does not
    vanish by cancellation on compactly supported images; ``signed=True``
    averages the raw response instead.
    """
    arr = np.asarray(t_hat, dtype=np.float64)
    kernel = laplacian_kernel(k)
    if arr.shape[0] < k or arr.shape[1] < k:
        raise ParameterError(f"image shape {arr.shape} smaller than filter size {k}")
    with torch.no_grad():
        out = _smooth_t(torch.from_numpy(arr), torch.from_numpy(kernel), signed)
    return float(out)


def smooth_grad(t_hat, k=cfg.LAPLACIAN_K, signed=False):
    arr = torch.from_numpy(np.asarray(t_hat, dtype=np.float64)).requires_grad_(True)
    _smooth_t(arr, torch.from_numpy(laplacian_kernel(k)), signed).backward()
    return arr.grad.numpy()


class FeatureExtractor:
    """Immutable conv/pool stack with a named tap layer.

    ``layer_spec`` is a list of dicts: {"type": "conv", "name": ...}
    (weights held separately), {"type": "lrelu", "name", "slope"}, or
    {"type": "maxpool", "name", "size"}. Grayscale inputs are replicated
    to the stack's input channel count. Extraction returns the output of
    the tap layer.
    """

    def __init__(self, layer_spec, weights, tap="", in_channels=cfg.FEATURE_IN_CHANNELS):
        self.layer_spec = list(layer_spec)
        names = [spec["name"] for spec in self.layer_spec]
        if len(set(names)) != len(names):
            raise ParameterError("feature extractor layer names must be unique")
        self.tap = tap or names[-1]
        if self.tap not in names:
            raise ParameterError(f"tap layer {self.tap!r} not in {names}")
        self.in_channels = in_channels
        self._weights = {}
        for name, arr in weights.items():
            tensor = torch.as_tensor(np.asarray(arr, dtype=np.float64))
            tensor.requires_grad_(False)
            self._weights[name] = tensor

    @classmethod
    def random(cls, channels=cfg.FEATURE_CHANNELS, in_channels=cfg.FEATURE_IN_CHANNELS,
               seed=cfg.FEATURE_SEED, tap=""):
        """Fixed-seed random stack: [conv3x3 -> lrelu -> maxpool2] per stage
        (no pool after the last stage). He-style fan-in scaling."""
        rng = np.random.default_rng(seed)
        spec, weights = [], {}
        prev = in_channels
        for i, ch in enumerate(channels, start=1):
            name = f"conv{i}"
            fan_in = prev * 9
            weights[f"{name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (ch, prev, 3, 3))
            weights[f"{name}.bias"] = np.zeros(ch)
            spec.append({"type": "conv", "name": name})
            spec.append({"type": "lrelu", "name": f"lrelu{i}", "slope": 0.2})
            if i < len(channels):
                spec.append({"type": "maxpool", "name": f"pool{i}", "size": 2})
            prev = ch
        return cls(spec, weights, tap=tap, in_channels=in_channels)

    @classmethod
    def identity(cls):
        """Single 1x1 identity convolution on one channel (for tests)."""
        weights = {"conv1.weight": np.ones((1, 1, 1, 1)), "conv1.bias": np.zeros(1)}
        return cls([{"type": "conv", "name": "conv1"}], weights, tap="conv1", in_channels=1)

    @classmethod
    def from_container(cls, path, tap=""):
        """Load an extractor exported to the tensor container; the layer
        spec lives in the container metadata under "layers"."""
        arrays, meta = pio.load_tensors(path)
        if "layers" not in meta:
            raise DataFormatError(f"{path}: container metadata lacks a 'layers' spec")
        spec = meta["layers"]
        in_channels = int(meta.get("in_channels", cfg.FEATURE_IN_CHANNELS))
        return cls(spec, arrays, tap=tap or meta.get("tap", ""), in_channels=in_channels)

    def save(self, path):
        meta = {"layers": self.layer_spec, "tap": self.tap, "in_channels": self.in_channels}
        arrays = {k: v.numpy() for k, v in self._weights.items()}
        pio.save_tensors(path, arrays, meta)

    def forward_t(self, img_t):
        """Tap activations for a (B, H, W) tensor; differentiable."""
        x = img_t[:, None].expand(-1, self.in_channels, -1, -1)
        for spec in self.layer_spec:
            kind, name = spec["type"], spec["name"]
            if kind == "conv":
                w = self._weights[f"{name}.weight"].to(img_t.dtype)
                b = self._weights[f"{name}.bias"].to(img_t.dtype)
                x = F.conv2d(x, w, b, padding=w.shape[-1] // 2)
            elif kind == "lrelu":
                x = F.leaky_relu(x, spec["slope"])
            elif kind == "maxpool":
                x = F.max_pool2d(x, spec["size"])
            else:
                raise ParameterError(f"unknown feature layer type {kind!r}")
            if name == self.tap:
                return x
        raise ParameterError(f"tap layer {self.tap!r} was not reached")

    def activations(self, img):
        arr = np.asarray(img, dtype=np.float64)
        with torch.no_grad():
            return self.forward_t(torch.from_numpy(arr)[None])[0].numpy()


def _feature_t(t_t, t_hat_t, fx):
    a = fx.forward_t(t_t)
    b = fx.forward_t(t_hat_t)
    return ((a - b) ** 2).mean()


def feature_loss(t, t_hat, fx):
    """Mean squared difference between tap-layer activations."""
    a, b = check_same_shape(t, t_hat, "target", "reconstruction")
    with torch.no_grad():
        out = _feature_t(torch.from_numpy(a)[None], torch.from_numpy(b)[None], fx)
    return float(out)


def feature_grad(t, t_hat, fx):
    a, b = check_same_shape(t, t_hat, "target", "reconstruction")
    bt = torch.from_numpy(b).requires_grad_(True)
    _feature_t(torch.from_numpy(a)[None], bt[None], fx).backward()
    return bt.grad.numpy()


def joint(t, t_hat, weights=LossWeights(), fx=None, k=cfg.LAPLACIAN_K, signed=False):
    """Joint objective: mae + alpha * smoothness(t_hat) + beta * feature."""
    total = mae(t, t_hat)
    if weights.alpha != 0.0:
        total += weights.alpha * laplacian_smooth(t_hat, k, signed)
    if weights.beta != 0.0:
        if fx is None:
            raise ParameterError("beta > 0 requires a feature extractor")
        total += weights.beta * feature_loss(t, t_hat, fx)
    return float(total)


def joint_components(t, t_hat, weights=LossWeights(), fx=None, k=cfg.LAPLACIAN_K, signed=False):
    """(mae, smooth, feature, joint) tuple; feature is 0 without an extractor."""
    m = mae(t, t_hat)
    s = laplacian_smooth(t_hat, k, signed)
    f = feature_loss(t, t_hat, fx) if fx is not None else 0.0
    return m, s, f, m + weights.alpha * s + weights.beta * f


def joint_t(t_t, t_hat_t, alpha, beta, fx=None, kernel_t=None, signed=False):
    """Differentiable batched joint loss (mean over the batch).

    ``t_t``/``t_hat_t`` are (B, H, W) tensors; ``kernel_t`` a prebuilt
    Laplacian kernel tensor (required when alpha != 0).
    """
    total = (t_t - t_hat_t).abs().mean()
    if alpha != 0.0:
        resp = F.conv2d(t_hat_t[:, None], kernel_t[None, None])
        total = total + alpha * (resp.mean() if signed else resp.abs().mean())
    if beta != 0.0:
        total = total + beta * _feature_t(t_t, t_hat_t, fx)
    return total


@dataclass(frozen=True)
class LossSchedule:
    """Phased (alpha, beta) weighting with learning-rate warmups.

    ``boundaries[i]`` is the first epoch of phase i+1. beta must be
    nondecreasing and alpha nonincreasing across phases. At every strict
    beta increase the persistent lr multiplier halves
    (``post_warmup_lr_factor``) and, for the next ``warmup_length``
    epochs, the emitted multiplier is additionally divided by
    ``warmup_lr_divisor`` (the temporary warm-up dip).
    """

    boundaries: tuple = (5, 10, 15)
    alphas: tuple = (0.1, 0.05, 0.02, 0.0)
    betas: tuple = (0.0, 2e-5, 5e-5, 8e-5)
    warmup_length: int = 5
    warmup_lr_divisor: float = 10.0
    post_warmup_lr_factor: float = 0.5

    def __post_init__(self):
        if len(self.alphas) != len(self.boundaries) + 1 or len(self.betas) != len(self.alphas):
            raise ParameterError("schedule needs len(boundaries)+1 phases of weights")
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise ParameterError("phase boundaries must be strictly increasing")
        if any(b2 < b1 for b1, b2 in zip(self.betas, self.betas[1:])):
            raise ParameterError("beta must be nondecreasing across phases")
        if any(a2 > a1 for a1, a2 in zip(self.alphas, self.alphas[1:])):
            raise ParameterError("alpha must be nonincreasing across phases")
        if any(a < 0 for a in self.alphas) or any(b < 0 for b in self.betas):
            raise ParameterError("schedule weights must be nonnegative")

    @classmethod
    def from_config(cls, sc):
        return cls(tuple(sc.boundaries), tuple(sc.alphas), tuple(sc.betas),
                   sc.warmup_length, sc.warmup_lr_divisor, sc.post_warmup_lr_factor)

    def bump_epochs(self):
        """Epochs at which beta strictly increases."""
        return tuple(
            b for i, b in enumerate(self.boundaries) if self.betas[i + 1] > self.betas[i]
        )


def schedule_step(sched, epoch):
    """Active (LossWeights, lr_multiplier) for an epoch.

    The multiplier starts at 1, halves persistently at each beta increase,
    and is divided by 10 while the epoch lies inside the most recent
    warm-up window.
    """
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    phase = bisect_right(sched.boundaries, epoch)
    weights = LossWeights(sched.alphas[phase], sched.betas[phase])
    passed = [b for b in sched.bump_epochs() if b <= epoch]
    mult = sched.post_warmup_lr_factor ** len(passed)
    if passed and epoch < passed[-1] + sched.warmup_length:
        mult /= sched.warmup_lr_divisor
    return weights, mult
