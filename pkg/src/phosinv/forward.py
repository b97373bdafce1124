"""Phosphene forward model: effect scalings, fast batched rendering,
analytic stimulus gradients, and a brute-force reference implementation.

The brightness of pixel p is the maximum over its axon segments of the
electrode-summed intensity

    max_a sum_e F_bright(s_e) * exp(-|pos(a) - e|^2 / (2 rho^2 F_size(s_e))
                                    - d_soma(a)^2  / (2 lam^2 F_streak(s_e)))

where d_soma(a) is the arc length from segment a back to the soma at p.
``render`` evaluates this as a fused multiply-exp-sum-max over distances
precomputed once per (axon map, implant) pair; ``render_reference`` is a
deliberately naive per-pixel/per-segment loop kept as an independent
oracle, and ``render_with_grad`` backpropagates through the fast path
with the max subgradient routed to the lowest-index arg-max segment.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import config as cfg
from . import retina
from .errors import ContractError, DimensionError, ParameterError
from .validation import check_stimulus, check_stimulus_batch

N_PATIENT_PARAMS = 12
N_COEFFS = 10

# Squared-distance sentinel for pruned (pixel, segment) slots: large enough
# that exp underflows to exactly 0 for any admissible decay scale, small
# enough that sentinel * u stays finite.
_PAD_D2 = 1e12


@dataclass(frozen=True)
class PatientParams:
    """Patient description: radial decay rho (um), axonal decay lam (um),
    and the ten effect-equation coefficients a0..a9 (12 parameters total).

    Coefficient roles (see :func:`effects`): a0 global brightness scale,
    a1 pulse-duration brightness slope (0 disables), a2 amplitude
    sensitivity, a3 frequency sensitivity, a4 saturation level, a5 size
    slope per threshold multiple, a6 post-saturation leak slope, a7/a8
    streak-vs-pulse-duration affine constants, a9 reserved.
    """

    rho: float = cfg.DEFAULT_RHO
    lam: float = cfg.DEFAULT_LAMBDA
    a: tuple = cfg.DEFAULT_COEFFS

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if len(self.a) != N_COEFFS:
            raise ParameterError(f"expected {N_COEFFS} coefficients, got {len(self.a)}")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))

    def as_vector(self):
        return np.array([self.rho, self.lam, *self.a], dtype=np.float64)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != N_PATIENT_PARAMS:
            raise ParameterError(f"expected {N_PATIENT_PARAMS} patient parameters, got {v.shape[0]}")
        return cls(float(v[0]), float(v[1]), tuple(v[2:]))

    def replace(self, **kw):
        vals = {"rho": self.rho, "lam": self.lam}
        coeffs = list(self.a)
        for k, v in kw.items():
            if k in vals:
                vals[k] = v
            elif k.startswith("a") and k[1:].isdigit() and int(k[1:]) < N_COEFFS:
                coeffs[int(k[1:])] = v
            else:
                raise ParameterError(f"unknown patient parameter {k!r}")
        return PatientParams(vals["rho"], vals["lam"], tuple(coeffs))


def _sat(z, level, leak):
    """Leaky-saturating map: identity slope at 0, asymptote level + leak*z."""
    return level * np.tanh(z / level) + leak * z


def effects(s_e, phi):
    """Stimulus-dependent effect scalings (F_bright, F_size, F_streak).

    ``s_e`` is a (freq, amp, pdur) triple or an (n, 3) array. F_bright is
    zero exactly when amp*freq == 0 (invisible-noise rule) and is
    nondecreasing in amplitude and frequency; F_size and F_streak are
    clamped below at EPS_SCALE so the Gaussian denominators stay positive.
    """
    arr = np.asarray(s_e, dtype=np.float64)
    squeeze = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise DimensionError(f"stimulus triple must have 3 entries, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ParameterError("stimulus entries must be nonnegative")
    freq, amp, pdur = arr[:, 0], arr[:, 1], arr[:, 2]
    a0, a1, a2, a3, a4, a5, a6, a7, a8, _a9 = phi.a
    pfac = np.maximum(1.0 + a1 * (pdur - cfg.PDUR_REF), 0.0)
    f_bright = a0 * _sat(a2 * amp, a4, a6) * _sat(a3 * freq, a4, a6) * pfac
    f_size = np.maximum(1.0 + a5 * (amp - 1.0), cfg.EPS_SCALE)
    f_streak = np.maximum(a7 - a8 * pdur, cfg.EPS_SCALE)
    if squeeze:
        return float(f_bright[0]), float(f_size[0]), float(f_streak[0])
    return f_bright, f_size, f_streak


def _effects_t(freq, amp, pdur, phi_t):
    """Torch twin of :func:`effects`; phi_t broadcasts against the inputs."""
    a = [phi_t[..., 2 + i] for i in range(N_COEFFS)]
    pfac = torch.clamp(1.0 + a[1] * (pdur - cfg.PDUR_REF), min=0.0)
    sat_amp = a[4] * torch.tanh(a[2] * amp / a[4]) + a[6] * (a[2] * amp)
    sat_frq = a[4] * torch.tanh(a[3] * freq / a[4]) + a[6] * (a[3] * freq)
    f_bright = a[0] * sat_amp * sat_frq * pfac
    f_size = torch.clamp(1.0 + a[5] * (amp - 1.0), min=cfg.EPS_SCALE)
    f_streak = torch.clamp(a[7] - a[8] * pdur, min=cfg.EPS_SCALE)
    return f_bright, f_size, f_streak


@dataclass(eq=False)
class RenderCache:
    """Distances precomputed once per (axon map, implant) pair.

    ``d_e2[p, s, e]`` is the squared Euclidean distance from axon segment
    s of pixel p to electrode e; ``d_s2[p, s]`` the squared arc length
    from that segment to its soma. Immutable after construction and safe
    to share across threads; per-dtype torch views are memoized.
    """

    grid_shape: tuple
    n_e: int
    d_e2: np.ndarray  # (P, S, E)
    d_s2: np.ndarray  # (P, S)
    _tensors: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, grid, layout, max_float64_elems=5e7):
        """Precompute squared distances. Large caches (above
        ``max_float64_elems`` entries) are stored in float32 to halve the
        footprint; the sub-micron rounding is irrelevant at that scale."""
        seg = grid.seg_xy  # (P, S, 2)
        pos = layout.positions  # (E, 2)
        diff_x = seg[:, :, 0][:, :, None] - pos[None, None, :, 0]
        diff_y = seg[:, :, 1][:, :, None] - pos[None, None, :, 1]
        d_e2 = diff_x * diff_x + diff_y * diff_y
        d_s2 = grid.cum_length**2
        if d_e2.size > max_float64_elems:
            d_e2 = d_e2.astype(np.float32)
        return cls(grid.grid_shape, layout.n_electrodes, d_e2, d_s2)

    @property
    def compute_dtype(self):
        return torch.float64 if self.d_e2.dtype == np.float64 else torch.float32

    def tensors(self, dtype):
        key = str(dtype)
        if key not in self._tensors:
            td = torch.float64 if "64" in key else torch.float32
            self._tensors[key] = (
                torch.from_numpy(self.d_e2).to(td),
                torch.from_numpy(self.d_s2).to(td),
            )
        return self._tensors[key]

    @property
    def n_pixels(self):
        return self.grid_shape[0] * self.grid_shape[1]

    def prune(self, phi_bounds, amp_max, freq_max, threshold=cfg.PRUNE_THRESHOLD):
        """Drop (pixel, segment) pairs whose best-case brightness is below
        ``threshold`` for any stimulus within the given bounds.

        ``phi_bounds`` is a PatientParams pair (lower, upper) bounding the
        patients the pruned cache will serve. Kept segments are repacked
        per pixel and padded with a far sentinel, so the render kernel is
        unchanged; the approximation error per pixel is below threshold.
        """
        lo, hi = phi_bounds
        f_bright_max = effects(np.array([freq_max, amp_max, cfg.PDUR_REF]), hi)[0]
        f_size_max = max(effects(np.array([1.0, amp_max, cfg.PDUR_REF]), lo)[1],
                         effects(np.array([1.0, amp_max, cfg.PDUR_REF]), hi)[1])
        f_streak_max = max(hi.a[7], lo.a[7])
        u_min = 1.0 / (2.0 * hi.rho**2 * f_size_max)
        v_min = 1.0 / (2.0 * hi.lam**2 * f_streak_max)
        bound = f_bright_max * np.exp(-self.d_e2 * u_min - self.d_s2[:, :, None] * v_min)
        keep = bound.sum(axis=2) >= threshold  # (P, S)
        n_keep = keep.sum(axis=1)
        s_max = max(int(n_keep.max()), 1)
        p, s, e = self.d_e2.shape
        d_e2 = np.full((p, s_max, e), _PAD_D2)
        d_s2 = np.full((p, s_max), _PAD_D2)
        for i in range(p):
            idx = np.flatnonzero(keep[i])
            d_e2[i, : idx.size] = self.d_e2[i, idx]
            d_s2[i, : idx.size] = self.d_s2[i, idx]
        return RenderCache(self.grid_shape, self.n_e, d_e2, d_s2)


def _phi_tensor(phi, n, dtype):
    if isinstance(phi, PatientParams):
        vec = phi.as_vector()[None].repeat(n, axis=0)
    else:
        vec = np.asarray(phi, dtype=np.float64)
        if vec.ndim == 1:
            vec = vec[None].repeat(n, axis=0)
        if vec.shape != (n, N_PATIENT_PARAMS):
            raise DimensionError(
                f"patient parameters must broadcast to ({n}, {N_PATIENT_PARAMS}), got {vec.shape}"
            )
    return torch.as_tensor(vec, dtype=dtype)


def render_kernel(stim_t, phi_t, cache, elec_chunk=None):
    """Differentiable torch kernel: (B, E, 3) stimuli -> (B, H, W) percepts.

    Max over segments is taken by explicit argmax + gather so subgradients
    route to the lowest-index arg-max segment deterministically.
    """
    d_e2, d_s2 = cache.tensors(stim_t.dtype)
    b, n_e = stim_t.shape[0], cache.n_e
    if stim_t.shape[1] != n_e:
        raise DimensionError(f"stimulus has {stim_t.shape[1]} electrodes, cache expects {n_e}")
    freq, amp, pdur = stim_t[..., 0], stim_t[..., 1], stim_t[..., 2]
    f_bright, f_size, f_streak = _effects_t(freq, amp, pdur, phi_t[:, None, :])
    rho, lam = phi_t[:, 0], phi_t[:, 1]
    u = 1.0 / (2.0 * rho[:, None] ** 2 * f_size)  # (B, E)
    v = 1.0 / (2.0 * lam[:, None] ** 2 * f_streak)
    p, s = d_s2.shape
    if elec_chunk is None:
        elec_chunk = max(1, min(n_e, int(3e7 // max(b * p * s, 1))))
    total = None
    for e0 in range(0, n_e, elec_chunk):
        e1 = min(e0 + elec_chunk, n_e)
        expo = d_e2[None, :, :, e0:e1] * u[:, None, None, e0:e1]
        expo = expo + d_s2[None, :, :, None] * v[:, None, None, e0:e1]
        part = (f_bright[:, None, None, e0:e1] * torch.exp(-expo)).sum(dim=3)
        total = part if total is None else total + part
    idx = torch.argmax(total, dim=2, keepdim=True)  # lowest index on ties
    percept = torch.gather(total, 2, idx).squeeze(2)
    return percept.reshape(b, *cache.grid_shape)


def render(s, phi, cache):
    """Render one stimulus to a percept (float64 numpy array, H x W)."""
    arr = check_stimulus(s, cache.n_e)
    dt = cache.compute_dtype
    with torch.no_grad():
        out = render_kernel(torch.as_tensor(arr, dtype=dt)[None], _phi_tensor(phi, 1, dt), cache)
    return out[0].to(torch.float64).numpy()


def render_batch(s, phi, cache, batch_chunk=64, dtype=None):
    """Render a batch of stimuli; phi may be shared or per-sample."""
    arr = check_stimulus_batch(s, cache.n_e)
    n = arr.shape[0]
    dtype = dtype or cache.compute_dtype
    phi_t = _phi_tensor(phi, n, dtype)
    out = np.empty((n, *cache.grid_shape))
    with torch.no_grad():
        for i0 in range(0, n, batch_chunk):
            i1 = min(i0 + batch_chunk, n)
            chunk = torch.as_tensor(arr[i0:i1], dtype=dtype)
            out[i0:i1] = render_kernel(chunk, phi_t[i0:i1], cache).numpy()
    return out


def render_with_grad(s, phi, cache, upstream):
    """Render and backpropagate: returns (percept, d(upstream . percept)/ds).

    ``upstream`` is a percept-shaped gradient; the returned array matches
    the stimulus shape. Ties in the segment max route to the lowest index.
    """
    arr = check_stimulus(s, cache.n_e)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != cache.grid_shape:
        raise DimensionError(f"upstream gradient shape {up.shape} != {cache.grid_shape}")
    dt = cache.compute_dtype
    stim_t = torch.as_tensor(arr, dtype=dt).requires_grad_(True)
    percept = render_kernel(stim_t[None], _phi_tensor(phi, 1, dt), cache)
    percept.backward(torch.as_tensor(up, dtype=dt)[None])
    return (
        percept.detach()[0].to(torch.float64).numpy(),
        stim_t.grad.to(torch.float64).numpy(),
    )


def render_reference(s, phi, grid, layout):
    """Brute-force reference renderer: per-pixel, per-segment loops with
    the electrode sum transcribed directly; shares no code with the fast
    path (numpy effect equations, no precomputed distances, no torch).
    """
    arr = check_stimulus(s, layout.n_electrodes)
    f_bright, f_size, f_streak = effects(arr, phi)
    ex, ey = layout.positions[:, 0], layout.positions[:, 1]
    denom_e = 2.0 * phi.rho**2 * f_size
    denom_s = 2.0 * phi.lam**2 * f_streak
    h, w = grid.grid_shape
    out = np.zeros(h * w)
    for p in range(h * w):
        seg = grid.seg_xy[p]
        cum = grid.cum_length[p]
        best = -np.inf
        for a in range(grid.n_segments):
            d2 = (seg[a, 0] - ex) ** 2 + (seg[a, 1] - ey) ** 2
            ds2 = cum[a] ** 2
            total = float(np.sum(f_bright * np.exp(-d2 / denom_e - ds2 / denom_s)))
            if total > best:
                best = total
        out[p] = best
    return out.reshape(h, w)


class PhospheneModel(BaseEstimator, TransformerMixin):
    """Estimator wrapper around the forward model.

    ``fit`` precomputes the axon map and distance cache from the geometry
    parameters; ``transform`` renders a batch of stimuli into percepts.
    All parameters are plain values so ``get_params``/``set_params`` and
    cloning work the sklearn way.
    """

    def __init__(self, rows=15, cols=15, pitch=400.0, radius=75.0, grid_shape=(49, 49),
                 field_extent=None, n_segments=500, spiral=retina.SpiralParams(),
                 patient=None):
        self.rows = rows
        self.cols = cols
        self.pitch = pitch
        self.radius = radius
        self.grid_shape = grid_shape
        self.field_extent = field_extent
        self.n_segments = n_segments
        self.spiral = spiral
        self.patient = patient

    def fit(self, X=None, y=None):
        extent = self.field_extent
        if extent is None:
            half = (max(self.rows, self.cols) - 1) / 2.0 * self.pitch
            extent = half + 2.0 * cfg.RHO_MAX
        self.layout_ = retina.build_implant(self.rows, self.cols, self.pitch, self.radius)
        self.grid_ = retina.build_axon_map(self.grid_shape, extent, self.n_segments, self.spiral)
        self.cache_ = RenderCache.build(self.grid_, self.layout_)
        self.patient_ = self.patient or PatientParams()
        return self

    def _require_fit(self):
        if not hasattr(self, "cache_"):
            raise ContractError("PhospheneModel must be fit before rendering")

    def transform(self, X, phi=None):
        self._require_fit()
        return render_batch(X, phi if phi is not None else self.patient_, self.cache_)

    def render(self, s, phi=None):
        self._require_fit()
        return render(s, phi if phi is not None else self.patient_, self.cache_)

    def render_with_grad(self, s, upstream, phi=None):
        self._require_fit()
        return render_with_grad(s, phi if phi is not None else self.patient_, self.cache_, upstream)
