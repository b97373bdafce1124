"""Default constants and run configuration.

Every tunable that the model family leaves open is pinned here so that a
run directory plus its resolved config file fully reproduces a result.
Values marked "artifact choice" have no external source; they were chosen
during development and are safe to override per run.
"""

import copy
import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import DataFormatError

# Floor for the effect scalings that divide the Gaussian denominators.
EPS_SCALE = 1e-3

# Pulse duration (ms) at which the brightness pdur factor is neutral.
PDUR_REF = 0.45

# Effect-equation coefficients a0..a9 (see forward.effects for semantics).
# a2, a3, a5 carry the documented amplitude/frequency/size sensitivities;
# a1 defaults to 0 (pulse duration does not modulate brightness); a9 is
# reserved.
DEFAULT_COEFFS = (1.0, 0.0, 1.0, 0.05, 10.0, 0.2, 0.05, 1.225, 0.5, 0.0)

DEFAULT_RHO = 300.0
DEFAULT_LAMBDA = 800.0

# Largest radial decay the percept field must accommodate; sets the margin
# of the pixel-grid -> retina mapping (implant half extent + 2 * RHO_MAX).
RHO_MAX = 800.0

# Uniform sampling ranges for patient parameters (min, max). Parameters
# not listed are held at their defaults. rho/lambda spans cover the four
# reference corners (150/800 x 100/1500); a2/a3/a5 spans are artifact
# choices.
SAMPLER_RANGES = {
    "rho": (100.0, 800.0),
    "lam": (100.0, 2000.0),
    "a2": (0.2, 2.0),
    "a3": (0.01, 0.1),
    "a5": (0.05, 0.5),
}

# The four (rho, lambda) reference corners used by sweeps and reports.
PHI_CORNERS = ((150.0, 100.0), (150.0, 1500.0), (800.0, 100.0), (800.0, 1500.0))

# Naive-encoder constants: fixed frequency (Hz) and pulse duration (ms).
NAIVE_FREQ = 20.0
NAIVE_PDUR = 0.45

# Display clipping ceiling when mapping percepts to 8-bit grayscale.
DISPLAY_CLIP = 2.0

# Segment-pruning threshold: a (pixel, segment) pair whose best-case
# brightness is below this can be dropped from a render cache.
PRUNE_THRESHOLD = 1e-9

# Default feature-extractor recipe: channel counts of the conv stack and
# the seed for its fixed random weights (artifact choice).
FEATURE_CHANNELS = (8, 16, 32)
FEATURE_SEED = 7
FEATURE_IN_CHANNELS = 3

LAPLACIAN_K = 5

# Reporting loss weights: alpha and beta used when quoting joint-loss
# numbers outside a schedule.
REPORT_ALPHA = 0.0
REPORT_BETA = 8e-5


@dataclass
class ImplantConfig:
    rows: int = 15
    cols: int = 15
    pitch_um: float = 400.0
    radius_um: float = 75.0
    center: tuple = (0.0, 0.0)


@dataclass
class FieldConfig:
    shape: tuple = (49, 49)
    extent_um: float | None = None  # None -> implant half extent + 2*RHO_MAX
    n_segments: int = 500
    spiral_mode: str = "spiral"  # "spiral" | "straight"
    spiral_curvature: float = 1.0
    eye: str = "right"


@dataclass
class ScheduleConfig:
    boundaries: tuple = (5, 10, 15)
    alphas: tuple = (0.1, 0.05, 0.02, 0.0)
    betas: tuple = (0.0, 2e-5, 5e-5, 8e-5)
    warmup_length: int = 5
    warmup_lr_divisor: float = 10.0
    post_warmup_lr_factor: float = 0.5


@dataclass
class LossConfig:
    laplacian_k: int = LAPLACIAN_K
    signed_smooth: bool = False
    feature_channels: tuple = FEATURE_CHANNELS
    feature_seed: int = FEATURE_SEED
    feature_tap: str = ""  # "" -> last conv layer
    feature_weights: str = ""  # optional container path
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class TrainConfig:
    """Encoder training hyperparameters.

    Output scalings follow the reference recipe: amplitude x2, frequency
    x20, pulse duration +1e-3 ms. lr/momentum are artifact choices.
    """

    batch_size: int = 16
    lr: float = 0.03
    momentum: float = 0.9
    epochs: int = 50
    seed: int = 0
    amp_scale: float = 2.0
    freq_scale: float = 20.0
    pdur_shift: float = 1e-3
    grad_clip: float = 1.0
    val_frac: float = 0.1
    widths: tuple = (350, 64, 320, 320)
    leak: float = 0.01
    bn_momentum: float = 0.01  # running-stats decay 0.99
    dtype: str = "float32"


@dataclass
class SurrogateConfig:
    n_samples: int = 50000
    active_range: tuple = (1, 30)
    amp_range: tuple = (1.0, 10.0)
    freq_range: tuple = (1.0, 200.0)
    noise_range: tuple = (10, 100)
    pdur_value: float = 0.45
    train_frac: float = 0.8
    epochs: int = 45
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2  # decoupled (AdamW); artifact choice
    widths: tuple = (128, 256, 128)
    seed: int = 0


@dataclass
class RunConfig:
    implant: ImplantConfig = field(default_factory=ImplantConfig)
    field_spec: FieldConfig = field(default_factory=FieldConfig)
    patient: dict = field(default_factory=dict)  # overrides for rho/lam/a0..a9
    sampler: dict = field(default_factory=lambda: copy.deepcopy(SAMPLER_RANGES))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    display_clip: float = DISPLAY_CLIP
    prune_threshold: float = 0.0  # 0 disables pruning
    seed: int = 0

    def resolved_extent(self):
        if self.field_spec.extent_um is not None:
            return float(self.field_spec.extent_um)
        half = (max(self.implant.rows, self.implant.cols) - 1) / 2.0 * self.implant.pitch_um
        return half + 2.0 * RHO_MAX


def desk_config():
    """Small configuration for CPU-scale runs: 6x6 implant, 25x25 percepts."""
    cfg = RunConfig()
    cfg.implant = ImplantConfig(rows=6, cols=6, pitch_um=400.0, radius_um=75.0)
    cfg.field_spec = FieldConfig(shape=(25, 25), n_segments=64)
    cfg.train = TrainConfig(widths=(128, 32, 128, 128), epochs=20)
    cfg.surrogate = SurrogateConfig(
        n_samples=5000, active_range=(1, 10), noise_range=(5, 20), widths=(96, 192, 96)
    )
    return cfg


def paper_config():
    """Full-scale configuration: 15x15 implant, 49x49 percepts, 500 segments."""
    return RunConfig()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _merge_dataclass(dc, data, path):
    for key, value in data.items():
        if not hasattr(dc, key):
            raise DataFormatError(f"unknown config key {path}{key}")
        current = getattr(dc, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge_dataclass(current, value, f"{path}{key}.")
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            setattr(dc, key, tuple(value))
        else:
            setattr(dc, key, value)


def load_config(path=None, base="paper"):
    """Load a YAML run config, merged over the named base preset."""
    cfg = desk_config() if base == "desk" else paper_config()
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise DataFormatError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"config {path} must be a mapping")
    base_name = data.pop("base", base)
    if base_name != base:
        cfg = desk_config() if base_name == "desk" else paper_config()
    _merge_dataclass(cfg, data, "")
    return cfg


def save_config(cfg, path):
    """Write the fully resolved config as YAML (one copy per run directory)."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(_to_plain(cfg), fh, sort_keys=False)
