"""Surrogate forward pipeline: random-stimulus dataset generation, the
surrogate network and its training, and the encoder-exploitation gap
diagnostic that compares the surrogate against the true model on
encoder-proposed versus random stimuli.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from . import config as cfg
from . import io as pio
from .errors import ContractError, DimensionError, DivergenceError, ParameterError
from .forward import N_PATIENT_PARAMS, PatientParams, render_batch
from .losses import mae
from .validation import check_range


@dataclass(frozen=True)
class SurrogateDatasetSpec:
    """Random-stimulus recipe: per sample, an active electrode subset gets
    uniform amplitude/frequency draws, and a disjoint noise subset gets
    exactly one of amplitude or frequency nonzero (invisible under the
    true model). Pulse duration is held constant (the surrogate does not
    consume it)."""

    n_samples: int = 50000
    active_range: tuple = (1, 30)
    amp_range: tuple = (1.0, 10.0)
    freq_range: tuple = (1.0, 200.0)
    noise_range: tuple = (10, 100)
    pdur_value: float = cfg.NAIVE_PDUR
    train_frac: float = 0.8

    def __post_init__(self):
        if self.n_samples < 1:
            raise ParameterError("n_samples must be >= 1")
        check_range(*self.active_range, "active electrode count")
        check_range(*self.amp_range, "amplitude")
        check_range(*self.freq_range, "frequency")
        check_range(*self.noise_range, "noise electrode count")
        if not 0.0 < self.train_frac < 1.0:
            raise ParameterError(f"train_frac must be in (0, 1), got {self.train_frac}")

    def validate_for(self, n_electrodes):
        if self.active_range[1] + self.noise_range[1] > n_electrodes:
            raise ParameterError(
                f"active ({self.active_range[1]}) + noise ({self.noise_range[1]}) electrodes "
                f"exceed the implant's {n_electrodes}"
            )

    @classmethod
    def from_config(cls, sc):
        return cls(sc.n_samples, tuple(sc.active_range), tuple(sc.amp_range),
                   tuple(sc.freq_range), tuple(sc.noise_range), sc.pdur_value, sc.train_frac)


def sample_stimuli(spec, n_electrodes, rng, n):
    """Draw n spec-conforming stimuli, shape (n, n_e, 3)."""
    spec.validate_for(n_electrodes)
    out = np.zeros((n, n_electrodes, 3))
    for i in range(n):
        k_active = int(rng.integers(spec.active_range[0], spec.active_range[1] + 1))
        k_noise = int(rng.integers(spec.noise_range[0], spec.noise_range[1] + 1))
        chosen = rng.choice(n_electrodes, size=k_active + k_noise, replace=False)
        active, noise = chosen[:k_active], chosen[k_active:]
        out[i, active, 0] = rng.uniform(*spec.freq_range, size=k_active)
        out[i, active, 1] = rng.uniform(*spec.amp_range, size=k_active)
        out[i, active, 2] = spec.pdur_value
        amp_side = rng.random(k_noise) < 0.5
        amps = rng.uniform(*spec.amp_range, size=k_noise)
        freqs = rng.uniform(*spec.freq_range, size=k_noise)
        out[i, noise, 1] = np.where(amp_side, amps, 0.0)
        out[i, noise, 0] = np.where(amp_side, 0.0, freqs)
        out[i, noise, 2] = spec.pdur_value
    return out


@dataclass
class SurrogateDataset:
    stimuli: np.ndarray  # (N, n_e, 3)
    percepts: np.ndarray  # (N, H, W)
    phi: PatientParams
    n_train: int
    seed: int

    @property
    def train(self):
        return self.stimuli[: self.n_train], self.percepts[: self.n_train]

    @property
    def test(self):
        return self.stimuli[self.n_train :], self.percepts[self.n_train :]


def gen_surrogate_dataset(spec, phi, cache, seed=0):
    """Render spec-conforming random stimuli through the true model at a
    fixed phi. Deterministic under the seed; the first train_frac of the
    samples form the training split."""
    rng = np.random.default_rng(seed)
    stimuli = sample_stimuli(spec, cache.n_e, rng, spec.n_samples)
    percepts = render_batch(stimuli, phi, cache)
    n_train = int(round(spec.n_samples * spec.train_frac))
    return SurrogateDataset(stimuli, percepts, phi, n_train, seed)


def save_surrogate_dataset(dataset, out_dir):
    """Persist as paired stimulus CSVs + raw-float percepts + a manifest."""
    os.makedirs(os.path.join(out_dir, "stimuli"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "percepts"), exist_ok=True)
    entries = []
    for i, (stim, percept) in enumerate(zip(dataset.stimuli, dataset.percepts)):
        s_rel = os.path.join("stimuli", f"{i:06d}.csv")
        p_rel = os.path.join("percepts", f"{i:06d}.f32")
        pio.write_stimulus_csv(os.path.join(out_dir, s_rel), stim)
        pio.write_percept_raw(os.path.join(out_dir, p_rel), percept)
        entries.append({"stimulus": s_rel, "percept": p_rel})
    manifest = {"n_samples": len(entries), "n_train": dataset.n_train, "seed": dataset.seed,
                "phi": dataset.phi.as_vector().tolist(), "pairs": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_surrogate_dataset(out_dir):
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    stimuli, percepts = [], []
    for pair in manifest["pairs"]:
        stimuli.append(pio.read_stimulus_csv(os.path.join(out_dir, pair["stimulus"])))
        percepts.append(pio.read_percept_raw(os.path.join(out_dir, pair["percept"])))
    return SurrogateDataset(np.stack(stimuli), np.stack(percepts),
                            PatientParams.from_vector(np.asarray(manifest["phi"])),
                            int(manifest["n_train"]), int(manifest["seed"]))


class SurrogateNet(nn.Module):
    """Fully connected surrogate of the forward model.

    The stimulus is split into amplitude and frequency vectors (pulse
    duration is not consumed), each passed through an FC layer; their
    concatenation feeds another FC layer. In parallel the elementwise
    amp*freq product passes through its own FC layer; both paths merge
    into a final FC sized to the percept grid. Registered patient
    parameters pin the phi the net was fitted for.
    """

    def __init__(self, n_electrodes, grid_shape, widths=(128, 256, 128), leak=0.01):
        super().__init__()
        w_in, w_mid, w_prod = widths
        self.n_electrodes = n_electrodes
        self.grid_shape = tuple(grid_shape)
        self.leak = leak
        self.amp_fc = nn.Linear(n_electrodes, w_in)
        self.freq_fc = nn.Linear(n_electrodes, w_in)
        self.merge_fc = nn.Linear(2 * w_in, w_mid)
        self.prod_fc = nn.Linear(n_electrodes, w_prod)
        out = grid_shape[0] * grid_shape[1]
        self.out_fc = nn.Linear(w_mid + w_prod, out)
        self.register_buffer("phi_vec", torch.zeros(N_PATIENT_PARAMS, dtype=torch.float64))

    def forward(self, stim):
        freq, amp = stim[..., 0], stim[..., 1]
        ha = nn.functional.leaky_relu(self.amp_fc(amp), self.leak)
        hf = nn.functional.leaky_relu(self.freq_fc(freq), self.leak)
        h = nn.functional.leaky_relu(self.merge_fc(torch.cat([ha, hf], dim=1)), self.leak)
        hp = nn.functional.leaky_relu(self.prod_fc(amp * freq), self.leak)
        out = torch.relu(self.out_fc(torch.cat([h, hp], dim=1)))
        return out.reshape(stim.shape[0], *self.grid_shape)


@dataclass
class SurrogateResult:
    net: SurrogateNet
    log_rows: list
    val_mae: float
    log_text: str = field(init=False)

    def __post_init__(self):
        self.log_text = pio.loss_rows_text(self.log_rows)


def train_surrogate(dataset, epochs=45, batch_size=64, lr=1e-3, weight_decay=1e-2,
                    widths=(128, 256, 128), seed=0):
    """Fit the surrogate with decoupled-weight-decay Adam and MAE loss.

    Deterministic under the seed; per-epoch train/val MAE rows go to the
    log and the final validation MAE is recorded on the result.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    stim_tr, perc_tr = dataset.train
    stim_te, perc_te = dataset.test
    h, w = perc_tr.shape[1:]
    net = SurrogateNet(stim_tr.shape[1], (h, w), widths=tuple(widths)).to(torch.float32)
    with torch.no_grad():
        net.phi_vec.copy_(torch.as_tensor(dataset.phi.as_vector()))
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    x_tr = torch.as_tensor(stim_tr, dtype=torch.float32)
    y_tr = torch.as_tensor(perc_tr, dtype=torch.float32)
    x_te = torch.as_tensor(stim_te, dtype=torch.float32)
    y_te = torch.as_tensor(perc_te, dtype=torch.float32)
    n = x_tr.shape[0]
    log_rows = []
    val_mae = _surrogate_mae(net, x_te, y_te, batch_size)
    log_rows.append(["-1", "val", f"{val_mae:.9g}"])  # untrained baseline
    for epoch in range(epochs):
        net.train()
        perm = rng.permutation(n)
        total = 0.0
        for b0 in range(0, n, batch_size):
            idx = perm[b0 : b0 + batch_size]
            opt.zero_grad()
            loss = (net(x_tr[idx]) - y_tr[idx]).abs().mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite surrogate loss at epoch {epoch}",
                                      {"epoch": epoch, "batch_start": int(b0)})
            loss.backward()
            opt.step()
            total += float(loss) * idx.size
        val_mae = _surrogate_mae(net, x_te, y_te, batch_size)
        log_rows.append([str(epoch), "train", f"{total / n:.9g}"])
        log_rows.append([str(epoch), "val", f"{val_mae:.9g}"])
    net.eval()
    return SurrogateResult(net, log_rows, val_mae)


def _surrogate_mae(net, x, y, batch_size):
    net.eval()
    total = 0.0
    with torch.no_grad():
        for b0 in range(0, x.shape[0], batch_size):
            xb, yb = x[b0 : b0 + batch_size], y[b0 : b0 + batch_size]
            total += float((net(xb) - yb).abs().mean()) * xb.shape[0]
    return total / x.shape[0]


def surrogate_render(s, net, phi=None):
    """Evaluate the surrogate on one stimulus or a batch (clamped at 0 by
    the output ReLU). Refuses a phi different from the one the surrogate
    was fitted for."""
    if phi is not None:
        vec = phi.as_vector() if isinstance(phi, PatientParams) else np.asarray(phi)
        if not np.allclose(vec, net.phi_vec.numpy(), rtol=1e-9, atol=1e-12):
            raise ContractError(
                "surrogate was fitted for different patient parameters; "
                "fit a separate surrogate per phi"
            )
    arr = np.asarray(s, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.shape[1] != net.n_electrodes:
        raise DimensionError(f"stimulus has {arr.shape[1]} electrodes, net expects {net.n_electrodes}")
    dtype = next(net.parameters()).dtype
    net.eval()
    with torch.no_grad():
        out = net(torch.as_tensor(arr, dtype=dtype)).to(torch.float64).numpy()
    return out[0] if single else out


def surrogate_forward(net):
    """Training-loop forward callable; enforces the per-phi discipline."""

    def fwd(stim_t, phi_t):
        ref = net.phi_vec.to(phi_t.dtype)
        if not bool(torch.allclose(phi_t, ref.expand_as(phi_t), rtol=1e-5, atol=1e-6)):
            raise ContractError("surrogate evaluated at a phi it was not fitted for")
        return net(stim_t)

    return fwd


class SurrogateModel(BaseEstimator):
    """sklearn-style facade: fit(stimuli, percepts) / predict(stimuli)."""

    def __init__(self, phi=None, epochs=45, batch_size=64, lr=1e-3, weight_decay=1e-2,
                 widths=(128, 256, 128), seed=0, train_frac=0.8):
        self.phi = phi
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.widths = widths
        self.seed = seed
        self.train_frac = train_frac

    def fit(self, stimuli, percepts):
        stimuli = np.asarray(stimuli, dtype=np.float64)
        percepts = np.asarray(percepts, dtype=np.float64)
        phi = self.phi or PatientParams()
        n_train = int(round(stimuli.shape[0] * self.train_frac))
        dataset = SurrogateDataset(stimuli, percepts, phi, n_train, self.seed)
        self.result_ = train_surrogate(dataset, epochs=self.epochs,
                                       batch_size=self.batch_size, lr=self.lr,
                                       weight_decay=self.weight_decay,
                                       widths=tuple(self.widths), seed=self.seed)
        self.net_ = self.result_.net
        self.val_mae_ = self.result_.val_mae
        return self

    def predict(self, stimuli):
        return surrogate_render(stimuli, self.net_)


@dataclass
class GapReport:
    """Per-target surrogate-vs-true discrepancies plus the random-stimulus
    baseline; all gaps are nonnegative MAEs."""

    rows: list  # (target_id, gap_mae, joint_true, joint_surrogate)
    mean_gap_proposed: float
    mean_gap_random: float

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(pio.GAP_HEADER)
            for row in self.rows:
                writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}"])


def exploit_gap(encode_fn, net, cache, targets, spec, seed=0, weights=None, fx=None):
    """Measure how far encoder-proposed stimuli drive the surrogate away
    from the true model, against a random spec-conforming baseline.

    ``encode_fn(target) -> stimulus`` is the (surrogate-trained) encoder.
    Returns a GapReport with per-target records of
    mae(surrogate(s), render(s)) and both joint losses versus the target.
    """
    from .losses import LossWeights, joint

    weights = weights or LossWeights(alpha=0.0, beta=0.0)
    phi = PatientParams.from_vector(net.phi_vec.numpy())
    targets = np.asarray(targets, dtype=np.float64)
    rows = []
    gaps = []
    for i, t in enumerate(targets):
        s = encode_fn(t)
        p_true = render_batch(s[None], phi, cache)[0]
        p_surr = surrogate_render(s, net)
        gap = mae(p_surr, p_true)
        rows.append((i, gap, joint(t, p_true, weights, fx), joint(t, p_surr, weights, fx)))
        gaps.append(gap)
    rng = np.random.default_rng(seed)
    random_stim = sample_stimuli(spec, cache.n_e, rng, targets.shape[0])
    p_true_r = render_batch(random_stim, phi, cache)
    p_surr_r = surrogate_render(random_stim, net)
    random_gaps = [mae(a, b) for a, b in zip(p_surr_r, p_true_r)]
    return GapReport(rows, float(np.mean(gaps)), float(np.mean(random_gaps)))


def save_surrogate(path, net, meta=None):
    arrays = {k: v.detach().to(torch.float64).numpy() for k, v in net.state_dict().items()}
    info = {"n_electrodes": net.n_electrodes, "grid_shape": list(net.grid_shape),
            "widths": [net.amp_fc.out_features, net.merge_fc.out_features,
                       net.prod_fc.out_features],
            "kind": "surrogate"}
    info.update(meta or {})
    pio.save_tensors(path, arrays, info)


def load_surrogate(path):
    arrays, meta = pio.load_tensors(path)
    net = SurrogateNet(int(meta["n_electrodes"]), tuple(meta["grid_shape"]),
                       widths=tuple(meta["widths"]))
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    for key, param in net.state_dict().items():
        state[key] = state[key].to(param.dtype).reshape(param.shape)
    net.load_state_dict(state)
    net.eval()
    return net, meta
