"""Stimulus producers: the naive per-pixel baseline, the learned
feed-forward encoder with its end-to-end training loop, a direct
projected-gradient inverter, and the recognition-accuracy metric.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from . import config as cfg
from . import io as pio
from .data import TargetSet, fixed_phi, split_target_set
from .errors import ContractError, DimensionError, DivergenceError, ParameterError
from .forward import N_PATIENT_PARAMS, PatientParams, render_kernel
from .losses import FeatureExtractor, LossSchedule, _feature_t, laplacian_kernel, schedule_step
from .retina import pixel_index_of
from .validation import check_percept


def naive_encode(t, layout, grid):
    """Per-pixel baseline: each electrode's amplitude is the target
    brightness at its pixel; active electrodes get the fixed 20 Hz /
    0.45 ms stimulus, inactive electrodes stay all-zero rows."""
    t = check_percept(t, grid.grid_shape)
    stim = np.zeros((layout.n_electrodes, 3))
    flat = t.reshape(-1)
    for e, pos in enumerate(layout.positions):
        amp = flat[pixel_index_of(grid, pos)]
        if amp > 0:
            stim[e] = (cfg.NAIVE_FREQ, amp, cfg.NAIVE_PDUR)
    return stim


class NaiveEncoder(BaseEstimator):
    """sklearn-style wrapper around :func:`naive_encode`."""

    def __init__(self, layout=None, grid=None):
        self.layout = layout
        self.grid = grid

    def fit(self, X=None, y=None):
        if self.layout is None or self.grid is None:
            raise ContractError("NaiveEncoder needs a layout and an axon-map grid")
        return self

    def predict(self, targets):
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 2:
            targets = targets[None]
        return np.stack([naive_encode(t, self.layout, self.grid) for t in targets])


class EncoderNet(nn.Module):
    """Fully connected inverse map (target, phi) -> stimulus.

    Target path: flatten -> FC. Patient path: BatchNorm -> FC -> FC.
    The two are concatenated and passed through two FC layers giving the
    intermediate representation x; amplitudes come from an FC head on x,
    then (x, amplitudes) are concatenated, batch-normed, and feed the
    frequency and pulse-duration heads. Hidden activations are leaky
    ReLU; the three stimulus heads use ReLU, and the configured output
    scalings (amp x2, freq x20, pdur +1e-3) keep initial stimuli in range.
    """

    def __init__(self, target_dim, n_electrodes, widths=(350, 64, 320, 320), leak=0.01,
                 bn_momentum=0.01, amp_scale=2.0, freq_scale=20.0, pdur_shift=1e-3):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.target_dim = target_dim
        self.n_electrodes = n_electrodes
        self.leak = leak
        self.amp_scale = amp_scale
        self.freq_scale = freq_scale
        self.pdur_shift = pdur_shift
        self.target_fc = nn.Linear(target_dim, w1)
        self.phi_bn = nn.BatchNorm1d(N_PATIENT_PARAMS, momentum=bn_momentum)
        self.phi_fc1 = nn.Linear(N_PATIENT_PARAMS, w2)
        self.phi_fc2 = nn.Linear(w2, w2)
        self.trunk_fc1 = nn.Linear(w1 + w2, w3)
        self.trunk_fc2 = nn.Linear(w3, w4)
        self.amp_head = nn.Linear(w4, n_electrodes)
        self.head_bn = nn.BatchNorm1d(w4 + n_electrodes, momentum=bn_momentum)
        self.freq_head = nn.Linear(w4 + n_electrodes, n_electrodes)
        self.pdur_head = nn.Linear(w4 + n_electrodes, n_electrodes)
        for head in (self.amp_head, self.freq_head, self.pdur_head):
            nn.init.uniform_(head.weight, -1e-3, 1e-3)
            nn.init.zeros_(head.bias)

    def intermediate(self, t_flat, phi):
        h_t = nn.functional.leaky_relu(self.target_fc(t_flat), self.leak)
        h_p = nn.functional.leaky_relu(self.phi_fc1(self.phi_bn(phi)), self.leak)
        h_p = nn.functional.leaky_relu(self.phi_fc2(h_p), self.leak)
        x = nn.functional.leaky_relu(self.trunk_fc1(torch.cat([h_t, h_p], dim=1)), self.leak)
        return nn.functional.leaky_relu(self.trunk_fc2(x), self.leak)

    def forward(self, t_flat, phi):
        x = self.intermediate(t_flat, phi)
        amp_raw = torch.relu(self.amp_head(x))
        z = self.head_bn(torch.cat([x, amp_raw], dim=1))
        freq_raw = torch.relu(self.freq_head(z))
        pdur_raw = torch.relu(self.pdur_head(z))
        return torch.stack(
            [self.freq_scale * freq_raw, self.amp_scale * amp_raw, pdur_raw + self.pdur_shift],
            dim=2,
        )

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())


def encode(t, phi, net):
    """Inference-mode stimuli for one target or a batch (deterministic:
    BatchNorm uses running statistics)."""
    arr = np.asarray(t, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.reshape(arr.shape[0], -1).shape[1] != net.target_dim:
        raise DimensionError(
            f"target has {arr.reshape(arr.shape[0], -1).shape[1]} pixels, "
            f"net expects {net.target_dim}"
        )
    dtype = next(net.parameters()).dtype
    if isinstance(phi, PatientParams):
        phi = phi.as_vector()
    phi = np.asarray(phi, dtype=np.float64)
    phi_t = torch.as_tensor(np.broadcast_to(phi, (arr.shape[0], N_PATIENT_PARAMS)).copy(),
                            dtype=dtype)
    net.eval()
    with torch.no_grad():
        stim = net(torch.as_tensor(arr.reshape(arr.shape[0], -1), dtype=dtype), phi_t)
    out = stim.to(torch.float64).numpy()
    return out[0] if single else out


@dataclass
class LossSetup:
    """Loss configuration shared by training and evaluation."""

    schedule: LossSchedule = LossSchedule()
    fx: FeatureExtractor | None = None
    laplacian_k: int = cfg.LAPLACIAN_K
    signed: bool = False

    def kernel_t(self, dtype):
        return torch.as_tensor(laplacian_kernel(self.laplacian_k), dtype=dtype)


def _components_t(t_t, t_hat_t, alpha, beta, setup, kernel_t):
    m = (t_t - t_hat_t).abs().mean()
    resp = torch.nn.functional.conv2d(t_hat_t[:, None], kernel_t[None, None])
    s = resp.mean() if setup.signed else resp.abs().mean()
    f = _feature_t(t_t, t_hat_t, setup.fx) if setup.fx is not None else torch.zeros(())
    return m, s, f, m + alpha * s + beta * f


@dataclass
class TrainResult:
    net: EncoderNet
    log_rows: list
    best_epoch: int
    best_val_joint: float
    log_text: str = field(init=False)

    def __post_init__(self):
        self.log_text = pio.loss_rows_text(self.log_rows)


def renderer_forward(cache):
    """Forward-callable over the true model for use in training loops."""

    def fwd(stim_t, phi_t):
        return render_kernel(stim_t, phi_t, cache)

    return fwd


def train_encoder(targets, sampler, forward_fn, n_electrodes, setup=None, tcfg=None,
                  val_targets=None, initial_net=None, checkpoint_cb=None):
    """End-to-end training of the encoder against a differentiable forward.

    Per batch, patient parameters are drawn from ``sampler``, the encoder
    proposes stimuli, ``forward_fn`` renders them, and the scheduled joint
    loss is backpropagated through the forward model into the encoder.
    Returns the weights that minimized the validation joint loss, along
    with the per-epoch loss log. Fully deterministic under tcfg.seed.
    Raises DivergenceError (with the offending batch) on non-finite loss.
    """
    setup = setup or LossSetup()
    tcfg = tcfg or cfg.TrainConfig()
    if val_targets is None:
        targets, val_targets = split_target_set(targets, tcfg.val_frac, tcfg.seed)
    if len(targets) == 0 or len(val_targets) == 0:
        raise ParameterError("both train and validation splits must be nonempty")
    dtype = torch.float64 if tcfg.dtype == "float64" else torch.float32
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    h, w = targets.images.shape[1:]
    net = EncoderNet(h * w, n_electrodes, widths=tuple(tcfg.widths), leak=tcfg.leak,
                     bn_momentum=tcfg.bn_momentum, amp_scale=tcfg.amp_scale,
                     freq_scale=tcfg.freq_scale, pdur_shift=tcfg.pdur_shift).to(dtype)
    if initial_net is not None:
        net.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v
                             for k, v in initial_net.state_dict().items()})
    opt = torch.optim.SGD(net.parameters(), lr=tcfg.lr, momentum=tcfg.momentum, nesterov=True)
    kernel = setup.kernel_t(dtype)
    train_t = torch.as_tensor(targets.images, dtype=dtype)
    val_t = torch.as_tensor(val_targets.images, dtype=dtype)
    val_phi = torch.as_tensor(
        sampler.sample(np.random.default_rng(tcfg.seed + 1), len(val_targets)), dtype=dtype
    )
    n = len(targets)
    log_rows = []
    best = (np.inf, -1, None)
    for epoch in range(tcfg.epochs):
        weights, mult = schedule_step(setup.schedule, epoch)
        for group in opt.param_groups:
            group["lr"] = tcfg.lr * mult
        net.train()
        perm = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for b0 in range(0, n, tcfg.batch_size):
            idx = perm[b0 : b0 + tcfg.batch_size]
            if idx.size < 2:  # BatchNorm needs more than one sample
                continue
            t_b = train_t[idx]
            phi_b = torch.as_tensor(sampler.sample(rng, idx.size), dtype=dtype)
            stim = net(t_b.reshape(idx.size, -1), phi_b)
            percept = forward_fn(stim, phi_b)
            comps = _components_t(t_b, percept, weights.alpha, weights.beta, setup, kernel)
            loss = comps[3]
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "batch_start": int(b0), "indices": idx.tolist(),
                     "lr": tcfg.lr * mult},
                )
            opt.zero_grad()
            loss.backward()
            if tcfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(net.parameters(), tcfg.grad_clip)
            opt.step()
            sums += [float(c) for c in comps]
            batches += 1
        log_rows.append(pio.format_loss_row(epoch, "train", *(sums / max(batches, 1))))
        val_comps = _evaluate(net, val_t, val_phi, forward_fn, weights, setup, kernel,
                              tcfg.batch_size)
        log_rows.append(pio.format_loss_row(epoch, "val", *val_comps))
        if val_comps[3] < best[0]:
            best = (val_comps[3], epoch, copy.deepcopy(net.state_dict()))
        if checkpoint_cb is not None:
            checkpoint_cb(epoch, net)
    if best[2] is not None:
        net.load_state_dict(best[2])
    net.eval()
    return TrainResult(net, log_rows, best[1], best[0])


def _evaluate(net, t_all, phi_all, forward_fn, weights, setup, kernel, batch_size):
    net.eval()
    sums = np.zeros(4)
    total = 0
    with torch.no_grad():
        for b0 in range(0, t_all.shape[0], batch_size):
            t_b = t_all[b0 : b0 + batch_size]
            phi_b = phi_all[b0 : b0 + batch_size]
            stim = net(t_b.reshape(t_b.shape[0], -1), phi_b)
            percept = forward_fn(stim, phi_b)
            comps = _components_t(t_b, percept, weights.alpha, weights.beta, setup, kernel)
            sums += np.array([float(c) for c in comps]) * t_b.shape[0]
            total += t_b.shape[0]
    return sums / total


@dataclass
class InvertResult:
    stimulus: np.ndarray
    losses: list
    warning: bool = False


def invert_direct(t, phi, init, cache, steps=500, lr=0.5, setup=None, weights=None,
                  lr_min=1e-9):
    """Projected gradient descent on the stimulus for one target.

    Nonnegativity is enforced by clamping at 0 after each step; a halving
    backoff rejects steps that increase the loss, so the best-iterate loss
    is nonincreasing and never exceeds the loss of ``init``. If the
    iteration degenerates (non-finite loss or lr underflow) the best
    iterate so far is returned with ``warning=True``.
    """
    res = invert_direct_batch(t[None], phi, init[None], cache, steps=steps, lr=lr,
                              setup=setup, weights=weights, lr_min=lr_min)
    return InvertResult(res.stimulus[0], [row[0] for row in res.losses], res.warning)


def invert_direct_batch(targets, phi, init, cache, steps=500, lr=0.5, setup=None,
                        weights=None, lr_min=1e-9):
    """Batched :func:`invert_direct` with independent per-target backoff."""
    from .losses import LossWeights

    setup = setup or LossSetup()
    weights = weights or LossWeights(alpha=0.0, beta=0.0)
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[0]
    if isinstance(phi, PatientParams):
        phi = phi.as_vector()
    phi_t = torch.as_tensor(np.broadcast_to(np.asarray(phi, dtype=np.float64),
                                            (n, N_PATIENT_PARAMS)).copy())
    kernel = setup.kernel_t(torch.float64)
    t_t = torch.as_tensor(targets)

    def loss_per_sample(stim_t):
        percept = render_kernel(stim_t, phi_t, cache)
        m = (t_t - percept).abs().mean(dim=(1, 2))
        total = m
        if weights.alpha != 0.0:
            resp = torch.nn.functional.conv2d(percept[:, None], kernel[None, None])
            s = resp.mean(dim=(1, 2, 3)) if setup.signed else resp.abs().mean(dim=(1, 2, 3))
            total = total + weights.alpha * s
        if weights.beta != 0.0:
            a = setup.fx.forward_t(t_t)
            b = setup.fx.forward_t(percept)
            total = total + weights.beta * ((a - b) ** 2).mean(dim=(1, 2, 3))
        return total

    s = torch.as_tensor(np.asarray(init, dtype=np.float64)).clone()
    lr_t = torch.full((n, 1, 1), float(lr), dtype=torch.float64)
    warning = False
    s_req = s.clone().requires_grad_(True)
    loss = loss_per_sample(s_req)
    loss.sum().backward()
    grad = s_req.grad
    best_loss = loss.detach().clone()
    best_s = s.clone()
    history = [best_loss.numpy().copy()]
    cur_loss = loss.detach()
    for _ in range(steps):
        candidate = torch.clamp(s - lr_t * grad, min=0.0)
        cand_req = candidate.clone().requires_grad_(True)
        cand_loss = loss_per_sample(cand_req)
        finite = torch.isfinite(cand_loss)
        accept = finite & (cand_loss.detach() <= cur_loss)
        if not bool(finite.all()):
            warning = True
        if bool(accept.any()):
            cand_loss.sum().backward()
            mask = accept[:, None, None]
            s = torch.where(mask, candidate, s)
            grad = torch.where(mask, cand_req.grad, grad)
            cur_loss = torch.where(accept, cand_loss.detach(), cur_loss)
        lr_t = torch.where(accept[:, None, None], lr_t, lr_t * 0.5)
        improved = cur_loss < best_loss
        if bool(improved.any()):
            best_s = torch.where(improved[:, None, None], s, best_s)
            best_loss = torch.where(improved, cur_loss, best_loss)
        history.append(best_loss.numpy().copy())
        if bool((lr_t < lr_min).all()):
            warning = True
            break
    return InvertResult(best_s.numpy(), history, warning)


class DirectInverter(BaseEstimator):
    """Estimator facade over :func:`invert_direct_batch`; ``predict``
    starts from the naive encoding of each target."""

    def __init__(self, cache=None, layout=None, grid=None, phi=None, steps=500, lr=0.5,
                 setup=None, weights=None):
        self.cache = cache
        self.layout = layout
        self.grid = grid
        self.phi = phi
        self.steps = steps
        self.lr = lr
        self.setup = setup
        self.weights = weights

    def fit(self, X=None, y=None):
        if self.cache is None or self.layout is None or self.grid is None:
            raise ContractError("DirectInverter needs cache, layout and grid")
        return self

    def predict(self, targets):
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 2:
            targets = targets[None]
        init = np.stack([naive_encode(t, self.layout, self.grid) for t in targets])
        phi = self.phi or PatientParams()
        res = invert_direct_batch(targets, phi, init, self.cache, steps=self.steps,
                                  lr=self.lr, setup=self.setup, weights=self.weights)
        return res.stimulus


class _ClassifierNet(nn.Module):
    def __init__(self, h, w, n_classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        h2, w2 = h // 2 // 2, w // 2 // 2
        self.fc1 = nn.Linear(16 * h2 * w2, 64)
        self.fc2 = nn.Linear(64, n_classes)

    def forward(self, x):
        x = torch.max_pool2d(torch.relu(self.conv1(x[:, None])), 2)
        x = torch.max_pool2d(torch.relu(self.conv2(x)), 2)
        x = torch.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


class DigitClassifier(BaseEstimator):
    """Small conv classifier used only to score phosphene recognizability.

    ``fit`` trains until the accuracy on the supplied targets reaches
    ``target_acc`` (or epochs run out), records that accuracy, and
    freezes the weights.
    """

    def __init__(self, epochs=80, lr=1e-3, batch_size=64, seed=0, target_acc=0.99):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.target_acc = target_acc

    def fit(self, images, labels):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        torch.manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        n, h, w = images.shape
        self.net_ = _ClassifierNet(h, w, int(labels.max()) + 1).to(torch.float32)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        x = torch.as_tensor(images, dtype=torch.float32)
        y = torch.as_tensor(labels)
        loss_fn = nn.CrossEntropyLoss()
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            self.net_.train()
            for b0 in range(0, n, self.batch_size):
                idx = perm[b0 : b0 + self.batch_size]
                opt.zero_grad()
                loss = loss_fn(self.net_(x[idx]), y[idx])
                loss.backward()
                opt.step()
            if self._accuracy(x, y) >= self.target_acc:
                break
        self.target_accuracy_ = self._accuracy(x, y)
        for p in self.net_.parameters():
            p.requires_grad_(False)
        self.net_.eval()
        self.frozen_ = True
        return self

    def _accuracy(self, x, y):
        self.net_.eval()
        with torch.no_grad():
            pred = self.net_(x).argmax(dim=1)
        return float((pred == y).to(torch.float64).mean())

    def predict(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float64), dtype=torch.float32)
        with torch.no_grad():
            return self.net_(x).argmax(dim=1).numpy()

    def score(self, images, labels):
        return float(np.mean(self.predict(images) == np.asarray(labels)))


def recognition_accuracy(phosphenes, labels, clf):
    """Classifier accuracy on phosphenes divided by its recorded accuracy
    on the original targets. Requires a frozen classifier."""
    if not getattr(clf, "frozen_", False):
        raise ContractError("classifier must be fit and frozen before computing RA")
    if clf.target_accuracy_ <= 0:
        raise ContractError("classifier has no recorded target accuracy")
    return clf.score(phosphenes, labels) / clf.target_accuracy_


class NeuralEncoder(BaseEstimator):
    """Learned inverse model with an sklearn fit/predict surface.

    ``fit`` runs :func:`train_encoder` against the supplied forward
    callable (true renderer by default); ``predict`` encodes targets at a
    fixed or per-target phi. ``embed`` exposes the intermediate
    representation (the clustering/export hook).
    """

    def __init__(self, cache=None, sampler=None, setup=None, tcfg=None, forward_fn=None,
                 n_electrodes=None):
        self.cache = cache
        self.sampler = sampler
        self.setup = setup
        self.tcfg = tcfg
        self.forward_fn = forward_fn
        self.n_electrodes = n_electrodes

    def fit(self, targets, val_targets=None):
        if isinstance(targets, np.ndarray):
            targets = TargetSet(targets)
        fwd = self.forward_fn or renderer_forward(self.cache)
        n_e = self.n_electrodes or self.cache.n_e
        sampler = self.sampler or fixed_phi(PatientParams())
        self.result_ = train_encoder(targets, sampler, fwd, n_e, setup=self.setup,
                                     tcfg=self.tcfg, val_targets=val_targets)
        self.net_ = self.result_.net
        self.log_rows_ = self.result_.log_rows
        return self

    def predict(self, targets, phi=None):
        phi = phi if phi is not None else PatientParams()
        return encode(targets, phi, self.net_)

    def embed(self, targets, phi=None):
        phi = phi if phi is not None else PatientParams()
        arr = np.asarray(targets, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        dtype = next(self.net_.parameters()).dtype
        if isinstance(phi, PatientParams):
            phi = phi.as_vector()
        phi_t = torch.as_tensor(
            np.broadcast_to(np.asarray(phi), (arr.shape[0], N_PATIENT_PARAMS)).copy(),
            dtype=dtype)
        self.net_.eval()
        with torch.no_grad():
            x = self.net_.intermediate(
                torch.as_tensor(arr.reshape(arr.shape[0], -1), dtype=dtype), phi_t)
        return x.to(torch.float64).numpy()


def save_encoder(path, net, meta=None):
    arrays = {k: v.detach().to(torch.float64).numpy() for k, v in net.state_dict().items()}
    info = {"target_dim": net.target_dim, "n_electrodes": net.n_electrodes,
            "widths": [net.target_fc.out_features, net.phi_fc1.out_features,
                       net.trunk_fc1.out_features, net.trunk_fc2.out_features],
            "leak": net.leak, "amp_scale": net.amp_scale, "freq_scale": net.freq_scale,
            "pdur_shift": net.pdur_shift, "kind": "encoder"}
    info.update(meta or {})
    pio.save_tensors(path, arrays, info)


def load_encoder(path):
    arrays, meta = pio.load_tensors(path)
    net = EncoderNet(int(meta["target_dim"]), int(meta["n_electrodes"]),
                     widths=tuple(meta["widths"]), leak=meta.get("leak", 0.01),
                     amp_scale=meta.get("amp_scale", 2.0),
                     freq_scale=meta.get("freq_scale", 20.0),
                     pdur_shift=meta.get("pdur_shift", 1e-3))
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    for key, param in net.state_dict().items():
        state[key] = state[key].to(param.dtype).reshape(param.shape)
    net.load_state_dict(state)
    net.eval()
    return net, meta
