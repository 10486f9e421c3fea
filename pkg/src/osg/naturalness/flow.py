"""Masked autoregressive flow (MAF) density model over scenario parameters.

Training runs in torch (float64, single thread, seeded). Inference runs in
plain numpy from the exported weights, so a saved ``.flow`` file is all a
consumer needs.

Direction convention: ``inverse`` maps data to the latent normal space
(the density direction, one pass), ``forward`` maps latent to data
(sequential over dimensions).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from osg.scenario import ConcreteScenario, DimensionError

FORMAT_NAME = "osg-flow"
FORMAT_VERSION = 1
MIN_SAMPLES = 200
LOG_2PI = math.log(2 * math.pi)


class FlowError(Exception):
    pass


class TooFewSamplesError(FlowError, ValueError):
    pass


class NonFiniteLossError(FlowError, FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class FlowHyper:
    n_flows: int = 5
    hidden: tuple[int, ...] = (64, 64)
    alpha_clamp: float = 7.0
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (60, 85)
    lr_decay: float = 0.5
    val_fraction: float = 0.1
    patience: int = 10


@dataclass
class FlowModel:
    """Trained flow. Immutable by convention once built."""

    ls_id: str
    dim: int
    hidden: tuple[int, ...]
    alpha_clamp: float
    # per flow: list of (weight, bias) with weights already masked
    layers: list[list[tuple[np.ndarray, np.ndarray]]]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    train_loglik_sorted: np.ndarray
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.feature_std <= 0):
            raise FlowError("feature std must be positive")

    @property
    def n_flows(self) -> int:
        return len(self.layers)


# ---------------------------------------------------------------------------
# masks

def made_masks(dim: int, hidden: tuple[int, ...]) -> list[np.ndarray]:
    """Autoregressive masks for a MADE conditioner, output last.

    Inputs carry degrees 1..D, hidden units cycle over 1..max(D-1, 1); the
    (mu, alpha) outputs for dimension d see only hidden units of degree < d.
    """
    in_deg = np.arange(1, dim + 1)
    top = max(dim - 1, 1)
    degs = [in_deg] + [np.arange(h) % top + 1 for h in hidden]
    masks = [(degs[i + 1][:, None] >= degs[i][None, :]).astype(float)
             for i in range(len(hidden))]
    out_deg = np.concatenate([in_deg, in_deg])
    masks.append((out_deg[:, None] > degs[-1][None, :]).astype(float))
    return masks


# ---------------------------------------------------------------------------
# numpy inference

def _conditioner(model: FlowModel, k: int, h: np.ndarray):
    a = h
    layers = model.layers[k]
    for w, b in layers[:-1]:
        a = np.tanh(a @ w.T + b)
    w, b = layers[-1]
    out = a @ w.T + b
    mu, alpha = out[:, :model.dim], out[:, model.dim:]
    return mu, np.clip(alpha, -model.alpha_clamp, model.alpha_clamp)


def inverse(model: FlowModel, x: np.ndarray):
    """Standardized data -> latent. Returns (z, sum of log-det of this map)."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    logdet = np.zeros(len(h))
    for k in range(model.n_flows):
        if k:
            h = h[:, ::-1]
        mu, alpha = _conditioner(model, k, h)
        h = (h - mu) * np.exp(-alpha)
        logdet -= alpha.sum(axis=1)
    return h, logdet


def single_flow_forward(model: FlowModel, k: int, u: np.ndarray) -> np.ndarray:
    """Invert flow ``k`` alone: its latent side ``u`` back to its input side."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    x = np.zeros_like(u)
    for d in range(model.dim):
        mu, alpha = _conditioner(model, k, x)
        x[:, d] = u[:, d] * np.exp(alpha[:, d]) + mu[:, d]
    return x


def flow_log_det(model: FlowModel, k: int, u: np.ndarray) -> np.ndarray:
    """log|det| of ``single_flow_forward`` at ``u``; equals the summed alphas."""
    x = single_flow_forward(model, k, u)
    return _conditioner(model, k, x)[1].sum(axis=1)


def forward(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """Latent -> standardized data."""
    h = np.atleast_2d(np.asarray(z, dtype=float))
    for k in reversed(range(model.n_flows)):
        h = single_flow_forward(model, k, h)
        if k:
            h = h[:, ::-1]
    return h


def standardize(model: FlowModel, values) -> np.ndarray:
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[1] != model.dim:
        raise DimensionError(f"{model.ls_id}: expected {model.dim} values, got {v.shape[1]}")
    return (v - model.feature_mean) / model.feature_std


def log_likelihood_batch(model: FlowModel, values) -> np.ndarray:
    """Log-density of raw (unstandardized) parameter vectors, one per row."""
    z, logdet = inverse(model, standardize(model, values))
    base = -0.5 * (z * z).sum(axis=1) - 0.5 * model.dim * LOG_2PI
    return base + logdet - np.log(model.feature_std).sum()


def log_likelihood(model: FlowModel, cs: ConcreteScenario | np.ndarray) -> float:
    values = cs.values if isinstance(cs, ConcreteScenario) else cs
    if np.ndim(values) != 1:
        raise DimensionError("log_likelihood takes a single parameter vector")
    return float(log_likelihood_batch(model, values)[0])


def nat_norm(model: FlowModel, loglik: float) -> float:
    """Empirical CDF rank of ``loglik`` among the training log-likelihoods."""
    ref = model.train_loglik_sorted
    lo = np.searchsorted(ref, loglik, side="left")
    hi = np.searchsorted(ref, loglik, side="right")
    return float((lo + 0.5 * (hi - lo)) / len(ref))


def sample(model: FlowModel, n: int, seed: int = 0) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal((n, model.dim))
    return forward(model, z) * model.feature_std + model.feature_mean


# ---------------------------------------------------------------------------
# training

def _torch_made(torch, dim: int, hidden: tuple[int, ...]):
    nn = torch.nn

    class MaskedLinear(nn.Linear):
        def __init__(self, n_in, n_out, mask):
            super().__init__(n_in, n_out, dtype=torch.float64)
            self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float64))

        def forward(self, x):
            return nn.functional.linear(x, self.weight * self.mask, self.bias)

    masks = made_masks(dim, hidden)
    widths = [dim, *hidden, 2 * dim]
    layers = [MaskedLinear(widths[i], widths[i + 1], masks[i]) for i in range(len(masks))]
    with torch.no_grad():
        # start near the identity map
        layers[-1].weight.mul_(0.01)
        layers[-1].bias.zero_()
    return nn.ModuleList(layers)


def _torch_loglik(torch, mades, x, dim: int, clamp: float):
    h = x
    logdet = torch.zeros(len(x), dtype=torch.float64)
    for k, made in enumerate(mades):
        if k:
            h = torch.flip(h, dims=(1,))
        a = h
        for layer in made[:-1]:
            a = torch.tanh(layer(a))
        out = made[-1](a)
        mu, alpha = out[:, :dim], torch.clamp(out[:, dim:], -clamp, clamp)
        h = (h - mu) * torch.exp(-alpha)
        logdet = logdet - alpha.sum(dim=1)
    return -0.5 * (h * h).sum(dim=1) - 0.5 * dim * LOG_2PI + logdet


def _export(mades) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    return [[((layer.weight * layer.mask).detach().numpy().copy(),
              layer.bias.detach().numpy().copy()) for layer in made] for made in mades]


def train_flow(samples, hyper: FlowHyper | None = None, seed: int = 0,
               ls_id: str = "") -> FlowModel:
    """Fit a MAF by maximum likelihood on ``samples`` (EventSamples or an array)."""
    import torch

    hyper = hyper or FlowHyper()
    data = np.asarray([getattr(s, "features", s) for s in samples], dtype=float)
    if data.ndim != 2 or len(data) < MIN_SAMPLES:
        raise TooFewSamplesError(f"need at least {MIN_SAMPLES} samples, got {len(data)}")
    if data.shape[1] < 1 or not np.isfinite(data).all():
        raise FlowError("samples must be finite vectors of dimension >= 1")
    dim = data.shape[1]

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = max(1, int(round(hyper.val_fraction * len(data))))
    val, train = data[order[:n_val]], data[order[n_val:]]

    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    log_std = float(np.log(std).sum())
    t_train = torch.as_tensor((train - mean) / std)
    t_val = torch.as_tensor((val - mean) / std)

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        torch.manual_seed(seed)
        mades = torch.nn.ModuleList(_torch_made(torch, dim, hyper.hidden)
                                    for _ in range(hyper.n_flows))
        opt = torch.optim.Adam(mades.parameters(), lr=hyper.lr)
        sched = torch.optim.lr_scheduler.MultiStepLR(
            opt, milestones=list(hyper.lr_decay_epochs), gamma=hyper.lr_decay)
        gen = torch.Generator().manual_seed(seed)

        def mean_ll(t):
            with torch.no_grad():
                return float(_torch_loglik(torch, mades, t, dim, hyper.alpha_clamp).mean()) - log_std

        history: list[float] = []
        best_val, best_state, stall = -math.inf, None, 0
        for epoch in range(1, hyper.epochs + 1):
            perm = torch.randperm(len(t_train), generator=gen)
            for i in range(0, len(perm), hyper.batch_size):
                batch = t_train[perm[i:i + hyper.batch_size]]
                loss = -_torch_loglik(torch, mades, batch, dim, hyper.alpha_clamp).mean()
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
            sched.step()
            history.append(mean_ll(t_train))
            if not math.isfinite(history[-1]):
                raise NonFiniteLossError(epoch)
            v = mean_ll(t_val)
            if v > best_val:
                best_val, stall = v, 0
                best_state = {k: t.clone() for k, t in mades.state_dict().items()}
            else:
                stall += 1
                if stall >= hyper.patience:
                    break
        if best_state is not None:
            mades.load_state_dict(best_state)
        layers = _export(mades)
    finally:
        torch.set_num_threads(prev_threads)

    model = FlowModel(
        ls_id=ls_id, dim=dim, hidden=tuple(hyper.hidden), alpha_clamp=hyper.alpha_clamp,
        layers=layers, feature_mean=mean, feature_std=std,
        train_loglik_sorted=np.zeros(1), history=history,
        meta={"seed": int(seed), "n_samples": int(len(data)), "n_train": int(len(train)),
              "epochs_run": len(history), "best_val_loglik": best_val},
    )
    model.train_loglik_sorted = np.sort(log_likelihood_batch(model, train))
    model.meta["final_train_loglik"] = float(model.train_loglik_sorted.mean())
    return model


# ---------------------------------------------------------------------------
# persistence

def to_document(model: FlowModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "ls_id": model.ls_id,
        "dim": model.dim,
        "n_flows": model.n_flows,
        "hidden": list(model.hidden),
        "alpha_clamp": model.alpha_clamp,
        "feature_mean": model.feature_mean.tolist(),
        "feature_std": model.feature_std.tolist(),
        "meta": model.meta,
        "history": list(model.history),
        "train_loglik_sorted": model.train_loglik_sorted.tolist(),
        "flows": [
            [{"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
             for w, b in flow]
            for flow in model.layers
        ],
    }


def from_document(doc: dict) -> FlowModel:
    if doc.get("format") != FORMAT_NAME:
        raise FlowError("not a flow model document")
    if doc.get("version") != FORMAT_VERSION:
        raise FlowError(f"unsupported flow model version {doc.get('version')!r}")
    layers = [
        [(np.asarray(l["weight"], dtype=float).reshape(l["shape"]),
          np.asarray(l["bias"], dtype=float)) for l in flow]
        for flow in doc["flows"]
    ]
    return FlowModel(
        ls_id=doc["ls_id"], dim=int(doc["dim"]), hidden=tuple(doc["hidden"]),
        alpha_clamp=float(doc["alpha_clamp"]), layers=layers,
        feature_mean=np.asarray(doc["feature_mean"], dtype=float),
        feature_std=np.asarray(doc["feature_std"], dtype=float),
        train_loglik_sorted=np.asarray(doc["train_loglik_sorted"], dtype=float),
        history=list(doc.get("history", [])), meta=dict(doc.get("meta", {})),
    )


def save(model: FlowModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_document(model), fh, indent=1)
        fh.write("\n")


def load(path) -> FlowModel:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FlowError(f"{path}: malformed flow model: {exc}") from exc
    return from_document(doc)
