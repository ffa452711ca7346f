"""Encoder / decoder / latent-dynamics MLPs with hand-written backprop.

All three networks work on standardized inputs; the per-axis mean and scale
are computed from the training states and stored with the model.
Losses (all means over the batch of squared Euclidean norms)::

    L1 = |x - dec(enc(x))|^2
    L2 = |y - dec(enc(y))|^2          y = Im(x)
    L3 = |dyn(enc(x)) - enc(y)|^2
    L4 = sigmoid(-c |enc(x_s) - enc(x_f)|)   success/failure final states
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latentmorse-checkpoint"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "identity")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    pass


def sigmoid(a):
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Mlp:
    """Fully connected network: ReLU hidden layers, tanh or identity output."""

    def __init__(self, weights, biases, output_activation="tanh"):
        if output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.output_activation = output_activation
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input size {w.shape[0]} does not chain")

    @classmethod
    def init(cls, sizes, rng, output_activation="tanh"):
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, output_activation)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output_activation)

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < last:
                h = np.maximum(a, 0.0)
            elif self.output_activation == "tanh":
                h = np.tanh(a)
            else:
                h = a
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        """Gradients w.r.t. parameters (same order as ``params``) and input."""
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            out = acts[i + 1]
            if i < last:
                g = g * (out > 0)
            elif self.output_activation == "tanh":
                g = g * (1.0 - out * out)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def to_dict(self):
        return {
            "sizes": self.sizes,
            "hidden_activation": "relu",
            "output_activation": self.output_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d, name):
        try:
            sizes = d["sizes"]
            weights = [np.array(w, dtype=float) for w in d["weights"]]
            biases = [np.array(b, dtype=float) for b in d["biases"]]
            act = d["output_activation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"network {name!r}: missing or malformed field {exc}") from exc
        if d.get("hidden_activation", "relu") != "relu":
            raise CheckpointError(f"network {name!r}: unsupported hidden_activation")
        try:
            net = cls(weights, biases, act)
        except ValueError as exc:
            raise CheckpointError(f"network {name!r}: {exc}") from exc
        if net.sizes != list(sizes):
            raise CheckpointError(f"network {name!r}: field 'sizes' disagrees with weights")
        return net


@dataclass
class AutoencoderModel:
    encoder: Mlp
    decoder: Mlp
    dynamics: Mlp
    mean: np.ndarray
    scale: np.ndarray
    seed: int = 0

    @classmethod
    def init(cls, input_dim, latent_dim, hidden=(32, 32), seed=0, mean=None, scale=None):
        if not latent_dim < input_dim:
            raise ValueError("latent dimension must be smaller than the input dimension")
        rng = np.random.default_rng(seed)
        hidden = list(hidden)
        enc = Mlp.init([input_dim] + hidden + [latent_dim], rng, "tanh")
        dec = Mlp.init([latent_dim] + hidden + [input_dim], rng, "identity")
        dyn = Mlp.init([latent_dim] + hidden + [latent_dim], rng, "tanh")
        mean = np.zeros(input_dim) if mean is None else np.asarray(mean, dtype=float)
        scale = np.ones(input_dim) if scale is None else np.asarray(scale, dtype=float)
        return cls(enc, dec, dyn, mean, scale, seed)

    @property
    def input_dim(self) -> int:
        return self.encoder.sizes[0]

    @property
    def latent_dim(self) -> int:
        return self.encoder.sizes[-1]

    @property
    def networks(self) -> list[Mlp]:
        return [self.encoder, self.decoder, self.dynamics]

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.decoder.params + self.dynamics.params

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(self.encoder.copy(), self.decoder.copy(), self.dynamics.copy(),
                                self.mean.copy(), self.scale.copy(), self.seed)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def encode(self, x):
        return self.encoder.forward(self.normalize(x))

    def decode(self, z):
        return self.decoder.forward(z) * self.scale + self.mean

    def latent_step(self, z):
        return self.dynamics.forward(z)

    def latent_map(self, m: int = 1):
        """The m-fold composition of the latent dynamics, as a callable."""
        def phi(z):
            for _ in range(m):
                z = self.dynamics.forward(z)
            return z
        return phi


@dataclass
class TrainConfig:
    latent_dim: int = 2
    hidden: tuple = (32, 32)
    lambdas: tuple = (1.0, 1.0, 1.0, 0.3)
    c: float = 10.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 500
    seed: int = 0
    use_l4: bool = False
    restarts: int = 5
    normalization: str = "axis"
    lr_schedule: str = "constant"
    lr_floor: float = 0.03

    def __post_init__(self):
        if any(v < 0 for v in self.lambdas) or len(self.lambdas) != 4:
            raise ValueError("need four non-negative loss weights")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.normalization not in ("axis", "global"):
            raise ValueError("normalization must be 'axis' or 'global'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, frac: float) -> float:
        """Learning rate after ``frac`` of training; cosine decays to ``lr * lr_floor``."""
        if self.lr_schedule == "constant":
            return self.lr
        w = 0.5 * (1.0 + math.cos(math.pi * min(max(frac, 0.0), 1.0)))
        return self.lr * (self.lr_floor + (1.0 - self.lr_floor) * w)


def standardization(states, mode="axis") -> tuple[np.ndarray, np.ndarray]:
    """Per-axis mean and scale. ``mode="global"`` shares one scale across axes,
    keeping their relative magnitudes."""
    states = np.asarray(states, dtype=float)
    mean = states.mean(axis=0)
    if mode == "global":
        s = float(np.sqrt(np.mean((states - mean) ** 2)))
        scale = np.full(states.shape[1], s if s > 1e-12 else 1.0)
    else:
        scale = states.std(axis=0)
        scale[scale <= 1e-12] = 1.0
    return mean, scale


def _zero_grads(model):
    return [np.zeros_like(p) for p in model.params]


def reconstruction_loss(model: AutoencoderModel, xn, yn, lambdas, need_grad=True):
    """Weighted ``L1, L2, L3`` on standardized pairs, with gradients.

    Returns ``((L1, L2, L3, total), grads)`` with grads in ``model.params`` order.
    """
    enc, dec, dyn = model.networks
    B = len(xn)
    # x and Im(x) go through encoder and decoder as one stacked batch
    xy = np.concatenate([xn, yn])
    z, a_z = enc.forward_cache(xy)
    r, a_r = dec.forward_cache(z)
    zx, zy = z[:B], z[B:]
    pz, a_pz = dyn.forward_cache(zx)
    er, ez = r - xy, pz - zy
    ex, ey = er[:B], er[B:]
    L1 = float(np.sum(ex * ex)) / B
    L2 = float(np.sum(ey * ey)) / B
    L3 = float(np.sum(ez * ez)) / B
    l1, l2, l3 = lambdas[:3]
    total = l1 * L1 + l2 * L2 + l3 * L3
    if not need_grad:
        return (L1, L2, L3, total), None

    g_r = np.concatenate([(2.0 * l1 / B) * ex, (2.0 * l2 / B) * ey])
    g_pz = (2.0 * l3 / B) * ez
    dec_g, g_z = dec.backward(a_r, g_r)
    dyn_g, g_zx = dyn.backward(a_pz, g_pz)
    g_z[:B] += g_zx
    g_z[B:] -= g_pz
    enc_g, _ = enc.backward(a_z, g_z)
    grads = enc_g + dec_g + dyn_g
    return (L1, L2, L3, total), grads


def separation_loss(model: AutoencoderModel, xs_n, xf_n, lam4, c, need_grad=True):
    """``lam4 * L4`` over paired rows of standardized success / failure states."""
    enc = model.encoder
    za, a_a = enc.forward_cache(xs_n)
    zb, a_b = enc.forward_cache(xf_n)
    diff = za - zb
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    term = sigmoid(-c * dist)
    L4 = float(term.mean())
    if not need_grad:
        return L4, None
    P = len(dist)
    # d/d dist of sigmoid(-c dist); the norm is not differentiable at 0, use 0 there
    g_dist = (lam4 / P) * (-c) * term * (1.0 - term)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    g_diff = g_dist[:, None] * unit
    ga, _ = enc.backward(a_a, g_diff)
    gb, _ = enc.backward(a_b, -g_diff)
    grads = [x + y for x, y in zip(ga, gb)]
    grads += [np.zeros_like(p) for p in model.decoder.params + model.dynamics.params]
    return L4, grads


def loss_batch(model, x, y, config: TrainConfig, finals_s=None, finals_f=None, rng=None):
    """Losses ``(L1, L2, L3, L4, total)`` on raw (unstandardized) arrays.

    ``L4`` is NaN unless enabled and both final-state sets are nonempty; pairs
    are drawn at random (``batch_size`` of them) or taken row-wise when the two
    sets have equal length and no ``rng`` is given.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("empty batch")
    (L1, L2, L3, total), _ = reconstruction_loss(
        model, model.normalize(x), model.normalize(y), config.lambdas, need_grad=False)
    L4 = math.nan
    if config.use_l4 and finals_s is not None and finals_f is not None \
            and len(finals_s) and len(finals_f):
        xs, xf = _pair_finals(finals_s, finals_f, config.batch_size, rng)
        L4, _ = separation_loss(model, model.normalize(xs), model.normalize(xf),
                                config.lambdas[3], config.c, need_grad=False)
    return L1, L2, L3, L4, total


def _pair_finals(finals_s, finals_f, n, rng):
    finals_s, finals_f = np.asarray(finals_s), np.asarray(finals_f)
    if rng is None and len(finals_s) == len(finals_f):
        return finals_s, finals_f
    rng = rng or np.random.default_rng(0)
    return (finals_s[rng.integers(len(finals_s), size=n)],
            finals_f[rng.integers(len(finals_f), size=n)])


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        # moments live in one flat buffer; the update is elementwise
        self.offsets = np.cumsum([0] + [p.size for p in params])
        self.m = np.zeros(self.offsets[-1])
        self.v = np.zeros(self.offsets[-1])

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        g = np.concatenate([np.ravel(x) for x in grads])
        m, v = self.m, self.v
        m *= self.b1
        m += (1.0 - self.b1) * g
        v *= self.b2
        v += (1.0 - self.b2) * g * g
        upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for p, a, b in zip(self.params, self.offsets[:-1], self.offsets[1:]):
            p -= upd[a:b].reshape(p.shape)


@dataclass
class EpochLosses:
    epoch: int
    L1: float
    L2: float
    L3: float
    L4: float
    total: float


DIVERGENCE_LIMIT = 1e6


def train(train_set, config: TrainConfig, progress=None):
    """Train encoder, decoder and latent dynamics jointly with Adam.

    Returns ``(model, history)``. When ``config.use_l4`` is set each epoch is
    followed by a pass on ``lam4 * L4`` over random success/failure pairs.
    """
    X, Y = train_set.pairs()
    if len(X) == 0:
        raise ValueError("training set has no pairs")
    mean, scale = standardization(train_set.all_states(), config.normalization)
    model = AutoencoderModel.init(X.shape[1], config.latent_dim, config.hidden, config.seed,
                                  mean, scale)
    Xn, Yn = model.normalize(X), model.normalize(Y)
    Fs = model.normalize(train_set.success_finals()) if config.use_l4 else np.empty((0,))
    Ff = model.normalize(train_set.failure_finals()) if config.use_l4 else np.empty((0,))
    do_l4 = config.use_l4 and len(Fs) > 0 and len(Ff) > 0 and config.lambdas[3] > 0

    rng = np.random.default_rng(config.seed + 7919)
    opt = Adam(model.params, lr=config.lr)
    opt4 = Adam(model.encoder.params, lr=config.lr) if do_l4 else None
    n_enc = len(model.encoder.params)
    n = len(Xn)
    bs = config.batch_size
    history: list[EpochLosses] = []

    n_steps = config.epochs * math.ceil(n / bs)
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            losses, grads = reconstruction_loss(model, Xn[idx], Yn[idx], config.lambdas)
            if not all(math.isfinite(v) for v in losses) or losses[3] > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"epoch {epoch}: loss {losses} is not finite or exceeds {DIVERGENCE_LIMIT:g}")
            opt.lr = config.lr_at(step / n_steps)
            step += 1
            opt.step(grads)
            sums += np.array(losses) * len(idx)
        L1, L2, L3, total = sums / n

        L4 = math.nan
        if do_l4:
            opt4.lr = opt.lr
            n4 = max(1, math.ceil(max(len(Fs), len(Ff)) / bs))
            acc = 0.0
            for _ in range(n4):
                xs = Fs[rng.integers(len(Fs), size=bs)]
                xf = Ff[rng.integers(len(Ff), size=bs)]
                val, g4 = separation_loss(model, xs, xf, config.lambdas[3], config.c)
                if not math.isfinite(val):
                    raise TrainingDiverged(f"epoch {epoch}: L4 is not finite")
                opt4.step(g4[:n_enc])
                acc += val
            L4 = acc / n4
        history.append(EpochLosses(epoch, L1, L2, L3, L4, total))
        if progress is not None:
            progress(history[-1])
    return model, history


def write_history(history, path) -> None:
    lines = ["epoch,L1,L2,L3,L4,total"]
    for h in history:
        lines.append(",".join([str(h.epoch)] + [format(v, ".17g") for v in
                                                (h.L1, h.L2, h.L3, h.L4, h.total)]))
    Path(path).write_text("\n".join(lines) + "\n")


# checkpoints

def checkpoint_dict(model: AutoencoderModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "latent_dim": model.latent_dim,
        "seed": model.seed,
        "normalization": {"mean": model.mean.tolist(), "scale": model.scale.tolist()},
        "networks": {
            "encoder": model.encoder.to_dict(),
            "decoder": model.decoder.to_dict(),
            "dynamics": model.dynamics.to_dict(),
        },
    }


def save_checkpoint(model: AutoencoderModel, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), indent=1) + "\n")


def model_from_dict(d, expected_latent_dim=None) -> AutoencoderModel:
    if not isinstance(d, dict):
        raise CheckpointError("checkpoint root must be an object")
    if d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("field 'format' missing or not a latentmorse checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"field 'version': unsupported {d.get('version')!r}")
    for key in ("input_dim", "latent_dim", "seed", "normalization", "networks"):
        if key not in d:
            raise CheckpointError(f"field {key!r} missing")
    nets = d["networks"]
    try:
        enc = Mlp.from_dict(nets["encoder"], "encoder")
        dec = Mlp.from_dict(nets["decoder"], "decoder")
        dyn = Mlp.from_dict(nets["dynamics"], "dynamics")
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"field 'networks': missing {exc}") from exc
    try:
        mean = np.array(d["normalization"]["mean"], dtype=float)
        scale = np.array(d["normalization"]["scale"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"field 'normalization': {exc}") from exc
    model = AutoencoderModel(enc, dec, dyn, mean, scale, int(d["seed"]))
    if model.latent_dim != d["latent_dim"] or dyn.sizes[0] != d["latent_dim"] \
            or dec.sizes[0] != d["latent_dim"]:
        raise CheckpointError("field 'latent_dim' disagrees with network shapes")
    if model.input_dim != d["input_dim"] or mean.shape != (model.input_dim,) \
            or scale.shape != (model.input_dim,):
        raise CheckpointError("field 'input_dim' disagrees with network or normalization shapes")
    if expected_latent_dim is not None and model.latent_dim != expected_latent_dim:
        raise CheckpointError(
            f"checkpoint latent_dim {model.latent_dim} does not match configured {expected_latent_dim}")
    return model


def load_checkpoint(path, expected_latent_dim=None) -> AutoencoderModel:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not valid checkpoint text: {exc}") from exc
    return model_from_dict(d, expected_latent_dim)
