"""A small numpy score network with explicit forward and backward passes.

The network maps ``(x_t, sigma, condition)`` to a score estimate. Its forward
pass optionally carries forward-mode tangents ``J v`` for a set of input
directions ``v``; the backward pass differentiates any loss that depends on
the outputs *and* on those tangents. That is what the trace terms of the
implicit, sliced and Fisher score matching losses need.

Parameters live in a plain ``dict[str, ndarray]`` so that the optimizer,
the EMA shadow and the checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import RngStream, _as_generator

__all__ = [
    "NetConfig",
    "ScoreNet",
    "Adam",
    "EmaShadow",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "langevin_sample",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

NULL_CLASS = -1

_ACTIVATIONS = ("silu", "tanh", "identity")
_OUTPUTS = ("score", "noise", "scaled", "residual")


@dataclass(frozen=True)
class NetConfig:
    """Architecture descriptor; everything needed to rebuild a net.

    ``output`` selects how the raw network output ``o`` maps to a score in
    standardized units (``xs = (x - shift) / scale``, ``ss = sigma / scale``):

    * ``score``:    s = o
    * ``noise``:    s = -o / ss           (o predicts the injected noise)
    * ``scaled``:   s = o / (1 + ss^2)
    * ``residual``: s = (o - xs) / (1 + ss^2)   (correction to a unit Gaussian)

    The score in data units is the standardized one divided by ``scale``.
    """

    dim: int
    hidden: tuple = (128, 128, 128)
    activation: str = "silu"
    bias: bool = True
    sigma_embedding: str = "sinusoidal"  # none | log | sinusoidal
    sigma_features: int = 8
    condition: str = "none"  # none | class | vector
    num_classes: int = 0
    class_embed: int = 16
    cond_dim: int = 0
    output: str = "noise"
    precondition: bool = False  # feed xs / sqrt(1 + ss^2) instead of xs
    shift: tuple = ()
    scale: float = 1.0
    cond_shift: tuple = ()
    cond_scale: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "shift", tuple(float(v) for v in self.shift))
        object.__setattr__(self, "cond_shift", tuple(float(v) for v in self.cond_shift))
        object.__setattr__(self, "cond_scale", tuple(float(v) for v in self.cond_scale))
        object.__setattr__(self, "scale", float(self.scale))
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in _OUTPUTS:
            raise ValueError(f"unknown output parameterization {self.output!r}")
        if self.sigma_embedding not in ("none", "log", "sinusoidal"):
            raise ValueError(f"unknown sigma embedding {self.sigma_embedding!r}")
        if self.sigma_embedding == "sinusoidal" and self.sigma_features % 2:
            raise ValueError("sinusoidal sigma embedding needs an even feature count")
        if self.condition not in ("none", "class", "vector"):
            raise ValueError(f"unknown condition kind {self.condition!r}")
        if self.condition == "class" and self.num_classes < 1:
            raise ValueError("class conditioning needs num_classes >= 1")
        if self.condition == "vector" and self.cond_dim < 1:
            raise ValueError("vector conditioning needs cond_dim >= 1")
        if not self.scale > 0:
            raise ValueError("input scale must be positive")
        if self.shift and len(self.shift) != self.dim:
            raise ValueError("shift length must equal dim")
        if self.condition == "vector":
            if self.cond_shift and len(self.cond_shift) != self.cond_dim:
                raise ValueError("cond_shift length must equal cond_dim")
            if self.cond_scale and len(self.cond_scale) != self.cond_dim:
                raise ValueError("cond_scale length must equal cond_dim")

    @property
    def uses_sigma(self) -> bool:
        return (self.sigma_embedding != "none" or self.output != "score" or self.precondition)

    @property
    def n_sigma_in(self) -> int:
        return {"none": 0, "log": 1, "sinusoidal": self.sigma_features}[self.sigma_embedding]

    @property
    def n_cond_in(self) -> int:
        if self.condition == "class":
            return self.class_embed
        if self.condition == "vector":
            return self.cond_dim + 1
        return 0

    @property
    def n_in(self) -> int:
        return self.dim + self.n_sigma_in + self.n_cond_in

    @property
    def layer_sizes(self) -> tuple:
        return (self.n_in, *self.hidden, self.dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["shift"] = list(self.shift)
        d["cond_shift"] = list(self.cond_shift)
        d["cond_scale"] = list(self.cond_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for k in ("hidden", "shift", "cond_shift", "cond_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def linear(cls, dim: int, bias: bool = False, output: str = "score", **kw) -> "NetConfig":
        """Single affine layer with no activation and no sigma input."""
        return cls(dim=dim, hidden=(), activation="identity", bias=bias,
                   sigma_embedding="none", output=output, **kw)


def _act(name, z):
    """Activation value with first and second derivatives."""
    if name == "identity":
        one = np.ones_like(z)
        return z, one, np.zeros_like(z)
    if name == "tanh":
        t = np.tanh(z)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    sg = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    d1 = sg * (1.0 + z * (1.0 - sg))
    d2 = sg * (1.0 - sg) * (2.0 + z * (1.0 - 2.0 * sg))
    return z * sg, d1, d2


def _sigma_features(cfg: NetConfig, ss):
    if cfg.sigma_embedding == "none":
        return None
    ls = np.log(ss)[:, None]
    if cfg.sigma_embedding == "log":
        return ls
    k = cfg.sigma_features // 2
    freqs = 0.25 * 2.0 ** np.arange(k)
    return np.concatenate([np.sin(ls * freqs), np.cos(ls * freqs)], axis=1)


class ScoreNet:
    """Score approximator ``s(x, sigma, cond)`` with numpy backprop.

    Call the instance to get scores in data units. ``cond`` is a class index
    array (``-1`` is the null token) or a condition-vector array; ``null``
    optionally marks rows whose condition is dropped.
    """

    def __init__(self, config: NetConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)
        self._check_params(self.params)

    # ----- construction ------------------------------------------------

    @staticmethod
    def init_params(cfg: NetConfig, seed: int = 0) -> dict:
        rng = RngStream(seed, 0x5C0E).generator()
        sizes = cfg.layer_sizes
        p = {}
        n_layers = len(sizes) - 1
        for l in range(n_layers):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            bound = 1.0 / math.sqrt(fan_in)
            last = l == n_layers - 1
            if last and (cfg.output in ("noise", "residual") or n_layers == 1):
                # zero output at init keeps early scores (and Langevin steps) tame
                p[f"W{l}"] = np.zeros((fan_out, fan_in))
            else:
                p[f"W{l}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if cfg.bias:
                if last and (cfg.output in ("noise", "residual") or n_layers == 1):
                    p[f"b{l}"] = np.zeros(fan_out)
                else:
                    p[f"b{l}"] = rng.uniform(-bound, bound, size=fan_out)
        if cfg.condition == "class":
            # row num_classes is the null token
            p["E"] = rng.standard_normal((cfg.num_classes + 1, cfg.class_embed))
        return p

    def _check_params(self, params):
        cfg = self.config
        sizes = cfg.layer_sizes
        for l in range(len(sizes) - 1):
            w = params.get(f"W{l}")
            if w is None or w.shape != (sizes[l + 1], sizes[l]):
                raise ValueError(f"parameter W{l} missing or mis-shaped")
            if cfg.bias and params.get(f"b{l}", np.empty(0)).shape != (sizes[l + 1],):
                raise ValueError(f"parameter b{l} missing or mis-shaped")
        if cfg.condition == "class" and params.get("E", np.empty(0)).shape != (
                cfg.num_classes + 1, cfg.class_embed):
            raise ValueError("class embedding missing or mis-shaped")

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_sizes) - 1

    def param_names(self) -> list[str]:
        names = []
        for l in range(self.n_layers):
            names.append(f"W{l}")
            if self.config.bias:
                names.append(f"b{l}")
        if self.config.condition == "class":
            names.append("E")
        return names

    def with_params(self, params: dict) -> "ScoreNet":
        return ScoreNet(self.config, {k: v.copy() for k, v in params.items()})

    def with_standardization(self, shift=None, scale=None, cond_shift=None, cond_scale=None) -> "ScoreNet":
        kw = {}
        if shift is not None:
            kw["shift"] = tuple(np.broadcast_to(np.asarray(shift, float), (self.config.dim,)))
        if scale is not None:
            kw["scale"] = float(scale)
        if cond_shift is not None:
            kw["cond_shift"] = tuple(np.asarray(cond_shift, float).reshape(-1))
        if cond_scale is not None:
            kw["cond_scale"] = tuple(np.asarray(cond_scale, float).reshape(-1))
        return ScoreNet(replace(self.config, **kw), self.params)

    # ----- input preparation ---------------------------------------------

    def _prepare(self, x, sigma, cond, null, params=None):
        cfg = self.config
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[-1] != cfg.dim:
            raise ValueError(f"expected inputs of dimension {cfg.dim}, got {x.shape[-1]}")
        B = x.shape[0]
        shift = np.asarray(cfg.shift) if cfg.shift else 0.0
        xs = (x - shift) / cfg.scale
        if cfg.uses_sigma:
            if sigma is None:
                raise ValueError("this network needs a noise level sigma")
            sig = np.broadcast_to(np.asarray(sigma, dtype=float), (B,)).copy()
            if np.any(sig <= 0):
                raise ValueError("noise levels must be positive")
            ss = sig / cfg.scale
        else:
            ss = np.ones(B)
        feats = [None, _sigma_features(cfg, ss), None]
        cls_idx = None
        if cfg.condition == "none":
            if cond is not None or null is not None:
                raise ValueError("condition supplied to an unconditioned network")
        elif cfg.condition == "class":
            if cond is None:
                cls_idx = np.full(B, cfg.num_classes)
            else:
                c = np.broadcast_to(np.asarray(cond, dtype=int), (B,)).copy()
                if np.any((c < NULL_CLASS) | (c >= cfg.num_classes)):
                    raise ValueError("class index out of range")
                c[c == NULL_CLASS] = cfg.num_classes
                cls_idx = c
            if null is not None:
                cls_idx = np.where(np.broadcast_to(null, (B,)), cfg.num_classes, cls_idx)
            feats[2] = (self.params if params is None else params)["E"][cls_idx]
        else:
            if cond is None:
                nm = np.ones(B, dtype=bool)
                yv = np.zeros((B, cfg.cond_dim))
            else:
                yv = np.asarray(cond, dtype=float).reshape(B, cfg.cond_dim)
                cs = np.asarray(cfg.cond_shift) if cfg.cond_shift else 0.0
                cc = np.asarray(cfg.cond_scale) if cfg.cond_scale else 1.0
                yv = (yv - cs) / cc
                nm = np.zeros(B, dtype=bool) if null is None else np.broadcast_to(null, (B,)).astype(bool)
            yv = np.where(nm[:, None], 0.0, yv)
            feats[2] = np.concatenate([yv, nm[:, None].astype(float)], axis=1)
        cin = 1.0 / np.sqrt(1.0 + ss * ss) if cfg.precondition else np.ones(B)
        feats[0] = xs * cin[:, None]
        h0 = np.concatenate([f for f in feats if f is not None], axis=1)
        if cfg.output == "score":
            mult = np.ones(B)
        elif cfg.output == "noise":
            mult = -1.0 / ss
        else:
            mult = 1.0 / (1.0 + ss * ss)
        ctx = dict(B=B, xs=xs, ss=ss, cin=cin, mult=mult, cls_idx=cls_idx, single=single)
        return h0, ctx

    # ----- forward --------------------------------------------------------

    def _forward(self, params, h0, tangents=None, keep=False):
        """Primal (and tangent) pass through the layer stack.

        ``tangents`` has shape (B, P, n_in) or is None.
        """
        cfg = self.config
        h, hd = h0, tangents
        cache = []
        for l in range(self.n_layers):
            W = params[f"W{l}"]
            a = h @ W.T
            if cfg.bias:
                a = a + params[f"b{l}"]
            ad = None if hd is None else hd @ W.T
            last = l == self.n_layers - 1
            if last:
                if keep:
                    cache.append((h, hd, None, None, None, None))
                h, hd = a, ad
            else:
                av, d1, d2 = _act(cfg.activation, a)
                hn = av
                hdn = None if ad is None else ad * d1[:, None, :]
                if keep:
                    cache.append((h, hd, a, ad, d1, d2))
                h, hd = hn, hdn
        return h, hd, cache

    def _score_from_raw(self, out, ctx):
        cfg = self.config
        s = out
        if cfg.output == "residual":
            s = out - ctx["xs"]
        return s * (ctx["mult"] / cfg.scale)[:, None]

    def raw(self, x, sigma=None, cond=None, null=None, params=None):
        """Raw network output (noise prediction for ``output='noise'``)."""
        h0, ctx = self._prepare(x, sigma, cond, null, params)
        out, _, _ = self._forward(self.params if params is None else params, h0)
        return out[0] if ctx["single"] else out

    def __call__(self, x, sigma=None, cond=None, null=None, params=None):
        h0, ctx = self._prepare(x, sigma, cond, null, params)
        out, _, _ = self._forward(self.params if params is None else params, h0)
        s = self._score_from_raw(out, ctx)
        return s[0] if ctx["single"] else s

    score = __call__

    def _input_tangents(self, ctx, V):
        """Lift data-space directions V (B, P, D) to network-input tangents."""
        cfg = self.config
        B, P = V.shape[0], V.shape[1]
        T = np.zeros((B, P, cfg.n_in))
        T[:, :, : cfg.dim] = V * (ctx["cin"] / cfg.scale)[:, None, None]
        return T

    def _tangent_scores(self, outd, ctx, V):
        """Map raw-output tangents to score tangents J V in data units."""
        cfg = self.config
        sd = outd
        if cfg.output == "residual":
            sd = outd - V / cfg.scale
        return sd * (ctx["mult"] / cfg.scale)[:, None, None]

    def score_and_jvp(self, x, V, sigma=None, cond=None, null=None, params=None):
        """Scores (B, D) and directional derivatives J v for V (B, P, D)."""
        h0, ctx = self._prepare(x, sigma, cond, null, params)
        V = np.asarray(V, dtype=float)
        if V.ndim == 2:
            V = np.broadcast_to(V, (ctx["B"], *V.shape))
        out, outd, _ = self._forward(self.params if params is None else params, h0,
                                     self._input_tangents(ctx, V))
        return self._score_from_raw(out, ctx), self._tangent_scores(outd, ctx, V)

    def input_jacobian(self, x, sigma=None, cond=None, null=None, mode: str = "exact",
                       h: float = 1e-5):
        """d score / d x, shape (B, D, D) (or (D, D) for a single point)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        D = self.config.dim
        if mode == "exact":
            eye = np.broadcast_to(np.eye(D), (X.shape[0], D, D))
            _, sd = self.score_and_jvp(X, eye, sigma, cond, null)
            J = np.swapaxes(sd, 1, 2)
        elif mode == "fd":
            J = np.empty((X.shape[0], D, D))
            for j in range(D):
                step = h * (1.0 + np.abs(X[:, j]))
                e = np.zeros_like(X)
                e[:, j] = step
                J[:, :, j] = (self(X + e, sigma, cond, null) - self(X - e, sigma, cond, null)) / (2 * step[:, None])
        else:
            raise ValueError(f"unknown jacobian mode {mode!r}")
        return J[0] if single else J

    # ----- backward -------------------------------------------------------

    def loss_and_grad(self, params, x, sigma, cond, null, loss_fn: Callable, V=None):
        """Evaluate ``loss_fn`` on the net outputs and backpropagate.

        ``loss_fn(s, sd, ctx)`` receives scores ``s`` (B, D) and score
        tangents ``sd = J V`` (B, P, D) or None, and returns
        ``(loss, ds, dsd)`` with the loss gradients w.r.t. ``s`` and ``sd``.
        """
        cfg = self.config
        h0, ctx = self._prepare(x, sigma, cond, null, params)
        Vb = None
        T0 = None
        if V is not None:
            Vb = np.asarray(V, dtype=float)
            if Vb.ndim == 2:
                Vb = np.broadcast_to(Vb, (ctx["B"], *Vb.shape))
            T0 = self._input_tangents(ctx, Vb)
        out, outd, cache = self._forward(params, h0, T0, keep=True)
        s = self._score_from_raw(out, ctx)
        sd = None if outd is None else self._tangent_scores(outd, ctx, Vb)
        loss, ds, dsd = loss_fn(s, sd, ctx)
        m = (ctx["mult"] / cfg.scale)
        g_out = ds * m[:, None]
        g_outd = None if dsd is None else dsd * m[:, None, None]
        grads = self._backward(params, cache, g_out, g_outd)
        if cfg.condition == "class":
            # embedding rows receive the gradient of the condition features
            gE = np.zeros_like(params["E"])
            np.add.at(gE, ctx["cls_idx"], grads.pop("_h0")[:, cfg.dim + cfg.n_sigma_in:])
            grads["E"] = gE
        else:
            grads.pop("_h0")
        return float(loss), grads

    def _backward(self, params, cache, g, gd):
        cfg = self.config
        grads = {}
        for l in reversed(range(self.n_layers)):
            h, hd, a, ad, d1, d2 = cache[l]
            W = params[f"W{l}"]
            gW = g.T @ h
            if gd is not None:
                gW = gW + np.einsum("bpo,bpi->oi", gd, hd)
            grads[f"W{l}"] = gW
            if cfg.bias:
                grads[f"b{l}"] = g.sum(axis=0)
            gh = g @ W
            ghd = None if gd is None else gd @ W
            if l > 0:
                _, _, a_p, ad_p, d1_p, d2_p = cache[l - 1]
                ga = gh * d1_p
                if ghd is not None:
                    ga = ga + np.einsum("bpk,bpk->bk", ghd, ad_p) * d2_p
                    gd = ghd * d1_p[:, None, :]
                g = ga
            else:
                g = gh
        grads["_h0"] = g
        return grads


# ----- optimization -----------------------------------------------------------

class Adam:
    """Adam with bias correction over a dict of parameter arrays."""

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class EmaShadow:
    """shadow <- decay * shadow + (1 - decay) * live."""

    def __init__(self, params: dict, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, v in params.items():
            self.shadow[k] = d * self.shadow[k] + (1.0 - d) * v


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch: int = 128
    lr: float = 1e-4
    lr_schedule: str = "constant"  # constant | cosine
    ema_decay: float = 0.999
    seed: int = 0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    log_every: int = 1


@dataclass
class TrainResult:
    net: ScoreNet
    losses: np.ndarray
    live_params: dict = field(repr=False, default_factory=dict)

    def moving_average(self, window: int = 500) -> np.ndarray:
        w = max(1, min(window, self.losses.size))
        c = np.cumsum(np.insert(self.losses, 0, 0.0))
        return (c[w:] - c[:-w]) / w


class TrainingDiverged(FloatingPointError):
    pass


def _take_batch(data, idx):
    return {k: (v[idx] if v is not None else None) for k, v in data.items()}


def train(net: ScoreNet, loss, data, config: TrainConfig) -> TrainResult:
    """Fit ``net`` with Adam + EMA and return the EMA-evaluated network.

    ``loss(net, params, batch, rng) -> (value, grads)``. ``data`` is either a
    dict of arrays indexed along axis 0 (minibatches drawn with replacement)
    or a callable ``sampler(rng, batch) -> dict`` producing fresh batches.
    """
    rng = RngStream(config.seed, 0x7A1).generator()
    params = {k: v.copy() for k, v in net.params.items()}
    opt = Adam(params, lr=config.lr)
    ema = EmaShadow(params, config.ema_decay)
    if callable(data):
        sampler = data
    else:
        sizes = {v.shape[0] for v in data.values() if v is not None}
        if len(sizes) != 1 or 0 in sizes:
            raise ValueError("dataset must be nonempty with a common leading dimension")
        n = sizes.pop()

        def sampler(r, B):
            return _take_batch(data, r.integers(0, n, size=B))
    losses = np.empty(config.iterations)
    for it in range(config.iterations):
        batch = sampler(rng, config.batch)
        val, grads = loss(net, params, batch, rng)
        if not np.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it} (lr={config.lr:g}); lower the learning rate "
                "or raise the smallest noise level")
        if config.grad_clip > 0:
            gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gn > config.grad_clip:
                grads = {k: g * (config.grad_clip / gn) for k, g in grads.items()}
        lr = config.lr
        if config.lr_schedule == "cosine":
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * it / config.iterations))
        opt.step(params, grads, lr)
        ema.update(params)
        losses[it] = val
    return TrainResult(net.with_params(ema.shadow), losses, params)


# ----- sampling -------------------------------------------------------------

def langevin_sample(score_fn, init, step_sizes, steps: int, stream, sigmas=None,
                    max_norm: float = 1e6) -> np.ndarray:
    """Unadjusted Langevin dynamics; returns the trajectory (steps + 1, M, D).

    x <- x + (eps / 2) score(x) + sqrt(eps) z. ``score_fn(x)`` or, with
    ``sigmas`` given, ``score_fn(x, sigma_k)`` for annealed chains.
    """
    if steps < 1:
        raise ValueError("need at least one Langevin step")
    rng = _as_generator(stream)
    x = np.array(init, dtype=float)
    eps = np.broadcast_to(np.asarray(step_sizes, dtype=float), (steps,))
    traj = np.empty((steps + 1, *x.shape))
    traj[0] = x
    for k in range(steps):
        s = score_fn(x) if sigmas is None else score_fn(x, sigmas[k])
        x = x + 0.5 * eps[k] * s + math.sqrt(eps[k]) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > max_norm:
            raise FloatingPointError(f"Langevin chain diverged at step {k}")
        traj[k + 1] = x
    return traj


# ----- checkpoints ----------------------------------------------------------

_MAGIC = b"SBNETCK\x00"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: ScoreNet, extra: dict | None = None) -> None:
    """Header (magic, version, JSON descriptor) + float64 LE blob + CRC32."""
    names = net.param_names()
    desc = {
        "config": net.config.to_dict(),
        "params": [[k, list(net.params[k].shape)] for k in names],
        "extra": extra or {},
    }
    js = json.dumps(desc, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes() for k in names)
    body = _MAGIC + struct.pack("<I", _VERSION) + struct.pack("<Q", len(js)) + js + blob
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path, expected: NetConfig | None = None) -> tuple[ScoreNet, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 16 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a score-net checkpoint")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch (file corrupted)")
    off = len(_MAGIC)
    (version,) = struct.unpack("<I", body[off: off + 4])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", body[off + 4: off + 12])
    off += 12
    desc = json.loads(body[off: off + n].decode("utf-8"))
    off += n
    cfg = NetConfig.from_dict(desc["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise CheckpointError(f"{path}: architecture descriptor does not match the expected network")
    params = {}
    for name, shape in desc["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        params[name] = arr.astype(float)
        off += 8 * count
    if off != len(body):
        raise CheckpointError(f"{path}: parameter blob length mismatch")
    return ScoreNet(cfg, params), desc.get("extra", {})
