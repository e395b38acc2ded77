"""Feed-forward networks with explicit reverse-mode gradients and AdamW.

Arrays are plain float64 numpy arrays of shape ``(batch, features)``.  A
network is a stack of blocks::

    linear -> [frozen-statistics norm] -> [time module] -> activation

followed by a linear read-out.  Time conditioning goes through a sinusoidal
embedding of the integer timestep, a learned ``silu`` projection, and per-block
either an additive projection (``time_mode="add"``) or a scale/shift module
applied right after normalization (``time_mode="film"``).  Film projections
start at zero so inserting them leaves a trained network's output unchanged.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from memextract import container

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Input or gradient array does not fit the network."""


class NonFiniteError(FloatingPointError):
    """A loss, gradient or activation became NaN or infinite."""


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "silu"
    norm: bool = False
    time_embed_dim: int = 0
    time_mode: str = "add"
    norm_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("relu", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_mode not in ("add", "film"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if min((self.in_dim, self.out_dim) + self.hidden) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def time_conditioned(self) -> bool:
        return self.time_embed_dim > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**{**d, "hidden": tuple(d["hidden"])})


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z * _sigmoid(z)


def _act_grad(kind, z):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class Cache:
    x: np.ndarray
    temb_in: np.ndarray | None = None
    temb_pre: np.ndarray | None = None
    temb: np.ndarray | None = None
    blocks: list = field(default_factory=list)
    last: np.ndarray | None = None


class Mlp:
    """A parameterised network; ``params`` are trained, ``buffers`` are norm statistics."""

    def __init__(self, config: MlpConfig, seed: int = 0, params=None, buffers=None):
        self.config = config
        if params is None:
            params, buffers = _init_params(config, np.random.default_rng(seed))
        self.params: dict[str, np.ndarray] = params
        self.buffers: dict[str, np.ndarray] = buffers or {}
        self.check_params()

    def check_params(self) -> None:
        ref, ref_buf = _init_params(self.config, np.random.default_rng(0))
        if set(ref) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match config")
        for name, a in ref.items():
            if self.params[name].shape != a.shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {a.shape}")
        for name, a in ref_buf.items():
            self.buffers.setdefault(name, a)

    def copy(self) -> "Mlp":
        return Mlp(self.config, params={k: v.copy() for k, v in self.params.items()},
                   buffers={k: v.copy() for k, v in self.buffers.items()})

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    # -- forward ---------------------------------------------------------

    def forward(self, x, t=None, *, train: bool = False, return_cache: bool = False):
        cfg = self.config
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.in_dim:
            raise ShapeError(f"layer 'l0': expected input (batch, {cfg.in_dim}), got {x.shape}")
        cache = Cache(x=x)
        te = None
        if cfg.time_conditioned:
            if t is None:
                raise ShapeError("time-conditioned network called without a timestep")
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
            cache.temb_in = sinusoidal_embedding(t, cfg.time_embed_dim)
            cache.temb_pre = cache.temb_in @ p["temb.w"] + p["temb.b"]
            te = cache.temb = _act("silu", cache.temb_pre)
        h = x
        for i, width in enumerate(cfg.hidden):
            z = h @ p[f"l{i}.w"] + p[f"l{i}.b"]
            zh = None
            z2 = z
            if cfg.norm:
                mean, var = self.buffers[f"n{i}.mean"], self.buffers[f"n{i}.var"]
                zh = (z - mean) / np.sqrt(var + NORM_EPS)
                z2 = p[f"n{i}.gamma"] * zh + p[f"n{i}.beta"]
                if train:
                    m = cfg.norm_momentum
                    self.buffers[f"n{i}.mean"] = (1 - m) * mean + m * z.mean(axis=0)
                    self.buffers[f"n{i}.var"] = (1 - m) * var + m * z.var(axis=0)
            sc = None
            if te is None:
                z3 = z2
            elif cfg.time_mode == "film":
                proj = te @ p[f"t{i}.w"] + p[f"t{i}.b"]
                sc, sh = proj[:, :width], proj[:, width:]
                z3 = z2 * (1.0 + sc) + sh
            else:
                z3 = z2 + te @ p[f"t{i}.w"] + p[f"t{i}.b"]
            cache.blocks.append((h, zh, z2, sc, z3))
            h = _act(cfg.activation, z3)
        cache.last = h
        out = h @ p["out.w"] + p["out.b"]
        if return_cache:
            return out, cache
        return out

    __call__ = forward

    # -- backward --------------------------------------------------------

    def backward(self, cache: Cache, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return ``(param_grads, input_grad)`` for ``sum(upstream * output)``."""
        cfg = self.config
        p = self.params
        g = np.asarray(upstream, dtype=np.float64)
        expected = (cache.x.shape[0], cfg.out_dim)
        if g.shape != expected:
            raise ShapeError(f"layer 'out': upstream shape {g.shape} != {expected}")
        grads = {"out.w": cache.last.T @ g, "out.b": g.sum(axis=0)}
        gh = g @ p["out.w"].T
        gte = None if cache.temb is None else np.zeros_like(cache.temb)
        for i in reversed(range(len(cfg.hidden))):
            h_prev, zh, z2, sc, z3 = cache.blocks[i]
            gz = gh * _act_grad(cfg.activation, z3)
            if gte is not None:
                if cfg.time_mode == "film":
                    gproj = np.concatenate([gz * z2, gz], axis=1)
                    gz = gz * (1.0 + sc)
                else:
                    gproj = gz
                grads[f"t{i}.w"] = cache.temb.T @ gproj
                grads[f"t{i}.b"] = gproj.sum(axis=0)
                gte += gproj @ p[f"t{i}.w"].T
            if cfg.norm:
                grads[f"n{i}.gamma"] = (gz * zh).sum(axis=0)
                grads[f"n{i}.beta"] = gz.sum(axis=0)
                gz = gz * p[f"n{i}.gamma"] / np.sqrt(self.buffers[f"n{i}.var"] + NORM_EPS)
            grads[f"l{i}.w"] = h_prev.T @ gz
            grads[f"l{i}.b"] = gz.sum(axis=0)
            gh = gz @ p[f"l{i}.w"].T
        if gte is not None:
            gpre = gte * _act_grad("silu", cache.temb_pre)
            grads["temb.w"] = cache.temb_in.T @ gpre
            grads["temb.b"] = gpre.sum(axis=0)
        return grads, gh

    def input_grad(self, x, t, upstream) -> np.ndarray:
        _, cache = self.forward(x, t, return_cache=True)
        return self.backward(cache, upstream)[1]

    # -- persistence -----------------------------------------------------

    def save(self, path, role: str, **meta) -> str:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        header = {"role": role, "config": self.config.to_dict(), **meta}
        return container.write_container(path, arrays, header)

    @classmethod
    def load(cls, path, role: str | None = None) -> tuple["Mlp", dict]:
        meta, arrays = container.read_container(path)
        if role is not None and meta.get("role") != role:
            raise container.ContainerError(f"{path}: role {meta.get('role')!r}, expected {role!r}")
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
        buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
        return cls(MlpConfig.from_dict(meta["config"]), params=params, buffers=buffers), meta


def _init_params(cfg: MlpConfig, rng: np.random.Generator):
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    widths = (cfg.in_dim,) + cfg.hidden
    for i, (fan_in, width) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"l{i}.w"] = rng.standard_normal((fan_in, width)) * math.sqrt(2.0 / fan_in)
        params[f"l{i}.b"] = np.zeros(width)
        if cfg.norm:
            params[f"n{i}.gamma"] = np.ones(width)
            params[f"n{i}.beta"] = np.zeros(width)
            buffers[f"n{i}.mean"] = np.zeros(width)
            buffers[f"n{i}.var"] = np.ones(width)
        if cfg.time_conditioned:
            e = cfg.time_embed_dim
            if cfg.time_mode == "film":
                params[f"t{i}.w"] = np.zeros((e, 2 * width))
                params[f"t{i}.b"] = np.zeros(2 * width)
            else:
                params[f"t{i}.w"] = rng.standard_normal((e, width)) * math.sqrt(1.0 / e)
                params[f"t{i}.b"] = np.zeros(width)
    if cfg.time_conditioned:
        e = cfg.time_embed_dim
        params["temb.w"] = rng.standard_normal((e, e)) * math.sqrt(1.0 / e)
        params["temb.b"] = np.zeros(e)
    last = widths[-1]
    params["out.w"] = rng.standard_normal((last, cfg.out_dim)) * math.sqrt(1.0 / last)
    params["out.b"] = np.zeros(cfg.out_dim)
    return params, buffers


def add_time_modules(net: Mlp, time_embed_dim: int, seed: int = 0) -> Mlp:
    """Copy of ``net`` with zero-initialised scale/shift time modules in every block."""
    if net.config.time_conditioned:
        raise ValueError("network is already time-conditioned")
    cfg = dataclasses.replace(net.config, time_embed_dim=time_embed_dim, time_mode="film")
    fresh = Mlp(cfg, seed=seed)
    fresh.params.update({k: v.copy() for k, v in net.params.items()})
    fresh.buffers.update({k: v.copy() for k, v in net.buffers.items()})
    return fresh


@dataclass
class AdamW:
    """Adam with decoupled weight decay; one instance per parameter dict."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[name]
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
