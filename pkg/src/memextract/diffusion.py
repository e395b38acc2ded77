"""Discrete variance-preserving diffusion: schedules, noising, training loss, samplers.

Timesteps are integers ``1..T``; ``alpha_bar[t - 1]`` is the cumulative signal
fraction at step ``t`` and step ``0`` means clean data (``alpha_bar = 1``).

Classifier guidance shifts the predicted noise by
``-lam * sqrt(1 - alpha_bar_t) * grad_x log p_t(c | x_t)``, which is the
discrete counterpart of adding ``lam`` times the classifier score to the
model score in the reverse SDE.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from memextract import container
from memextract.nn import AdamW, Mlp, MlpConfig, NonFiniteError, ShapeError, softmax

log = logging.getLogger(__name__)

CHAIN_CHUNK = 256


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    betas: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t) -> np.ndarray:
        """``alpha_bar`` at integer step(s) ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(T: int, kind: str = "linear", beta_range=(1e-4, 0.02),
                  cosine_offset: float = 0.008) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        lo, hi = beta_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"invalid beta range {beta_range}")
        betas = np.linspace(lo, hi, T)
    elif kind == "cosine":
        steps = np.arange(T + 1) / T
        f = np.cos((steps + cosine_offset) / (1 + cosine_offset) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, kind=kind, betas=betas, alpha_bar=alpha_bar)


def forward_noise(x0, t, noise, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep outside [1, {sched.T}]")
    ab = sched.abar(t)
    if x0.ndim == 2 and ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def denoising_loss(model, x0, sched: NoiseSchedule, rng: np.random.Generator,
                   train: bool = True):
    """Noise-prediction MSE (summed over features, averaged over the batch) and its gradients."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ShapeError("batch must be a non-empty (batch, dim) array")
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    noise = rng.standard_normal(x0.shape)
    xt = forward_noise(x0, t, noise, sched)
    pred, cache = model.forward(xt, t, train=train, return_cache=True)
    diff = pred - noise
    loss = float(np.sum(diff * diff) / n)
    if not math.isfinite(loss):
        raise NonFiniteError("denoising loss is not finite")
    grads, _ = model.backward(cache, 2.0 * diff / n)
    return loss, grads


def classifier_score(classifier, x_t, t, c) -> np.ndarray:
    """Gradient of ``log p_t(c | x_t)`` with respect to ``x_t``, one row per sample."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t_arg = t if classifier.config.time_conditioned else None
    logits, cache = classifier.forward(x_t, t_arg, return_cache=True)
    n_cls = logits.shape[1]
    c = np.broadcast_to(np.asarray(c), (x_t.shape[0],))
    if np.any(c < 0) or np.any(c >= n_cls):
        raise IndexError(f"class index outside [0, {n_cls})")
    upstream = -softmax(logits)
    upstream[np.arange(len(c)), c] += 1.0
    return classifier.backward(cache, upstream)[1]


@dataclass(frozen=True)
class GuidanceSpec:
    lam: float = 0.0
    target_label: int | None = None
    steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"guidance scale must be >= 0, got {self.lam}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


@dataclass
class SampleBatch:
    samples: np.ndarray
    seed: int
    lam: float
    steps: int
    eta: float = 0.0
    targets: np.ndarray | None = None
    model_checksum: str = ""
    meta: dict = field(default_factory=dict)

    def save(self, path) -> str:
        arrays = {"samples": self.samples}
        if self.targets is not None:
            arrays["targets"] = self.targets
        header = {"role": "samples", "seed": self.seed, "lambda": self.lam, "steps": self.steps,
                  "eta": self.eta, "model_checksum": self.model_checksum, **self.meta}
        return container.write_container(path, arrays, header)

    @classmethod
    def load(cls, path) -> "SampleBatch":
        meta, arrays = container.read_container(path)
        meta = dict(meta)
        for key in ("role",):
            meta.pop(key, None)
        return cls(samples=arrays["samples"], seed=meta.pop("seed"), lam=meta.pop("lambda"),
                   steps=meta.pop("steps"), eta=meta.pop("eta"), targets=arrays.get("targets"),
                   model_checksum=meta.pop("model_checksum"), meta=meta)


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Descending integer timesteps from ``T`` down to 1, roughly evenly spaced."""
    if steps >= T:
        return np.arange(T, 0, -1)
    ts = np.round(np.linspace(T, 1, steps)).astype(int)
    return np.unique(ts)[::-1]


def chain_rngs(seed: int, chains) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed), int(i)]) for i in chains]


def _draw(rngs, dim):
    return np.stack([r.standard_normal(dim) for r in rngs])


def _guided_eps(model, x, t, sched, lam, classifier, targets):
    eps = model(x, np.full(x.shape[0], t))
    if classifier is not None and lam > 0:
        grad = classifier_score(classifier, x, np.full(x.shape[0], t), targets)
        eps = eps - lam * math.sqrt(1.0 - sched.abar(t)) * grad
    if not np.all(np.isfinite(eps)):
        raise NonFiniteError(f"non-finite noise prediction at timestep {t}")
    return eps


def _ddim_chunk(model, sched, ts, eta, lam, classifier, targets, rngs, dim, clip):
    x = _draw(rngs, dim)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        ab, ab_prev = sched.abar(t), sched.abar(t_prev)
        eps = _guided_eps(model, x, t, sched, lam, classifier, targets)
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        x = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * _draw(rngs, dim)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sample at timestep {t}")
    return x


def _ancestral_chunk(model, sched, ts, eta, lam, classifier, targets, rngs, dim, clip):
    x = _draw(rngs, dim)
    for t in range(sched.T, 0, -1):
        beta = sched.betas[t - 1]
        ab, ab_prev = sched.abar(t), sched.abar(t - 1)
        eps = _guided_eps(model, x, t, sched, lam, classifier, targets)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        x = mean + math.sqrt(var) * _draw(rngs, dim) if var > 0 else mean
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sample at timestep {t}")
    return x


def _resolve_targets(spec: GuidanceSpec, classifier, n):
    if classifier is None:
        return None
    if spec.target_label is not None:
        return np.full(n, spec.target_label, dtype=np.int64)
    return np.arange(n, dtype=np.int64) % classifier.config.out_dim


def _run(kernel, model, sched, spec, classifier, n, seed, dim, threads, clip):
    if spec.lam > 0 and classifier is None:
        raise ValueError("guidance scale > 0 requires a classifier")
    if spec.lam == 0 and classifier is not None:
        raise ValueError("a classifier was supplied but the guidance scale is 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    dim = dim or model.config.in_dim
    ts = timestep_sequence(sched.T, spec.steps)
    targets = _resolve_targets(spec, classifier, n)
    starts = list(range(0, n, CHAIN_CHUNK))

    def run_chunk(s):
        ids = range(s, min(s + CHAIN_CHUNK, n))
        tg = None if targets is None else targets[s:s + len(ids)]
        return kernel(model, sched, ts, spec.eta, spec.lam, classifier, tg,
                      chain_rngs(seed, ids), dim, clip)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run_chunk, starts))
    else:
        parts = [run_chunk(s) for s in starts]
    return SampleBatch(samples=np.concatenate(parts), seed=seed, lam=spec.lam,
                       steps=len(ts), eta=spec.eta, targets=targets)


def sample(model, sched: NoiseSchedule, n: int, seed: int, steps: int = 50, eta: float = 0.0,
           *, dim: int | None = None, threads: int = 1, clip: bool = False) -> SampleBatch:
    """Unguided implicit (DDIM-style) sampling; ``eta=1`` with ``steps=T`` is ancestral-equivalent."""
    return _run(_ddim_chunk, model, sched, GuidanceSpec(0.0, None, steps, eta), None, n, seed,
                dim, threads, clip)


def guided_sample(model, sched: NoiseSchedule, spec: GuidanceSpec, classifier, n: int,
                  seed: int, *, dim: int | None = None, threads: int = 1,
                  clip: bool = False) -> SampleBatch:
    """Classifier-guided implicit sampling.

    Each chain ``i`` draws from its own generator seeded by ``(seed, i)``, so
    the output does not depend on ``threads``.  With ``spec.target_label``
    unset, chain ``i`` targets class ``i mod C``.
    """
    return _run(_ddim_chunk, model, sched, spec, classifier, n, seed, dim, threads, clip)


def ancestral_sample(model, sched: NoiseSchedule, n: int, seed: int,
                     spec: GuidanceSpec | None = None, classifier=None, *,
                     dim: int | None = None, threads: int = 1) -> SampleBatch:
    """Stochastic DDPM sampler over all ``T`` steps with posterior variance."""
    spec = spec or GuidanceSpec(steps=sched.T, eta=1.0)
    batch = _run(_ancestral_chunk, model, sched, spec, classifier, n, seed, dim, threads, False)
    batch.steps = sched.T
    return batch


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    activation: str = "silu"
    time_embed_dim: int = 64
    epochs: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


def make_denoiser(dim: int, config: DenoiserConfig):
    return Mlp(MlpConfig(dim, config.hidden, dim, config.activation,
                         time_embed_dim=config.time_embed_dim, time_mode="add"), seed=config.seed)


def train_denoiser(data, sched: NoiseSchedule, config: DenoiserConfig = DenoiserConfig(),
                   model=None, log_every: int = 0):
    """Fit a noise-prediction network to ``data``; returns ``(model, per-epoch losses)``."""
    data = np.asarray(data, dtype=np.float64)
    model = model or make_denoiser(data.shape[1], config)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(data)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = denoising_loss(model, data[idx], sched, rng)
            opt.step(model.params, grads)
            total += loss * len(idx)
        losses.append(total / n)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("denoiser epoch %d loss %.4f", epoch + 1, losses[-1])
    return model, losses
