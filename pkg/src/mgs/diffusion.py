"""Forward diffusion, denoiser training, and unguided samplers.

Timesteps are 1-based: t runs over 1..N, alpha_bar[0] corresponds to t=1,
and the array `alpha_bar_prev` carries the t-1 value with the convention
alpha_bar_0 = 1. The two samplers are an ancestral chain (per-step Gaussian
posterior) and a deterministic few-step sampler that denoises to the
clean-sample estimate and re-noises to the next timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # (N,), index t-1
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray  # alpha_bar_{t-1}, with alpha_bar_0 = 1
    posterior_var: np.ndarray  # bar_beta_t
    posterior_coef_x0: np.ndarray  # sqrt(abar_{t-1}) * beta_t / (1 - abar_t)
    posterior_coef_xt: np.ndarray  # sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)

    @property
    def n_steps(self) -> int:
        return self.beta.shape[0]

    def _check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.n_steps):
            raise ShapeError(f"timestep {t} outside [1, {self.n_steps}]")
        return t_arr

    def beta_at(self, t):
        return self.beta[self._check_t(t) - 1]

    def alpha_at(self, t):
        return self.alpha[self._check_t(t) - 1]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._check_t(t) - 1]

    def alpha_bar_prev_at(self, t):
        return self.alpha_bar_prev[self._check_t(t) - 1]

    def posterior_var_at(self, t):
        return self.posterior_var[self._check_t(t) - 1]


def make_linear_schedule(n_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced per-step variances, endpoints inclusive."""
    if n_steps < 2:
        raise ShapeError("need at least 2 diffusion steps")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ShapeError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    coef_x0 = np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    coef_xt = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_var=posterior_var,
        posterior_coef_x0=coef_x0,
        posterior_coef_xt=coef_xt,
    )


@dataclass
class EpsModel:
    """Noise-prediction network conditioned on a sinusoidal time embedding."""

    net: nn.FeedforwardNet
    embed_dim: int
    data_dim: int

    def __post_init__(self):
        if self.net.input_dim != self.data_dim + self.embed_dim:
            raise ShapeError("net input dim must be data_dim + embed_dim")
        if self.net.output_dim != self.data_dim:
            raise ShapeError("net output dim must equal data_dim")

    def _inputs(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            emb = np.broadcast_to(nn.time_embed(int(t_arr), self.embed_dim),
                                  (x.shape[0], self.embed_dim))
        else:
            if t_arr.shape[0] != x.shape[0]:
                raise ShapeError("per-sample timesteps must match batch size")
            emb = nn.time_embed(t_arr, self.embed_dim)
        return np.concatenate([x, emb], axis=1)

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        y, _ = nn.forward(self.net, self._inputs(x, t))
        return y

    def predict_with_cache(self, x: np.ndarray, t):
        y, cache = nn.forward(self.net, self._inputs(x, t))
        return y, cache


def make_eps_model(data_dim: int, hidden, embed_dim: int,
                   rng: np.random.Generator, activation: str = "tanh") -> EpsModel:
    dims = [data_dim + embed_dim, *hidden, data_dim]
    acts = [activation] * len(hidden) + ["identity"]
    return EpsModel(net=nn.init_net(dims, acts, rng),
                    embed_dim=embed_dim, data_dim=data_dim)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noised sample x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    abar = schedule.alpha_bar_at(t)
    if np.ndim(abar) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_params(x0: np.ndarray, xt: np.ndarray, t: int,
                     schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and variance of the forward-process posterior at step t >= 2."""
    if t < 2:
        raise ShapeError("posterior is defined for t >= 2")
    mean = schedule.posterior_coef_x0[t - 1] * np.asarray(x0, dtype=np.float64) \
        + schedule.posterior_coef_xt[t - 1] * np.asarray(xt, dtype=np.float64)
    return mean, float(schedule.posterior_var[t - 1])


def tweedie_x0(xt: np.ndarray, eps_hat: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Clean-sample estimate (xt - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    abar = schedule.alpha_bar_at(t)
    if np.ndim(abar) == 1:
        abar = abar[:, None]
    return (xt - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def eta_weights(t, schedule: NoiseSchedule) -> np.ndarray:
    """Per-step loss weight beta_t^2 / (alpha_t (1 - abar_t))."""
    beta = schedule.beta_at(t)
    alpha = schedule.alpha_at(t)
    abar = schedule.alpha_bar_at(t)
    return beta * beta / (alpha * (1.0 - abar))


def training_loss(model: EpsModel, x0_batch: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator | None = None, weighting: str = "simple",
                  t=None, eps: np.ndarray | None = None):
    """Noise-prediction loss and exact parameter gradients.

    The loss is mean_i w_i * ||eps_i - eps_hat(x_t_i, t_i)||^2 with w_i = 1
    ("simple") or the step-dependent eta weight. Timesteps and noise are
    drawn from `rng` unless supplied explicitly (supply both for
    deterministic use, e.g. finite-difference checks).
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    if x0_batch.ndim != 2 or x0_batch.shape[0] == 0:
        raise ShapeError("x0 batch must be a nonempty 2-D array")
    if weighting not in ("simple", "eta"):
        raise ShapeError(f"unknown weighting {weighting!r}")
    b = x0_batch.shape[0]
    if t is None:
        if rng is None:
            raise ShapeError("need rng when t is not supplied")
        t = rng.integers(1, schedule.n_steps + 1, size=b)
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(b, int(t))
    if eps is None:
        if rng is None:
            raise ShapeError("need rng when eps is not supplied")
        eps = rng.standard_normal(x0_batch.shape)
    eps = np.asarray(eps, dtype=np.float64)
    xt = q_sample(x0_batch, t, eps, schedule)
    eps_hat, cache = model.predict_with_cache(xt, t)
    resid = eps - eps_hat
    if weighting == "eta":
        w = eta_weights(t, schedule)
    else:
        w = np.ones(b)
    per_sample = w * np.sum(resid * resid, axis=1)
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise NumericError(f"non-finite training loss at sample index {bad}")
    loss = float(per_sample.mean())
    dl_dy = (-2.0 / b) * (w[:, None] * resid)
    grads, _ = nn.backward(model.net, cache, dl_dy)
    return loss, grads


def ancestral_step(xt: np.ndarray, t: int, model, schedule: NoiseSchedule,
                   z: np.ndarray) -> np.ndarray:
    """One reverse-chain step t -> t-1 (z must be zeros at t=1)."""
    eps_hat = model.predict(xt, t)
    alpha = schedule.alpha_at(t)
    abar = schedule.alpha_bar_at(t)
    mean = (xt - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return mean + np.sqrt(schedule.posterior_var_at(t)) * z


def _ancestral_jump(xt: np.ndarray, t_from: int, t_to: int, model,
                    schedule: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    """Strided stochastic step t_from -> t_to for respaced ancestral chains."""
    eps_hat = model.predict(xt, t_from)
    x0_hat = tweedie_x0(xt, eps_hat, t_from, schedule)
    ab_from = schedule.alpha_bar_at(t_from)
    ab_to = schedule.alpha_bar_at(t_to)
    var = (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - ab_from / ab_to)
    dir_coef = np.sqrt(max(1.0 - ab_to - var, 0.0))
    return np.sqrt(ab_to) * x0_hat + dir_coef * eps_hat + np.sqrt(var) * z


def deterministic_step(xt: np.ndarray, t_from: int, t_to: int, model,
                       schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic step t_from -> t_to: denoise to x0_hat, re-noise to t_to."""
    if not (1 <= t_to < t_from):
        raise ShapeError(f"need 1 <= t_to < t_from, got {t_from} -> {t_to}")
    eps_hat = model.predict(xt, t_from)
    x0_hat = tweedie_x0(xt, eps_hat, t_from, schedule)
    ab_to = schedule.alpha_bar_at(t_to)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps_hat


def timestep_subsequence(n_steps: int, sample_steps: int) -> tuple[int, ...]:
    """Evenly spaced, strictly decreasing timesteps from N down to 1."""
    if not (2 <= sample_steps <= n_steps):
        raise ShapeError(f"sample_steps must be in [2, {n_steps}]")
    ts = np.unique(np.round(np.linspace(n_steps, 1, sample_steps)).astype(int))[::-1]
    if len(ts) != sample_steps:
        raise ShapeError("could not build a strictly decreasing subsequence")
    return tuple(int(t) for t in ts)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str  # "ancestral" | "deterministic"
    sample_steps: int
    seed: int = 0
    timesteps: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ancestral", "deterministic"):
            raise ShapeError(f"unknown sampler kind {self.kind!r}")

    def resolve_timesteps(self, n_steps: int) -> tuple[int, ...]:
        ts = self.timesteps
        if ts is None:
            ts = timestep_subsequence(n_steps, self.sample_steps)
        if len(ts) != self.sample_steps:
            raise ShapeError("timestep subsequence length != sample_steps")
        if ts[0] != n_steps or ts[-1] != 1:
            raise ShapeError("timestep subsequence must start at N and end at 1")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ShapeError("timestep subsequence must be strictly decreasing")
        return ts


def sample(model, schedule: NoiseSchedule, config: SamplerConfig, batch_size: int,
           guidance_hook=None) -> np.ndarray:
    """Draw a batch from the reverse chain.

    Starts from standard normal x_N and walks the configured timestep
    subsequence down to the model output. If `guidance_hook` is given it is
    called after every update as hook(x_next, x_current, t, step_index) and
    its return value replaces x_next.
    """
    if batch_size < 0:
        raise ShapeError("batch_size must be >= 0")
    d = model.data_dim
    if batch_size == 0:
        return np.zeros((0, d))
    ts = config.resolve_timesteps(schedule.n_steps)
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal((batch_size, d))
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        x_cur = x
        if config.kind == "ancestral":
            if t == 1:
                x = ancestral_step(x_cur, 1, model, schedule, np.zeros_like(x_cur))
            elif t_next == t - 1:
                z = rng.standard_normal(x_cur.shape)
                x = ancestral_step(x_cur, t, model, schedule, z)
            else:
                z = rng.standard_normal(x_cur.shape)
                x = _ancestral_jump(x_cur, t, t_next, model, schedule, z)
        else:
            if t == 1:
                x = tweedie_x0(x_cur, model.predict(x_cur, 1), 1, schedule)
            else:
                x = deterministic_step(x_cur, t, t_next, model, schedule)
        if guidance_hook is not None:
            x = guidance_hook(x, x_cur, t, i)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state after step at t={t}")
    return x


def train_eps_model(data: np.ndarray, schedule: NoiseSchedule, hidden=(96, 96),
                    embed_dim: int = 8, steps: int = 3000, batch_size: int = 128,
                    lr: float = 1e-3, weighting: str = "simple", seed: int = 0,
                    activation: str = "tanh"):
    """Train a denoiser from scratch; returns (model, per-step loss list)."""
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    model = make_eps_model(data.shape[1], hidden, embed_dim, rng, activation)
    params = model.net.params()
    opt = nn.adam_init(params, lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        loss, grads = training_loss(model, data[idx], schedule, rng, weighting)
        flat = []
        for dw, db in grads:
            flat.extend((dw, db))
        nn.adam_step(opt, params, flat)
        losses.append(loss)
    return model, losses
