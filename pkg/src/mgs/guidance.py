"""Sampling-time manifold guidance.

A fixed relational target M (built once from reference data through the
trained pair H = g∘F, stop-gradient) is compared against the relational
matrix of the evolving batch's clean-sample estimates, and the gradient of
the squared mismatch with respect to the noisy batch is subtracted from
the denoising update during the first few (high-noise) steps. The batch
evolves jointly: the mismatch couples all batch members through the
relation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffusion as df
from . import nn
from .errors import NumericError, ShapeError
from .manifold import (ManifoldModel, normalize_rows, normalize_rows_backward,
                       prior_relations, relation_kernel_backward)

PROVENANCES = ("reference-batch", "balanced-reference")
GUIDE_ON = ("x0hat", "xt")
TARGET_MODES = ("fixed", "per-step")


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 5.0  # guidance scale
    steps: int = 5  # apply at the first `steps` denoising steps
    batch: int = 32
    provenance: str = "balanced-reference"
    guide_on: str = "x0hat"
    skip_eps_jacobian: bool = False
    target_mode: str = "fixed"

    def __post_init__(self):
        if self.lam < 0:
            raise ShapeError("guidance scale must be >= 0")
        if self.steps < 0:
            raise ShapeError("guidance step count must be >= 0")
        if self.lam > 0 and self.batch < 2:
            raise ShapeError("guided sampling needs a batch of at least 2")
        if self.provenance not in PROVENANCES:
            raise ShapeError(f"unknown target provenance {self.provenance!r}")
        if self.guide_on not in GUIDE_ON:
            raise ShapeError(f"unknown guide_on {self.guide_on!r}")
        if self.target_mode not in TARGET_MODES:
            raise ShapeError(f"unknown target mode {self.target_mode!r}")


@dataclass
class ManifoldTarget:
    """Relational target; a plain constant, no gradient ever flows into it."""

    matrix: np.ndarray
    provenance: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError("target matrix must be square")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _connected_components(adj: np.ndarray) -> list[list[int]]:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(adj[i] & ~seen):
                seen[j] = True
                stack.append(int(j))
        comps.append(sorted(comp))
    return comps


def _farthest_point_order(points: np.ndarray, count: int) -> list[int]:
    """Greedy max-min selection, seeded at the point farthest from the mean."""
    dist_to_mean = np.sum((points - points.mean(axis=0)) ** 2, axis=1)
    chosen = [int(np.argmax(dist_to_mean))]
    dist = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def balanced_reference_indices(features: np.ndarray, relations: np.ndarray,
                               count: int) -> np.ndarray:
    """Stratified pick: equalize counts over relation clusters.

    Clusters are the connected components of the thresholded (>= 0.5)
    relation graph; quotas are filled round-robin over clusters (largest
    first) and each cluster's quota is met by greedy farthest-point
    selection in feature space. Fully deterministic.
    """
    comps = _connected_components(relations >= 0.5)
    comps.sort(key=lambda c: (-len(c), c[0]))
    sizes = [len(c) for c in comps]
    if sum(sizes) < count:
        raise ShapeError("not enough reference samples to stratify")
    quotas = [0] * len(comps)
    remaining = count
    while remaining > 0:
        progressed = False
        for i in range(len(comps)):
            if remaining == 0:
                break
            if quotas[i] < sizes[i]:
                quotas[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ShapeError("not enough reference samples to stratify")
    picked = []
    for comp, quota in zip(comps, quotas):
        if quota == 0:
            continue
        local = _farthest_point_order(features[comp], quota)
        picked.extend(comp[i] for i in local)
    return np.array(picked, dtype=int)


def estimate_manifold_target(model: ManifoldModel, reference_data: np.ndarray,
                             cfg: GuidanceConfig, seed: int = 0,
                             pool_cap: int = 1024) -> ManifoldTarget:
    """Build the fixed relational target from reference (training) data.

    reference-batch: uniform draw of `cfg.batch` reference samples.
    balanced-reference: stratified draw equalizing relation clusters.
    The result is a constant matrix detached from everything downstream.
    """
    ref = np.asarray(reference_data, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[0] < cfg.batch:
        raise ShapeError(
            f"need at least {cfg.batch} reference samples, got {ref.shape[0]}")
    rng = np.random.default_rng(seed)
    if cfg.provenance == "reference-batch":
        idx = rng.choice(ref.shape[0], size=cfg.batch, replace=False)
        idx = np.sort(idx)
    else:
        pool = ref
        if ref.shape[0] > pool_cap:
            pool = ref[rng.choice(ref.shape[0], size=pool_cap, replace=False)]
        feats = model.embed(pool)
        relations = model.relation.relations(feats)
        local = balanced_reference_indices(feats, relations, cfg.batch)
        return ManifoldTarget(matrix=model.relations(pool[local]),
                              provenance=cfg.provenance)
    return ManifoldTarget(matrix=model.relations(ref[idx]),
                          provenance=cfg.provenance)


def relation_mismatch_and_grad(model: ManifoldModel, x: np.ndarray,
                               target: np.ndarray):
    """Squared Frobenius mismatch ||M - H(x)||^2 and its gradient wrt x.

    Differentiates through the full chain: embedder net, optional row
    normalization, relation embedding net, and the Gaussian kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    emb = model.embedder
    rel = model.relation
    y, cache_f = nn.forward(emb.net, x)
    if emb.normalize:
        z, norms = normalize_rows(y)
    else:
        z, norms = y, None
    p, cache_phi = nn.forward(rel.phi, z)
    r = prior_relations(p, rel.tau)
    diff = target - r
    value = float(np.sum(diff * diff))
    dj_dr = -2.0 * diff
    dp = relation_kernel_backward(p, r, dj_dr, rel.tau)
    _, dz = nn.backward(rel.phi, cache_phi, dp)
    if emb.normalize:
        dy = normalize_rows_backward(z, norms, dz)
    else:
        dy = dz
    _, dx = nn.backward(emb.net, cache_f, dy)
    return value, dx


def guidance_gradient(xt_batch: np.ndarray, t: int, eps_model: df.EpsModel,
                      manifold_model: ManifoldModel, target: ManifoldTarget,
                      schedule: df.NoiseSchedule, cfg: GuidanceConfig) -> np.ndarray:
    """lam * d/dx_t ||M - H(x0_hat(x_t))||^2 for a whole batch.

    With `guide_on="x0hat"` the relational matrix is computed on the
    Tweedie estimate, and the chain rule includes
    d(x0_hat)/d(x_t) = (1/sqrt(abar)) (I - sqrt(1-abar) d(eps)/d(x_t));
    `skip_eps_jacobian` drops the noise-model Jacobian term. With
    `guide_on="xt"` the relational matrix is computed on x_t directly.
    Exactly zero (and free of model evaluations) when lam == 0.
    """
    xt_batch = np.asarray(xt_batch, dtype=np.float64)
    if xt_batch.shape[0] != target.n:
        raise ShapeError(
            f"batch rows {xt_batch.shape[0]} != target size {target.n}")
    if cfg.lam == 0.0:
        return np.zeros_like(xt_batch)
    if cfg.guide_on == "xt":
        _, dx = relation_mismatch_and_grad(manifold_model, xt_batch, target.matrix)
        grad = cfg.lam * dx
    else:
        eps_hat, cache = eps_model.predict_with_cache(xt_batch, t)
        abar = float(schedule.alpha_bar_at(t))
        root_abar = np.sqrt(abar)
        root_one_minus = np.sqrt(1.0 - abar)
        x0_hat = (xt_batch - root_one_minus * eps_hat) / root_abar
        _, dx0 = relation_mismatch_and_grad(manifold_model, x0_hat, target.matrix)
        grad = dx0 / root_abar
        if not cfg.skip_eps_jacobian:
            upstream = dx0 * (-root_one_minus / root_abar)
            _, d_inputs = nn.backward(eps_model.net, cache, upstream)
            grad = grad + d_inputs[:, : eps_model.data_dim]
        grad = cfg.lam * grad
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite guidance gradient at timestep {t}")
    return grad


def make_guidance_hook(eps_model: df.EpsModel, manifold_model: ManifoldModel,
                       target: ManifoldTarget, schedule: df.NoiseSchedule,
                       cfg: GuidanceConfig, trace: list | None = None):
    """Hook for `diffusion.sample`: subtract the guidance gradient after
    each of the first `cfg.steps` denoising updates.

    Inactive steps return the state object unchanged, so lam=0 or steps=0
    runs are bit-identical to unguided ones.
    """

    def hook(x_next, x_cur, t, step_index):
        if cfg.lam == 0.0 or step_index >= cfg.steps:
            return x_next
        tgt = target
        if cfg.target_mode == "per-step":
            eps_hat = eps_model.predict(x_cur, t)
            x0_hat = df.tweedie_x0(x_cur, eps_hat, t, schedule)
            tgt = ManifoldTarget(matrix=manifold_model.relations(x0_hat),
                                 provenance="per-step")
        grad = guidance_gradient(x_cur, t, eps_model, manifold_model, tgt,
                                 schedule, cfg)
        if trace is not None:
            trace.append((step_index, t, float(np.linalg.norm(grad))))
        out = x_next - grad
        if not np.all(np.isfinite(out)):
            raise NumericError(f"guided update produced non-finite values at t={t}")
        return out

    return hook


def guided_sample(eps_model: df.EpsModel, manifold_model: ManifoldModel,
                  target: ManifoldTarget, schedule: df.NoiseSchedule,
                  sampler_cfg: df.SamplerConfig, guidance_cfg: GuidanceConfig,
                  seed: int | None = None, trace: list | None = None) -> np.ndarray:
    """Sample one guided batch of `guidance_cfg.batch` members."""
    cfg = sampler_cfg if seed is None else replace(sampler_cfg, seed=seed)
    hook = make_guidance_hook(eps_model, manifold_model, target, schedule,
                              guidance_cfg, trace)
    return df.sample(eps_model, schedule, cfg, guidance_cfg.batch,
                     guidance_hook=hook)
