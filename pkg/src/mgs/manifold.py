"""Manifold evaluation: embedder + relation network, objectives, diagnostics.

The pair (embedder F, relation net g) is trained so that H = g∘F maps a
batch of samples to an n x n relational matrix whose (i, j) entry scores
whether samples i and j share a submanifold. The embedder is trained by
maximizing a coding-rate objective over its features; the relation net is
trained to match a Gaussian-kernel prior computed from a cheap fixed
encoder (PCA here).

Orientation conventions follow the linear-algebra side of the problem:
`manifold_objective`, `compactness_measures` and `subspace_diagnostics`
take features as columns (d x n); everything that feeds a network takes
samples as rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import NumericError, ShapeError


# ---------------------------------------------------------------------------
# relation matrices


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """Symmetric matrix of squared Euclidean distances between rows."""
    points = np.asarray(points, dtype=np.float64)
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    d2 = np.maximum(d2, 0.0)
    d2 = 0.5 * (d2 + d2.T)
    np.fill_diagonal(d2, 0.0)
    return d2


def median_sq_dist(points: np.ndarray) -> float:
    """Median off-diagonal squared pairwise distance (temperature heuristic)."""
    d2 = pairwise_sq_dists(points)
    n = d2.shape[0]
    off = d2[~np.eye(n, dtype=bool)]
    med = float(np.median(off))
    if med <= 0.0:
        warnings.warn("degenerate point set; falling back to temperature 1.0")
        return 1.0
    return med


def prior_relations(features: np.ndarray, tau: float) -> np.ndarray:
    """Gaussian-kernel relations R(i,j) = exp(-||z_i - z_j||^2 / tau)."""
    if tau <= 0:
        raise ShapeError("temperature must be positive")
    r = np.exp(-pairwise_sq_dists(features) / tau)
    np.fill_diagonal(r, 1.0)
    return r


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns integer labels.

    Empty clusters are re-seeded at the point farthest from its assigned
    center, which keeps the run deterministic for a given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ShapeError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            centers[j] = points[np.argmax(d2)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        for j in range(k):
            members = new_labels == j
            if not members.any():
                worst = int(np.argmax(dists[np.arange(n), new_labels]))
                centers[j] = points[worst]
                new_labels[worst] = j
                members = new_labels == j
            centers[j] = points[members].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def kmeans_relations(features: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Binary co-membership relations from a k-means clustering."""
    labels = kmeans(features, k, seed)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# networks


def normalize_rows(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows to the unit sphere; returns (z, row_norms)."""
    norms = np.linalg.norm(y, axis=1)
    safe = np.maximum(norms, 1e-12)
    return y / safe[:, None], safe


def normalize_rows_backward(z: np.ndarray, norms: np.ndarray,
                            dz: np.ndarray) -> np.ndarray:
    """Gradient through row normalization: dy = (dz - (z.dz) z) / ||y||."""
    inner = np.sum(z * dz, axis=1, keepdims=True)
    return (dz - inner * z) / norms[:, None]


@dataclass
class EmbedderF:
    """Feature embedder; optionally projects outputs to the unit sphere."""

    net: nn.FeedforwardNet
    normalize: bool = True

    @property
    def feature_dim(self) -> int:
        return self.net.output_dim

    def embed(self, x: np.ndarray) -> np.ndarray:
        y, _ = nn.forward(self.net, x)
        if self.normalize:
            y, _ = normalize_rows(y)
        return y


@dataclass
class RelationNetG:
    """Relation network: shared embedding phi with a Gaussian kernel head.

    R(i,j) = exp(-||phi(z_i) - phi(z_j)||^2 / tau) is symmetric with unit
    diagonal and entries in (0, 1] by construction, for any batch size.
    """

    phi: nn.FeedforwardNet
    tau: float = 1.0

    def relations(self, z: np.ndarray) -> np.ndarray:
        p, _ = nn.forward(self.phi, z)
        return prior_relations(p, self.tau)


@dataclass
class ManifoldModel:
    embedder: EmbedderF
    relation: RelationNetG

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.embedder.embed(x)

    def relations(self, x: np.ndarray) -> np.ndarray:
        return self.relation.relations(self.embed(x))


def relation_kernel_backward(p: np.ndarray, r: np.ndarray, dj_dr: np.ndarray,
                             tau: float) -> np.ndarray:
    """Gradient of a scalar J wrt the kernel inputs p given dJ/dR.

    Uses dR_ij/dp_i = R_ij * (-2/tau) (p_i - p_j) and the symmetry of R.
    """
    w = (dj_dr + dj_dr.T) * r * (-2.0 / tau)
    return p * w.sum(axis=1)[:, None] - w @ p


def relation_loss(g: RelationNetG, z: np.ndarray, r_pre: np.ndarray):
    """Squared Frobenius mismatch between prior and learned relations.

    Returns (loss, phi parameter grads, gradient wrt z).
    """
    z = np.asarray(z, dtype=np.float64)
    r_pre = np.asarray(r_pre, dtype=np.float64)
    if r_pre.shape != (z.shape[0], z.shape[0]):
        raise ShapeError("prior relation matrix must be n x n for n rows of z")
    p, cache = nn.forward(g.phi, z)
    r = prior_relations(p, g.tau)
    diff = r_pre - r
    loss = float(np.sum(diff * diff))
    if not np.isfinite(loss):
        raise NumericError("relation loss is not finite")
    dj_dr = -2.0 * diff
    dp = relation_kernel_backward(p, r, dj_dr, g.tau)
    phi_grads, dz = nn.backward(g.phi, cache, dp)
    return loss, phi_grads, dz


# ---------------------------------------------------------------------------
# coding-rate objective


@dataclass(frozen=True)
class ObjectiveConfig:
    form: str = "logdet"  # "logdet" | "trace"
    eps_sq: float = 0.5

    def __post_init__(self):
        if self.form not in ("logdet", "trace"):
            raise ShapeError(f"unknown objective form {self.form!r}")
        if self.eps_sq <= 0:
            raise ShapeError("coding precision eps^2 must be positive")


def manifold_objective(z: np.ndarray, c: np.ndarray, cfg: ObjectiveConfig,
                       row_weighting: str = "group"):
    """Value and gradient of the rate objective to be maximized.

    `z` holds features as columns (d x n); `c` holds one membership vector
    per row (any number of rows, n columns, entries in [0, 1]) — the j-th
    row is the diagonal of the j-th membership matrix.

    trace form:   (Tr(Z Z^T) - sum_j Tr(Z C^j Z^T)) / (2n)
    logdet form:  1/2 logdet(I + a Z Z^T)
                  - sum_j g_j/2 logdet(I + a_j Z C^j Z^T)
    with a = d/(n eps^2) and a_j = d/(tr(C^j) eps^2).

    `row_weighting` picks g_j. "group" (one row per submanifold, e.g. a
    ground-truth partition) uses g_j = tr(C^j)/n. "sample" (one row per
    sample, e.g. rows of a learned relation matrix, where each cluster is
    described by ~n_j near-identical rows) uses g_j = 1/n so a cluster's
    compression term is not multiplied by its size; under a hard partition
    the two weightings then yield the identical objective. Membership rows
    with zero mass contribute nothing and are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z.ndim != 2 or c.ndim != 2:
        raise ShapeError("z and c must be 2-D")
    if row_weighting not in ("group", "sample"):
        raise ShapeError(f"unknown row weighting {row_weighting!r}")
    d, n = z.shape
    if c.shape[1] != n:
        raise ShapeError(f"membership columns {c.shape[1]} != sample count {n}")
    if np.any(c < -1e-12) or np.any(c > 1.0 + 1e-12):
        raise ShapeError("membership entries must lie in [0, 1]")
    if cfg.form == "trace":
        if row_weighting == "group":
            col_mass = c.sum(axis=0)
        else:
            masses = np.maximum(c.sum(axis=1, keepdims=True), 1e-12)
            col_mass = (c / masses).sum(axis=0)
        col_sq = np.sum(z * z, axis=0)
        value = (col_sq.sum() - float(col_mass @ col_sq)) / (2.0 * n)
        grad = z * (1.0 - col_mass)[None, :] / n
        return float(value), grad

    alpha = d / (n * cfg.eps_sq)
    s = np.eye(d) + alpha * (z @ z.T)
    sign, logdet = np.linalg.slogdet(s)
    if sign <= 0:
        raise NumericError("expansion term lost positive definiteness")
    value = 0.5 * logdet
    grad = alpha * np.linalg.solve(s, z)

    masses = c.sum(axis=1)
    active = masses > 1e-12
    if active.any():
        ca = c[active]
        tr = masses[active]
        alpha_j = d / (tr * cfg.eps_sq)
        if row_weighting == "group":
            gamma_j = tr / n
        else:
            gamma_j = np.full(tr.shape, 1.0 / n)
        zc = z[None, :, :] * ca[:, None, :]  # (k, d, n)
        mats = np.eye(d)[None] + alpha_j[:, None, None] * (zc @ z.T)
        signs, logdets = np.linalg.slogdet(mats)
        if np.any(signs <= 0):
            raise NumericError("compression term lost positive definiteness")
        value -= 0.5 * float(gamma_j @ logdets)
        sols = np.linalg.solve(mats, zc)
        grad -= np.einsum("k,kdn->dn", gamma_j * alpha_j, sols)
    if not np.isfinite(value):
        raise NumericError("objective value is not finite")
    return float(value), grad


def compactness_measures(m: np.ndarray, n: int | None = None):
    """Trace and coding-rate compactness of a d x n feature matrix.

    Returns (Tr(M M^T)/(2n), 1/2 logdet(I + (1/n) M M^T)); the two agree
    to first order in ||(1/n) M M^T||.
    """
    m = np.asarray(m, dtype=np.float64)
    if n is None:
        n = m.shape[1]
    elif n != m.shape[1]:
        raise ShapeError("n must equal the number of columns")
    trace_measure = float(np.sum(m * m)) / (2.0 * n)
    gram = np.eye(m.shape[0]) + (m @ m.T) / n
    sign, logdet = np.linalg.slogdet(gram)
    if sign <= 0:
        raise NumericError("gram matrix lost positive definiteness")
    return trace_measure, 0.5 * float(logdet)


# ---------------------------------------------------------------------------
# prior encoder (PCA stand-in for a pre-trained encoder)


@dataclass
class PriorEncoder:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, p), orthonormal columns


def fit_prior_encoder(data: np.ndarray, p: int) -> PriorEncoder:
    """Top-p principal directions of the data (mean-centered)."""
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    if not (1 <= p <= dim):
        raise ShapeError(f"need 1 <= p <= data dim, got p={p}")
    if n < p:
        raise ShapeError(f"need at least p={p} samples, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    usable = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-12))
    if usable < p:
        warnings.warn(f"covariance is rank {usable}; reducing components "
                      f"from {p} to {usable}")
        p = max(usable, 1)
    return PriorEncoder(mean=mean, basis=np.ascontiguousarray(eigvecs[:, :p]))


def encode(enc: PriorEncoder, data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) - enc.mean) @ enc.basis


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ModeSpectrum:
    label: int
    count: int
    singular_values: np.ndarray
    rank: int


@dataclass
class SubspaceReport:
    modes: list[ModeSpectrum]
    coherence: float
    excluded: list[int] = field(default_factory=list)


def subspace_diagnostics(z: np.ndarray, labels) -> SubspaceReport:
    """Cross-mode coherence and per-mode spectra of a d x n feature matrix.

    Coherence is max over mode pairs of sigma_max(Z_i^T Z_j) normalized by
    the modes' spectral norms; singular values below 10% of a mode's
    largest are counted as rank zero. Modes with fewer than two columns
    are excluded with a warning.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != z.shape[1]:
        raise ShapeError("labels must partition the columns of z")
    modes, excluded, blocks = [], [], []
    for lab in np.unique(labels):
        cols = z[:, labels == lab]
        if cols.shape[1] < 2:
            warnings.warn(f"mode {lab} has fewer than 2 samples; excluded")
            excluded.append(int(lab))
            continue
        svals = np.linalg.svd(cols, compute_uv=False)
        top = svals[0] if svals.size else 0.0
        rank = int(np.sum(svals >= 0.1 * top)) if top > 0 else 0
        modes.append(ModeSpectrum(int(lab), cols.shape[1], svals, rank))
        blocks.append(cols)
    coherence = 0.0
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            denom = modes[i].singular_values[0] * modes[j].singular_values[0]
            if denom <= 0:
                continue
            cross = np.linalg.norm(blocks[i].T @ blocks[j], ord=2)
            coherence = max(coherence, float(cross / denom))
    return SubspaceReport(modes=modes, coherence=coherence, excluded=excluded)


def memberships_from_labels(labels, n_modes: int | None = None) -> np.ndarray:
    """Hard partition rows (k x n) from integer labels."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if n_modes is not None and len(uniq) != n_modes:
        raise ShapeError(f"expected {n_modes} modes, found {len(uniq)}")
    return (uniq[:, None] == labels[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# training


@dataclass
class ManifoldConfig:
    feature_dim: int = 8
    hidden_embedder: tuple = (64, 64)
    hidden_relation: tuple = (32, 32)
    relation_dim: int = 8
    eps_sq: float = 0.5
    form: str = "logdet"
    tau: float | None = None  # None -> median heuristic on prior features
    tau_relation: float = 1.0
    normalize: bool = True
    prior_components: int = 8
    steps_relation: int = 400
    steps_embedder: int = 800
    steps_joint: int = 200
    lr_relation: float = 1e-3
    lr_embedder: float = 1e-3
    optimizer_embedder: str = "adam"  # "sgd" also supported
    train_n: int = 256
    relation_source: str = "learnable"  # or "kmeans-<k>"
    membership_refresh: int = 0  # stage-2 refresh period; 0 = fix at stage start
    seed: int = 0


def check_precision_condition(eps_sq: float, counts, feature_dim: int,
                              mode_dims) -> bool:
    """Theorem-style precision condition eps^4 < min_j (n_j/n) (d/d_j)^2."""
    counts = np.asarray(counts, dtype=np.float64)
    mode_dims = np.asarray(mode_dims, dtype=np.float64)
    n = counts.sum()
    bound = float(np.min(counts / n * (feature_dim / mode_dims) ** 2))
    ok = eps_sq**2 < bound
    if not ok:
        warnings.warn(
            f"coding precision eps^4={eps_sq ** 2:.4g} does not satisfy the "
            f"flat-spectrum condition (< {bound:.4g})")
    return ok


def _lr_schedule(base: float, step: int, total: int) -> float:
    # stage-wise decay: x0.1 at 60% and 85% of the stage
    lr = base
    if step >= int(0.6 * total):
        lr *= 0.1
    if step >= int(0.85 * total):
        lr *= 0.1
    return lr


def _embedder_step(embedder: EmbedderF, x, memberships, cfg_obj: ObjectiveConfig,
                   row_weighting: str = "group"):
    """Objective value and parameter gradients for one ascent step."""
    y, cache = nn.forward(embedder.net, x)
    if embedder.normalize:
        z, norms = normalize_rows(y)
    else:
        z, norms = y, None
    c = memberships(z) if callable(memberships) else memberships
    value, dz_cols = manifold_objective(z.T, c, cfg_obj, row_weighting)
    dz = dz_cols.T
    if embedder.normalize:
        dy = normalize_rows_backward(z, norms, dz)
    else:
        dy = dz
    # gradient ASCENT: feed the optimizer the gradient of (-value)
    grads, _ = nn.backward(embedder.net, cache, -dy)
    flat = [a for pair in grads for a in pair]
    return value, flat


def train_embedder(x: np.ndarray, memberships, *, feature_dim: int,
                   hidden=(64, 64), form: str = "logdet", eps_sq: float = 0.5,
                   normalize: bool = True, steps: int = 1500, lr: float = 1e-3,
                   optimizer: str = "adam", seed: int = 0,
                   net: nn.FeedforwardNet | None = None,
                   mode_dims=None) -> tuple[EmbedderF, list[float]]:
    """Train an embedder by maximizing the rate objective.

    `memberships` is either a fixed (k x n) array (e.g. a ground-truth
    partition) or a callable mapping the current embedded rows to such an
    array (e.g. rows of a relation net's output).
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if net is None:
        dims = [x.shape[1], *hidden, feature_dim]
        acts = ["tanh"] * len(hidden) + ["identity"]
        net = nn.init_net(dims, acts, rng)
    embedder = EmbedderF(net=net, normalize=normalize)
    cfg_obj = ObjectiveConfig(form=form, eps_sq=eps_sq)
    if mode_dims is not None and not callable(memberships):
        check_precision_condition(eps_sq, np.asarray(memberships).sum(axis=1),
                                  feature_dim, mode_dims)
    params = net.params()
    opt = nn.adam_init(params, lr=lr) if optimizer == "adam" else None
    values = []
    for step in range(steps):
        value, flat = _embedder_step(embedder, x, memberships, cfg_obj)
        if not np.isfinite(value):
            raise NumericError(f"embedder training diverged at step {step}")
        cur_lr = _lr_schedule(lr, step, steps)
        if opt is not None:
            opt.lr = cur_lr
            nn.adam_step(opt, params, flat)
        else:
            nn.sgd_step(cur_lr, params, flat)
        values.append(value)
    return embedder, values


def train_manifold(data: np.ndarray, cfg: ManifoldConfig):
    """Three-stage training of the (embedder, relation net) pair.

    Stage 1 fits the relation net against the prior relations (or a
    k-means co-membership target, per `relation_source`). Stage 2 trains
    the embedder with memberships read off the frozen relation net.
    Stage 3 alternates one descent step on the relation mismatch with one
    ascent step on the rate objective. Deterministic given cfg.seed.

    Returns (ManifoldModel, logs) where logs maps stage names to loss /
    objective traces.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError("training data must be a nonempty 2-D array")
    rng = np.random.default_rng(cfg.seed)
    n_train = min(cfg.train_n, data.shape[0])
    idx = rng.choice(data.shape[0], size=n_train, replace=False)
    x = data[idx]

    p = min(cfg.prior_components, data.shape[1])
    enc = fit_prior_encoder(x, p)
    feats = encode(enc, x)
    if cfg.relation_source == "learnable":
        tau = cfg.tau if cfg.tau is not None else median_sq_dist(feats)
        r_target = prior_relations(feats, tau)
    elif cfg.relation_source.startswith("kmeans-"):
        k = int(cfg.relation_source.split("-", 1)[1])
        tau = cfg.tau if cfg.tau is not None else median_sq_dist(feats)
        r_target = kmeans_relations(feats, k, cfg.seed)
    else:
        raise ShapeError(f"unknown relation source {cfg.relation_source!r}")

    emb_dims = [data.shape[1], *cfg.hidden_embedder, cfg.feature_dim]
    emb_acts = ["tanh"] * len(cfg.hidden_embedder) + ["identity"]
    embedder = EmbedderF(net=nn.init_net(emb_dims, emb_acts, rng),
                         normalize=cfg.normalize)
    rel_dims = [cfg.feature_dim, *cfg.hidden_relation, cfg.relation_dim]
    rel_acts = ["tanh"] * len(cfg.hidden_relation) + ["identity"]
    relation = RelationNetG(phi=nn.init_net(rel_dims, rel_acts, rng),
                            tau=cfg.tau_relation)
    cfg_obj = ObjectiveConfig(form=cfg.form, eps_sq=cfg.eps_sq)
    logs = {"relation": [], "embedder": [], "joint_relation": [],
            "joint_objective": [], "tau": tau}

    # stage 1: relation net against the target relations, embedder frozen
    phi_params = relation.phi.params()
    opt_g = nn.adam_init(phi_params, lr=cfg.lr_relation)
    z0 = embedder.embed(x)
    for step in range(cfg.steps_relation):
        loss, phi_grads, _ = relation_loss(relation, z0, r_target)
        if not np.isfinite(loss):
            raise NumericError(f"relation training diverged at step {step}")
        nn.adam_step(opt_g, phi_params, [a for pair in phi_grads for a in pair])
        logs["relation"].append(loss)

    # stage 2: embedder with memberships read off the frozen relation net
    emb_params = embedder.net.params()
    opt_f = (nn.adam_init(emb_params, lr=cfg.lr_embedder)
             if cfg.optimizer_embedder == "adam" else None)
    if cfg.relation_source == "learnable":
        current_c = relation.relations(embedder.embed(x))
    else:
        current_c = r_target
    for step in range(cfg.steps_embedder):
        refresh = cfg.membership_refresh
        if (cfg.relation_source == "learnable" and refresh > 0
                and step > 0 and step % refresh == 0):
            current_c = relation.relations(embedder.embed(x))
        value, flat = _embedder_step(embedder, x, current_c, cfg_obj, "sample")
        if not np.isfinite(value):
            raise NumericError(f"embedder training diverged at step {step}")
        cur_lr = _lr_schedule(cfg.lr_embedder, step, cfg.steps_embedder)
        if opt_f is not None:
            opt_f.lr = cur_lr
            nn.adam_step(opt_f, emb_params, flat)
        else:
            nn.sgd_step(cur_lr, emb_params, flat)
        logs["embedder"].append(value)

    # stage 3: alternating descent (relation) / ascent (embedder)
    for step in range(cfg.steps_joint):
        z = embedder.embed(x)
        loss, phi_grads, _ = relation_loss(relation, z, r_target)
        nn.adam_step(opt_g, phi_params, [a for pair in phi_grads for a in pair])
        logs["joint_relation"].append(loss)
        if cfg.relation_source == "learnable":
            current_c = relation.relations(embedder.embed(x))
        value, flat = _embedder_step(embedder, x, current_c, cfg_obj, "sample")
        if not np.isfinite(value) or not np.isfinite(loss):
            raise NumericError(f"joint training diverged at step {step}")
        if opt_f is not None:
            opt_f.lr = cfg.lr_embedder * 0.01
            nn.adam_step(opt_f, emb_params, flat)
        else:
            nn.sgd_step(cfg.lr_embedder * 0.01, emb_params, flat)
        logs["joint_objective"].append(value)

    return ManifoldModel(embedder=embedder, relation=relation), logs
