import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgs import manifold as mf
from mgs import nn
from mgs.errors import ShapeError
from tests.oracles import central_diff


# ---------------------------------------------------------------------------
# prior relations


def test_prior_relations_identical_points():
    feats = np.array([[1.0, 2.0], [1.0, 2.0]])
    r = mf.prior_relations(feats, 1.0)
    assert np.allclose(r, 1.0)


def test_prior_relations_unit_distance_temperature():
    feats = np.array([[0.0], [1.0]])
    r = mf.prior_relations(feats, 1.0)  # squared distance equals tau
    assert abs(r[0, 1] - np.exp(-1.0)) < 1e-15


def test_prior_relations_matches_two_loop_oracle():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(4, 3))
    d2 = mf.pairwise_sq_dists(feats)
    tau = float(np.median(d2[~np.eye(4, dtype=bool)]))
    r = mf.prior_relations(feats, tau)
    for i in range(4):
        for j in range(4):
            expect = np.exp(-np.sum((feats[i] - feats[j]) ** 2) / tau)
            assert abs(r[i, j] - expect) < 1e-12


def test_prior_relations_structure():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(7, 4))
    r = mf.prior_relations(feats, 2.0)
    assert np.array_equal(r, r.T)
    assert np.array_equal(np.diag(r), np.ones(7))
    assert np.all(r > 0) and np.all(r <= 1)


def test_prior_relations_rejects_bad_tau():
    with pytest.raises(ShapeError):
        mf.prior_relations(np.zeros((2, 2)), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_prior_relations_shift_invariant(seed, shift):
    feats = np.random.default_rng(seed).normal(size=(5, 3))
    r1 = mf.prior_relations(feats, 1.5)
    r2 = mf.prior_relations(feats + shift, 1.5)
    assert np.allclose(r1, r2, atol=1e-9)


# ---------------------------------------------------------------------------
# relation net and its loss


def _relation_net(rng, d=3, rel_dim=2):
    return mf.RelationNetG(phi=nn.init_net((d, 8, rel_dim), ("tanh", "identity"), rng),
                           tau=1.0)


def test_relation_loss_zero_when_target_is_own_output():
    rng = np.random.default_rng(2)
    g = _relation_net(rng)
    z = rng.normal(size=(5, 3))
    r_self = g.relations(z)
    loss, phi_grads, dz = mf.relation_loss(g, z, r_self)
    assert loss == 0.0
    assert not dz.any()
    for dw, db in phi_grads:
        assert not dw.any() and not db.any()


def test_relation_loss_gradients_match_fd():
    rng = np.random.default_rng(3)
    g = _relation_net(rng)
    z = rng.normal(size=(4, 3))
    r_pre = mf.prior_relations(rng.normal(size=(4, 2)), 1.0)

    def wrt_params(vec):
        nn.set_params_flat(g.phi, vec)
        loss, phi_grads, _ = mf.relation_loss(g, z, r_pre)
        return loss, np.concatenate([a.ravel() for pair in phi_grads for a in pair])

    rep = nn.finite_diff_check(wrt_params, nn.get_params_flat(g.phi), step=1e-5)
    assert rep.max_rel_error < 1e-4

    def wrt_z(zv):
        loss, _, dz = mf.relation_loss(g, zv, r_pre)
        return loss, dz

    rep_z = nn.finite_diff_check(wrt_z, z, step=1e-5)
    assert rep_z.max_rel_error < 1e-4


def test_relation_loss_decreases_during_training():
    rng = np.random.default_rng(4)
    g = _relation_net(rng, d=2, rel_dim=2)
    z = rng.normal(size=(8, 2))
    r_pre = mf.prior_relations(rng.normal(size=(8, 2)), 2.0)
    params = g.phi.params()
    opt = nn.adam_init(params, lr=3e-3)
    losses = []
    for _ in range(50):
        loss, phi_grads, _ = mf.relation_loss(g, z, r_pre)
        losses.append(loss)
        nn.adam_step(opt, params, [a for pair in phi_grads for a in pair])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_relation_net_output_well_formed_any_batch():
    rng = np.random.default_rng(5)
    g = _relation_net(rng)
    for n in (2, 3, 9):
        r = g.relations(rng.normal(size=(n, 3)))
        assert r.shape == (n, n)
        assert np.array_equal(r, r.T)
        assert np.allclose(np.diag(r), 1.0)


# ---------------------------------------------------------------------------
# rate objective


def test_trace_form_zero_on_hard_partition():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4, 8))
    c = mf.memberships_from_labels([0, 0, 1, 1, 2, 2, 0, 1])
    value, _ = mf.manifold_objective(z, c, mf.ObjectiveConfig("trace", 0.5))
    assert abs(value) < 1e-12


def test_logdet_closed_form_two_singletons():
    # direct evaluation of the 2x2 diagonal matrices:
    # 0.5*logdet(3I) - 0.25*logdet(diag(5,1)) - 0.25*logdet(diag(1,5))
    direct = 0.5 * np.log(9.0) - 0.25 * np.log(5.0) - 0.25 * np.log(5.0)
    assert abs(direct - (np.log(3.0) - 0.5 * np.log(5.0))) < 1e-15
    value, _ = mf.manifold_objective(np.eye(2), np.eye(2),
                                     mf.ObjectiveConfig("logdet", 0.5))
    assert abs(value - direct) < 1e-12
    assert abs(value - 0.29389) < 5e-6


def test_logdet_gradient_matches_fd():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(4, 8))
    c = rng.uniform(0.0, 1.0, size=(8, 8))
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    for weighting in ("group", "sample"):
        def fn(zv, w=weighting):
            return mf.manifold_objective(zv, c, mf.ObjectiveConfig("logdet", 0.5), w)

        rep = nn.finite_diff_check(fn, z, step=1e-5)
        assert rep.max_rel_error < 1e-4


def test_trace_gradient_matches_fd():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(3, 6))
    c = rng.uniform(0.0, 1.0, size=(4, 6))

    def fn(zv):
        return mf.manifold_objective(zv, c, mf.ObjectiveConfig("trace", 0.5))

    assert nn.finite_diff_check(fn, z, step=1e-5).max_rel_error < 1e-4


def test_logdet_zero_for_single_all_ones_group():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(3, 7))
    value, _ = mf.manifold_objective(z, np.ones((1, 7)),
                                     mf.ObjectiveConfig("logdet", 0.5))
    assert value == 0.0


def test_sample_weighting_equals_group_on_hard_partition():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(4, 9))
    labels = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    c_group = mf.memberships_from_labels(labels)
    c_sample = c_group[np.asarray(labels)]  # one (duplicated) row per sample
    cfg = mf.ObjectiveConfig("logdet", 0.5)
    vg, _ = mf.manifold_objective(z, c_group, cfg, "group")
    vs, _ = mf.manifold_objective(z, c_sample, cfg, "sample")
    assert abs(vg - vs) < 1e-10
    vt_g, _ = mf.manifold_objective(z, c_group, mf.ObjectiveConfig("trace", 0.5), "group")
    vt_s, _ = mf.manifold_objective(z, c_sample, mf.ObjectiveConfig("trace", 0.5), "sample")
    assert abs(vt_g - vt_s) < 1e-10


def test_objective_invariant_under_orthogonal_map():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(5, 9))
    c = rng.uniform(0.0, 1.0, size=(9, 9))
    np.fill_diagonal(c, 1.0)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    cfg = mf.ObjectiveConfig("logdet", 0.7)
    v1, _ = mf.manifold_objective(z, c, cfg)
    v2, _ = mf.manifold_objective(q @ z, c, cfg)
    assert abs(v1 - v2) < 1e-9


def test_objective_validates_inputs():
    z = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        mf.manifold_objective(z, np.zeros((1, 4)), mf.ObjectiveConfig())
    with pytest.raises(ShapeError):
        mf.manifold_objective(z, np.full((1, 3), 2.0), mf.ObjectiveConfig())
    with pytest.raises(ShapeError):
        mf.ObjectiveConfig(form="bogus")
    with pytest.raises(ShapeError):
        mf.ObjectiveConfig(eps_sq=0.0)


# ---------------------------------------------------------------------------
# compactness


def test_compactness_zero_matrix():
    t, r = mf.compactness_measures(np.zeros((3, 5)))
    assert t == 0.0 and r == 0.0


def test_compactness_trace_quadratic_scaling():
    rng = np.random.default_rng(12)
    m = rng.normal(size=(3, 6))
    t1, _ = mf.compactness_measures(m)
    t2, _ = mf.compactness_measures(2.5 * m)
    assert abs(t2 - 2.5**2 * t1) < 1e-12


def test_compactness_first_order_agreement_and_shrinking_gap():
    rng = np.random.default_rng(13)
    m = rng.normal(size=(4, 40))
    # scale so the gram spectral norm is exactly 0.1
    gram_norm = np.linalg.norm(m @ m.T / 40, ord=2)
    m = m * np.sqrt(0.1 / gram_norm)
    gaps = []
    for scale in (1.0, 0.5, 0.1):
        t, r = mf.compactness_measures(scale * m)
        gaps.append(abs(t - r))
        if scale == 1.0:
            assert abs(t - r) / r < 0.05
    assert gaps[0] > gaps[1] > gaps[2]


# ---------------------------------------------------------------------------
# prior encoder (PCA)


def test_prior_encoder_recovers_axis_aligned_subspace():
    rng = np.random.default_rng(14)
    data = np.zeros((50, 6))
    data[:, :2] = rng.normal(size=(50, 2))
    enc = mf.fit_prior_encoder(data, 2)
    recon = mf.encode(enc, data) @ enc.basis.T + enc.mean
    assert np.max(np.abs(recon - data)) < 1e-10


def test_prior_encoder_orthonormal_basis():
    rng = np.random.default_rng(15)
    enc = mf.fit_prior_encoder(rng.normal(size=(40, 5)), 3)
    gram = enc.basis.T @ enc.basis
    assert np.max(np.abs(gram - np.eye(3))) < 1e-10


def test_prior_encoder_projection_variances_match_eigh_oracle():
    rng = np.random.default_rng(16)
    data = rng.normal(size=(200, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    enc = mf.fit_prior_encoder(data, 4)
    feats = mf.encode(enc, data)
    var = feats.var(axis=0, ddof=1)
    centered = data - data.mean(axis=0)
    eigvals = np.linalg.eigh(centered.T @ centered / (len(data) - 1))[0][::-1]
    assert np.allclose(var, eigvals, rtol=1e-10)


def test_prior_encoder_degenerate_reduces_p_with_warning():
    data = np.zeros((10, 3))
    data[:, 0] = np.arange(10.0)
    with pytest.warns(UserWarning, match="reducing"):
        enc = mf.fit_prior_encoder(data, 3)
    assert enc.basis.shape[1] == 1


def test_prior_encoder_validates():
    with pytest.raises(ShapeError):
        mf.fit_prior_encoder(np.zeros((5, 3)), 4)
    with pytest.raises(ShapeError):
        mf.fit_prior_encoder(np.zeros((2, 3)), 3)


# ---------------------------------------------------------------------------
# k-means relations


def _best_two_partition(points):
    """Exhaustive minimum within-cluster sum of squares over 2-partitions."""
    n = len(points)
    best, best_cost = None, np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        lab = np.array([0, *bits])
        cost = 0.0
        for c in (0, 1):
            members = points[lab == c]
            if len(members) == 0:
                cost = np.inf
                break
            cost += np.sum((members - members.mean(axis=0)) ** 2)
        if cost < best_cost:
            best_cost, best = cost, lab
    return best


def test_kmeans_blocks_match_bruteforce_partition():
    rng = np.random.default_rng(17)
    pts = np.vstack([rng.normal(size=(6, 2)) * 0.1 + [0, 0],
                     rng.normal(size=(4, 2)) * 0.1 + [5, 5]])
    r = mf.kmeans_relations(pts, 2, seed=0)
    oracle = _best_two_partition(pts)
    expect = (oracle[:, None] == oracle[None, :]).astype(float)
    assert np.array_equal(r, expect)
    # block-diagonal structure
    assert r[:6, :6].all() and r[6:, 6:].all() and not r[:6, 6:].any()


def test_kmeans_k_equals_n_identity():
    rng = np.random.default_rng(18)
    pts = rng.normal(size=(6, 2))
    r = mf.kmeans_relations(pts, 6, seed=1)
    assert np.array_equal(r, np.eye(6))


def test_kmeans_partition_stable_under_permutation():
    rng = np.random.default_rng(19)
    pts = np.vstack([rng.normal(size=(5, 2)) * 0.05,
                     rng.normal(size=(5, 2)) * 0.05 + [4, 0]])
    labels_a = mf.kmeans(pts, 2, seed=3)
    perm = rng.permutation(10)
    labels_b = mf.kmeans(pts[perm], 2, seed=7)
    # compare induced partitions, which are permutation-invariant
    part_a = (labels_a[perm][:, None] == labels_a[perm][None, :])
    part_b = (labels_b[:, None] == labels_b[None, :])
    assert np.array_equal(part_a, part_b)


def test_kmeans_validates_k():
    with pytest.raises(ShapeError):
        mf.kmeans(np.zeros((3, 2)), 4, seed=0)


# ---------------------------------------------------------------------------
# diagnostics


def test_diagnostics_orthogonal_blocks_zero_coherence():
    z = np.zeros((4, 6))
    z[:2, :3] = np.random.default_rng(20).normal(size=(2, 3))
    z[2:, 3:] = np.random.default_rng(21).normal(size=(2, 3))
    rep = mf.subspace_diagnostics(z, [0, 0, 0, 1, 1, 1])
    assert rep.coherence < 1e-12


def test_diagnostics_duplicated_mode_full_coherence():
    rng = np.random.default_rng(22)
    block = rng.normal(size=(3, 4))
    z = np.concatenate([block, block], axis=1)
    rep = mf.subspace_diagnostics(z, [0] * 4 + [1] * 4)
    assert abs(rep.coherence - 1.0) < 1e-9


def test_diagnostics_small_mode_excluded_with_warning():
    rng = np.random.default_rng(23)
    z = rng.normal(size=(3, 5))
    with pytest.warns(UserWarning, match="excluded"):
        rep = mf.subspace_diagnostics(z, [0, 0, 0, 0, 1])
    assert rep.excluded == [1]
    assert len(rep.modes) == 1


def test_diagnostics_rank_thresholding():
    z = np.zeros((3, 4))
    z[0] = [10.0, 10.0, 10.0, 10.0]
    z[1] = [0.5, -0.5, 0.5, -0.5]  # sigma ~1 = 5% of top: below threshold
    rep = mf.subspace_diagnostics(z, [0, 0, 0, 0])
    assert rep.modes[0].rank == 1


# ---------------------------------------------------------------------------
# training


def _subspace_data(seed, n_modes=3, ambient=20, sub_dim=2, per_mode=100):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(ambient, n_modes * sub_dim)))
    xs, labels = [], []
    for j in range(n_modes):
        basis = q[:, j * sub_dim:(j + 1) * sub_dim]
        xs.append(rng.normal(size=(per_mode, sub_dim)) @ basis.T)
        labels += [j] * per_mode
    return np.vstack(xs), np.array(labels)


def test_train_embedder_ground_truth_memberships_orthogonalize():
    x, labels = _subspace_data(5, per_mode=40)
    c = mf.memberships_from_labels(labels)
    emb, values = mf.train_embedder(x, c, feature_dim=8, steps=800, lr=2e-3, seed=1)
    assert values[-1] > values[0]
    rep = mf.subspace_diagnostics(emb.embed(x).T, labels)
    assert rep.coherence < 0.1
    assert all(m.rank == 2 for m in rep.modes)


def test_stage2_objective_nondecreasing_on_subspace_benchmark():
    x, _ = _subspace_data(5)
    cfg = mf.ManifoldConfig(feature_dim=8, prior_components=6, steps_relation=150,
                            steps_embedder=400, steps_joint=0, train_n=240,
                            optimizer_embedder="sgd", lr_embedder=0.03, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, logs = mf.train_manifold(x, cfg)
    vals = np.array(logs["embedder"])
    frac = np.mean(np.diff(vals) >= -1e-12)
    assert frac >= 0.95


def test_train_manifold_deterministic_given_seed():
    rng = np.random.default_rng(30)
    data = np.vstack([rng.normal(size=(60, 2)) * 0.2 + [-1.5, 0],
                      rng.normal(size=(60, 2)) * 0.2 + [1.5, 0]])
    cfg = mf.ManifoldConfig(feature_dim=4, prior_components=2, steps_relation=40,
                            steps_embedder=40, steps_joint=10, train_n=64, seed=9)
    m1, _ = mf.train_manifold(data, cfg)
    m2, _ = mf.train_manifold(data, cfg)
    for a, b in zip(m1.embedder.net.params(), m2.embedder.net.params()):
        assert np.array_equal(a, b)
    for a, b in zip(m1.relation.phi.params(), m2.relation.phi.params()):
        assert np.array_equal(a, b)


def test_train_manifold_kmeans_relation_source():
    rng = np.random.default_rng(31)
    data = np.vstack([rng.normal(size=(60, 2)) * 0.2 + [-2, 0],
                      rng.normal(size=(60, 2)) * 0.2 + [2, 0]])
    cfg = mf.ManifoldConfig(feature_dim=4, prior_components=2, steps_relation=60,
                            steps_embedder=60, steps_joint=10, train_n=64,
                            relation_source="kmeans-2", seed=3)
    model, logs = mf.train_manifold(data, cfg)
    r = model.relations(data[::20])
    assert r.shape == (6, 6)
    assert logs["relation"][-1] < logs["relation"][0]


def test_precision_condition_warns_when_violated():
    counts = np.array([10, 10])
    with pytest.warns(UserWarning, match="precision"):
        ok = mf.check_precision_condition(4.0, counts, feature_dim=2, mode_dims=[2, 2])
    assert not ok
    assert mf.check_precision_condition(0.5, np.array([100, 100, 100]), 8, [2, 2, 2])


def test_normalize_rows_backward_matches_fd():
    rng = np.random.default_rng(32)
    y = rng.normal(size=(4, 3)) + 0.5
    w = rng.normal(size=(4, 3))

    def f(yv):
        z, _ = mf.normalize_rows(yv)
        return float(np.sum(w * z))

    z, norms = mf.normalize_rows(y)
    dy = mf.normalize_rows_backward(z, norms, w)
    fd = central_diff(f, y, step=1e-6)
    assert np.max(np.abs(dy - fd)) < 1e-7
