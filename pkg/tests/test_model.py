import numpy as np
import pytest

from fdcheck import TOL, check
from smhgc import numcore as nc
from smhgc.errors import ContractError, LoadError, NumericError
from smhgc.homophily import discretize_topk
from smhgc.metrics import kmeans
from smhgc.model import (
    MLP,
    SmhgcConfig,
    SmhgcModel,
    aggregate,
    embed,
    forward,
    fuse_weights,
    gradients,
    inter_view_fuse,
    intra_view_fuse,
    kl_loss,
    load_checkpoint,
    minmax_columns,
    prepare_inputs,
    reconstruction_loss,
    save_checkpoint,
    similarity_loss,
    soft_assign,
    target_distribution,
    train,
)
from smhgc.numcore import Rng, Tape
from smhgc.synthetic import block_dataset

SMALL = dict(d_z=8, d_f=8, hidden=16)


def _toy(n=30, seed=0, **kw):
    return block_dataset(n_nodes=n, n_features=9, hr=0.3, avg_degree=min(10, n // 3), noise=1.0, seed=seed, **kw)


def _model(ds, **kw):
    cfg = SmhgcConfig(**{**SMALL, **kw})
    return SmhgcModel.init(ds, cfg)


# --------------------------------------------------------------------------
# losses


def test_similarity_loss_exact_factor_is_zero():
    ds = _toy(n=6)
    a = prepare_inputs(ds)[0].a_norm
    assert nc.mse_gram(a, a @ a.T)[0, 0] == pytest.approx(0.0, abs=1e-30)


def test_similarity_loss_increases_when_doubled():
    inp = prepare_inputs(_toy(n=6))[0]
    base = similarity_loss(inp.a_norm, inp.x_hat, inp.neighbor_target, inp.feature_target)
    doubled = similarity_loss(2 * inp.a_norm, 2 * inp.x_hat, inp.neighbor_target, inp.feature_target)
    assert base[0, 0] == pytest.approx(0.0, abs=1e-30) and doubled[0, 0] > 0


def test_similarity_loss_gradient():
    rng = Rng(0)
    inp = prepare_inputs(_toy(n=6))[0]
    for i in range(20):
        fa = MLP.init([6, 5, 3], rng.spawn(i, 0))
        fx = MLP.init([9, 5, 3], rng.spawn(i, 1))
        params = [p + rng.spawn(i, 2 + j).uniform(-0.1, 0.1, p.shape) for j, p in enumerate(fa.params + fx.params)]

        def build(*leaves):
            z_a = fa.forward(inp.a_norm, list(leaves[:4]))
            z_x = fx.forward(inp.x_hat, list(leaves[4:]))
            return similarity_loss(z_a, z_x, inp.neighbor_target, inp.feature_target)

        assert check(build, params) < TOL


def test_reconstruction_loss_gradient():
    rng = Rng(1)
    ds = block_dataset(n_nodes=6, n_features=5, avg_degree=2, seed=2)
    inp = prepare_inputs(ds)[0]
    for i in range(20):
        phi = MLP.init([5, 4, 3], rng.spawn(i, 0))
        xi = MLP.init([3, 4, 5], rng.spawn(i, 1))
        params = [p + rng.spawn(i, 2 + j).uniform(-0.1, 0.1, p.shape) for j, p in enumerate(phi.params + xi.params)]

        def build(*leaves):
            z = phi.forward(inp.x_hat, list(leaves[:4]))
            return reconstruction_loss(xi.forward(z, list(leaves[4:])), inp.recon_target)

        assert check(build, params) < TOL


def test_reconstruction_loss_examples():
    assert reconstruction_loss(np.zeros((3, 4)), np.zeros((3, 4)))[0, 0] == pytest.approx(np.log(2))
    t = np.array([[0.2, 0.7], [0.5, 0.9]])
    entropy = -(t * np.log(t) + (1 - t) * np.log(1 - t)).mean()
    assert reconstruction_loss(np.log(t / (1 - t)), t)[0, 0] == pytest.approx(entropy)


def test_minmax_constant_column():
    out = minmax_columns(np.array([[1.0, 2.0], [3.0, 2.0], [2.0, 2.0]]))
    assert np.allclose(out, [[0, 0.5], [1, 0.5], [0.5, 0.5]])


def test_kl_gradient_wrt_centroids():
    rng = Rng(3)
    for i in range(20):
        h = rng.spawn(i, 0).normal(size=(4, 3))
        mu0 = rng.spawn(i, 1).normal(size=(2, 3))
        p_bar = target_distribution(soft_assign(h, mu0))
        hv = [h + rng.spawn(i, 2 + v).normal(0, 0.2, size=h.shape) for v in range(2)]

        def build(mu):
            return kl_loss(p_bar, soft_assign(h, mu), [soft_assign(x, mu) for x in hv])

        assert check(build, [mu0]) < TOL


def test_kl_examples():
    q = np.array([[0.7, 0.3], [0.1, 0.9]])
    assert kl_loss(q, q, [q, q])[0, 0] == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = nc.row_normalize(rng.random((5, 3)))
        qs = [nc.row_normalize(rng.random((5, 3)) + 0.01) for _ in range(3)]
        assert kl_loss(p, qs[0], qs[1:])[0, 0] >= 0


def test_soft_assign_examples():
    q = soft_assign(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0], [np.sqrt(3), 0.0]]))
    assert np.allclose(q, [[0.8, 0.2]])
    q = soft_assign(np.zeros((1, 2)), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    assert np.allclose(q, 1 / 3)
    q = soft_assign(np.array([[5.0, 5.0]]), np.array([[5.0, 5.0], [500.0, 0.0]]))
    assert q[0, 0] > 0.9999


def test_target_distribution_examples():
    onehot = np.eye(3)[[0, 1, 2, 1]]
    assert np.allclose(target_distribution(onehot), onehot)
    assert np.allclose(target_distribution(np.full((4, 2), 0.5)), 0.5)
    q = np.array([[0.8, 0.2], [0.2, 0.8]])  # balanced column sums
    p = target_distribution(q)
    assert p[0] == pytest.approx([0.64 / 0.68, 0.04 / 0.68])
    assert p[0, 0] == pytest.approx(0.94118, abs=1e-5)


# --------------------------------------------------------------------------
# fusion and aggregation


def test_intra_view_fuse_examples():
    rng = np.random.default_rng(0)
    a = rng.random((3, 3))
    a = a + a.T
    h = rng.random((3, 2))
    w_x, w_a, s = intra_view_fuse(a, a.copy(), h)
    assert np.allclose(s, a) and w_x == pytest.approx(0.5)

    h = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    g = h @ h.T
    ortho = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    w_x, w_a, _ = intra_view_fuse(g, ortho, h)
    assert (w_x, w_a) == (1.0, 0.0)


def test_intra_view_fuse_both_orthogonal():
    h = np.array([[1.0, 0.0], [0.0, 0.0]])
    w_x, w_a, _ = intra_view_fuse(np.array([[0, 1.0], [1.0, 0]]), np.array([[0, 2.0], [2.0, 0]]), h)
    assert (w_x, w_a) == (0.5, 0.5)


def test_inter_view_fuse_examples():
    h = np.random.default_rng(1).normal(size=(5, 3))
    new, w = inter_view_fuse([h, h.copy(), h.copy()], h, rho=2.0)
    assert np.allclose(w, 1.0) and np.allclose(new, 3 * h)
    assert np.allclose(fuse_weights([0.8, 0.4], 2.0), [1.0, 0.25])
    sharp = fuse_weights([0.9, 0.8, 0.5], 200.0)
    assert sharp[0] == 1.0 and sharp[1:].max() < 1e-9


def test_aggregate_examples():
    z = np.random.default_rng(2).normal(size=(5, 3))
    s = discretize_topk(np.random.default_rng(3).random((5, 5)), 2)
    assert np.array_equal(aggregate(s, z, 0), z)
    assert np.allclose(aggregate(np.eye(5), z, 3), 4 * z)
    p = s / s.sum(1, keepdims=True)
    assert np.allclose(aggregate(s, z, 2), z + p @ z + np.linalg.matrix_power(p, 2) @ z)


def test_aggregate_matches_matrix_powers():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        order = int(rng.integers(0, 6))
        s = discretize_topk(rng.random((n, n)), int(rng.integers(1, n + 1)))
        z = rng.normal(size=(n, 3))
        p = s / s.sum(1, keepdims=True)
        oracle = sum(np.linalg.matrix_power(p, t) @ z for t in range(order + 1))
        assert np.allclose(aggregate(s, z, order), oracle, atol=1e-12)


def test_aggregate_permutation_equivariant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = 7
        s = discretize_topk(rng.random((n, n)), 3)
        z = rng.normal(size=(n, 4))
        perm = np.eye(n)[rng.permutation(n)]
        assert np.allclose(perm @ aggregate(s, z, 3), aggregate(perm @ s @ perm.T, perm @ z, 3))


# --------------------------------------------------------------------------
# gradient routing


def _with_centroids(ds, model):
    inputs = prepare_inputs(ds)
    h = embed(model, inputs, None)
    model.centroids = kmeans(h, ds.num_clusters, 3, Rng(0)).centroids
    return h


def _norms(grads, part):
    return sum(float(np.abs(g).sum()) for name, g in grads.items() if f".{part}." in name or name == part)


def test_stop_gradient_contract():
    ds = _toy()
    model = _model(ds)
    h = _with_centroids(ds, model)

    only_sim = gradients(model, ds, h, kl_active=True, gamma_sim=1.0, gamma_r=0.0)
    only_rec = gradients(model, ds, h, kl_active=False, gamma_sim=0.0, gamma_r=1.0)
    only_kl = gradients(model, ds, h, kl_active=True, gamma_sim=0.0, gamma_r=0.0)
    full_no_kl = gradients(model, ds, h, kl_active=False, gamma_sim=0.0, gamma_r=0.0)

    # f_a / f_x only through the similarity loss
    assert _norms(only_rec, "f_a") == _norms(only_rec, "f_x") == 0
    assert _norms(only_kl, "f_a") == _norms(only_kl, "f_x") == 0
    assert _norms(only_sim, "f_a") > 0 and _norms(only_sim, "f_x") > 0
    # f_phi through reconstruction and KL
    assert _norms(only_rec, "f_phi") > 0 and _norms(only_kl, "f_phi") > 0
    # g_xi only through reconstruction
    assert _norms(only_rec, "g_xi") > 0 and _norms(only_kl, "g_xi") == 0
    # centroids only through KL
    assert _norms(only_kl, "centroids") > 0 and _norms(only_rec, "centroids") == 0
    assert all(np.abs(g).sum() == 0 for g in full_no_kl.values())
    # with KL on, sim-only total still includes KL, so subtract its part
    kl_part = {k: only_sim[k] - gradients(model, ds, h, True, 1.0, 0.0)[k] for k in only_sim}
    assert all(np.abs(g).sum() == 0 for g in kl_part.values())


# --------------------------------------------------------------------------
# training


def test_zero_epochs_gives_mean_embedding():
    ds = _toy()
    model = _model(ds, epochs=0)
    res = train(ds, model)
    fp = forward(model, prepare_inputs(ds), None, track=False)
    assert np.array_equal(res.consensus, sum(fp.views_h) / len(fp.views_h))


def test_training_invariants_and_determinism():
    ds = _toy()
    seen = []

    def cb(epoch, fp):
        st = fp.fusion
        assert np.allclose(np.add(st.omega_x, st.omega_a), 1.0)
        assert max(st.omega_h) == 1.0 and min(st.omega_h) > 0
        assert np.isfinite(fp.total.value).all()
        if fp.assignments is not None:
            for q in [fp.assignments.q_bar, fp.assignments.p_bar, *fp.assignments.views_q]:
                assert np.allclose(q.sum(1), 1.0, atol=1e-8) and q.min() >= 0
            seen.append(epoch)

    runs = []
    for _ in range(2):
        model = _model(ds, epochs=10, lr=1e-2)
        runs.append(train(ds, model, cb))
    assert seen and seen[0] == 2  # warmup at 20% of 10 epochs
    assert np.array_equal(runs[0].consensus, runs[1].consensus)
    assert runs[0].loss_history == runs[1].loss_history
    for st in runs[0].final_fusion.graphs:
        assert np.array_equal(st, st.T)


def test_ablation_flags_change_weights():
    ds = _toy()
    res = train(ds, _model(ds, epochs=3, use_ax=False))
    assert all(w == 0.0 for st in res.fusion_history for w in st.omega_x)
    res = train(ds, _model(ds, epochs=3, uniform_fusion=True))
    assert all(w == 0.5 for st in res.fusion_history for w in st.omega_x)
    res = train(ds, _model(ds, epochs=3, use_kl=False))
    assert all(r["kl"] == 0.0 for r in res.loss_history)


def test_per_view_centroids_train():
    ds = _toy()
    model = _model(ds, epochs=5, per_view_centroids=True)
    train(ds, model)
    assert model.view_centroids is not None and len(model.view_centroids) == 2


def test_numeric_abort():
    ds = _toy()
    with pytest.raises(NumericError, match=r"epoch \d+: non-finite values produced by \w+"):
        train(ds, _model(ds, epochs=5, lr=1e250))


def test_config_validation():
    ds = _toy()
    for bad in (dict(k=0), dict(order=-1), dict(rho=0.0), dict(use_ax=False, use_aa=False)):
        with pytest.raises(ContractError):
            _model(ds, **bad)


def test_checkpoint_roundtrip(tmp_path):
    ds = _toy()
    model = _model(ds, epochs=4, per_view_centroids=True)
    res = train(ds, model)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, model, 4, res.consensus, n_clusters=3)
    back, header, consensus = load_checkpoint(path)
    assert header["epoch"] == 4 and header["seed"] == 0 and header["n_clusters"] == 3
    assert np.array_equal(consensus, res.consensus)
    for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and np.array_equal(a, b)
    assert back.config == model.config
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(LoadError):
        load_checkpoint(path)


def test_tape_sizes_are_bounded():
    ds = _toy()
    model = _model(ds)
    fp = forward(model, prepare_inputs(ds), None)
    assert isinstance(fp.tape, Tape) and len(fp.tape) < 200
