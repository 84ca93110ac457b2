"""Network forward pass: packing, encoder symmetry, task-aware readout,
attention structure, prompts, and checkpoint round-trips."""

import numpy as np
import pytest

from hemenet import model as M
from hemenet.datasets import TASKS
from hemenet.errors import ConfigError, DataError
from hemenet.graph import GraphConfig, RelationKind, build_graph
from hemenet.model import (
    HeMeNetConfig,
    coord_leak,
    encode,
    init_params,
    load_model,
    pack_graph,
    predict,
    prompt_correlation,
    readout_and_heads,
    save_model,
    sum_readout,
    task_aware_readout,
    task_aware_readout_with_attention,
    weighted_prompt_readout,
)
from hemenet.structio import Atom, Chain, ComplexRecord, Residue
from hemenet.verify import equivariance_suite, primitives_suite, random_graph, readout_suite

from conftest import SMALL_DIMS


def ca_only_record(n=4, spacing=3.0):
    residues = tuple(
        Residue("GLY", (Atom("CA", "C", (i * spacing, 0.3 * i, 0.0)),))
        for i in range(n)
    )
    return ComplexRecord(
        "ca_demo", (Chain("A", None, residues),),
        (Atom("", "C", (1.0, 2.0, 0.5)),), {"A": "receptor"})


# -- config and parameters ----------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        HeMeNetConfig(L=0)
    with pytest.raises(ConfigError):
        HeMeNetConfig(d=30, heads=4)
    with pytest.raises(ConfigError):
        HeMeNetConfig(readout="mean")
    with pytest.raises(ConfigError):
        HeMeNetConfig(relations="typed")
    with pytest.raises(ConfigError):
        HeMeNetConfig(norm="group")
    with pytest.raises(ConfigError):
        HeMeNetConfig(act="gelu")
    with pytest.raises(ConfigError):
        HeMeNetConfig(dtype="float16")
    with pytest.raises(ConfigError):
        HeMeNetConfig(task_dims={"ec": 8})


def test_init_params_layout(small_cfg64, small_store64):
    cfg, store = small_cfg64, small_store64
    assert "embed.node" in store and "geom.attr" in store
    assert store["embed.edge"].shape == (6, cfg.e_r_width)
    for l in range(cfg.L):
        assert store[f"layers.{l}.rel_weight"].shape == (6, cfg.d, cfg.d)
    for task in TASKS:
        assert f"head.{task}.w1" in store
        assert f"readout.query.{task}" in store
    assert store["head.lba.w2"].shape[1] == 1
    assert store["head.ec.w2"].shape[1] == SMALL_DIMS["ec"]


def test_homogeneous_relations_share_weights():
    cfg = HeMeNetConfig(L=1, d=8, heads=2, relations="homogeneous",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=0)
    assert store["embed.edge"].shape == (1, cfg.e_r_width)
    assert store[f"layers.0.rel_weight"].shape == (1, cfg.d, cfg.d)


def test_weighted_prompt_params():
    cfg = HeMeNetConfig(L=1, d=8, heads=2, readout="weighted_prompt",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=0)
    assert "readout.prompt.lba" in store
    assert "readout.W_K" not in store


# -- packing -------------------------------------------------------------------


def test_pack_graph_shapes_and_scopes(synthetic_samples):
    rec = synthetic_samples[1][0]  # two-chain sample
    g = build_graph(rec)
    pg = pack_graph(g, np.float64)
    n = g.n_nodes
    assert pg.X0.shape == (n, 3, 14) and pg.mask.shape == (n, 14)
    assert set(pg.scopes) == {"", "A", "B"}
    np.testing.assert_array_equal(pg.scopes[""], np.arange(n))
    # padded channels carry zero coordinates and zero mask
    for node in g.nodes:
        c = node.channels
        assert pg.mask[node.index, :c].all() and not pg.mask[node.index, c:].any()
        assert not pg.X0[node.index, :, c:].any()


def test_encode_shapes_and_determinism(small_cfg64, small_store64, synthetic_data64):
    pg, _ = synthetic_data64[0]
    H1, X1 = encode(pg, small_store64, small_cfg64)
    H2, X2 = encode(pg, small_store64, small_cfg64)
    assert H1.shape == (pg.n, small_cfg64.d_L)
    assert X1.shape == (pg.n, 3, 14)
    assert H1.data.tobytes() == H2.data.tobytes()
    assert X1.data.tobytes() == X2.data.tobytes()
    # coordinates stay zero at padded channels
    assert not (X1.numpy() * (1.0 - pg.mask[:, None, :])).any()


# -- symmetry ------------------------------------------------------------------


def test_encoder_equivariance_small():
    report = equivariance_suite(n_graphs=8, n_motions=4, seed=5, dtype="float64")
    assert report.ok, report.worst
    assert report.worst["coordinate_equivariance"] <= 1e-10
    assert report.worst["feature_invariance"] <= 1e-10


def test_geometry_primitive_identities_small():
    report = primitives_suite(trials=14, seed=6, dtype="float64")
    assert report.ok, report.worst


def test_readout_bundles_bitwise_pose_free():
    report = readout_suite(n_graphs=3, seed=7)
    assert report.ok
    assert report.worst["bitwise_mismatches"] == 0


def test_coord_leak_breaks_equivariance():
    with coord_leak():
        report = equivariance_suite(n_graphs=4, n_motions=3, seed=5, dtype="float64")
    assert not report.ok
    assert report.worst["feature_invariance"] > 1e-6


# -- readout and attention -------------------------------------------------------


@pytest.fixture(scope="module")
def encoded(small_cfg64, small_store64, synthetic_data64):
    pg, _ = synthetic_data64[1]
    H, _ = encode(pg, small_store64, small_cfg64)
    return pg, H


def test_attention_rows_zero_off_scope(encoded, small_cfg64, small_store64):
    pg, H = encoded
    scope = pg.scopes["A"]
    _, alpha = task_aware_readout_with_attention(
        H, scope, "ec", small_store64, small_cfg64)
    assert alpha.shape == (pg.n, small_cfg64.heads)
    outside = np.setdiff1d(np.arange(pg.n), scope)
    assert not alpha[outside].any()
    np.testing.assert_allclose(alpha[scope].sum(axis=0), 1.0, atol=1e-12)
    assert (alpha[scope] >= 0).all()


def test_attention_singleton_scope_is_one(encoded, small_cfg64, small_store64):
    pg, H = encoded
    single = pg.scopes[""][:1]
    _, alpha = task_aware_readout_with_attention(
        H, single, "lba", small_store64, small_cfg64)
    np.testing.assert_array_equal(alpha[single[0]], 1.0)


def test_readout_permutation_invariance(encoded, small_cfg64, small_store64):
    pg, H = encoded
    scope = pg.scopes[""]
    shuffled = np.random.default_rng(0).permutation(scope)
    wp_cfg = HeMeNetConfig(L=small_cfg64.L, d=small_cfg64.d, heads=small_cfg64.heads,
                           readout="weighted_prompt", task_dims=SMALL_DIMS,
                           dtype="float64")
    wp_store = init_params(wp_cfg, seed=4)
    for fn in (
        lambda s: task_aware_readout(H, s, "mf", small_store64, small_cfg64),
        lambda s: sum_readout(H, s),
        lambda s: weighted_prompt_readout(H, s, "mf", wp_store),
    ):
        a, b = fn(scope), fn(shuffled)
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)


def test_task_queries_differentiate_tasks(encoded, small_cfg64, small_store64):
    pg, H = encoded
    scope = pg.scopes[""]
    f_lba = task_aware_readout(H, scope, "lba", small_store64, small_cfg64)
    f_ec = task_aware_readout(H, scope, "ec", small_store64, small_cfg64)
    assert np.max(np.abs(f_lba.numpy() - f_ec.numpy())) > 1e-8


def test_empty_scope_rejected(encoded, small_cfg64, small_store64):
    _, H = encoded
    with pytest.raises(DataError, match="empty"):
        task_aware_readout(H, np.array([], dtype=np.int64), "ec",
                           small_store64, small_cfg64)


def test_readout_and_heads_bundle(encoded, small_cfg64, small_store64):
    pg, H = encoded
    bundle = readout_and_heads(H, pg.scopes, TASKS, small_store64, small_cfg64,
                               complex_id=pg.complex_id)
    assert bundle.lba is not None and bundle.lba.shape == ()
    assert bundle.ppa is not None
    chain_ids = sorted(k for k in pg.scopes if k)
    for task in ("ec", "mf", "bp", "cc"):
        preds = bundle.prop(task)
        assert sorted(preds) == chain_ids
        for p in preds.values():
            assert p.logits.shape == (SMALL_DIMS[task],)
            probs = p.probs.numpy()
            assert ((probs > 0) & (probs < 1)).all()


def test_predict_all_readout_variants(synthetic_samples):
    rec = synthetic_samples[0][0]
    for readout in ("task_aware", "sum", "weighted_prompt"):
        cfg = HeMeNetConfig(L=1, d=8, heads=2, readout=readout,
                            task_dims=SMALL_DIMS, dtype="float64")
        store = init_params(cfg, seed=3)
        bundle = predict(build_graph(rec), store, cfg, tasks=("lba", "ec"))
        assert bundle.lba is not None and bundle.prop("ec")


def test_predict_rejects_unknown_task(small_cfg64, small_store64, synthetic_samples):
    g = build_graph(synthetic_samples[0][0])
    with pytest.raises(ConfigError, match="unknown tasks"):
        predict(g, small_store64, small_cfg64, tasks=("lba", "dock"))


def test_property_task_needs_chains(small_cfg64, small_store64):
    rec = ComplexRecord("ligonly", (),
                        tuple(Atom("", "C", (float(i), 0.0, 0.0)) for i in range(3)),
                        {})
    g = build_graph(rec)
    with pytest.raises(DataError, match="chain-less"):
        predict(g, small_store64, small_cfg64, tasks=("ec",))


def test_homogeneous_and_layer_norm_forward(synthetic_samples):
    rec = synthetic_samples[2][0]
    cfg = HeMeNetConfig(L=2, d=8, heads=2, relations="homogeneous", norm="layer",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=1)
    assert not store.state  # layer norm keeps no running statistics
    bundle = predict(build_graph(rec), store, cfg, tasks=("mf",))
    assert bundle.prop("mf")


def test_batch_norm_running_stats_update(synthetic_samples):
    cfg = HeMeNetConfig(L=1, d=8, heads=2, norm="batch",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=1)
    before = store.state["layers.0.norm.mean"].copy()
    pg = pack_graph(build_graph(synthetic_samples[0][0]), np.float64)
    encode(pg, store, cfg, train=True)
    after = store.state["layers.0.norm.mean"]
    assert np.max(np.abs(after - before)) > 0
    # eval mode leaves them frozen
    frozen = after.copy()
    encode(pg, store, cfg, train=False)
    np.testing.assert_array_equal(store.state["layers.0.norm.mean"], frozen)


# -- alpha-carbon degeneracy -----------------------------------------------------


def test_ca_only_record_matches_calpha_geometry_exactly(small_cfg64, small_store64):
    rec = ca_only_record()
    g_full = build_graph(rec, GraphConfig(geometry="full_atom"))
    g_ca = build_graph(rec, GraphConfig(geometry="calpha"))
    assert g_full.edges == g_ca.edges
    pg_full = pack_graph(g_full, np.float64)
    pg_ca = pack_graph(g_ca, np.float64)
    H_full, X_full = encode(pg_full, small_store64, small_cfg64)
    H_ca, X_ca = encode(pg_ca, small_store64, small_cfg64)
    assert H_full.data.tobytes() == H_ca.data.tobytes()
    assert X_full.data.tobytes() == X_ca.data.tobytes()


# -- prompts ---------------------------------------------------------------------


def test_prompt_correlation_properties(small_cfg64, small_store64):
    corr = prompt_correlation(small_store64, small_cfg64)
    assert corr.shape == (6, 6)
    np.testing.assert_array_equal(np.diag(corr), np.ones(6))
    np.testing.assert_allclose(corr, corr.T, atol=0)
    assert (np.abs(corr) <= 1.0 + 1e-12).all()


def test_prompt_correlation_zero_variance_warns():
    cfg = HeMeNetConfig(L=1, d=8, heads=2, readout="weighted_prompt",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=0)
    flat = np.full(cfg.d_L, 0.25)
    flat.flags.writeable = False
    store["readout.prompt.lba"].data = flat
    with pytest.warns(UserWarning, match="zero-variance"):
        corr = prompt_correlation(store, cfg)
    assert not corr[0, 1:].any()


def test_prompt_correlation_requires_prompts(small_cfg64):
    cfg = HeMeNetConfig(L=1, d=8, heads=2, readout="sum",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=0)
    with pytest.raises(ConfigError, match="no task prompts"):
        prompt_correlation(store, cfg)


# -- checkpointing ----------------------------------------------------------------


def test_save_load_round_trip(tmp_path, synthetic_samples):
    cfg = HeMeNetConfig(L=1, d=8, heads=2, act="relu",
                        task_dims=SMALL_DIMS, dtype="float64")
    store = init_params(cfg, seed=9)
    g = build_graph(synthetic_samples[0][0])
    want = predict(g, store, cfg, tasks=("lba",)).lba.item()

    path = tmp_path / "model.bin"
    save_model(path, store, cfg, extra={"epoch": 3})
    store2, cfg2, sidecar = load_model(path)
    assert cfg2 == cfg and cfg2.act == "relu"
    assert sidecar["epoch"] == 3
    got = predict(g, store2, cfg2, tasks=("lba",)).lba.item()
    assert got == want

    with pytest.raises(ConfigError, match="does not match"):
        load_model(path, expect=HeMeNetConfig(L=2, d=8, heads=2,
                                              task_dims=SMALL_DIMS, dtype="float64"))


def test_random_graph_generator_covers_all_kinds():
    rng = np.random.default_rng(0)
    g = random_graph(rng, max_nodes=12)
    for kind in RelationKind:
        assert g.edges[kind], kind.name
