"""Executable checks of the architecture's symmetry guarantees.

Random full-atom graphs are pushed through the encoder alongside
rigid-motion copies (rotations, reflections, translations).  Feature
outputs must match to tolerance and coordinate outputs must transform
with the motion; the task readout must be pose-invariant bitwise in
float64.  The relation extractor and scaling primitives are checked
channel count by channel count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .datasets import _synthetic_chain
from .errors import ConfigError
from .geom import (
    GeomConfig,
    message_scale,
    pooling_matrix,
    relation_extract,
)
from .graph import GraphConfig, HeteroGraph, build_graph, _freeze
from .model import (
    TASKS,
    HeMeNetConfig,
    coord_leak,
    encode,
    init_params,
    pack_graph,
    readout_and_heads,
)
from .numcore import Tensor, no_grad
from .structio import Atom, ComplexRecord

_LIG_ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br")


def random_complex(rng: np.random.Generator, max_nodes: int = 12) -> ComplexRecord:
    """Small random complex: one chain of 3+ residues plus 2-4 ligand
    atoms, total node count <= max_nodes."""
    if max_nodes < 5:
        raise ConfigError("random_complex needs max_nodes >= 5")
    n_lig = int(rng.integers(2, min(4, max_nodes - 3) + 1))
    n_res = int(rng.integers(3, max_nodes - n_lig + 1))
    chain = _synthetic_chain(rng, "A", "RNDA", n_res, rng.normal(scale=3.0, size=3))
    anchor = np.asarray(chain.residues[0].atoms[0].xyz)
    ligand = tuple(
        Atom("", _LIG_ELEMENTS[rng.integers(len(_LIG_ELEMENTS))],
             tuple(float(v) for v in anchor + rng.normal(scale=2.0, size=3)))
        for _ in range(n_lig))
    return ComplexRecord("rnd", (chain,), ligand, {"A": "receptor"})


def random_graph(rng: np.random.Generator, max_nodes: int = 12,
                 cfg: GraphConfig = GraphConfig()) -> HeteroGraph:
    """Random graph with every relation kind populated."""
    for _ in range(50):
        g = build_graph(random_complex(rng, max_nodes), cfg)
        if all(g.edges[k] for k in g.edges):
            return g
    raise ConfigError("could not draw a graph covering all relation kinds")


def random_rigid_motion(rng: np.random.Generator,
                        reflect: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal Q (det +1 or -1) and translation t."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    want = rng.random() < 0.5 if reflect is None else reflect
    if (np.linalg.det(q) < 0) != want:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return q, rng.normal(scale=10.0, size=3)


def transform_graph(g: HeteroGraph, q: np.ndarray, t: np.ndarray) -> HeteroGraph:
    nodes = tuple(
        replace(node, X=_freeze(q @ node.X + t[:, None])) for node in g.nodes)
    return HeteroGraph(g.complex_id, nodes, g.edges, g.config)


@dataclass
class SuiteReport:
    name: str
    trials: int
    dtype: str
    worst: dict  # check name -> worst-case deviation
    tol: float
    ok: bool
    seconds: float

    def lines(self) -> list[str]:
        status = "pass" if self.ok else "FAIL"
        out = [f"[{status}] {self.name}: {self.trials} trials, "
               f"dtype {self.dtype}, tolerance {self.tol:g}"]
        for check in sorted(self.worst):
            out.append(f"    {check}: worst deviation {self.worst[check]:.3e}")
        out.append(f"    elapsed {self.seconds:.1f}s")
        return out


def _tolerance(dtype: str, tol: float | None) -> float:
    if tol is not None:
        return tol
    return 1e-10 if dtype == "float64" else 1e-4


def equivariance_suite(n_graphs: int = 100, n_motions: int = 10, seed: int = 0,
                       dtype: str = "float64", tol: float | None = None,
                       cfg: HeMeNetConfig | None = None, store=None,
                       leak: bool = False) -> SuiteReport:
    """Feature invariance and coordinate equivariance of the encoder
    under random rigid motions, reflections included."""
    t0 = time.perf_counter()
    tol = _tolerance(dtype, tol)
    if cfg is None:
        cfg = HeMeNetConfig(L=2, d=16, dtype=dtype,
                            task_dims={"ec": 8, "mf": 8, "bp": 8, "cc": 8})
    if store is None:
        store = init_params(cfg, seed=seed + 1)
    rng = np.random.default_rng(seed)
    np_dtype = cfg.np_dtype
    feat_dev = 0.0
    coord_dev = 0.0
    n_reflections = 0
    with no_grad():
        for i in range(n_graphs):
            g = random_graph(rng)
            pg = pack_graph(g, np_dtype)
            if leak:
                with coord_leak():
                    H0, X0 = encode(pg, store, cfg)
            else:
                H0, X0 = encode(pg, store, cfg)
            mask = pg.mask[:, None, :]  # (n,1,14), real channels
            for j in range(n_motions):
                # guarantee reflections appear: odd draws flip
                q, t = random_rigid_motion(rng, reflect=(j % 2 == 1) or None)
                if np.linalg.det(q) < 0:
                    n_reflections += 1
                pg2 = pack_graph(transform_graph(g, q, t), np_dtype)
                if leak:
                    with coord_leak():
                        H1, X1 = encode(pg2, store, cfg)
                else:
                    H1, X1 = encode(pg2, store, cfg)
                feat_dev = max(feat_dev, float(np.max(np.abs(H1.data - H0.data))))
                expect = (q.astype(np_dtype) @ X0.data
                          + t.astype(np_dtype)[None, :, None]) * mask
                coord_dev = max(coord_dev, float(np.max(np.abs(X1.data * mask - expect))))
    worst = {"feature_invariance": feat_dev, "coordinate_equivariance": coord_dev,
             "reflections_exercised": float(n_reflections)}
    ok = feat_dev <= tol and coord_dev <= tol and n_reflections > 0
    return SuiteReport("encoder rigid-motion equivariance", n_graphs * n_motions,
                       dtype, worst, tol, ok, time.perf_counter() - t0)


def primitives_suite(trials: int = 50, seed: int = 0, dtype: str = "float64",
                tol: float | None = None) -> SuiteReport:
    """Relation-matrix invariance, scaling equivariance, and pooled
    output length, exercised for every channel count 1..14."""
    t0 = time.perf_counter()
    tol = _tolerance(dtype, tol)
    np_dtype = np.float64 if dtype == "float64" else np.float32
    rng = np.random.default_rng(seed)
    gc = GeomConfig()
    inv_dev = 0.0
    equi_dev = 0.0
    length_ok = True
    for trial in range(trials):
        ci = int(rng.integers(1, 15))
        cj = int(rng.integers(1, 15))
        # trials 0..13 pin ci to cover every channel count exhaustively
        if trial < 14:
            ci = trial + 1
        Xi = rng.normal(size=(3, 14)).astype(np_dtype)
        Xj = rng.normal(size=(3, 14)).astype(np_dtype)
        wi = np.zeros(14, dtype=np_dtype)
        wi[:ci] = 1
        wj = np.zeros(14, dtype=np_dtype)
        wj[:cj] = 1
        Xi = Xi * wi
        Xj = Xj * wj
        Ai = rng.normal(size=(14, gc.d_A)).astype(np_dtype)
        Aj = rng.normal(size=(14, gc.d_A)).astype(np_dtype)
        q, t = random_rigid_motion(rng)
        q = q.astype(np_dtype)
        t = t.astype(np_dtype)
        Xi_m = (q @ Xi + t[:, None]) * wi
        Xj_m = (q @ Xj + t[:, None]) * wj
        R0 = relation_extract(Tensor(Xi), Tensor(Xj), wi, wj, Tensor(Ai), Tensor(Aj))
        R1 = relation_extract(Tensor(Xi_m), Tensor(Xj_m), wi, wj, Tensor(Ai), Tensor(Aj))
        inv_dev = max(inv_dev, float(np.max(np.abs(R1.data - R0.data))))

        s = rng.normal(size=14).astype(np_dtype)
        Xc = Xi[:, :ci]  # real channels only
        Y0 = message_scale(Tensor(Xc), Tensor(s))
        Y1 = message_scale(Tensor(q @ Xc), Tensor(s))
        equi_dev = max(equi_dev, float(np.max(np.abs(Y1.data - q @ Y0.data))))
        if Y0.shape != (3, ci):
            length_ok = False
    for c in range(1, 15):
        P = pooling_matrix(c)
        if P.shape != (14, c):
            length_ok = False
    worst = {"relation_invariance": inv_dev, "scaling_equivariance": equi_dev,
             "pooled_length_mismatches": 0.0 if length_ok else 1.0}
    ok = inv_dev <= tol and equi_dev <= tol and length_ok
    return SuiteReport("relation/scaling primitives", trials, dtype, worst, tol,
                       ok, time.perf_counter() - t0)


def readout_suite(n_graphs: int = 20, n_motions: int = 5, seed: int = 0,
                  cfg: HeMeNetConfig | None = None, store=None) -> SuiteReport:
    """Bitwise pose-invariance of the readout stage in float64.

    The encoder's feature output is pose-invariant to tolerance (see
    equivariance_suite); the readout must add no pose dependence at
    all.  Feeding one feature matrix through the readout with scopes
    and node order taken from each transformed pose must reproduce the
    prediction bundle bit for bit.
    """
    t0 = time.perf_counter()
    if cfg is None:
        cfg = HeMeNetConfig(L=2, d=16, dtype="float64",
                            task_dims={"ec": 8, "mf": 8, "bp": 8, "cc": 8})
    if cfg.dtype != "float64":
        raise ConfigError("readout bitwise check requires float64")
    if store is None:
        store = init_params(cfg, seed=seed + 1)
    rng = np.random.default_rng(seed)
    mismatches = 0
    with no_grad():
        for i in range(n_graphs):
            g = random_graph(rng)
            pg = pack_graph(g, np.float64)
            H, _ = encode(pg, store, cfg)
            base = _bundle_bytes(
                readout_and_heads(H, pg.scopes, TASKS, store, cfg, g.complex_id))
            for _ in range(n_motions):
                q, t = random_rigid_motion(rng)
                pg2 = pack_graph(transform_graph(g, q, t), np.float64)
                again = _bundle_bytes(
                    readout_and_heads(H, pg2.scopes, TASKS, store, cfg, g.complex_id))
                if again != base:
                    mismatches += 1
    worst = {"bitwise_mismatches": float(mismatches)}
    return SuiteReport("readout pose invariance (bitwise)", n_graphs * n_motions,
                       "float64", worst, 0.0, mismatches == 0,
                       time.perf_counter() - t0)


def _bundle_bytes(pred) -> bytes:
    parts = []
    for task in ("lba", "ppa"):
        value = getattr(pred, task)
        if value is not None:
            parts.append(value.data.tobytes())
    for task in sorted(pred.props):
        for cid in sorted(pred.props[task]):
            parts.append(pred.props[task][cid].logits.data.tobytes())
    return b"".join(parts)


def run_all(trials: int = 100, seed: int = 0, dtype: str = "float64",
            tol: float | None = None, cfg: HeMeNetConfig | None = None,
            store=None, leak: bool = False) -> list[SuiteReport]:
    reports = [
        equivariance_suite(n_graphs=trials, n_motions=10, seed=seed, dtype=dtype,
                           tol=tol, cfg=cfg, store=store, leak=leak),
        primitives_suite(trials=max(trials // 2, 14), seed=seed, dtype=dtype, tol=tol),
    ]
    if dtype == "float64" and not leak:
        reports.append(readout_suite(n_graphs=max(trials // 5, 5), seed=seed,
                                     cfg=cfg, store=store))
    return reports
