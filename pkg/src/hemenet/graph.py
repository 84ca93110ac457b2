"""Heterogeneous full-atom multi-channel graph construction.

One node per residue (all its heavy atoms as coordinate channels, or a
single alpha-carbon channel) plus one node per ligand atom.  Six
directed relation kinds: sequence offsets -2/-1/+1/+2 within a chain,
a self-loop on every node, and symmetric spatial edges from either a
distance cutoff on minimum inter-atom distance or k-nearest-neighbor
on node centroids.  Node indices follow a canonical order: chains in
input order, residues in sequence order, ligand atoms last.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigError, DataError
from .structio import ELEMENT_INDEX, MAX_CHANNELS, ComplexRecord

log = logging.getLogger(__name__)


class RelationKind(IntEnum):
    SEQ_MINUS_2 = 0
    SEQ_MINUS_1 = 1
    SEQ_PLUS_1 = 2
    SEQ_PLUS_2 = 3
    SELF_LOOP = 4
    SPATIAL = 5


N_RELATIONS = len(RelationKind)
_SEQ_OFFSETS = {
    -2: RelationKind.SEQ_MINUS_2,
    -1: RelationKind.SEQ_MINUS_1,
    1: RelationKind.SEQ_PLUS_1,
    2: RelationKind.SEQ_PLUS_2,
}


@dataclass(frozen=True)
class GraphNode:
    index: int
    kind: str  # "residue" | "ligand_atom"
    label: str  # residue type or element symbol
    chain_id: str | None
    seq_pos: int | None  # position within the chain, residue nodes only
    entity: str  # "receptor" | "ligand_side"
    X: np.ndarray  # (3, c) read-only
    channel_elements: tuple[int, ...]  # element vocabulary ids, length c

    @property
    def channels(self) -> int:
        return self.X.shape[1]

    @property
    def channel_mask(self) -> np.ndarray:
        w = np.zeros(MAX_CHANNELS)
        w[: self.channels] = 1.0
        return w


@dataclass(frozen=True)
class GraphConfig:
    geometry: str = "full_atom"  # or "calpha"
    spatial_rule: str = "radius"  # or "knn"
    radius: float = 4.5
    k: int = 10
    include_ligand: bool = True

    def __post_init__(self):
        if self.geometry not in ("full_atom", "calpha"):
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.spatial_rule not in ("radius", "knn"):
            raise ConfigError(f"unknown spatial rule {self.spatial_rule!r}")
        if self.radius <= 0 or self.k < 1:
            raise ConfigError("radius must be positive and k >= 1")


@dataclass(frozen=True)
class HeteroGraph:
    complex_id: str
    nodes: tuple[GraphNode, ...]
    edges: dict[RelationKind, tuple[tuple[int, int], ...]]
    config: GraphConfig = field(default_factory=GraphConfig)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


def build_graph(rec: ComplexRecord, cfg: GraphConfig = GraphConfig()) -> HeteroGraph:
    nodes: list[GraphNode] = []
    for chain in rec.chains:
        entity = rec.partition.get(chain.chain_id, "receptor")
        for pos, res in enumerate(chain.residues):
            if cfg.geometry == "calpha":
                ca = next((a for a in res.atoms if a.name == "CA"), None)
                if ca is None:
                    log.warning("%s chain %s residue %d: no CA atom, dropped",
                                rec.complex_id, chain.chain_id, pos)
                    continue
                atoms = [ca]
            else:
                atoms = list(res.atoms[:MAX_CHANNELS])
                if len(res.atoms) > MAX_CHANNELS:
                    log.warning("%s chain %s residue %d: truncated to %d channels",
                                rec.complex_id, chain.chain_id, pos, MAX_CHANNELS)
            X = _freeze(np.array([a.xyz for a in atoms]).T.reshape(3, len(atoms)))
            nodes.append(GraphNode(
                index=len(nodes), kind="residue", label=res.residue_type,
                chain_id=chain.chain_id, seq_pos=pos, entity=entity, X=X,
                channel_elements=tuple(ELEMENT_INDEX[a.element] for a in atoms),
            ))
    if cfg.include_ligand:
        for atom in rec.ligand_atoms:
            X = _freeze(np.array(atom.xyz).reshape(3, 1))
            nodes.append(GraphNode(
                index=len(nodes), kind="ligand_atom", label=atom.element,
                chain_id=None, seq_pos=None, entity="ligand_side", X=X,
                channel_elements=(ELEMENT_INDEX[atom.element],),
            ))
    if not nodes:
        raise DataError(f"{rec.complex_id}: graph has no nodes")

    edges: dict[RelationKind, list[tuple[int, int]]] = {k: [] for k in RelationKind}
    for i in range(len(nodes)):
        edges[RelationKind.SELF_LOOP].append((i, i))

    # sequential edges keyed by destination-minus-source sequence offset
    by_chain: dict[str, list[GraphNode]] = {}
    for node in nodes:
        if node.kind == "residue":
            by_chain.setdefault(node.chain_id, []).append(node)
    for members in by_chain.values():
        for a in members:
            for b in members:
                off = b.seq_pos - a.seq_pos
                if off in _SEQ_OFFSETS:
                    edges[_SEQ_OFFSETS[off]].append((a.index, b.index))

    for i, j in _spatial_pairs(nodes, cfg):
        edges[RelationKind.SPATIAL].append((i, j))
        edges[RelationKind.SPATIAL].append((j, i))

    return HeteroGraph(
        complex_id=rec.complex_id,
        nodes=tuple(nodes),
        edges={k: tuple(sorted(v)) for k, v in edges.items()},
        config=cfg,
    )


def _spatial_pairs(nodes, cfg: GraphConfig) -> list[tuple[int, int]]:
    """Unordered node pairs (i < j) joined by the spatial rule."""
    n = len(nodes)
    if n < 2:
        return []
    if cfg.spatial_rule == "radius":
        atoms = np.concatenate([node.X.T for node in nodes])  # (A, 3)
        owner = np.concatenate([np.full(node.channels, node.index) for node in nodes])
        pairs = []
        # minimum inter-atom distance per node pair, atom rows chunked
        best = np.full((n, n), np.inf)
        for lo in range(0, len(atoms), 2048):
            hi = min(lo + 2048, len(atoms))
            d = np.linalg.norm(atoms[lo:hi, None, :] - atoms[None, :, :], axis=-1)
            np.minimum.at(best, (owner[lo:hi][:, None], owner[None, :]), d)
        for i in range(n):
            for j in range(i + 1, n):
                if min(best[i, j], best[j, i]) <= cfg.radius:
                    pairs.append((i, j))
        return pairs
    # knn on centroids, symmetrized as a union
    cent = np.stack([node.X.mean(axis=1) for node in nodes])
    d = np.linalg.norm(cent[:, None, :] - cent[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    k = min(cfg.k, n - 1)
    chosen = set()
    for i in range(n):
        # ties broken by node index for determinism
        order = np.lexsort((np.arange(n), d[i]))[:k]
        for j in order:
            chosen.add((min(i, int(j)), max(i, int(j))))
    return sorted(chosen)


def chain_masks(g: HeteroGraph) -> dict[str, tuple[int, ...]]:
    """Residue node indices grouped by chain; ligand atoms belong to none."""
    out: dict[str, list[int]] = {}
    for node in g.nodes:
        if node.kind == "residue":
            out.setdefault(node.chain_id, []).append(node.index)
    return {cid: tuple(idx) for cid, idx in out.items()}


def validate(g: HeteroGraph) -> list[str]:
    """Check every structural invariant; returns violations (empty = valid)."""
    problems = []
    n = g.n_nodes
    for node in g.nodes:
        c = node.channels
        if node.kind == "ligand_atom" and c != 1:
            problems.append(f"node {node.index}: ligand atom with {c} channels")
        if not 1 <= c <= MAX_CHANNELS:
            problems.append(f"node {node.index}: channel count {c} out of range")
        if len(node.channel_elements) != c:
            problems.append(f"node {node.index}: channel elements do not match channels")
        if node.channel_mask.sum() != c:
            problems.append(f"node {node.index}: mask weight != channel count")
        if not np.isfinite(node.X).all():
            problems.append(f"node {node.index}: non-finite coordinates")
    for kind, pairs in g.edges.items():
        if len(set(pairs)) != len(pairs):
            problems.append(f"{kind.name}: duplicate edges")
        for s, d in pairs:
            if not (0 <= s < n and 0 <= d < n):
                problems.append(f"{kind.name}: edge ({s},{d}) out of range")
    loops = set(g.edges.get(RelationKind.SELF_LOOP, ()))
    expect = {(i, i) for i in range(n)}
    if loops != expect:
        problems.append("self-loop set is not exactly {(i,i) for every node}")
    for off, kind in _SEQ_OFFSETS.items():
        for s, d in g.edges.get(kind, ()):
            if not (0 <= s < n and 0 <= d < n):
                continue  # already reported above
            a, b = g.nodes[s], g.nodes[d]
            if a.kind != "residue" or b.kind != "residue":
                problems.append(f"{kind.name}: edge ({s},{d}) touches a non-residue node")
            elif a.chain_id != b.chain_id:
                problems.append(f"{kind.name}: edge ({s},{d}) crosses chains")
            elif b.seq_pos - a.seq_pos != off:
                problems.append(f"{kind.name}: edge ({s},{d}) has wrong sequence offset")
    spatial = set(g.edges.get(RelationKind.SPATIAL, ()))
    for s, d in spatial:
        if s == d:
            problems.append(f"SPATIAL: self edge ({s},{d})")
        if (d, s) not in spatial:
            problems.append(f"SPATIAL: edge ({s},{d}) missing its reverse")
    return problems


def dump_graph(g: HeteroGraph) -> str:
    """Deterministic JSON dump of the node table and per-kind edge lists."""
    obj = {
        "complex_id": g.complex_id,
        "nodes": [
            {
                "index": node.index,
                "kind": node.kind,
                "label": node.label,
                "chain_id": node.chain_id,
                "seq_pos": node.seq_pos,
                "entity": node.entity,
                "channels": node.channels,
                "xyz": [[float(v) for v in row] for row in node.X],
            }
            for node in g.nodes
        ],
        "edges": {kind.name: [list(e) for e in sorted(g.edges.get(kind, ()))]
                  for kind in RelationKind},
    }
    return json.dumps(obj, indent=2, sort_keys=True)
