"""Metapath contexts: construction, flat storage, the brute-force instance
oracle, the untyped K-hop variant, and aggregation counting."""
from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation, InstanceGuardExceeded, ResourceGuardError
from .graph import HeteroGraph, Metapath

INSTANCE_GUARD = 10**6


@dataclass
class MetapathContext:
    center: int
    metapath: Optional[Metapath]
    layers: list  # K+1 sorted lists of node ids
    edges: list  # (layer i, u, w)
    node_set: list  # sorted, deduplicated union of layers
    empty_context: bool = False


def build_context(g: HeteroGraph, p: Metapath, v: int) -> MetapathContext:
    """Two passes: expand reachable sets layer by layer, then walk back from the
    last layer keeping only nodes and edges that lie on a full-length instance."""
    v = int(v)
    if g.node_type[v] != p.start_type:
        raise ContractViolation(
            f"node {g.ext_ids[v]!r} does not have the metapath's start type "
            f"{g.schema.node_type_names[p.start_type]!r}"
        )
    reach = [{v}]
    for r in p.edge_types:
        nxt = set()
        for u in reach[-1]:
            nxt.update(g.neighbors(u, r).tolist())
        reach.append(nxt)
        if not nxt:
            break

    K = p.length
    if len(reach) <= K or not reach[K]:
        return MetapathContext(v, p, [[v]] + [[] for _ in range(K)], [], [v], empty_context=True)

    alive = [set() for _ in range(K + 1)]
    alive[K] = reach[K]
    edges = []
    for i in range(K - 1, -1, -1):
        r = p.edge_types[i]
        for u in sorted(reach[i]):
            hits = [w for w in g.neighbors(u, r).tolist() if w in alive[i + 1]]
            if hits:
                alive[i].add(u)
                edges.extend((i, u, w) for w in hits)
    edges.sort()
    layers = [sorted(s) for s in alive]
    node_set = sorted(set().union(*alive))
    return MetapathContext(v, p, layers, edges, node_set)


def oracle_enumerate_instances(g: HeteroGraph, p: Metapath, v: int, guard: int = INSTANCE_GUARD) -> list:
    """Every complete instance starting at ``v``, by exhaustive DFS."""
    if g.node_type[v] != p.start_type:
        raise ContractViolation("start node type does not match metapath")
    out = []

    def dfs(path):
        if len(path) == p.length + 1:
            out.append(tuple(path))
            if len(out) > guard:
                raise InstanceGuardExceeded(f"more than {guard} metapath instances")
            return
        r = p.edge_types[len(path) - 1]
        for w in g.neighbors(path[-1], r).tolist():
            path.append(w)
            dfs(path)
            path.pop()

    dfs([int(v)])
    return out


def khop_context(g: HeteroGraph, v: int, K: int) -> MetapathContext:
    """All nodes within ``K`` hops of ``v`` over the union of every relation,
    layered by BFS distance. No pruning."""
    if K < 0:
        raise ContractViolation("K must be non-negative")
    v = int(v)
    seen = {v}
    layers = [[v]]
    edges = []
    for i in range(K):
        nxt = set()
        for u in layers[-1]:
            t = g.node_type[u]
            for r, et in enumerate(g.schema.edge_types):
                if et.src != t:
                    continue
                for w in g.neighbors(u, r).tolist():
                    if w not in seen:
                        nxt.add(w)
        for u in layers[-1]:
            t = g.node_type[u]
            for r, et in enumerate(g.schema.edge_types):
                if et.src == t:
                    edges.extend((i, u, w) for w in g.neighbors(u, r).tolist() if w in nxt)
        if not nxt:
            break
        seen |= nxt
        layers.append(sorted(nxt))
    edges = sorted(set(edges))
    return MetapathContext(v, None, layers, edges, sorted(seen), empty_context=len(seen) == 1)


def count_aggregations(g: HeteroGraph, p: Metapath, v: int, strategy: str) -> int:
    """How many node representations one layer aggregates for ``v``.

    MN: distinct endpoints of complete instances (metapath-guided neighbors).
    MI: (K+1) per complete instance (instance encoding).
    MC: distinct nodes in the metapath context, center included.
    """
    if strategy == "MC":
        return len(build_context(g, p, v).node_set)
    instances = oracle_enumerate_instances(g, p, v)
    if strategy == "MN":
        return len({inst[-1] for inst in instances})
    if strategy == "MI":
        return (p.length + 1) * len(instances)
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class ContextSegments:
    """Flat layout of the contexts of every node of one type for one metapath:
    the node set of the i-th center is ``index[offsets[i]:offsets[i+1]]``."""

    node_type: int
    metapath: Optional[Metapath]  # None for the K-hop variant
    centers: np.ndarray
    offsets: np.ndarray
    index: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.centers.nbytes + self.offsets.nbytes + self.index.nbytes


@dataclass
class ContextStore:
    graph_hash: str
    segments: dict = field(default_factory=dict)  # node type -> list[ContextSegments]

    def for_type(self, node_type: int) -> list:
        return self.segments.get(node_type, [])

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for segs in self.segments.values() for s in segs)

    def __eq__(self, other):
        if not isinstance(other, ContextStore) or self.graph_hash != other.graph_hash:
            return False
        if sorted(self.segments) != sorted(other.segments):
            return False
        for t, segs in self.segments.items():
            osegs = other.segments[t]
            if len(segs) != len(osegs):
                return False
            for a, b in zip(segs, osegs):
                if a.metapath != b.metapath or not (
                    np.array_equal(a.centers, b.centers)
                    and np.array_equal(a.offsets, b.offsets)
                    and np.array_equal(a.index, b.index)
                ):
                    return False
        return True


def _pack(node_type, metapath, contexts) -> ContextSegments:
    centers = np.array([c.center for c in contexts], dtype=np.int64)
    sizes = [len(c.node_set) for c in contexts]
    offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)]).astype(np.int64)
    index = np.array([u for c in contexts for u in c.node_set], dtype=np.int64)
    return ContextSegments(node_type, metapath, centers, offsets, index)


def _identity_segments(g, node_type) -> ContextSegments:
    nodes = g.nodes_of(node_type)
    return ContextSegments(
        node_type, Metapath.identity(node_type), nodes.copy(),
        np.arange(len(nodes) + 1, dtype=np.int64), nodes.copy(),
    )


def _check_budget(store, max_entries):
    if max_entries is not None:
        total = sum(len(s.index) for segs in store.segments.values() for s in segs)
        if total > max_entries:
            raise ResourceGuardError(f"context store holds {total} entries, budget is {max_entries}")


def build_all_contexts(g: HeteroGraph, metapaths: dict, workers: int = 1, max_entries=None) -> ContextStore:
    """Contexts of every node for every metapath in ``metapaths`` (node type ->
    list of Metapath). Types with an empty list get the identity context so that
    every type still produces representations. The layout does not depend on
    ``workers``."""
    store = ContextStore(g.structure_hash())
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(g.schema.num_node_types):
            paths = metapaths.get(t, [])
            if not paths:
                store.segments[t] = [_identity_segments(g, t)]
                continue
            segs = []
            nodes = g.nodes_of(t).tolist()
            for p in paths:
                if pool is None:
                    contexts = [build_context(g, p, v) for v in nodes]
                else:
                    contexts = list(pool.map(lambda v, p=p: build_context(g, p, v), nodes))
                segs.append(_pack(t, p, contexts))
            store.segments[t] = segs
            _check_budget(store, max_entries)
    finally:
        if pool is not None:
            pool.shutdown()
    return store


def build_khop_store(g: HeteroGraph, K: int, max_entries=None) -> ContextStore:
    store = ContextStore(g.structure_hash())
    for t in range(g.schema.num_node_types):
        contexts = [khop_context(g, v, K) for v in g.nodes_of(t).tolist()]
        store.segments[t] = [_pack(t, None, contexts)]
        _check_budget(store, max_entries)
    return store


# Cache file: magic, version, graph hash, then per segment a header and the
# little-endian arrays (int64 offsets/centers, int32 index).
_MAGIC = b"MECCHCTX"
_VERSION = 1


def save_store(store: ContextStore, path) -> None:
    parts = [_MAGIC, struct.pack("<I", _VERSION), bytes.fromhex(store.graph_hash)]
    segs = [s for t in sorted(store.segments) for s in store.segments[t]]
    parts.append(struct.pack("<I", len(segs)))
    for s in segs:
        ets = () if s.metapath is None else s.metapath.edge_types
        kind = 0 if s.metapath is None else 1
        parts.append(struct.pack("<IiI", s.node_type, kind, len(ets)))
        parts.append(np.asarray(ets, dtype="<i4").tobytes())
        parts.append(struct.pack("<QQ", len(s.centers), len(s.index)))
        parts.append(s.centers.astype("<i8").tobytes())
        parts.append(s.offsets.astype("<i8").tobytes())
        parts.append(s.index.astype("<i4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_store(path, g: HeteroGraph) -> Optional[ContextStore]:
    """Read a cache file; returns None when missing, malformed, or built for a
    different graph."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError:
        return None
    try:
        if buf[:8] != _MAGIC or struct.unpack_from("<I", buf, 8)[0] != _VERSION:
            return None
        ghash = buf[12:44].hex()
        if ghash != g.structure_hash():
            return None
        pos = 44
        (n_segs,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        store = ContextStore(ghash)
        for _ in range(n_segs):
            t, kind, k = struct.unpack_from("<IiI", buf, pos)
            pos += 12
            ets = np.frombuffer(buf, dtype="<i4", count=k, offset=pos).tolist()
            pos += 4 * k
            n_c, n_ix = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            centers = np.frombuffer(buf, dtype="<i8", count=n_c, offset=pos).astype(np.int64)
            pos += 8 * n_c
            offsets = np.frombuffer(buf, dtype="<i8", count=n_c + 1, offset=pos).astype(np.int64)
            pos += 8 * (n_c + 1)
            index = np.frombuffer(buf, dtype="<i4", count=n_ix, offset=pos).astype(np.int64)
            pos += 4 * n_ix
            if kind == 0:
                mp = None
            elif ets:
                mp = Metapath.from_edge_types(g.schema, ets)
            else:
                mp = Metapath.identity(t)
            store.segments.setdefault(t, []).append(ContextSegments(t, mp, centers, offsets, index))
        return store
    except (struct.error, ValueError, ContractViolation):
        return None


def cache_key(g: HeteroGraph, variant: str, K: int, metapaths: dict) -> str:
    h = hashlib.sha256(g.structure_hash().encode())
    h.update(f"{variant}:{K}".encode())
    for t in sorted(metapaths):
        for p in metapaths[t]:
            h.update(repr(p.edge_types).encode())
    return h.hexdigest()[:24]
