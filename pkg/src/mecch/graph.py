"""Typed graph store, TSV loaders, and metapath enumeration.

Node ids are global integers laid out per type: all nodes of type 0 first,
then type 1, and so on, so each type occupies one contiguous id range.
Adjacency is kept per edge type in CSR form, indexed by the local position
of the source node within its type and holding sorted global destination ids.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ContractViolation,
    IntegrityError,
    MetapathCapExceeded,
    ParseError,
    SchemaError,
)

log = logging.getLogger(__name__)

DEFAULT_METAPATH_CAP = 64


@dataclass(frozen=True)
class EdgeType:
    name: str
    src: int
    dst: int
    rev: Optional[str] = None


@dataclass(frozen=True)
class Schema:
    node_type_names: tuple
    edge_types: tuple

    def __post_init__(self):
        n_types = len(self.node_type_names)
        if len(set(self.node_type_names)) != n_types:
            raise SchemaError("duplicate node type name")
        names = [et.name for et in self.edge_types]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate edge type name")
        for et in self.edge_types:
            if not (0 <= et.src < n_types and 0 <= et.dst < n_types):
                raise SchemaError(f"edge type {et.name!r} references an unknown node type")
            if et.rev is not None:
                if et.rev not in names:
                    raise SchemaError(f"edge type {et.name!r} declares unknown reverse {et.rev!r}")
                other = self.edge_types[names.index(et.rev)]
                if (other.src, other.dst) != (et.dst, et.src):
                    raise SchemaError(f"reverse {et.rev!r} of {et.name!r} has mismatched endpoints")
        if n_types + len(self.edge_types) <= 2:
            raise SchemaError(
                "a heterogeneous graph needs |node types| + |edge types| > 2, "
                f"got {n_types} + {len(self.edge_types)}"
            )

    @property
    def num_node_types(self) -> int:
        return len(self.node_type_names)

    @property
    def num_edge_types(self) -> int:
        return len(self.edge_types)

    def node_type_id(self, name: str) -> int:
        try:
            return self.node_type_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown node type {name!r}") from None

    def edge_type_id(self, name: str) -> int:
        for i, et in enumerate(self.edge_types):
            if et.name == name:
                return i
        raise SchemaError(f"unknown edge type {name!r}")

    def to_text(self) -> str:
        lines = [f"nodetype {name}" for name in self.node_type_names]
        for et in self.edge_types:
            line = f"edgetype {et.name} {self.node_type_names[et.src]} {self.node_type_names[et.dst]}"
            if et.rev is not None:
                line += f" rev={et.rev}"
            lines.append(line)
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Metapath:
    """A chain of edge types. ``edge_types == ()`` is the degenerate self path."""

    edge_types: tuple
    node_types: tuple

    @classmethod
    def from_edge_types(cls, schema: Schema, edge_types: Sequence[int]) -> "Metapath":
        edge_types = tuple(int(r) for r in edge_types)
        if not edge_types:
            raise ContractViolation("a metapath needs at least one edge type")
        node_types = [schema.edge_types[edge_types[0]].src]
        for r in edge_types:
            et = schema.edge_types[r]
            if et.src != node_types[-1]:
                raise ContractViolation(f"edge type {et.name!r} does not chain in metapath")
            node_types.append(et.dst)
        return cls(edge_types, tuple(node_types))

    @classmethod
    def identity(cls, node_type: int) -> "Metapath":
        return cls((), (node_type,))

    @property
    def length(self) -> int:
        return len(self.edge_types)

    @property
    def start_type(self) -> int:
        return self.node_types[0]

    def label(self, schema: Schema) -> str:
        parts = [schema.node_type_names[self.node_types[0]]]
        for r, a in zip(self.edge_types, self.node_types[1:]):
            parts += [schema.edge_types[r].name, schema.node_type_names[a]]
        if not self.edge_types:
            parts.append("self")
        return "-".join(parts)


@dataclass
class HeteroGraph:
    schema: Schema
    type_offsets: np.ndarray  # len = num_node_types + 1
    ext_ids: list
    indptr: list  # per edge type, over local source index
    indices: list  # per edge type, global destination ids
    features: list = field(default_factory=list)  # per node type: ndarray or None

    def __post_init__(self):
        self.type_offsets = np.asarray(self.type_offsets, dtype=np.int64)
        self.node_type = np.repeat(
            np.arange(self.schema.num_node_types, dtype=np.int64), np.diff(self.type_offsets)
        )
        self._ext_index = {e: i for i, e in enumerate(self.ext_ids)}
        if len(self._ext_index) != len(self.ext_ids):
            raise IntegrityError("duplicate external node id")
        if not self.features:
            self.features = [None] * self.schema.num_node_types

    @property
    def num_nodes(self) -> int:
        return int(self.type_offsets[-1])

    @property
    def num_edges(self) -> int:
        return int(sum(len(ix) for ix in self.indices))

    def num_nodes_of(self, node_type: int) -> int:
        return int(self.type_offsets[node_type + 1] - self.type_offsets[node_type])

    def nodes_of(self, node_type: int) -> np.ndarray:
        return np.arange(self.type_offsets[node_type], self.type_offsets[node_type + 1])

    def node_id(self, ext_id: str) -> int:
        try:
            return self._ext_index[ext_id]
        except KeyError:
            raise IntegrityError(f"unknown node id {ext_id!r}") from None

    def local_index(self, v: int) -> int:
        return int(v - self.type_offsets[self.node_type[v]])

    def neighbors(self, v: int, r: int) -> np.ndarray:
        et = self.schema.edge_types[r]
        if self.node_type[v] != et.src:
            raise ContractViolation(
                f"node {self.ext_ids[v]!r} has type "
                f"{self.schema.node_type_names[self.node_type[v]]!r}, edge type {et.name!r} "
                f"starts at {self.schema.node_type_names[et.src]!r}"
            )
        i = v - self.type_offsets[et.src]
        return self.indices[r][self.indptr[r][i]:self.indptr[r][i + 1]]

    def edge_list(self, r: int) -> np.ndarray:
        """All edges of type ``r`` as a (E, 2) array of global ids."""
        src_type = self.schema.edge_types[r].src
        src = np.repeat(self.nodes_of(src_type), np.diff(self.indptr[r]))
        return np.stack([src, self.indices[r]], axis=1)

    def feature_dim(self, node_type: int) -> Optional[int]:
        f = self.features[node_type]
        return None if f is None else int(f.shape[1])

    def structure_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema.to_text().encode())
        h.update("\x00".join(self.ext_ids).encode())
        h.update(self.type_offsets.astype("<i8").tobytes())
        for ptr, ix in zip(self.indptr, self.indices):
            h.update(ptr.astype("<i8").tobytes())
            h.update(ix.astype("<i8").tobytes())
        return h.hexdigest()


def build_graph(schema, nodes, edges, features=None, dedup=True) -> HeteroGraph:
    """Assemble a canonical graph.

    ``nodes`` is a list of (ext_id, type_id) in any order; within each type the
    given order is kept. ``edges`` is an iterable of (src_ext, dst_ext, edge_type_id).
    ``features`` maps type id to an array aligned with that type's nodes (in the
    order given) or None for featureless types.
    """
    per_type = [[] for _ in schema.node_type_names]
    for ext, t in nodes:
        per_type[t].append(ext)
    ext_ids = [e for group in per_type for e in group]
    offsets = np.cumsum([0] + [len(g) for g in per_type])
    index = {}
    for i, e in enumerate(ext_ids):
        if e in index:
            raise IntegrityError(f"duplicate node id {e!r}")
        index[e] = i
    node_type = np.repeat(np.arange(len(per_type)), np.diff(offsets))

    by_type = [[] for _ in schema.edge_types]
    for src, dst, r in edges:
        try:
            u, v = index[src], index[dst]
        except KeyError as exc:
            raise IntegrityError(f"edge references unknown node id {exc.args[0]!r}") from None
        et = schema.edge_types[r]
        if node_type[u] != et.src or node_type[v] != et.dst:
            raise SchemaError(
                f"edge {src}->{dst} of type {et.name!r} connects "
                f"{schema.node_type_names[node_type[u]]}->{schema.node_type_names[node_type[v]]}, "
                f"expected {schema.node_type_names[et.src]}->{schema.node_type_names[et.dst]}"
            )
        by_type[r].append((u, v))

    indptr, indices = [], []
    dropped = 0
    for r, et in enumerate(schema.edge_types):
        n_src = len(per_type[et.src])
        pairs = np.array(by_type[r], dtype=np.int64).reshape(-1, 2)
        if len(pairs) and dedup:
            before = len(pairs)
            pairs = np.unique(pairs, axis=0)
            dropped += before - len(pairs)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        local_src = pairs[:, 0] - offsets[et.src]
        counts = np.bincount(local_src, minlength=n_src)
        indptr.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        indices.append(pairs[:, 1].copy())
    if dropped:
        log.info("dropped %d duplicate edges", dropped)

    feats = [None] * len(per_type)
    for t, f in (features or {}).items():
        if f is None:
            continue
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != len(per_type[t]):
            raise SchemaError(f"feature matrix for type {schema.node_type_names[t]!r} has shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise IntegrityError(f"non-finite feature value in type {schema.node_type_names[t]!r}")
        feats[t] = f

    g = HeteroGraph(schema, offsets, ext_ids, indptr, indices, feats)
    check_reverse_pairs(g)
    return g


def check_reverse_pairs(g: HeteroGraph) -> None:
    for r, et in enumerate(g.schema.edge_types):
        if et.rev is None:
            continue
        fwd = {tuple(e) for e in g.edge_list(r).tolist()}
        back = {(v, u) for u, v in g.edge_list(g.schema.edge_type_id(et.rev)).tolist()}
        if fwd != back:
            raise IntegrityError(f"edge types {et.name!r} and {et.rev!r} are not mutual reverses")


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_schema(path) -> Schema:
    node_types, raw_edges = [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if parts[0] == "nodetype" and len(parts) == 2:
            node_types.append(parts[1])
        elif parts[0] == "edgetype" and len(parts) in (4, 5):
            rev = None
            if len(parts) == 5:
                if not parts[4].startswith("rev="):
                    raise ParseError(f"expected rev=<name>, got {parts[4]!r}", path, lineno)
                rev = parts[4][4:]
            raw_edges.append((lineno, parts[1], parts[2], parts[3], rev))
        else:
            raise ParseError(f"malformed schema line {line!r}", path, lineno)
    edge_types = []
    for lineno, name, src, dst, rev in raw_edges:
        if src not in node_types or dst not in node_types:
            raise SchemaError(f"{path}:{lineno}: edge type {name!r} references an unknown node type")
        edge_types.append(EdgeType(name, node_types.index(src), node_types.index(dst), rev))
    return Schema(tuple(node_types), tuple(edge_types))


def load_graph(nodes_path, edges_path, schema_path=None) -> HeteroGraph:
    """Load ``nodes.tsv`` / ``edges.tsv``; the schema defaults to ``schema.txt``
    next to the nodes file."""
    if schema_path is None:
        schema_path = os.path.join(os.path.dirname(os.path.abspath(nodes_path)), "schema.txt")
    schema = load_schema(schema_path)

    nodes, feat_rows = [], [[] for _ in schema.node_type_names]
    for lineno, line in _data_lines(nodes_path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected 3 tab-separated fields", nodes_path, lineno)
        ext, tname, fstr = parts
        if tname not in schema.node_type_names:
            raise SchemaError(f"{nodes_path}:{lineno}: unknown node type {tname!r}")
        t = schema.node_type_names.index(tname)
        if fstr.strip() == "-":
            vec = None
        else:
            try:
                vec = [float(x) for x in fstr.split(",")]
            except ValueError:
                raise ParseError(f"bad feature list {fstr!r}", nodes_path, lineno) from None
            if not all(math.isfinite(x) for x in vec):
                raise IntegrityError(f"{nodes_path}:{lineno}: non-finite feature value")
        if feat_rows[t] and (feat_rows[t][0] is None) != (vec is None):
            raise SchemaError(f"{nodes_path}:{lineno}: type {tname!r} mixes featureless and featured nodes")
        if vec is not None and feat_rows[t] and len(vec) != len(feat_rows[t][0]):
            raise SchemaError(f"{nodes_path}:{lineno}: inconsistent feature dimension for type {tname!r}")
        nodes.append((ext, t))
        feat_rows[t].append(vec)

    edges = []
    for lineno, line in _data_lines(edges_path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected 3 tab-separated fields", edges_path, lineno)
        src, dst, ename = parts
        names = [et.name for et in schema.edge_types]
        if ename not in names:
            raise SchemaError(f"{edges_path}:{lineno}: unknown edge type {ename!r}")
        edges.append((src, dst, names.index(ename)))

    features = {}
    for t, rows in enumerate(feat_rows):
        if rows and rows[0] is not None:
            features[t] = np.array(rows, dtype=np.float64)
    return build_graph(schema, nodes, edges, features)


def _format_features(row) -> str:
    return ",".join(repr(float(x)) for x in row)


def save_graph(g: HeteroGraph, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "schema.txt"), "w", encoding="utf-8") as fh:
        fh.write(g.schema.to_text())
    with open(os.path.join(directory, "nodes.tsv"), "w", encoding="utf-8") as fh:
        for v, ext in enumerate(g.ext_ids):
            t = int(g.node_type[v])
            f = g.features[t]
            fstr = "-" if f is None else _format_features(f[v - g.type_offsets[t]])
            fh.write(f"{ext}\t{g.schema.node_type_names[t]}\t{fstr}\n")
    with open(os.path.join(directory, "edges.tsv"), "w", encoding="utf-8") as fh:
        for r, et in enumerate(g.schema.edge_types):
            for u, v in g.edge_list(r).tolist():
                fh.write(f"{g.ext_ids[u]}\t{g.ext_ids[v]}\t{et.name}\n")


def enumerate_metapaths(schema: Schema, start_type: int, length: int, cap: int = DEFAULT_METAPATH_CAP) -> list:
    """All chainable edge-type sequences of the given length leaving ``start_type``,
    in lexicographic edge-type order."""
    if length < 1:
        raise ContractViolation(f"metapath length must be >= 1, got {length}")
    out_edges = [[] for _ in schema.node_type_names]
    for r, et in enumerate(schema.edge_types):
        out_edges[et.src].append(r)

    found = []

    def walk(node_type, prefix):
        if len(prefix) == length:
            found.append(Metapath.from_edge_types(schema, prefix))
            if len(found) > cap:
                raise MetapathCapExceeded(
                    f"more than {cap} metapaths of length {length} start at node type "
                    f"{schema.node_type_names[start_type]!r}; lower the metapath length"
                )
            return
        for r in out_edges[node_type]:
            walk(schema.edge_types[r].dst, prefix + [r])

    walk(start_type, [])
    return found


def metapaths_by_type(schema: Schema, length: int, cap: int = DEFAULT_METAPATH_CAP) -> dict:
    return {t: enumerate_metapaths(schema, t, length, cap) for t in range(schema.num_node_types)}


def make_typed_tree(branching: int, depth: int, type_cycle=3) -> HeteroGraph:
    """Complete ``branching``-ary tree of the given depth.

    The node at depth ``d`` gets type ``type_cycle[d % len(type_cycle)]``; parent to
    child edges are typed by the (parent type, child type) pair, and every edge
    type has a declared reverse. ``type_cycle`` may be an int (that many
    generated type names).
    """
    if isinstance(type_cycle, int):
        type_cycle = [f"T{i}" for i in range(type_cycle)]
    type_cycle = list(type_cycle)
    if len(type_cycle) < 2:
        raise ContractViolation("type_cycle needs at least 2 entries")
    if branching < 1 or depth < 1:
        raise ContractViolation("branching and depth must be positive")
    node_types = list(dict.fromkeys(type_cycle))
    pair_names = {}
    edge_types = []
    for d in range(min(depth, len(type_cycle))):
        a, b = type_cycle[d % len(type_cycle)], type_cycle[(d + 1) % len(type_cycle)]
        if (a, b) in pair_names:
            continue
        name = f"{a}_{b}"
        pair_names[(a, b)] = name
        edge_types.append(EdgeType(name, node_types.index(a), node_types.index(b), f"{name}_rev"))
        edge_types.append(EdgeType(f"{name}_rev", node_types.index(b), node_types.index(a), name))
    schema = Schema(tuple(node_types), tuple(edge_types))

    nodes, edges = [("n0", node_types.index(type_cycle[0]))], []
    frontier = ["n0"]
    counter = 1
    for d in range(depth):
        a, b = type_cycle[d % len(type_cycle)], type_cycle[(d + 1) % len(type_cycle)]
        r = schema.edge_type_id(pair_names[(a, b)])
        nxt = []
        for parent in frontier:
            for _ in range(branching):
                child = f"n{counter}"
                counter += 1
                nodes.append((child, node_types.index(b)))
                edges.append((parent, child, r))
                edges.append((child, parent, r + 1))
                nxt.append(child)
        frontier = nxt
    return build_graph(schema, nodes, edges)


def tree_root_metapath(g: HeteroGraph, depth: int) -> Metapath:
    """The downward metapath from the root of a ``make_typed_tree`` graph."""
    root = g.node_id("n0")
    types, path, t = g.schema, [], int(g.node_type[root])
    v = root
    for _ in range(depth):
        for r, et in enumerate(types.edge_types):
            if et.src == t and not et.name.endswith("_rev") and len(g.neighbors(v, r)):
                path.append(r)
                v = int(g.neighbors(v, r)[0])
                t = et.dst
                break
    return Metapath.from_edge_types(types, path)
