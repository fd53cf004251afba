"""Aggregation-count verification on typed trees and the planted-signal
datasets used to exercise training end to end."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .context import count_aggregations
from .errors import ContractViolation, ResourceGuardError
from .graph import EdgeType, HeteroGraph, Schema, build_graph, make_typed_tree, save_graph, tree_root_metapath
from .training import SplitSpec

REPORT_FIELDS = ["n", "K", "count_MN", "count_MC", "count_MI",
                 "formula_MN", "formula_MC", "formula_MI", "pass"]
TREE_NODE_GUARD = 2_000_000


def complexity_formulas(n: int, K: int) -> tuple:
    """Closed-form aggregation counts (neighbors, context, instances) for a
    length-K metapath when every node has n children of the next type."""
    mn = n ** K
    mc = (n ** (K + 1) - 1) // (n - 1) if n > 1 else K + 1
    mi = (K + 1) * n ** K
    return mn, mc, mi


def verify_complexity(n_values=(2, 3), K_values=(1, 2, 3), type_cycle=3) -> list:
    """One report row per (n, K): counts measured at the root of a typed tree
    next to the closed forms. ``pass`` requires exact equality, and for
    ``K >= 2`` also the strict ordering MN < MC < MI."""
    rows = []
    for n in n_values:
        for K in K_values:
            if n < 2 or K < 1:
                raise ContractViolation(f"need n >= 2 and K >= 1, got n={n}, K={K}")
            if (n ** (K + 1) - 1) // (n - 1) > TREE_NODE_GUARD:
                raise ResourceGuardError(f"tree with n={n}, K={K} exceeds {TREE_NODE_GUARD} nodes")
            g = make_typed_tree(n, K, type_cycle)
            p = tree_root_metapath(g, K)
            root = g.node_id("n0")
            counts = tuple(count_aggregations(g, p, root, s) for s in ("MN", "MC", "MI"))
            formulas = complexity_formulas(n, K)
            ok = counts == formulas
            if K >= 2:
                ok = ok and counts[0] < counts[1] < counts[2]
            rows.append(dict(zip(REPORT_FIELDS, (n, K) + counts + formulas + (ok,))))
    return rows


def write_report(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "pass": str(row["pass"]).lower()})


@dataclass
class PlantedDataset:
    graph: HeteroGraph
    splits: SplitSpec
    block_of: dict  # planted ground truth, for oracle scorers


def _split_indices(rng, n, fractions):
    perm = rng.permutation(n)
    cuts = np.cumsum([int(round(f * n)) for f in fractions[:-1]])
    return np.split(perm, cuts)


def make_planted_nc_dataset(seed=0, nodes_per_type=300, num_classes=3, signal=1.0,
                            papers_per_author=12, purity=0.9, feature_dim=4, venues=None) -> PlantedDataset:
    """Authors (A), papers (P), venues (V) with writes/publishes relations and
    their reverses. Each paper has a latent class and Gaussian features
    (std 0.5) whose class means are ``signal`` apart; an author of class ``c``
    writes papers of class ``c`` with probability ``purity``. Authors carry
    class-free noise features and venues are featureless. Author labels are
    split 10/10/80 into train/valid/test.
    """
    rng = np.random.default_rng([seed, 101])
    n = nodes_per_type
    n_venues = venues or max(2, n // 10)
    schema = Schema(
        ("A", "P", "V"),
        (EdgeType("writes", 0, 1, "writes_rev"), EdgeType("writes_rev", 1, 0, "writes"),
         EdgeType("publishes", 1, 2, "publishes_rev"), EdgeType("publishes_rev", 2, 1, "publishes")),
    )
    author_class = rng.integers(0, num_classes, size=n)
    paper_class = rng.integers(0, num_classes, size=n)
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes) % feature_dim] = signal / np.sqrt(2.0)
    paper_x = means[paper_class] + rng.normal(0.0, 0.5, size=(n, feature_dim))
    author_x = rng.normal(0.0, 1.0, size=(n, feature_dim))

    by_class = [np.flatnonzero(paper_class == c) for c in range(num_classes)]
    edges = []
    for a in range(n):
        c = author_class[a]
        for _ in range(papers_per_author):
            pool = by_class[c] if (rng.random() < purity and len(by_class[c])) else np.arange(n)
            p = int(rng.choice(pool))
            edges.append((f"a{a}", f"p{p}", 0))
            edges.append((f"p{p}", f"a{a}", 1))
    venue_of = rng.integers(0, n_venues, size=n)
    for p in range(n):
        edges.append((f"p{p}", f"v{venue_of[p]}", 2))
        edges.append((f"v{venue_of[p]}", f"p{p}", 3))
    nodes = ([(f"a{i}", 0) for i in range(n)] + [(f"p{i}", 1) for i in range(n)]
             + [(f"v{i}", 2) for i in range(n_venues)])
    g = build_graph(schema, nodes, edges, {0: author_x, 1: paper_x})

    train, valid, test = _split_indices(rng, n, (0.1, 0.1, 0.8))
    authors = g.nodes_of(0)
    splits = SplitSpec(
        "node_classification", target_type=0, num_classes=num_classes,
        nodes={"train": authors[np.sort(train)], "valid": authors[np.sort(valid)], "test": authors[np.sort(test)]},
        labels={"train": author_class[np.sort(train)], "valid": author_class[np.sort(valid)],
                "test": author_class[np.sort(test)]},
    )
    return PlantedDataset(g, splits, {"author_class": author_class, "paper_class": paper_class})


def make_planted_lp_dataset(seed=0, block_count=20, nodes_per_block=20, p_in=0.3, p_out=0.0002,
                            tags_per_block=3) -> PlantedDataset:
    """Users and items in planted blocks with ``listens`` edges drawn with
    probability ``p_in`` inside a block and ``p_out`` across blocks; each item is
    tagged with one or two of its block's tags. Target edges are split 70/10/20;
    only training edges enter the message-passing graph. Valid/test negatives
    replace the item uniformly, one per positive, and are fixed by ``seed``.
    """
    rng = np.random.default_rng([seed, 202])
    B, m = block_count, nodes_per_block
    n_users = n_items = B * m
    n_tags = B * tags_per_block
    schema = Schema(
        ("user", "item", "tag"),
        (EdgeType("listens", 0, 1, "listens_rev"), EdgeType("listens_rev", 1, 0, "listens"),
         EdgeType("tagged", 1, 2, "tagged_rev"), EdgeType("tagged_rev", 2, 1, "tagged")),
    )
    user_block = np.repeat(np.arange(B), m)
    item_block = np.repeat(np.arange(B), m)
    same = user_block[:, None] == item_block[None, :]
    prob = np.where(same, p_in, p_out)
    adj = rng.random((n_users, n_items)) < prob
    pos_u, pos_i = np.nonzero(adj)
    train, valid, test = _split_indices(rng, len(pos_u), (0.7, 0.1, 0.2))

    edges = []
    for k in np.sort(train):
        u, i = pos_u[k], pos_i[k]
        edges.append((f"u{u}", f"i{i}", 0))
        edges.append((f"i{i}", f"u{u}", 1))
    for i in range(n_items):
        b = item_block[i]
        k = 1 + int(rng.integers(0, 2))
        for tag in rng.choice(tags_per_block, size=min(k, tags_per_block), replace=False):
            t = b * tags_per_block + int(tag)
            edges.append((f"i{i}", f"t{t}", 2))
            edges.append((f"t{t}", f"i{i}", 3))
    nodes = ([(f"u{i}", 0) for i in range(n_users)] + [(f"i{i}", 1) for i in range(n_items)]
             + [(f"t{i}", 2) for i in range(n_tags)])
    g = build_graph(schema, nodes, edges)

    u0, i0 = g.type_offsets[0], g.type_offsets[1]

    def pairs(idx):
        idx = np.sort(idx)
        return np.stack([pos_u[idx] + u0, pos_i[idx] + i0], axis=1).astype(np.int64)

    splits = SplitSpec("link_prediction", edges={"train": pairs(train), "valid": pairs(valid), "test": pairs(test)})
    for name in ("valid", "test"):
        pos = splits.edges[name]
        neg_items = rng.integers(0, n_items, size=len(pos)) + i0
        splits.negatives[name] = np.stack([pos[:, 0], neg_items], axis=1)
    return PlantedDataset(g, splits, {"user_block": user_block, "item_block": item_block})


def write_dataset(ds: PlantedDataset, directory, config_overrides=None) -> str:
    """Write a planted dataset in the on-disk TSV formats plus a ready-to-run
    ``config.ini``; returns the config path."""
    from .io import write_config, write_labels, write_pairs, write_splits

    os.makedirs(directory, exist_ok=True)
    g, s = ds.graph, ds.splits
    save_graph(g, directory)
    if s.task == "node_classification":
        write_labels(g, s, os.path.join(directory, "labels.tsv"))
        write_splits(g, s, os.path.join(directory, "splits.tsv"))
        data = {"task": s.task, "target_type": g.schema.node_type_names[s.target_type]}
        model = {"output_dim": s.num_classes}
    else:
        for split in ("train", "valid", "test"):
            write_pairs(g, s.edges[split], os.path.join(directory, f"edges_target_{split}.tsv"))
        for split in ("valid", "test"):
            write_pairs(g, s.negatives[split], os.path.join(directory, f"negatives_{split}.tsv"))
        data = {"task": s.task, "target_relation": g.schema.edge_types[0].name}
        model = {}
    sections = {"data": data, "model": model, "train": {}}
    for section, values in (config_overrides or {}).items():
        sections.setdefault(section, {}).update(values)
    path = os.path.join(directory, "config.ini")
    write_config(sections, path)
    return path
