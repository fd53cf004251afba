"""Run configuration and task file formats.

The config file is INI-style with ``[data]``, ``[model]`` and ``[train]``
sections of ``key = value`` lines. Unknown sections or keys are errors.
Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError
from .graph import HeteroGraph, _data_lines
from .model import ModelConfig
from .training import SplitSpec, TrainConfig

DATA_KEYS = {
    "task": None,
    "schema": "schema.txt",
    "nodes": "nodes.tsv",
    "edges": "edges.tsv",
    "labels": "labels.tsv",
    "splits": "splits.tsv",
    "target_type": None,
    "num_classes": None,
    "target_relation": None,
    "edges_train": "edges_target_train.tsv",
    "edges_valid": "edges_target_valid.tsv",
    "edges_test": "edges_target_test.tsv",
    "negatives_valid": "negatives_valid.tsv",
    "negatives_test": "negatives_test.tsv",
}
PATH_KEYS = {"schema", "nodes", "edges", "labels", "splits", "edges_train", "edges_valid",
             "edges_test", "negatives_valid", "negatives_test"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"task"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {"out_dir", "cache"}


@dataclass
class RunConfig:
    path: str
    data: dict
    model: ModelConfig
    train: TrainConfig
    out_dir: str
    cache: bool = True

    def data_path(self, key) -> str:
        return self.data[key]


def _coerce(cls, name, raw):
    ftype = str({f.name: f.type for f in fields(cls)}[name])
    try:
        if "int" in ftype:
            return int(raw)
        if "float" in ftype:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {ftype}") from None
    return raw


def load_config(path, seed_override=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown_sections = set(parser.sections()) - {"data", "model", "train"}
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
    sect = {s: dict(parser[s]) if parser.has_section(s) else {} for s in ("data", "model", "train")}
    for section, allowed in (("data", DATA_KEYS.keys()), ("model", MODEL_KEYS), ("train", TRAIN_KEYS)):
        bad = set(sect[section]) - set(allowed)
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")

    base = os.path.dirname(os.path.abspath(path))
    data = {k: sect["data"].get(k, default) for k, default in DATA_KEYS.items()}
    if data["task"] not in ("node_classification", "link_prediction"):
        raise ConfigError("[data] task must be node_classification or link_prediction")
    for k in PATH_KEYS:
        data[k] = os.path.join(base, data[k])

    model_kw = {k: _coerce(ModelConfig, k, v) for k, v in sect["model"].items()}
    train_kw = {k: _coerce(TrainConfig, k, v) for k, v in sect["train"].items() if k not in ("out_dir", "cache")}
    if seed_override is not None:
        model_kw["seed"] = train_kw["seed"] = int(seed_override)
    model_kw["task"] = data["task"]
    out_dir = os.path.join(base, sect["train"].get("out_dir", "run"))
    cache = sect["train"].get("cache", "true").lower() in ("1", "true", "yes", "on")
    model_kw.setdefault("output_dim", None)
    model = ModelConfig(**model_kw)
    return RunConfig(os.path.abspath(path), data, model, TrainConfig(**train_kw), out_dir, cache)


def write_config(sections: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("data", "model", "train"):
            fh.write(f"[{name}]\n")
            for k, v in sections.get(name, {}).items():
                fh.write(f"{k} = {v}\n")
            fh.write("\n")


def _rows(path, n_fields):
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != n_fields:
            raise ParseError(f"expected {n_fields} tab-separated fields", path, lineno)
        yield lineno, parts


def load_nc_splits(g: HeteroGraph, labels_path, splits_path, target_type=None, num_classes=None) -> SplitSpec:
    labels = {}
    for lineno, (ext, cls) in _rows(labels_path, 2):
        try:
            labels[g.node_id(ext)] = int(cls)
        except ValueError:
            raise ParseError(f"bad class {cls!r}", labels_path, lineno) from None
    members = {"train": [], "valid": [], "test": []}
    for lineno, (ext, split) in _rows(splits_path, 2):
        if split not in members:
            raise ParseError(f"unknown split {split!r}", splits_path, lineno)
        v = g.node_id(ext)
        if v not in labels:
            raise IntegrityError(f"{splits_path}:{lineno}: node {ext!r} has no label")
        members[split].append(v)
    if not labels:
        raise IntegrityError("labels file is empty")
    if target_type is None:
        t = int(g.node_type[next(iter(labels))])
    else:
        t = g.schema.node_type_id(target_type)
    C = int(num_classes) if num_classes is not None else max(labels.values()) + 1
    spec = SplitSpec(
        "node_classification", target_type=t, num_classes=C,
        nodes={k: np.array(v, dtype=np.int64) for k, v in members.items()},
        labels={k: np.array([labels[x] for x in v], dtype=np.int64) for k, v in members.items()},
    )
    spec.validate(g)
    return spec


def load_pairs(g: HeteroGraph, path) -> np.ndarray:
    out = [(g.node_id(a), g.node_id(b)) for _, (a, b) in _rows(path, 2)]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def load_lp_splits(g: HeteroGraph, data: dict) -> SplitSpec:
    spec = SplitSpec("link_prediction")
    rel = data.get("target_relation")
    et = g.schema.edge_types[g.schema.edge_type_id(rel)] if rel else None
    for split in ("train", "valid", "test"):
        spec.edges[split] = load_pairs(g, data[f"edges_{split}"])
    for split in ("valid", "test"):
        spec.negatives[split] = load_pairs(g, data[f"negatives_{split}"])
    if et is not None:
        for name, arr in list(spec.edges.items()) + list(spec.negatives.items()):
            if len(arr) and (np.any(g.node_type[arr[:, 0]] != et.src) or np.any(g.node_type[arr[:, 1]] != et.dst)):
                raise IntegrityError(f"{name} pairs do not match relation {rel!r}")
    spec.validate(g)
    return spec


def write_labels(g, spec: SplitSpec, path) -> None:
    rows = []
    for split in ("train", "valid", "test"):
        rows += list(zip(spec.nodes[split].tolist(), spec.labels[split].tolist()))
    with open(path, "w", encoding="utf-8") as fh:
        for v, c in sorted(rows):
            fh.write(f"{g.ext_ids[v]}\t{c}\n")


def write_splits(g, spec: SplitSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for split in ("train", "valid", "test"):
            for v in spec.nodes[split].tolist():
                fh.write(f"{g.ext_ids[v]}\t{split}\n")


def write_pairs(g, pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in np.asarray(pairs).tolist():
            fh.write(f"{g.ext_ids[u]}\t{g.ext_ids[v]}\n")


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "valid_metric", "seconds"])
        for rec in history:
            writer.writerow([rec["epoch"], repr(rec["train_loss"]), repr(rec["valid_metric"]),
                             f"{rec['seconds']:.6f}"])
