"""The MECCH network: per-type input projection, metapath context encoding,
convolutional metapath fusion, the DistMult decoder, and the KHOP / ACE / MMF
ablation variants. Parameters live in a flat ``{name: Tensor}`` dict."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .context import ContextSegments, ContextStore
from .errors import CheckpointFormatError, CheckpointMismatchError, ConfigError, ShapeError
from .graph import HeteroGraph

VARIANTS = ("MECCH", "KHOP", "ACE", "MMF")
TASKS = ("node_classification", "link_prediction")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    metapath_length: int = 2
    num_layers: int = 2
    dropout: float = 0.0
    variant: str = "MECCH"
    task: str = "node_classification"
    output_dim: Optional[int] = 64  # None: derived from the task data
    seed: int = 0
    max_metapaths: int = 64

    def __post_init__(self):
        if self.hidden_dim <= 0 or (self.output_dim is not None and self.output_dim <= 0):
            raise ConfigError("hidden_dim and output_dim must be positive")
        if self.metapath_length < 1 or self.num_layers < 1:
            raise ConfigError("metapath_length and num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")


def segment_label(g: HeteroGraph, seg: ContextSegments) -> str:
    return "khop" if seg.metapath is None else seg.metapath.label(g.schema)


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def layer_dims(config: ModelConfig, layer: int) -> tuple:
    """(input width, output width) of fusion layer ``layer`` (1-based)."""
    out = config.output_dim if layer == config.num_layers else config.hidden_dim
    return config.hidden_dim, out


def init_params(g: HeteroGraph, store: ContextStore, config: ModelConfig, rng=None) -> dict:
    """Glorot-uniform weights and embeddings, zero biases, fusion vectors at
    ``1/|P_A|``. Iteration order is fixed so a seed fully determines the result."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    d = config.hidden_dim
    names = g.schema.node_type_names
    params = {}

    def put(name, value):
        params[name] = ad.Tensor(value, requires_grad=True, name=name)

    for t, tname in enumerate(names):
        dim = g.feature_dim(t)
        if dim is None:
            put(f"input/{tname}/emb", _glorot(rng, g.num_nodes_of(t), d))
        else:
            put(f"input/{tname}/W", _glorot(rng, d, dim))
            put(f"input/{tname}/b", np.zeros(d))
    for layer in range(1, config.num_layers + 1):
        d_in, d_out = layer_dims(config, layer)
        for t, tname in enumerate(names):
            segs = store.for_type(t)
            put(f"layer{layer}/{tname}/W", _glorot(rng, d_out, d_in))
            put(f"layer{layer}/{tname}/b", np.zeros(d_out))
            for seg in segs:
                label = segment_label(g, seg)
                if config.variant != "MMF":
                    put(f"layer{layer}/{tname}/a/{label}", np.full(d_in, 1.0 / len(segs)))
                if config.variant == "ACE":
                    put(f"layer{layer}/{tname}/q/{label}", np.zeros(2 * d_in))
    if config.task == "link_prediction":
        put("lp/w", np.ones(config.output_dim))
    return params


def preprocess_features(g: HeteroGraph, params: dict) -> list:
    """Per-type input representations: a linear map of raw features, or an
    embedding table for featureless types."""
    out = []
    for t, tname in enumerate(g.schema.node_type_names):
        feats = g.features[t]
        if feats is None:
            out.append(params[f"input/{tname}/emb"])
        else:
            out.append(ad.linear(feats, params[f"input/{tname}/W"], params[f"input/{tname}/b"]))
    return out


def encode_context(H, seg: ContextSegments):
    """Mean of the previous-layer rows over each center's context node set."""
    return ad.segment_mean(H, seg.offsets, seg.index)


def encode_context_ace(H, seg: ContextSegments, q):
    """Attention pooling: score ``leaky_relu(q . [h_v || h_u], 0.2)`` for each
    context node ``u`` of center ``v``, softmax within the context."""
    d = H.shape[1]
    sizes = np.diff(seg.offsets)
    center_pos = np.repeat(seg.centers, sizes)
    s_center = ad.matvec(H, ad.slice_vector(q, 0, d))
    s_node = ad.matvec(H, ad.slice_vector(q, d, 2 * d))
    scores = ad.leaky_relu(ad.add(ad.gather(s_center, center_pos), ad.gather(s_node, seg.index)), 0.2)
    alpha = ad.segment_softmax(scores, seg.offsets)
    return ad.segment_mean(H, seg.offsets, seg.index, weights=alpha)


def fuse(h_by_metapath: list, scales: list, W, b, final: bool, variant: str = "MECCH"):
    """Combine per-metapath representations and project.

    MMF ignores ``scales`` and uses the elementwise mean over metapaths.
    """
    if not h_by_metapath:
        raise ShapeError("fuse needs at least one metapath representation")
    if variant == "MMF":
        width = h_by_metapath[0].shape[1]
        uniform = np.full(width, 1.0 / len(h_by_metapath))
        scales = [ad.Tensor(uniform) for _ in h_by_metapath]
    z = ad.scaled_sum(h_by_metapath, scales)
    out = ad.linear(z, W, b)
    return out if final else ad.relu(out)


def forward(g: HeteroGraph, store: ContextStore, params: dict, config: ModelConfig,
            training: bool = False, rng: Optional[np.random.Generator] = None) -> list:
    """Full-batch forward pass; returns the final representation of every node
    type. All encodings at layer ``l`` read layer ``l-1`` values."""
    names = g.schema.node_type_names
    rate = config.dropout
    h = [ad.dropout(x, rate, training, rng) for x in preprocess_features(g, params)]
    for layer in range(1, config.num_layers + 1):
        final = layer == config.num_layers
        H = ad.concat_rows(h)
        new_h = []
        for t, tname in enumerate(names):
            segs = store.for_type(t)
            encoded, scales = [], []
            for seg in segs:
                label = segment_label(g, seg)
                if config.variant == "ACE":
                    encoded.append(encode_context_ace(H, seg, params[f"layer{layer}/{tname}/q/{label}"]))
                else:
                    encoded.append(encode_context(H, seg))
                scales.append(params.get(f"layer{layer}/{tname}/a/{label}"))
            out = fuse(encoded, scales, params[f"layer{layer}/{tname}/W"],
                       params[f"layer{layer}/{tname}/b"], final, config.variant)
            if not final:
                out = ad.dropout(out, rate, training, rng)
            new_h.append(out)
        h = new_h
    return h


def node_rows(g: HeteroGraph, h: list, nodes) -> tuple:
    """Map global node ids to (type-stacked tensor, row indices). All nodes must
    share one type."""
    nodes = np.asarray(nodes, dtype=np.int64)
    types = np.unique(g.node_type[nodes])
    if len(types) != 1:
        raise ShapeError("node_rows expects nodes of a single type")
    t = int(types[0])
    return h[t], nodes - g.type_offsets[t]


def distmult_score(hu, hv, w_lp):
    return ad.distmult(hu, hv, w_lp)


# ------------------------------------------------------------- checkpoints

_MAGIC = b"MECCHCKP"
_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict, meta: Optional[dict] = None) -> None:
    header = json.dumps({"config": asdict(config), "meta": meta or {}}, sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        bname = name.encode()
        parts.append(struct.pack("<II", len(bname), arr.ndim))
        parts.append(bname)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple:
    """Returns (ModelConfig, params, meta)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from None
    if buf[:8] != _MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(buf[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<II", buf, pos)
            pos += 8
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            params[name] = ad.Tensor(data, requires_grad=True, name=name)
        if pos != len(buf):
            raise CheckpointFormatError("trailing bytes in checkpoint")
        config = ModelConfig(**header["config"])
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint {path}: {exc}") from None
    return config, params, header.get("meta", {})


def check_params(params: dict, expected: dict) -> None:
    """Raise if ``params`` does not have exactly the names and shapes of ``expected``."""
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointMismatchError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise CheckpointMismatchError(f"{name}: checkpoint shape {params[name].shape}, expected {t.shape}")
