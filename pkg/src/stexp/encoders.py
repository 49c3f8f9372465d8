"""Patch and spot encoders producing unit-norm embeddings in the joint space.

The patch path is a small stride-2 convolutional stack whose per-block
global-average-pooled features are concatenated (feature reuse across
depths), or an identity pass-through for precomputed features. The spot
path adds learnable per-axis positional encodings to the expression vector,
mixes the batch with multi-head self-attention (Q = K = V), and projects.

Both paths end in the same projection-head shape:
linear -> GELU -> linear -> L2 row normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    hvg_num: int
    d_embed: int = 256
    n_heads: int = 4
    n_positions: int = 256  # positional table rows per axis
    conv_channels: tuple[int, ...] = (16, 32, 64)
    proj_hidden: int = 256
    input_kind: str = "pixels"  # "pixels" | "features"
    patch_shape: tuple[int, int, int] | None = None  # (c, h, w) when pixels
    input_feat_dim: int | None = None  # when features
    use_positional: bool = True
    use_mhsa: bool = True
    attn_residual: bool = True  # add the attention input back to its output (see encode_spots)
    image_identity: bool = False  # bypass the conv stack, flatten pixels

    def __post_init__(self):
        if self.d_embed <= 0:
            raise ValueError("EncoderConfig: d_embed must be positive")
        if self.n_heads <= 0 or self.hvg_num % self.n_heads != 0:
            raise ValueError(
                f"EncoderConfig: hvg_num={self.hvg_num} must be divisible by n_heads={self.n_heads}"
            )
        if self.input_kind == "pixels":
            if self.patch_shape is None:
                raise ValueError("EncoderConfig: pixels input requires patch_shape")
        elif self.input_kind == "features":
            if self.input_feat_dim is None:
                raise ValueError("EncoderConfig: features input requires input_feat_dim")
        else:
            raise ValueError(f"EncoderConfig: unknown input_kind {self.input_kind!r}")

    @property
    def d_k(self) -> int:
        return self.hvg_num // self.n_heads

    @property
    def feat_dim(self) -> int:
        """Width of the patch feature vector entering the image projection head."""
        if self.input_kind == "features":
            return self.input_feat_dim
        c, h, w = self.patch_shape
        if self.image_identity:
            return c * h * w
        return int(sum(self.conv_channels))

    def to_dict(self) -> dict:
        return {
            "hvg_num": self.hvg_num,
            "d_embed": self.d_embed,
            "n_heads": self.n_heads,
            "n_positions": self.n_positions,
            "conv_channels": list(self.conv_channels),
            "proj_hidden": self.proj_hidden,
            "input_kind": self.input_kind,
            "patch_shape": list(self.patch_shape) if self.patch_shape else None,
            "input_feat_dim": self.input_feat_dim,
            "use_positional": self.use_positional,
            "use_mhsa": self.use_mhsa,
            "attn_residual": self.attn_residual,
            "image_identity": self.image_identity,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        if d.get("conv_channels") is not None:
            d["conv_channels"] = tuple(d["conv_channels"])
        if d.get("patch_shape") is not None:
            d["patch_shape"] = tuple(d["patch_shape"])
        return EncoderConfig(**d)


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: EncoderConfig, seed: int, *, learn_temperature: bool = False,
                init_log_tau: float = 0.0) -> ParamSet:
    """Create all learnable tensors in a fixed order from a seeded generator.

    Weights are uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ps = ParamSet()

    if cfg.input_kind == "pixels" and not cfg.image_identity:
        c_in = cfg.patch_shape[0]
        for i, c_out in enumerate(cfg.conv_channels):
            fan = c_in * 3 * 3
            ps.add(f"conv.{i}.w", _uniform(rng, fan, (c_out, c_in, 3, 3)))
            ps.add(f"conv.{i}.b", np.zeros(c_out, dtype=np.float32))
            c_in = c_out

    ps.add("img_proj.w1", _uniform(rng, cfg.feat_dim, (cfg.feat_dim, cfg.proj_hidden)))
    ps.add("img_proj.b1", np.zeros(cfg.proj_hidden, dtype=np.float32))
    ps.add("img_proj.w2", _uniform(rng, cfg.proj_hidden, (cfg.proj_hidden, cfg.d_embed)))
    ps.add("img_proj.b2", np.zeros(cfg.d_embed, dtype=np.float32))

    if cfg.use_positional:
        ps.add("pos.wx", _uniform(rng, cfg.n_positions, (cfg.n_positions, cfg.hvg_num)))
        ps.add("pos.wy", _uniform(rng, cfg.n_positions, (cfg.n_positions, cfg.hvg_num)))

    if cfg.use_mhsa:
        for i in range(cfg.n_heads):
            ps.add(f"attn.h{i}.wq", _uniform(rng, cfg.hvg_num, (cfg.hvg_num, cfg.d_k)))
            ps.add(f"attn.h{i}.wk", _uniform(rng, cfg.hvg_num, (cfg.hvg_num, cfg.d_k)))
            ps.add(f"attn.h{i}.wv", _uniform(rng, cfg.hvg_num, (cfg.hvg_num, cfg.d_k)))
        ps.add("attn.w0", _uniform(rng, cfg.hvg_num, (cfg.hvg_num, cfg.hvg_num)))

    ps.add("spot_proj.w1", _uniform(rng, cfg.hvg_num, (cfg.hvg_num, cfg.proj_hidden)))
    ps.add("spot_proj.b1", np.zeros(cfg.proj_hidden, dtype=np.float32))
    ps.add("spot_proj.w2", _uniform(rng, cfg.proj_hidden, (cfg.proj_hidden, cfg.d_embed)))
    ps.add("spot_proj.b2", np.zeros(cfg.d_embed, dtype=np.float32))

    if learn_temperature:
        ps.add("temp.log_tau", np.array(init_log_tau, dtype=np.float32))
    return ps


# ---------------------------------------------------------------------------
# forward graph builders (operate on diffcore tensors)
# ---------------------------------------------------------------------------


def prepare_patch_input(patches_or_features: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Bring raw patch data into the array layout the encoder consumes."""
    arr = np.asarray(patches_or_features)
    if cfg.input_kind == "features":
        if arr.ndim != 2 or arr.shape[1] != cfg.input_feat_dim:
            raise dc.GraphError(f"encode_patch: features shape {arr.shape} != (N, {cfg.input_feat_dim})")
        return arr
    if arr.ndim != 4 or arr.shape[1:] != tuple(cfg.patch_shape):
        raise dc.GraphError(f"encode_patch: patch shape {arr.shape[1:]} != {tuple(cfg.patch_shape)}")
    if cfg.image_identity:
        return arr.reshape(arr.shape[0], -1)
    return arr


def encode_patch(patch_input: Tensor, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """Patch pixels -> feature vector; precomputed features pass through unchanged."""
    if cfg.input_kind == "features" or cfg.image_identity:
        return patch_input  # identity
    x = patch_input
    pooled = []
    for i in range(len(cfg.conv_channels)):
        x = dc.relu(dc.conv2d(x, params[f"conv.{i}.w"], params[f"conv.{i}.b"], stride=2, padding=1))
        pooled.append(dc.mean(x, axis=(2, 3)))
    return dc.concat(pooled, axis=1)


def project(z: Tensor, params: ParamSet, head: str) -> Tensor:
    """linear -> GELU -> linear -> L2 row normalization."""
    h = dc.gelu(dc.add(dc.matmul(z, params[f"{head}.w1"]), params[f"{head}.b1"]))
    h = dc.add(dc.matmul(h, params[f"{head}.w2"]), params[f"{head}.b2"])
    return dc.l2_normalize_rows(h)


def _one_hot(indices: np.ndarray, depth: int, dtype) -> np.ndarray:
    out = np.zeros((indices.shape[0], depth), dtype=dtype)
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def positional_encode(coords: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Row-select the positional tables via one-hot products.

    Mathematically identical to a table lookup; the one-hot matmul keeps the
    gradient path to the tables inside the primitive set.
    """
    coords = np.asarray(coords)
    over = np.flatnonzero((coords[:, 0] >= cfg.n_positions) | (coords[:, 1] >= cfg.n_positions))
    if over.size:
        raise ValueError(
            f"positional_encode: spot {int(over[0])} has coordinate {coords[over[0]].tolist()} "
            f">= table size {cfg.n_positions}"
        )
    wx, wy = params["pos.wx"], params["pos.wy"]
    px = dc.constant(_one_hot(coords[:, 0].astype(np.int64), cfg.n_positions, wx.dtype))
    py = dc.constant(_one_hot(coords[:, 1].astype(np.int64), cfg.n_positions, wy.dtype))
    return dc.matmul(px, wx), dc.matmul(py, wy)


def positional_lookup(coords: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Direct row lookup; equals the one-hot product elementwise."""
    return table[np.asarray(coords, dtype=np.int64)]


def mhsa(x: Tensor, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """Multi-head self-attention with Q = K = V = x, concat heads, output map."""
    inv_sqrt_dk = 1.0 / math.sqrt(cfg.d_k)
    heads = []
    for i in range(cfg.n_heads):
        q = dc.matmul(x, params[f"attn.h{i}.wq"])
        k = dc.matmul(x, params[f"attn.h{i}.wk"])
        v = dc.matmul(x, params[f"attn.h{i}.wv"])
        scores = dc.scale(dc.matmul(q, dc.transpose(k)), inv_sqrt_dk)
        heads.append(dc.matmul(dc.row_softmax(scores), v))
    return dc.matmul(dc.concat(heads, axis=1), params["attn.w0"])


def attention_maps(x: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> list[np.ndarray]:
    """Per-head attention matrices (softmax rows) for inspection/tests."""
    maps = []
    xt = dc.constant(x)
    for i in range(cfg.n_heads):
        q = dc.matmul(xt, params[f"attn.h{i}.wq"])
        k = dc.matmul(xt, params[f"attn.h{i}.wk"])
        scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(cfg.d_k))
        maps.append(dc.row_softmax(scores).data)
    return maps


def encode_spots(expression: Tensor, coords: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """Expression + positional encodings -> MHSA -> projection; rows unit-norm.

    With attn_residual the attention input is added back to its output
    (transformer-encoder style). Without it, a single softmax mixture of
    rows that share a dominant positive mean collapses all outputs toward
    one convex combination, which is untrainable at this depth.
    """
    x = expression
    if cfg.use_positional:
        sx, sy = positional_encode(coords, params, cfg)
        x = dc.add(dc.add(x, sx), sy)
    if cfg.use_mhsa:
        z = mhsa(x, params, cfg)
        if cfg.attn_residual:
            z = dc.add(x, z)
    else:
        z = x
    return project(z, params, "spot_proj")


def embed_patches(patches: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> np.ndarray:
    """Forward-only patch embeddings as a plain array."""
    node = dc.constant(prepare_patch_input(patches, cfg))
    return project(encode_patch(node, params, cfg), params, "img_proj").data


def embed_spots(expression: np.ndarray, coords: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> np.ndarray:
    """Forward-only spot embeddings as a plain array."""
    return encode_spots(dc.constant(expression), coords, params, cfg).data
