"""The 3D-ConvSST network.

Pipeline: a Conv3D + HetConv stem turns an (N, S, S, B) patch batch into
(N, embed_dim, S, S) feature maps, which are flattened into S^2 tokens,
given trainable positional embeddings, and pushed through `depth`
pre-norm transformer encoders. Between consecutive encoders a depth-2 3D
convolution fuses the previous and current token grids. Classification
pools the final tokens (global average by default, or a learnable class
token) into a single linear layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, TensorError


@dataclass
class ModelConfig:
    bands: int
    classes: int
    patch_size: int = 11
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_dim: int | None = None  # resolved to 4 * embed_dim
    dropout: float = 0.1
    k_spec: int = 9
    stem_planes: int = 8
    hetconv_groups: int = 8
    use_cgrm: bool = True
    head: str = "gap"  # "gap" | "cls"
    hetconv_bn_after_sum: bool = False

    def __post_init__(self):
        if self.mlp_dim is None:
            self.mlp_dim = 4 * self.embed_dim
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise TensorError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.depth < 1:
            raise TensorError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.heads:
            raise TensorError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.k_spec > self.bands:
            raise TensorError(f"spectral kernel {self.k_spec} exceeds bands {self.bands}")
        if self.embed_dim % self.hetconv_groups:
            raise TensorError(f"embed_dim {self.embed_dim} not divisible by "
                              f"hetconv groups {self.hetconv_groups}")
        if self.stem_channels % self.hetconv_groups:
            raise TensorError(f"stem channels {self.stem_channels} not divisible by "
                              f"hetconv groups {self.hetconv_groups}")
        if not 0.0 <= self.dropout < 1.0:
            raise TensorError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.head not in ("gap", "cls"):
            raise TensorError(f"head must be 'gap' or 'cls', got {self.head!r}")

    @property
    def spectral_out(self) -> int:
        return self.bands - self.k_spec + 1

    @property
    def stem_channels(self) -> int:
        return self.stem_planes * self.spectral_out

    @property
    def grid_tokens(self) -> int:
        return self.patch_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.grid_tokens + (1 if self.head == "cls" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)


class ModelWeights:
    """Named parameters (including frozen batch-norm running stats)."""

    def __init__(self, params: dict[str, Parameter]):
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_items(self):
        return [(n, p) for n, p in self.params.items() if p.trainable]


def count_parameters(weights: ModelWeights) -> int:
    """Exact count of trainable scalars."""
    return sum(p.size for _, p in weights.trainable_items())


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def _bn_params(rng, channels, dtype, out, prefix):
    out[f"{prefix}.gamma"] = Parameter(np.ones(channels, dtype=dtype))
    out[f"{prefix}.beta"] = Parameter(np.zeros(channels, dtype=dtype))
    out[f"{prefix}.running_mean"] = Parameter(np.zeros(channels, dtype=dtype), trainable=False)
    out[f"{prefix}.running_var"] = Parameter(np.ones(channels, dtype=dtype), trainable=False)


def init_weights(config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32) -> ModelWeights:
    """Build all parameters: Kaiming-uniform conv/linear weights, N(0, 0.02)
    embeddings, unit/zero norm affines. Deterministic for a given rng state."""
    d = config.embed_dim
    p: dict[str, Parameter] = {}

    ks = config.k_spec
    p["stem.conv3d.weight"] = _kaiming_uniform(
        rng, (config.stem_planes, 1, 3, 3, ks), 3 * 3 * ks, dtype)
    _bn_params(rng, config.stem_planes, dtype, p, "stem.bn3d")
    cmid = config.stem_channels
    cg = cmid // config.hetconv_groups
    p["stem.het_gw.weight"] = _kaiming_uniform(rng, (d, cg, 3, 3), cg * 9, dtype)
    p["stem.het_pw.weight"] = _kaiming_uniform(rng, (d, cmid, 1, 1), cmid, dtype)
    if config.hetconv_bn_after_sum:
        _bn_params(rng, d, dtype, p, "stem.het_bn")
    else:
        _bn_params(rng, d, dtype, p, "stem.het_gw_bn")
        _bn_params(rng, d, dtype, p, "stem.het_pw_bn")

    p["tokenize.pos_embed"] = Parameter(
        rng.normal(0.0, 0.02, size=(config.num_tokens, d)).astype(dtype))
    if config.head == "cls":
        p["tokenize.cls_token"] = Parameter(rng.normal(0.0, 0.02, size=(1, d)).astype(dtype))

    for layer in range(1, config.depth + 1):
        pre = f"enc{layer}"
        p[f"{pre}.ln1.gamma"] = Parameter(np.ones(d, dtype=dtype))
        p[f"{pre}.ln1.beta"] = Parameter(np.zeros(d, dtype=dtype))
        for proj in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{proj}"] = _kaiming_uniform(rng, (d, d), d, dtype)
        p[f"{pre}.ln2.gamma"] = Parameter(np.ones(d, dtype=dtype))
        p[f"{pre}.ln2.beta"] = Parameter(np.zeros(d, dtype=dtype))
        p[f"{pre}.mlp.w1"] = _kaiming_uniform(rng, (d, config.mlp_dim), d, dtype)
        p[f"{pre}.mlp.w2"] = _kaiming_uniform(rng, (config.mlp_dim, d), config.mlp_dim, dtype)

    for layer in range(1, config.depth):
        p[f"cgrm{layer}.weight"] = _kaiming_uniform(rng, (1, 1, 2, 3, 3), 2 * 9, dtype)

    p["final_ln.gamma"] = Parameter(np.ones(d, dtype=dtype))
    p["final_ln.beta"] = Parameter(np.zeros(d, dtype=dtype))
    p["head.weight"] = _kaiming_uniform(rng, (d, config.classes), d, dtype)
    p["head.bias"] = Parameter(np.zeros(config.classes, dtype=dtype))
    return ModelWeights(p)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _bn(x, weights, prefix, training):
    return ops.batchnorm(
        x,
        weights[f"{prefix}.gamma"], weights[f"{prefix}.beta"],
        weights[f"{prefix}.running_mean"], weights[f"{prefix}.running_var"],
        training=training)


def stem_forward(x, weights: ModelWeights, config: ModelConfig,
                 training: bool = False, trace: dict | None = None) -> Tensor:
    """(N, S, S, B) patches -> (N, embed_dim, S, S) feature maps."""
    x = ops.as_tensor(x)
    n, s, b = x.shape[0], config.patch_size, config.bands
    if x.shape[1:] != (s, s, b):
        raise TensorError(f"expected patches of shape (N, {s}, {s}, {b}), got {x.shape}")
    feat = ops.conv3d(ops.reshape(x, (n, 1, s, s, b)),
                      weights["stem.conv3d.weight"], padding=(1, 1, 0))
    if trace is not None:
        trace["stem.conv3d"] = feat
    feat = ops.relu(_bn(feat, weights, "stem.bn3d", training))
    # (N, P, S, S, B') -> (N, P * B', S, S): spectral slices stay grouped by plane
    feat = ops.transpose(feat, (0, 1, 4, 2, 3))
    feat = ops.reshape(feat, (n, config.stem_channels, s, s))

    gw = ops.conv2d(feat, weights["stem.het_gw.weight"],
                    groups=config.hetconv_groups, padding=1)
    pw = ops.conv2d(feat, weights["stem.het_pw.weight"], groups=1, padding=0)
    if config.hetconv_bn_after_sum:
        out = _bn(ops.add(gw, pw), weights, "stem.het_bn", training)
    else:
        out = ops.add(_bn(gw, weights, "stem.het_gw_bn", training),
                      _bn(pw, weights, "stem.het_pw_bn", training))
    out = ops.relu(out)
    if trace is not None:
        trace["stem.out"] = out
    return out


def tokenize(features, weights: ModelWeights, config: ModelConfig,
             training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """(N, embed_dim, S, S) maps -> (N, n, embed_dim) position-embedded tokens."""
    features = ops.as_tensor(features)
    n, d, s = features.shape[0], config.embed_dim, config.patch_size
    tokens = ops.transpose(ops.reshape(features, (n, d, s * s)), (0, 2, 1))
    if config.head == "cls":
        cls = ops.broadcast_to(ops.reshape(weights["tokenize.cls_token"], (1, 1, d)), (n, 1, d))
        tokens = ops.concat([cls, tokens], axis=1)
    tokens = ops.add(tokens, weights["tokenize.pos_embed"])
    return ops.dropout(tokens, config.dropout, training, rng)


def attention(q, k, v, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes (..., n, d_h)."""
    q, k, v = ops.as_tensor(q), ops.as_tensor(k), ops.as_tensor(v)
    dh = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, perm)), 1.0 / math.sqrt(dh))
    w = ops.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(w)
    return ops.matmul(w, v)


def msa(tokens, wq, wk, wv, wo, heads: int, weights_out: list | None = None) -> Tensor:
    """Multi-head self-attention: project, split heads, attend, concat, project."""
    tokens = ops.as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = ops.reshape(tokens, (1,) + tokens.shape)
    n, t, d = tokens.shape
    if d % heads:
        raise TensorError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(m):
        proj = ops.matmul(tokens, m)
        return ops.transpose(ops.reshape(proj, (n, t, heads, dh)), (0, 2, 1, 3))

    fused = attention(split(wq), split(wk), split(wv), weights_out)
    fused = ops.reshape(ops.transpose(fused, (0, 2, 1, 3)), (n, t, d))
    out = ops.matmul(fused, wo)
    return ops.reshape(out, (t, d)) if squeeze else out


def encoder_forward(z, weights: ModelWeights, layer: int, config: ModelConfig,
                    training: bool = False, rng: np.random.Generator | None = None,
                    trace: dict | None = None) -> Tensor:
    """One pre-norm encoder: residual MSA block, then residual MLP block."""
    pre = f"enc{layer}"
    rate = config.dropout
    weights_out = [] if trace is not None else None
    h = ops.layernorm(z, weights[f"{pre}.ln1.gamma"], weights[f"{pre}.ln1.beta"])
    h = msa(h, weights[f"{pre}.attn.wq"], weights[f"{pre}.attn.wk"],
            weights[f"{pre}.attn.wv"], weights[f"{pre}.attn.wo"],
            config.heads, weights_out)
    if trace is not None:
        trace[f"{pre}.attn"] = weights_out[0]
    z = ops.add(z, h)
    h = ops.layernorm(z, weights[f"{pre}.ln2.gamma"], weights[f"{pre}.ln2.beta"])
    h = ops.dropout(ops.gelu(ops.matmul(h, weights[f"{pre}.mlp.w1"])), rate, training, rng)
    h = ops.dropout(ops.matmul(h, weights[f"{pre}.mlp.w2"]), rate, training, rng)
    return ops.add(z, h)


def cgrm(prev, curr, weight, patch_size: int) -> Tensor:
    """Fuse two token grids with a shared depth-2 3D convolution.

    Both inputs are (N, S^2, d) token sets. They are unflattened to the
    S x S grid, stacked on a new depth axis, convolved per feature
    channel with a (2, 3, 3) kernel at padding (0, 1, 1), and flattened
    back. No bias, no activation.
    """
    prev, curr = ops.as_tensor(prev), ops.as_tensor(curr)
    if prev.shape != curr.shape:
        raise TensorError(f"token sets differ: {prev.shape} vs {curr.shape}")
    n, n_tok, d = prev.shape
    s = patch_size
    if s * s != n_tok:
        raise TensorError(f"{n_tok} tokens do not form an {s}x{s} grid")

    def to_maps(t):
        grid = ops.transpose(ops.reshape(t, (n, s, s, d)), (0, 3, 1, 2))
        return ops.reshape(grid, (n * d, 1, 1, s, s))

    stacked = ops.concat([to_maps(prev), to_maps(curr)], axis=2)  # (N*d, 1, 2, S, S)
    fused = ops.conv3d(stacked, weight, padding=(0, 1, 1))        # (N*d, 1, 1, S, S)
    fused = ops.transpose(ops.reshape(fused, (n, d, s, s)), (0, 2, 3, 1))
    return ops.reshape(fused, (n, n_tok, d))


def _fuse(prev, curr, weight, config: ModelConfig) -> Tensor:
    """Apply CGRM to the grid tokens; a class token bypasses fusion."""
    if config.head == "cls":
        n0 = config.grid_tokens
        cls_tok = ops.narrow(curr, 1, 0, 1)
        fused = cgrm(ops.narrow(prev, 1, 1, n0), ops.narrow(curr, 1, 1, n0),
                     weight, config.patch_size)
        return ops.concat([cls_tok, fused], axis=1)
    return cgrm(prev, curr, weight, config.patch_size)


def model_forward(batch, weights: ModelWeights, config: ModelConfig,
                  training: bool = False, rng: np.random.Generator | None = None,
                  trace: dict | None = None) -> Tensor:
    """Full network: (N, S, S, B) patches -> (N, classes) logits."""
    feats = stem_forward(batch, weights, config, training, trace)
    z = tokenize(feats, weights, config, training, rng)
    if trace is not None:
        trace["tokens"] = z
    for layer in range(1, config.depth + 1):
        z_in = z
        z = encoder_forward(z, weights, layer, config, training, rng, trace)
        if config.use_cgrm and layer < config.depth:
            z = _fuse(z_in, z, weights[f"cgrm{layer}.weight"], config)
    z = ops.layernorm(z, weights["final_ln.gamma"], weights["final_ln.beta"])
    if config.head == "cls":
        pooled = ops.reshape(ops.narrow(z, 1, 0, 1), (z.shape[0], config.embed_dim))
    else:
        pooled = ops.reduce_mean(z, axis=1)
    logits = ops.add(ops.matmul(pooled, weights["head.weight"]), weights["head.bias"])
    if trace is not None:
        trace["logits"] = logits
    return logits
