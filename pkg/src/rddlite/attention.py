"""Single- and multi-scale deformable attention and the encoder stack.

Shapes used throughout:

* feature level ``x^l``: ``(H_l, W_l, C)``
* queries ``z``: ``(Q, C)``
* sampling locations: ``(Q, M, L, K, 2)`` in level-pixel ``(x, y)``
* attention weights: ``(Q, M, L, K)``, softmax-normalised over ``(L, K)``

Each head projects the sampled values with its own ``W'_m`` (``value_proj``
columns ``m*Dh:(m+1)*Dh``) and maps the aggregate back with ``W_m``
(``output_proj`` rows of the same block).  Projecting before sampling is
exact because bilinear sampling is linear in the map.
"""
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    concat,
    matmul,
    relu,
    reshape,
    resize_bilinear,
    softmax,
    transpose,
    ms_deform_sample,
)


@dataclass
class DeformAttnParams:
    num_heads: int
    num_points: int
    num_levels: int
    value_proj: Tensor  # (C, M*Dh)
    output_proj: Tensor  # (M*Dh, C)
    offset_weight: Tensor  # (C, M*L*K*2)
    offset_bias: Tensor  # (M*L*K*2,)
    attn_weight: Tensor  # (C, M*L*K)
    attn_bias: Tensor  # (M*L*K,)

    @property
    def channels(self):
        return self.value_proj.shape[0]

    @property
    def head_dim(self):
        return self.value_proj.shape[1] // self.num_heads

    @classmethod
    def init(cls, rng, channels, num_heads, num_points, num_levels, head_dim=None):
        """Xavier projections; zero offsets and zero attention logits."""
        dh = head_dim or max(1, channels // num_heads)
        mlk = num_heads * num_levels * num_points
        t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        from .nn import xavier

        return cls(
            num_heads, num_points, num_levels,
            value_proj=t(xavier(rng, channels, num_heads * dh)),
            output_proj=t(xavier(rng, num_heads * dh, channels)),
            offset_weight=t(np.zeros((channels, mlk * 2))),
            offset_bias=t(np.zeros(mlk * 2)),
            attn_weight=t(np.zeros((channels, mlk))),
            attn_bias=t(np.zeros(mlk)),
        )

    def tensors(self):
        return {
            "value_proj": self.value_proj, "output_proj": self.output_proj,
            "offset_weight": self.offset_weight, "offset_bias": self.offset_bias,
            "attn_weight": self.attn_weight, "attn_bias": self.attn_bias,
        }

    def offsets_and_weights(self, z):
        """Predict ``(Q, M, L, K, 2)`` offsets and normalised ``(Q, M, L, K)`` weights."""
        M, L, K = self.num_heads, self.num_levels, self.num_points
        Q = z.shape[0]
        off = reshape(matmul(z, self.offset_weight) + self.offset_bias, (Q, M, L, K, 2))
        logits = reshape(matmul(z, self.attn_weight) + self.attn_bias, (Q, M, L * K))
        attn = reshape(softmax(logits, 1.0, axis=-1), (Q, M, L, K))
        return off, attn


@dataclass
class FeaturePyramid:
    """Encoder input: levels ordered fine to coarse, each ``(H_l, W_l, C)``."""

    levels: list
    image_size: tuple  # (H, W) of the source image
    pos: list = field(default=None)  # per-level (H_l, W_l, C) embeddings or None

    def __post_init__(self):
        self.levels = [as_tensor(x) for x in self.levels]
        for a, b in zip(self.levels, self.levels[1:]):
            ha, wa = a.shape[:2]
            if b.shape[:2] != (-(-ha // 2), -(-wa // 2)):
                raise ValueError("each level must be ceil-half of the previous one")

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [tuple(x.shape[:2]) for x in self.levels]


def _aggregate(flat_x, shapes, locs, attn, params):
    """Sum_m W_m Sum_{l,k} A_mlqk W'_m x_l(loc_mlqk) for every query.

    ``flat_x`` is (S, C): all levels flattened row-major and concatenated.
    """
    M, dh = params.num_heads, params.head_dim
    S, C = flat_x.shape
    if C != params.channels:
        raise ValueError(f"features have {C} channels, attention expects {params.channels}")
    Q = locs.shape[0]
    v = transpose(reshape(matmul(flat_x, params.value_proj), (S, M, dh)), (1, 0, 2))
    acc = ms_deform_sample(v, shapes, transpose(locs, (1, 0, 2, 3, 4)),
                           transpose(attn, (1, 0, 2, 3)))  # (M, Q, Dh)
    heads = reshape(transpose(acc, (1, 0, 2)), (Q, M * dh))
    return matmul(heads, params.output_proj)


def _as_queries(z, p):
    z, p = as_tensor(z), as_tensor(p)
    single = z.ndim == 1
    if single:
        z = reshape(z, (1, z.shape[0]))
        p = reshape(p, (1, 2))
    return z, p, single


def deform_attn_single(z_q, p_q, x, params):
    """Deformable attention on one map around pixel reference points ``p_q``.

    ``z_q`` is ``(C,)`` or ``(Q, C)``; ``p_q`` is ``(2,)`` or ``(Q, 2)``.
    """
    if params.num_levels != 1:
        raise ValueError("single-scale attention needs params with one level")
    z, p, single = _as_queries(z_q, p_q)
    if z.shape[1] != params.channels:
        raise ValueError("query width does not match attention channels")
    off, attn = params.offsets_and_weights(z)
    Q = z.shape[0]
    locs = reshape(p, (Q, 1, 1, 1, 2)) + off
    x = as_tensor(x)
    out = _aggregate(_flatten_levels([x]), [x.shape[:2]], locs, attn, params)
    return reshape(out, (out.shape[1],)) if single else out


def level_scale_xy(shape):
    """Multipliers mapping normalised coords to a level's pixel grid."""
    H, W = shape
    return np.array([W, H], dtype=np.float64)


def deform_attn_multiscale(z_q, p_hat, pyramid, params):
    """Multi-scale deformable attention at normalised reference points.

    The reference for level ``l`` is ``p_hat * (W_l, H_l) - 0.5``, i.e.
    normalised coordinates address pixel areas and pixel centres sit at
    integer coordinates.
    """
    levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else list(pyramid)
    if len(levels) != params.num_levels:
        raise ValueError(f"pyramid has {len(levels)} levels, params expect {params.num_levels}")
    levels = [as_tensor(x) for x in levels]
    z, p, single = _as_queries(z_q, p_hat)
    out = _multiscale_flat(z, p, _flatten_levels(levels), [x.shape[:2] for x in levels], params)
    return reshape(out, (out.shape[1],)) if single else out


def _multiscale_flat(z, p_hat, flat_x, shapes, params):
    if z.shape[1] != params.channels:
        raise ValueError("query width does not match attention channels")
    Q, L = z.shape[0], len(shapes)
    off, attn = params.offsets_and_weights(z)
    scales = np.stack([level_scale_xy(hw) for hw in shapes])  # (L, 2)
    ref = reshape(as_tensor(p_hat), (Q, 1, 1, 2)) * scales[None, :, None, :] - 0.5
    locs = reshape(ref, (Q, 1, L, 1, 2)) + off
    return _aggregate(flat_x, shapes, locs, attn, params)


def reference_points(shapes):
    """Normalised pixel-centre coordinates of every position, level by level."""
    refs = []
    for H, W in shapes:
        ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
        refs.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    return np.concatenate(refs, axis=0)


def sine_embedding(H, W, C, temperature=10000.0):
    """Fixed 2D sinusoidal embedding, (H, W, C); first half encodes y."""
    half = C // 2
    ys = (np.arange(H) + 0.5) / H * 2 * np.pi
    xs = (np.arange(W) + 0.5) / W * 2 * np.pi

    def enc(pos, n):
        i = np.arange(n)
        freq = temperature ** (2 * (i // 2) / max(n, 1))
        ang = pos[:, None] / freq[None, :]
        return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))

    ey = enc(ys, half)
    ex = enc(xs, C - half)
    return np.concatenate([
        np.broadcast_to(ey[:, None, :], (H, W, half)),
        np.broadcast_to(ex[None, :, :], (H, W, C - half)),
    ], axis=-1)


@dataclass
class EncoderLayer:
    attn: DeformAttnParams
    ffn_w1: Tensor  # (C, hidden)
    ffn_b1: Tensor
    ffn_w2: Tensor  # (hidden, C)
    ffn_b2: Tensor

    @classmethod
    def init(cls, rng, channels, num_heads, num_points, num_levels, hidden=None):
        from .nn import xavier

        hidden = hidden or 2 * channels
        t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        return cls(
            DeformAttnParams.init(rng, channels, num_heads, num_points, num_levels),
            t(xavier(rng, channels, hidden)), t(np.zeros(hidden)),
            t(0.1 * xavier(rng, hidden, channels)), t(np.zeros(channels)),
        )

    def tensors(self):
        d = {"attn." + k: v for k, v in self.attn.tensors().items()}
        d.update({"ffn_w1": self.ffn_w1, "ffn_b1": self.ffn_b1,
                  "ffn_w2": self.ffn_w2, "ffn_b2": self.ffn_b2})
        return d


def _split_levels(flat, shapes):
    out, start = [], 0
    for H, W in shapes:
        out.append(reshape(flat[start:start + H * W], (H, W, flat.shape[1])))
        start += H * W
    return out


def _flatten_levels(levels):
    flat = [reshape(x, (x.shape[0] * x.shape[1], x.shape[2])) for x in levels]
    return flat[0] if len(flat) == 1 else concat(flat, axis=0)


def encoder_forward(pyramid, layers):
    """Run the deformable encoder; every pixel of every level is a query.

    Per layer: ``x += MSDeformAttn(x + pos, x)`` then ``x += FFN(x)``.
    """
    shapes = pyramid.shapes
    if not layers:
        return pyramid
    refs = reference_points(shapes)
    x = _flatten_levels(pyramid.levels)
    pos = None if pyramid.pos is None else _flatten_levels(pyramid.pos)
    for i, layer in enumerate(layers):
        q = x if pos is None else x + pos
        if layer.attn.num_levels != len(shapes):
            raise ValueError("encoder layer level count does not match the pyramid")
        a = _multiscale_flat(q, refs, x, shapes, layer.attn)
        x = x + a
        h = relu(matmul(x, layer.ffn_w1) + layer.ffn_b1)
        x = x + matmul(h, layer.ffn_w2) + layer.ffn_b2
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activation in encoder layer {i}")
    return FeaturePyramid(_split_levels(x, shapes), pyramid.image_size, pyramid.pos)


def fuse_pyramid(pyramid, k=4):
    """Upsample every level to ``(H/k, W/k)`` and sum."""
    H, W = pyramid.image_size
    if H % k or W % k:
        raise ValueError("image extents must be divisible by the patch size")
    th, tw = H // k, W // k
    fused = None
    for x in pyramid.levels:
        up = resize_bilinear(x, th, tw)
        fused = up if fused is None else fused + up
    return fused
