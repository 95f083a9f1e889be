"""Descriptor branch: strided residual backbone, deformable encoder, fusion.

The backbone produces five levels at 1/4 ... 1/64 of the input.  Each level
is projected to the encoder width, positionally encoded, refined by the
encoder and fused at 1/k into the descriptor map D.  A sigmoid head over D
gives the matchability map M.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dten
from .attention import EncoderLayer, FeaturePyramid, encoder_forward, fuse_pyramid, sine_embedding
from .nn import Params, add_conv, add_resblock, conv, resblock
from .tensor import Tensor, as_tensor, bilinear_sample, l2_normalize, relu, reshape, sigmoid


@dataclass
class DescriptorNetConfig:
    widths: tuple = (16, 16, 32, 32, 32)
    channels: int = 32
    num_layers: int = 4
    num_heads: int = 8
    num_points: int = 8
    patch: int = 4
    seed: int = 0

    def to_dict(self):
        return {"widths": list(self.widths), "channels": self.channels,
                "num_layers": self.num_layers, "num_heads": self.num_heads,
                "num_points": self.num_points, "patch": self.patch, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class DescriptorField:
    D: Tensor  # (H/k, W/k, C)
    M: Tensor  # (H/k, W/k)
    k: int
    image_size: tuple = field(default=None)


class DescriptorNet:
    def __init__(self, params, layers, config):
        self.params = params
        self.layers = layers
        self.config = config

    @classmethod
    def init(cls, config=None):
        config = config or DescriptorNetConfig()
        rng = np.random.default_rng(config.seed)
        p = Params()
        w = config.widths
        C = config.channels
        add_conv(p, rng, "desc.stem", 3, 3, w[0])
        prev = w[0]
        for i, wi in enumerate(w):
            add_conv(p, rng, f"desc.b{i}.down", 3, prev, wi)
            add_resblock(p, rng, f"desc.b{i}.res0", 3, wi)
            add_resblock(p, rng, f"desc.b{i}.res1", 3, wi)
            add_conv(p, rng, f"desc.proj{i}", 1, wi, C)
            prev = wi
        p["desc.level_embed"] = rng.normal(0.0, 0.1, size=(len(w), C))
        add_conv(p, rng, "desc.mhead1", 1, C, C)
        add_conv(p, rng, "desc.mhead2", 1, C, 1, gain=0.5)
        layers = [EncoderLayer.init(rng, C, config.num_heads, config.num_points, len(w))
                  for _ in range(config.num_layers)]
        for i, layer in enumerate(layers):
            for name, t in layer.tensors().items():
                p._t[f"desc.enc{i}.{name}"] = t
                t.name = f"desc.enc{i}.{name}"
        return cls(p, layers, config)

    @classmethod
    def from_arrays(cls, arrays, config):
        net = cls.init(config)
        for name, a in arrays.items():
            if name in net.params:
                net.params[name].data[...] = a
        return net

    def pyramid(self, image):
        p = self.params
        x = relu(conv(p, "desc.stem", image, stride=2))
        levels = []
        for i in range(len(self.config.widths)):
            x = relu(conv(p, f"desc.b{i}.down", x, stride=2))
            x = resblock(p, f"desc.b{i}.res0", x)
            x = resblock(p, f"desc.b{i}.res1", x)
            levels.append(conv(p, f"desc.proj{i}", x))
        C = self.config.channels
        embed = p["desc.level_embed"]
        pos = [embed[i] + sine_embedding(lv.shape[0], lv.shape[1], C) for i, lv in enumerate(levels)]
        return FeaturePyramid(levels, tuple(image.shape[:2]), pos)

    def forward(self, image):
        image = as_tensor(image)
        pyr = encoder_forward(self.pyramid(image), self.layers)
        D = fuse_pyramid(pyr, self.config.patch)
        h = relu(conv(self.params, "desc.mhead1", D))
        M = reshape(sigmoid(conv(self.params, "desc.mhead2", h)), D.shape[:2])
        return DescriptorField(D, M, self.config.patch, tuple(image.shape[:2]))


def describe(image, weights):
    """Descriptor map and matchability map of an (H, W, 3) image."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    H, W = image.shape[:2]
    if H % 64 or W % 64:
        raise ValueError(f"image extents {H}x{W} must be divisible by 64")
    return weights.forward(image)


def image_to_patch_coords(xy, k):
    """Pixel coordinates to D coordinates, consistent with a bilinear k-fold upsample."""
    return (xy + 0.5) * (1.0 / k) - 0.5


def sample_descriptors(field, kps, image_extents=None):
    """Unit-norm descriptors at pixel keypoints, (N, C).

    Equivalent to sampling the k-fold bilinear upsampling of D at each
    keypoint, without materialising the upsampled map.
    """
    if isinstance(kps, (list, tuple)) and kps and hasattr(kps[0], "score"):
        kps = np.array([[k.x, k.y] for k in kps], dtype=np.float64)
    xy = as_tensor(kps)
    if xy.size == 0:
        return Tensor(np.zeros((0, field.D.shape[2])))
    uv = image_to_patch_coords(reshape(xy, (-1, 2)), field.k)
    return l2_normalize(bilinear_sample(field.D, uv), axis=-1)


def save_field(directory, field):
    """Write D and M as DTEN1 files plus a JSON manifest with k and C."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dten.write(d / "D.dten", field.D.data)
    dten.write(d / "M.dten", field.M.data)
    meta = {"k": field.k, "C": int(field.D.shape[2]), "image_size": list(field.image_size or []),
            "files": {"D": "D.dten", "M": "M.dten"}}
    (d / "field.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_field(directory):
    d = Path(directory)
    meta = json.loads((d / "field.json").read_text())
    D = dten.read(d / meta["files"]["D"])
    M = dten.read(d / meta["files"]["M"])
    if D.shape[2] != meta["C"] or D.shape[:2] != M.shape:
        raise ValueError("field manifest does not match its tensors")
    size = tuple(meta["image_size"]) or None
    return DescriptorField(Tensor(D), Tensor(M), meta["k"], size)
