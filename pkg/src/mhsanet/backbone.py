"""Global feature branch: feature-map providers, pooling and the q -> q* head.

Two providers stand in for the ResNet-50 stage-4 output. ``synthetic`` passes
a precomputed ``J x C`` map through unchanged; ``tiny_encoder`` runs two
stride-2 3x3 convolutions over a small image.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DOWNSAMPLE = 4
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    provider: str = "synthetic"
    Hf: int = 6
    Wf: int = 4
    C: int = 64
    D: int = 32
    train_gfb_ce: bool = True
    image_channels: int = 3

    def __post_init__(self):
        if self.provider not in ("synthetic", "tiny_encoder"):
            raise ConfigError(f"unknown backbone provider {self.provider!r}")
        for name in ("Hf", "Wf", "C", "D", "image_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")

    @property
    def J(self) -> int:
        return self.Hf * self.Wf


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {
        "gfb_w": Tensor(rng.normal(0.0, np.sqrt(1.0 / cfg.C), (cfg.C, cfg.D)), True, "gfb_w"),
        "gfb_bn_gain": Tensor(np.ones(cfg.D), True, "gfb_bn_gain"),
        "gfb_bn_bias": Tensor(np.zeros(cfg.D), True, "gfb_bn_bias"),
    }
    if cfg.provider == "tiny_encoder":
        hidden = max(cfg.C // 2, 1)
        fan1, fan2 = 9 * cfg.image_channels, 9 * hidden
        p["enc_w1"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan1), (fan1, hidden)), True, "enc_w1")
        p["enc_b1"] = Tensor(np.zeros(hidden), True, "enc_b1")
        p["enc_w2"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan2), (fan2, cfg.C)), True, "enc_w2")
        p["enc_b2"] = Tensor(np.zeros(cfg.C), True, "enc_b2")
    return p


def init_buffers(cfg: BackboneConfig) -> dict[str, np.ndarray]:
    return {"gfb_bn_mean": np.zeros(cfg.D), "gfb_bn_var": np.ones(cfg.D)}


def global_pool(Q: Tensor) -> Tensor:
    """Average over the pixel axis of a ``(..., J, C)`` map."""
    return T.mean(Q, axis=-2)


def project_global(q: Tensor, params: dict[str, Tensor], buffers: dict[str, np.ndarray] | None = None,
                   training: bool = True) -> Tensor:
    """Linear map, batch normalization and ReLU from ``B x C`` pooled to ``B x D``.

    In training mode the batch statistics are used and, when ``buffers`` is
    given, folded into the running averages. In eval mode the running
    averages are applied as a fixed affine map.
    """
    w = params["gfb_w"]
    if q.shape[-1] != w.shape[0]:
        raise DimensionError(f"project_global: q has {q.shape[-1]} channels, weight expects {w.shape[0]}")
    squeeze = q.ndim == 1
    if squeeze:
        q = T.reshape(q, (1, -1))
    h = T.matmul(q, w)
    gain, bias = params["gfb_bn_gain"], params["gfb_bn_bias"]
    if training:
        out = T.batch_norm(h, gain, bias, BN_EPS)
        if buffers is not None:
            n = h.shape[0]
            mu = h.data.mean(axis=0)
            var = h.data.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mu)
            buffers["gfb_bn_mean"] = (1 - BN_MOMENTUM) * buffers["gfb_bn_mean"] + BN_MOMENTUM * mu
            buffers["gfb_bn_var"] = (1 - BN_MOMENTUM) * buffers["gfb_bn_var"] + BN_MOMENTUM * var
    else:
        inv = 1.0 / np.sqrt(buffers["gfb_bn_var"] + BN_EPS)
        out = T.add(T.mul(T.sub(h, buffers["gfb_bn_mean"]), T.mul(gain, inv)), bias)
    out = T.relu(out)
    return T.reshape(out, (-1,)) if squeeze else out


@lru_cache(maxsize=None)
def conv_selection(H: int, W: int) -> np.ndarray:
    """0/1 matrix gathering the 3x3, stride-2, zero-padded patches of an ``H x W`` grid.

    Row ``(o * 9 + t)`` picks the input pixel under tap ``t`` of output
    position ``o``; taps falling in the padding are all-zero rows.
    """
    Ho, Wo = H // 2, W // 2
    S = np.zeros((Ho * Wo * 9, H * W))
    for oy in range(Ho):
        for ox in range(Wo):
            o = oy * Wo + ox
            for t, (dy, dx) in enumerate((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)):
                y, x = 2 * oy + dy, 2 * ox + dx
                if 0 <= y < H and 0 <= x < W:
                    S[o * 9 + t, y * W + x] = 1.0
    S.setflags(write=False)
    return S


def _conv_stage(x: Tensor, H: int, W: int, w: Tensor, b: Tensor) -> Tensor:
    S = Tensor(conv_selection(H, W))
    patches = T.matmul(S, x)  # (B, Ho*Wo*9, Cin)
    cin = x.shape[-1]
    lead = x.shape[:-2]
    cols = T.reshape(patches, lead + ((H // 2) * (W // 2), 9 * cin))
    return T.relu(T.add(T.matmul(cols, w), b))


def tiny_encode(image: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Map ``(..., Hi, Wi, Ci)`` images to ``(..., (Hi/4)*(Wi/4), C)`` feature maps."""
    if image.ndim < 3:
        raise DimensionError(f"tiny_encode expects (..., Hi, Wi, Ci), got {image.shape}")
    Hi, Wi, Ci = image.shape[-3:]
    if Hi % DOWNSAMPLE or Wi % DOWNSAMPLE:
        raise ConfigError(f"image size {Hi}x{Wi} is not divisible by {DOWNSAMPLE}")
    if params["enc_w1"].shape[0] != 9 * Ci:
        raise DimensionError(f"tiny_encode: {Ci} image channels, encoder expects {params['enc_w1'].shape[0] // 9}")
    lead = image.shape[:-3]
    x = T.reshape(image, lead + (Hi * Wi, Ci))
    x = _conv_stage(x, Hi, Wi, params["enc_w1"], params["enc_b1"])
    return _conv_stage(x, Hi // 2, Wi // 2, params["enc_w2"], params["enc_b2"])


def synthetic_features(sample) -> np.ndarray:
    """Identity provider: the sample already carries its ``J x C`` map."""
    return sample.feature_map
