"""Multi-head self-attention branch.

Every function accepts a single image (``J x C`` map) or a batch with any
number of leading axes (``B x J x C``); shapes below omit the leading axes.

Weight orientation is row-vector throughout: pixel features multiply weights
on the right, so the hidden projection ``w1`` (stored ``H x C``) and the head
logits ``w2`` (stored ``K x H``) enter transposed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5
FUSION_MODES = ("saffm", "concat", "sum")


@dataclass(frozen=True)
class BranchConfig:
    K: int = 8
    hidden: int | None = None  # attention MLP width; defaults to C // 4
    fusion: str = "saffm"
    rlm_enabled: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("branch.K must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")

    def hidden_width(self, C: int) -> int:
        return self.hidden if self.hidden else max(C // 4, 1)


def saffm_widths(D: int, K: int) -> tuple[int, int, int]:
    """Widths of the fusion MLP: DK -> DK/4 -> DK/8, keeping the 512K:128K:64K ratio."""
    dk = D * K
    return dk, max(dk // 4, 1), max(dk // 8, 1)


def init_params(cfg: BranchConfig, C: int, D: int, rng: np.random.Generator) -> dict[str, Tensor]:
    K, H = cfg.K, cfg.hidden_width(C)
    dk, d4, d8 = saffm_widths(D, K)

    def gauss(name, shape, fan_in, gain):
        return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), shape), True, name)

    return {
        "w1": gauss("w1", (H, C), C, 2.0),
        "w2": gauss("w2", (K, H), H, 1.0),
        "w3": gauss("w3", (C, D), C, 1.0),
        "b3": Tensor(np.zeros(D), True, "b3"),
        "w4": gauss("w4", (dk, d4), dk, 2.0),
        "w5": gauss("w5", (d4, d8), d4, 2.0),
        "w6": gauss("w6", (d8, K), d8, 1.0),
        "ln_p_gain": Tensor(np.ones(D), True, "ln_p_gain"),
        "ln_p_bias": Tensor(np.zeros(D), True, "ln_p_bias"),
        "ln_z_gain": Tensor(np.ones(D), True, "ln_z_gain"),
        "ln_z_bias": Tensor(np.zeros(D), True, "ln_z_bias"),
    }


def attention_weights(Q: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Pixel-wise softmax over K heads of ``ReLU(Q w1^T) w2^T``; returns ``J x K``."""
    w1, w2 = params["w1"], params["w2"]
    J, C = Q.shape[-2:]
    K = w2.shape[0]
    if K > J:
        raise ConfigError(f"{K} attention heads exceed {J} feature-map pixels")
    if w1.shape[1] != C:
        raise DimensionError(f"attention_weights: Q has {C} channels, w1 is {w1.shape}")
    hidden = T.relu(T.matmul(Q, T.transpose(w1)))
    return T.softmax_rows(T.matmul(hidden, T.transpose(w2)))


def head_embeddings(alpha: Tensor, Q: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``P = (alpha^T Q) w3 + b3``, one D-dim embedding per head (``K x D``)."""
    if alpha.shape[-2] != Q.shape[-2]:
        raise DimensionError(f"head_embeddings: alpha {alpha.shape} vs Q {Q.shape}")
    pooled = T.matmul(T.transpose(alpha), Q)
    return T.add(T.matmul(pooled, params["w3"]), params["b3"])


def frm_transform(P: Tensor) -> Tensor:
    # Regularization happens in the loss terms; the data path is the identity.
    return P


def saffm_fuse(P_perp: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Self-attention fusion of K head embeddings.

    Returns ``(beta, p_star)`` with ``beta`` of shape ``K`` (sums to one) and
    ``p_star = LayerNorm(beta P_perp)`` of shape ``D``. ``w4`` and ``w5`` are
    applied back to back with no nonlinearity between them.
    """
    K, D = P_perp.shape[-2:]
    lead = P_perp.shape[:-2]
    flat = T.reshape(P_perp, lead + (1, K * D))
    h = T.relu(T.matmul(T.matmul(flat, params["w4"]), params["w5"]))
    beta = T.softmax_rows(T.matmul(h, params["w6"]))  # (..., 1, K)
    fused = T.reshape(T.matmul(beta, P_perp), lead + (D,))
    p_star = T.layer_norm(fused, params["ln_p_gain"], params["ln_p_bias"], LN_EPS)
    return T.reshape(beta, lead + (K,)), p_star


def residual_learn(q_star: Tensor, P_perp: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """``Z = LayerNorm(repeat(q*) + P_perp)`` row-wise and ``z = sum_k Z_k``."""
    K, D = P_perp.shape[-2:]
    if q_star.shape[-1] != D:
        raise DimensionError(f"residual_learn: q* has dim {q_star.shape[-1]}, heads have {D}")
    Z = T.layer_norm(T.add(T.repeat_rows(q_star, K), P_perp), params["ln_z_gain"], params["ln_z_bias"], LN_EPS)
    return Z, T.sum(Z, axis=-2)


def fuse_variant(P_perp: Tensor, mode: str, params: dict[str, Tensor]) -> Tensor:
    """Matching feature from the heads: SAFFM output, flat concatenation, or head sum."""
    if mode == "saffm":
        return saffm_fuse(P_perp, params)[1]
    if mode == "concat":
        K, D = P_perp.shape[-2:]
        return T.reshape(P_perp, P_perp.shape[:-2] + (K * D,))
    if mode == "sum":
        return T.sum(P_perp, axis=-2)
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


@dataclass
class BranchOutput:
    alpha: Tensor
    P: Tensor
    P_perp: Tensor
    beta: Tensor | None
    p_star: Tensor
    Z: Tensor | None
    z: Tensor | None


def forward_branch(Q: Tensor, q_star: Tensor, params: dict[str, Tensor], fusion: str = "saffm",
                   rlm_enabled: bool = True) -> BranchOutput:
    alpha = attention_weights(Q, params)
    P = head_embeddings(alpha, Q, params)
    P_perp = frm_transform(P)
    if fusion == "saffm":
        beta, p_star = saffm_fuse(P_perp, params)
    else:
        beta, p_star = None, fuse_variant(P_perp, fusion, params)
    Z = z = None
    if rlm_enabled:
        Z, z = residual_learn(q_star, P_perp, params)
    return BranchOutput(alpha, P, P_perp, beta, p_star, Z, z)
