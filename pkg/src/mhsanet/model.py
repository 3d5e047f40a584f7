"""The assembled network: feature provider, global head, attention branch, classifiers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import backbone, branch
from . import tensor as T
from .backbone import BackboneConfig
from .branch import BranchConfig
from .data_io import pack_text, unpack_text
from .errors import ConfigError
from .losses import BatchFeatures
from .tensor import Tensor

VARIANTS = ("full", "local", "dagger", "global")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branch: BranchConfig = field(default_factory=BranchConfig)
    branch_enabled: bool = True
    n_classes: int = 20

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 training identities")
        if self.branch_enabled and self.branch.K > self.backbone.J:
            raise ConfigError(f"{self.branch.K} heads exceed {self.backbone.J} feature-map pixels")

    @property
    def p_dim(self) -> int:
        D = self.backbone.D
        return D * self.branch.K if self.branch.fusion == "concat" else D

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(backbone=BackboneConfig(**d["backbone"]), branch=BranchConfig(**d["branch"]),
                   branch_enabled=d["branch_enabled"], n_classes=d["n_classes"])


@dataclass
class ForwardResult:
    q_star: Tensor | None
    out: branch.BranchOutput | None


class MHSAModel:
    """Parameters, running statistics and the forward pass of the network."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        bcfg = config.backbone
        self.params: dict[str, Tensor] = backbone.init_params(bcfg, rng)
        self.buffers = backbone.init_buffers(bcfg)
        if config.branch_enabled:
            self.params.update(branch.init_params(config.branch, bcfg.C, bcfg.D, rng))
        for stream, dim in self._streams():
            self.params[f"cls_{stream}_w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / dim), (dim, config.n_classes)),
                                                    True, f"cls_{stream}_w")
            self.params[f"cls_{stream}_b"] = Tensor(np.zeros(config.n_classes), True, f"cls_{stream}_b")

    def _streams(self):
        yield "q", self.config.backbone.D
        if self.config.branch_enabled:
            yield "p", self.config.p_dim
            if self.config.branch.rlm_enabled:
                yield "z", self.config.backbone.D

    @property
    def classifiers(self) -> dict[str, tuple[Tensor, Tensor]]:
        return {s: (self.params[f"cls_{s}_w"], self.params[f"cls_{s}_b"]) for s, _ in self._streams()}

    def feature_map(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.config.backbone.provider == "tiny_encoder":
            return backbone.tiny_encode(x, self.params)
        return x

    def forward(self, x, training: bool = False, need_global: bool = True, rlm: bool | None = None) -> ForwardResult:
        cfg = self.config
        Q = self.feature_map(x)
        q_star = None
        if need_global:
            q = backbone.global_pool(Q)
            q_star = backbone.project_global(q, self.params, self.buffers, training=training)
        out = None
        if cfg.branch_enabled:
            rlm_on = cfg.branch.rlm_enabled if rlm is None else rlm
            out = branch.forward_branch(Q, q_star, self.params, cfg.branch.fusion, rlm_on and q_star is not None)
        return ForwardResult(q_star, out)

    def batch_features(self, x, labels, training: bool = True) -> BatchFeatures:
        res = self.forward(x, training=training)
        feats = BatchFeatures(labels=np.asarray(labels), q_star=res.q_star, classifiers=self.classifiers)
        if res.out is not None:
            feats.p_star, feats.z, feats.P, feats.alpha = res.out.p_star, res.out.z, res.out.P_perp, res.out.alpha
        return feats

    def embed(self, x, variant: str = "full", fusion: str | None = None) -> np.ndarray:
        """Matching features for a batch of inputs (eval mode, no tape)."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant != "global" and not self.config.branch_enabled:
            raise ConfigError(f"variant {variant!r} needs the attention branch; this model has none")
        with T.no_tape():
            res = self.forward(x, training=False, need_global=variant != "local", rlm=False)
            if variant == "global":
                return res.q_star.data.copy()
            p = res.out.p_star
            if fusion is not None and fusion != self.config.branch.fusion:
                p = branch.fuse_variant(res.out.P_perp, fusion, self.params)
            if variant == "local":
                return p.data.copy()
            return np.concatenate([p.data, res.q_star.data], axis=-1)

    def attention(self, x) -> np.ndarray:
        with T.no_tape():
            Q = self.feature_map(x)
            return branch.attention_weights(Q, self.params).data.copy()

    def fusion_weights(self, x) -> np.ndarray | None:
        if self.config.branch.fusion != "saffm":
            return None
        with T.no_tape():
            Q = self.feature_map(x)
            alpha = branch.attention_weights(Q, self.params)
            beta, _ = branch.saffm_fuse(branch.head_embeddings(alpha, Q, self.params), self.params)
            return beta.data.copy()

    # ------------------------------------------------------------ persistence

    def state(self) -> dict[str, np.ndarray]:
        entries = {"meta/config_json": pack_text(json.dumps(self.config.to_dict(), sort_keys=True))}
        entries.update({f"param/{k}": v.data for k, v in sorted(self.params.items())})
        entries.update({f"buffer/{k}": v for k, v in sorted(self.buffers.items())})
        return entries

    @classmethod
    def from_state(cls, entries: dict[str, np.ndarray]) -> "MHSAModel":
        try:
            cfg = ModelConfig.from_dict(json.loads(unpack_text(entries["meta/config_json"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"checkpoint has no usable model config: {exc}") from None
        model = cls(cfg)
        for k, p in model.params.items():
            arr = entries.get(f"param/{k}")
            if arr is None or arr.shape != p.shape:
                raise ConfigError(f"checkpoint parameter {k} missing or has shape "
                                  f"{None if arr is None else arr.shape}, expected {p.shape}")
            p.data = np.array(arr, dtype=np.float64)
        for k in model.buffers:
            model.buffers[k] = np.array(entries[f"buffer/{k}"], dtype=np.float64)
        return model

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}
