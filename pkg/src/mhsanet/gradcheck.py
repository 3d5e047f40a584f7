"""Finite-difference verification of every differentiable op and of the full objective."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone, branch, losses
from . import tensor as T
from .backbone import BackboneConfig
from .branch import BranchConfig
from .tensor import Tensor

STEP = 1e-5
THRESHOLD = 1e-4


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, with the denominator floored at 1e-8."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_function(name: str, fn: Callable[[dict[str, Tensor]], Tensor], inputs: dict[str, np.ndarray],
                   step: float = STEP) -> CheckResult:
    """Compare tape gradients of scalar ``fn`` with central differences on every input entry."""
    leaves = {k: Tensor(v.copy(), True, k) for k, v in inputs.items()}
    with T.Tape() as tape:
        out = fn(leaves)
    T.backward(out, tape, params=leaves.values())
    worst, count = 0.0, 0
    for key, leaf in leaves.items():
        base = inputs[key]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.reshape(-1)[i] += sign * step
                probe = {k: Tensor(bumped if k == key else v) for k, v in inputs.items()}
                with T.no_tape():
                    vals.append(float(fn(probe).data))
            flat[i] = (vals[0] - vals[1]) / (2 * step)
        worst = max(worst, relative_error(leaf.grad, numeric))
        count += base.size
    return CheckResult(name, worst, count)


def _proj(out: Tensor, rng: np.random.Generator) -> Tensor:
    # a random linear read-out keeps gradients informative (sum(softmax) would be flat)
    return T.sum(T.mul(out, rng.normal(size=out.shape)))


def _away(rng, shape, gap=0.1):
    # values bounded away from 0, so ReLU-type kinks stay out of the difference stencil
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x) + 0.0


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    r = rng.normal
    R = lambda out: _proj(out, np.random.default_rng(17))  # noqa: E731
    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    labels = np.array([0, 0, 1, 1, 2, 2])
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    return [
        ("add", lambda t: R(T.add(t["a"], t["b"])), {"a": r(size=(3, 4)), "b": r(size=4)}),
        ("sub", lambda t: R(T.sub(t["a"], t["b"])), {"a": r(size=(3, 4)), "b": r(size=(3, 1))}),
        ("mul", lambda t: R(T.mul(t["a"], t["b"])), {"a": r(size=(3, 4)), "b": r(size=(3, 4))}),
        ("neg", lambda t: R(T.neg(t["a"])), {"a": r(size=(2, 3))}),
        ("scale", lambda t: R(T.scale(t["a"], -2.5)), {"a": r(size=(2, 3))}),
        ("square", lambda t: R(T.square(t["a"])), {"a": r(size=(2, 3))}),
        ("sqrt", lambda t: R(T.sqrt(t["a"])), {"a": pos((2, 3))}),
        ("relu", lambda t: R(T.relu(t["a"])), {"a": _away(rng, (3, 4))}),
        ("minimum_const", lambda t: R(T.minimum_const(t["a"], 0.05)), {"a": 0.05 + _away(rng, (3, 4))}),
        ("matmul", lambda t: R(T.matmul(t["a"], t["b"])), {"a": r(size=(3, 4)), "b": r(size=(4, 2))}),
        ("matmul_batched", lambda t: R(T.matmul(t["a"], t["b"])), {"a": r(size=(2, 3, 4)), "b": r(size=(4, 2))}),
        ("transpose", lambda t: R(T.transpose(t["a"])), {"a": r(size=(2, 3, 4))}),
        ("permute", lambda t: R(T.permute(t["a"], (2, 0, 1))), {"a": r(size=(2, 3, 4))}),
        ("reshape", lambda t: R(T.reshape(t["a"], (4, 6))), {"a": r(size=(2, 3, 4))}),
        ("repeat_rows", lambda t: R(T.repeat_rows(t["a"], 3)), {"a": r(size=(2, 4))}),
        ("concat", lambda t: R(T.concat([t["a"], t["b"]], axis=-1)), {"a": r(size=(3, 2)), "b": r(size=(3, 4))}),
        ("sum", lambda t: R(T.sum(t["a"], axis=1)), {"a": r(size=(3, 4, 2))}),
        ("mean", lambda t: R(T.mean(t["a"], axis=(0, 2))), {"a": r(size=(3, 4, 2))}),
        ("masked_max", lambda t: R(T.masked_max(t["a"], mask, axis=1)), {"a": r(size=(4, 5))}),
        ("masked_min", lambda t: R(T.masked_min(t["a"], mask, axis=1)), {"a": r(size=(4, 5))}),
        ("frobenius_norm", lambda t: R(T.frobenius_norm(t["a"])), {"a": r(size=(2, 3, 3))}),
        ("softmax_rows", lambda t: R(T.softmax_rows(t["a"])), {"a": r(size=(5, 3))}),
        ("log_softmax", lambda t: R(T.log_softmax(t["a"])), {"a": r(size=(5, 3))}),
        ("layer_norm", lambda t: R(T.layer_norm(t["x"], t["g"], t["b"], 1e-5)),
         {"x": r(size=(3, 5)), "g": r(size=5), "b": r(size=5)}),
        ("batch_norm", lambda t: R(T.batch_norm(t["x"], t["g"], t["b"], 1e-5)),
         {"x": r(size=(6, 4)), "g": r(size=4), "b": r(size=4)}),
        ("l2_normalize_rows", lambda t: R(T.l2_normalize_rows(t["a"])), {"a": r(size=(4, 3))}),
        ("pairwise_sq_dist", lambda t: R(T.pairwise_sq_dist(t["a"], t["b"])),
         {"a": r(size=(4, 3)), "b": r(size=(5, 3))}),
        ("ce_loss", lambda t: losses.ce_loss(t["f"], labels, (t["w"], t["b"])),
         {"f": r(size=(6, 4)), "w": r(size=(4, 3)), "b": r(size=3)}),
        ("hard_triplet", lambda t: losses.hard_triplet(t["f"], labels, 3.0), {"f": r(size=(6, 4))}),
        ("ihtl", lambda t: losses.ihtl(t["P"], labels, 3.0), {"P": r(size=(6, 2, 3))}),
        ("fdrt", lambda t: losses.fdrt(t["P"]), {"P": r(size=(3, 4))}),
        ("acm_term", lambda t: losses.acm_term(T.softmax_rows(t["a"]), 0.2), {"a": r(size=(6, 3))}),
    ]


def _module_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    C, D, K, J = 8, 4, 2, 4
    bcfg = BranchConfig(K=K)
    bp = {k: v.data for k, v in branch.init_params(bcfg, C, D, rng).items()}
    bp["b3"] = rng.normal(0, 0.1, D)
    R = lambda out: _proj(out, np.random.default_rng(23))  # noqa: E731
    Q = rng.normal(size=(J, C))
    enc_cfg = BackboneConfig(provider="tiny_encoder", Hf=1, Wf=1, C=4, D=3, image_channels=2)
    ep = {k: v.data for k, v in backbone.init_params(enc_cfg, rng).items()}
    enc = {k: ep[k] for k in ("enc_w1", "enc_b1", "enc_w2", "enc_b2")}
    return [
        ("attention_weights", lambda t: R(branch.attention_weights(t["Q"], t)),
         {"Q": Q, "w1": bp["w1"], "w2": bp["w2"]}),
        ("head_embeddings", lambda t: R(branch.head_embeddings(T.softmax_rows(t["a"]), t["Q"], t)),
         {"a": rng.normal(size=(J, K)), "Q": Q, "w3": bp["w3"], "b3": bp["b3"]}),
        ("saffm_fuse", lambda t: R(T.concat([branch.saffm_fuse(t["P"], t)[1], branch.saffm_fuse(t["P"], t)[0]])),
         {"P": rng.normal(size=(K, D)), **{k: bp[k] for k in ("w4", "w5", "w6", "ln_p_gain", "ln_p_bias")}}),
        ("residual_learn", lambda t: R(branch.residual_learn(t["q"], t["P"], t)[1]),
         {"q": rng.normal(size=D), "P": rng.normal(size=(K, D)), "ln_z_gain": bp["ln_z_gain"],
          "ln_z_bias": bp["ln_z_bias"]}),
        ("project_global", lambda t: R(backbone.project_global(t["q"], t, None, training=True)),
         {"q": rng.normal(size=(5, C)), "gfb_w": rng.normal(size=(C, D)), "gfb_bn_gain": 1 + rng.random(D),
          "gfb_bn_bias": 1.0 + rng.random(D)}),
        ("tiny_encode", lambda t: R(backbone.tiny_encode(t["img"], t)),
         {"img": rng.normal(size=(4, 4, 2)), **enc}),
    ]


def _end_to_end_case(rng: np.random.Generator, weights: losses.LossWeights | None = None):
    """Full objective on a tiny batch (4 images, 2 identities, 2 heads) w.r.t. every parameter."""
    from .model import MHSAModel, ModelConfig

    cfg = ModelConfig(backbone=BackboneConfig(Hf=2, Wf=2, C=8, D=8), branch=BranchConfig(K=2), n_classes=2)
    model = MHSAModel(cfg, rng)
    for name in ("b3", "gfb_bn_bias", "cls_q_b", "cls_p_b", "cls_z_b"):
        model.params[name].data = rng.normal(0, 0.1, model.params[name].shape)
    # keep the global ReLU clear of its kink
    model.params["gfb_bn_bias"].data = 1.0 + rng.random(cfg.backbone.D)
    x = rng.normal(size=(4, cfg.backbone.J, cfg.backbone.C))
    labels = np.array([0, 0, 1, 1])
    w = weights or losses.LossWeights(gamma=0.3)

    def fn(t):
        saved = {k: p for k, p in model.params.items()}
        model.params.update(t)
        try:
            feats = model.batch_features(x, labels, training=True)
            return losses.total_loss(feats, w, train_gfb_ce=True)
        finally:
            model.params.update(saved)

    return "total_loss", fn, {k: p.data.copy() for k, p in model.params.items()}


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng) + _module_cases(rng) + [_end_to_end_case(rng)]
    return [check_function(name, fn, inputs) for name, fn, inputs in cases]


def run_seeds(seeds) -> dict[str, CheckResult]:
    """Worst result per component over ``seeds``."""
    worst: dict[str, CheckResult] = {}
    for s in seeds:
        for res in run_suite(s):
            if res.component not in worst or res.max_rel_error > worst[res.component].max_rel_error:
                worst[res.component] = res
    return worst


@contextlib.contextmanager
def corrupted_gradient(op: str, factor: float = 1.5):
    """Scale the analytic input gradients of ``op`` (self-test of the checker)."""
    T._GRAD_HOOKS[op] = lambda grads: [None if g is None else g * factor for g in grads]
    try:
        yield
    finally:
        T._GRAD_HOOKS.pop(op, None)


def report(results: dict[str, CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'component':<20} {'max_rel_error':>14}  status"]
    for name, res in results.items():
        lines.append(f"{name:<20} {res.max_rel_error:>14.3e}  {'ok' if res.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def timed(seeds) -> tuple[dict[str, CheckResult], float]:
    t0 = time.perf_counter()
    res = run_seeds(seeds)
    return res, time.perf_counter() - t0
