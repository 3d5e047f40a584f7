"""Glue between configuration, data, training and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data_io import Split, attention_occlusion_score, generate_dataset
from .errors import ConfigError
from .metrics import EvalReport, cmc_map, records
from .model import MHSAModel
from .training import TrainingAborted, train

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("K", "lambda1", "lambda2", "lambda3", "gamma")
SWEEP_COLUMNS = ("value", "rank1", "rank5", "rank10", "mAP")

# default value grids for each sweepable parameter
STANDARD_GRIDS = {
    "K": [1, 2, 3, 4, 5, 6, 7, 8, 9],
    "lambda1": [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
    "lambda2": [1e-2, 1e-1, 1.0, 1e1, 1e2],
    "lambda3": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
    "gamma": [1e-4, 1e-3, 1e-2, 1e-1, 5e-1, 1.0],
}


def resolve_variant(model: MHSAModel, variant: str) -> tuple[str, list[str]]:
    """The variant actually evaluated plus any warnings.

    ``dagger`` is a property of training: a checkpoint trained with the
    global cross-entropy is evaluated as ``full`` with a warning.
    """
    notes = []
    if variant == "dagger" and model.config.backbone.train_gfb_ce:
        notes.append("variant 'dagger' requested but the checkpoint was trained with the global "
                     "cross-entropy; evaluating as 'full'")
        variant = "full"
    return variant, notes


def evaluate(model: MHSAModel, query: Split, gallery: Split, variant: str = "full",
             fusion: str | None = None) -> EvalReport:
    used, notes = resolve_variant(model, variant)
    for n in notes:
        log.warning(n)
    q = model.embed(query.x, used, fusion)
    g = model.embed(gallery.x, used, fusion)
    report = cmc_map(records(q, query.ids, query.cams), records(g, gallery.ids, gallery.cams),
                     variant=variant, fusion=fusion or model.config.branch.fusion)
    report.notes.extend(notes)
    return report


def median_occlusion_score(model: MHSAModel, split: Split, weighted: bool = True) -> float:
    """Median over occluded samples of the attention mass on occluded pixels.

    With ``weighted`` the heads are weighted by the model's fusion weights
    (when it has them), i.e. by how much each head contributes to ``p*``.
    """
    keep = np.flatnonzero(split.masks.any(axis=1))
    if len(keep) == 0:
        raise ConfigError("no occluded samples to score")
    alpha = model.attention(split.x[keep])
    beta = model.fusion_weights(split.x[keep]) if weighted else None
    scores = [attention_occlusion_score(alpha[i], split.masks[j], None if beta is None else beta[i])
              for i, j in enumerate(keep)]
    return float(np.median(scores))


@dataclass
class RunOutcome:
    model: MHSAModel
    report: EvalReport
    rows: list[dict]


def run(cfg: RunConfig, splits: dict[str, Split] | None = None, out_dir=None) -> RunOutcome:
    """Generate data if needed, train per ``cfg`` and evaluate with ``cfg.eval``."""
    splits = splits if splits is not None else generate_dataset(cfg.data)
    res = train(cfg.model_config(), cfg.train_settings(), splits["train"], out_dir=out_dir)
    report = evaluate(res.model, splits["query"], splits["gallery"], cfg.eval.variant, cfg.eval.fusion)
    return RunOutcome(res.model, report, res.rows)


def parse_values(param: str, text: str) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            out.append(int(tok) if param == "K" else float(tok))
        except ValueError:
            raise ConfigError(f"cannot parse sweep value {tok!r} for {param}") from None
    if not out:
        raise ConfigError("no sweep values given")
    return out


def _with_value(cfg: RunConfig, param: str, value) -> RunConfig:
    if param == "K":
        return cfg.replace(branch={"K": value})
    return cfg.replace(loss={param: value})


def sweep(cfg: RunConfig, param: str, values, splits: dict[str, Split] | None = None) -> list[dict]:
    """Train and evaluate once per value on the same dataset.

    A failing value (bad configuration, aborted training) yields a row of
    NaNs plus an ``error`` entry and the sweep moves on.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    splits = splits if splits is not None else generate_dataset(cfg.data)
    rows = []
    for value in values:
        row = {"value": value}
        try:
            report = run(_with_value(cfg, param, value), splits).report
            row.update(rank1=report.rank(1), rank5=report.rank(5), rank10=report.rank(10), mAP=report.mAP)
        except (ConfigError, TrainingAborted, ArithmeticError) as exc:
            log.warning("sweep %s=%r failed: %s", param, value, exc)
            row.update(rank1=math.nan, rank5=math.nan, rank10=math.nan, mAP=math.nan, error=str(exc))
        rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r["value"])] + [repr(float(r[c])) for c in SWEEP_COLUMNS[1:]])
    return buf.getvalue()
