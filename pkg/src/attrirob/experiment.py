"""Train / evaluate orchestration and on-disk outputs.

Output layout under ``out``::

    config.json  checkpoint.json  train_log.csv  eval.csv  summary.json

All files are written from deterministic computations with fixed float
formatting, so the same config reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import OBJECTIVES, AttackConfig, fgsm, ifia_topk_batch, pgd
from .attribution import integrated_gradients_batch
from .config import DatasetSpec, EvalSpec, ExperimentConfig
from .consistency import activation_consistency, record_activation_trace
from .data import Dataset, generate_synthetic, load_idx
from .metrics import MetricReport, metric_report
from .ndcore import MlpModel, forward_cache
from .training import TrainLog, train

EVAL_COLUMNS = ("sample_id", "label_preserved", "tau", "cosine", "pearson", "topk")


def _clean(v):
    """JSON-safe value: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path, columns, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([fmt_value(r[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def build_dataset(spec: DatasetSpec, seed) -> tuple[Dataset, Dataset]:
    """(train, test) split of the configured dataset."""
    if spec.kind == "idx":
        ds = load_idx(spec.images, spec.labels, spec.limit)
    else:
        ds = generate_synthetic(spec.kind, spec.n, spec.noise, seed=(seed, 10), lift_dim=spec.lift_dim)
    return ds.split(spec.test_fraction, (seed, 11))


@dataclass
class EvalReport:
    rows: list[dict]
    summary: dict


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _row(sample_id: int, preserved: bool, m: MetricReport) -> dict:
    return {"sample_id": sample_id, "label_preserved": preserved, "tau": m.tau, "cosine": m.cosine,
            "pearson": m.pearson, "topk": m.topk}


def attack_rows(model: MlpModel, X: np.ndarray, y: np.ndarray, config: AttackConfig, objective: str = "ifia_topk",
                seed=0, sample_ids=None) -> tuple[list[dict], list[int], list]:
    """Per-sample metric rows for one attack.

    ``ifia_topk`` rows hold the restart-mean metrics; label attacks
    (``OBJECTIVES``) report IG metrics of the single PGD result.  Returns
    (rows, skipped sample ids, IFIA reports or None).
    """
    ids = list(range(len(X))) if sample_ids is None else list(sample_ids)
    if objective == "ifia_topk":
        reports = ifia_topk_batch(model, X, y, config, seed, ids)
        rows, skipped = [], []
        for sid, rep in zip(ids, reports):
            if rep.skipped:
                skipped.append(sid)
            else:
                rows.append(_row(sid, rep.label_preserved, rep.mean()))
        return rows, skipped, reports
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    X_adv = pgd(model, objective, X, y, config, seed=[(seed, s) for s in ids] if len(X) else seed)
    pred_nat = np.argmax(forward_cache(model, X)[0], axis=1) if len(X) else np.zeros(0, int)
    pred_adv = np.argmax(forward_cache(model, X_adv)[0], axis=1) if len(X) else np.zeros(0, int)
    k = min(config.k, X.shape[1])
    rows, skipped = [], []
    if len(X):
        ig = integrated_gradients_batch(model, X, y, None, config.m_eval)
        ig_adv = integrated_gradients_batch(model, X_adv, y, None, config.m_eval)
    for j, sid in enumerate(ids):
        if pred_nat[j] != y[j]:
            skipped.append(sid)
            continue
        m = metric_report(ig[j], ig_adv[j], k, config.absolute)
        rows.append(_row(sid, bool(pred_adv[j] == y[j]), m))
    return rows, skipped, None


def run_eval(model: MlpModel, dataset: Dataset, attack_config: AttackConfig, eval_spec: EvalSpec,
             out_dir=None, seed=0) -> EvalReport:
    """IFIA metrics per sample, FGSM/PGD accuracy and activation consistency.

    Naturally misclassified samples are left out of the attribution
    statistics and counted in the summary.
    """
    if len(dataset) and dataset.dim != model.input_dim:
        raise ValueError(f"dataset dim {dataset.dim} != model input dim {model.input_dim}")
    n = len(dataset) if eval_spec.n_samples is None else min(eval_spec.n_samples, len(dataset))
    X = dataset.inputs[:n]
    y = dataset.labels[:n]
    cfg = replace(attack_config, m_eval=eval_spec.m_eval, absolute=eval_spec.absolute,
                  clip_range=dataset.value_range)
    rows, skipped, reports = attack_rows(model, X, y, cfg, "ifia_topk", (seed, 20))
    summary = {
        "n_samples": n,
        "n_evaluated": len(rows),
        "n_skipped": len(skipped),
        "skipped_ids": skipped,
        "seed": seed,
        "attack": {**vars(cfg), "clip_range": list(cfg.clip_range)},
        "m_eval": eval_spec.m_eval,
    }
    for key in ("tau", "cosine", "pearson", "topk"):
        summary[f"mean_{key}"] = _mean([r[key] for r in rows])
    worst = [rep.worst for rep in (reports or []) if not rep.skipped]
    for key in ("tau", "cosine", "topk"):
        summary[f"worst_{key}"] = _mean([getattr(w, key) for w in worst])
    if n:
        pred = np.argmax(forward_cache(model, X)[0], axis=1)
        pgd_cfg = replace(cfg, steps=eval_spec.pgd_steps)
        X_pgd = pgd(model, "cross_entropy", X, y, pgd_cfg, seed=[(seed, 21, i) for i in range(n)])
        X_fgsm = fgsm(model, X, y, cfg.epsilon, cfg.clip_range)
        summary["natural_accuracy"] = float(np.mean(pred == y))
        summary["pgd_accuracy"] = float(np.mean(np.argmax(forward_cache(model, X_pgd)[0], axis=1) == y))
        summary["fgsm_accuracy"] = float(np.mean(np.argmax(forward_cache(model, X_fgsm)[0], axis=1) == y))
        cons = activation_consistency(record_activation_trace(model, X), record_activation_trace(model, X_pgd),
                                      detail=True)
        summary["activation_consistency"] = cons.value
        summary["per_layer_consistency"] = cons.per_layer
    else:
        for key in ("natural_accuracy", "pgd_accuracy", "fgsm_accuracy", "activation_consistency"):
            summary[key] = math.nan
        summary["per_layer_consistency"] = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "eval.csv", EVAL_COLUMNS, rows)
        write_json(out / "summary.json", summary)
    return EvalReport(rows, summary)


def run_train(cfg: ExperimentConfig) -> tuple[MlpModel, TrainLog, Dataset, Dataset]:
    train_ds, test_ds = build_dataset(cfg.dataset, cfg.seed)
    tcfg = replace(cfg.train, attack=replace(cfg.train.attack, clip_range=train_ds.value_range))
    model, log = train(tcfg, train_ds)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    model.meta.update({"dataset": train_ds.name, "loss_kind": tcfg.loss_kind, "use_igr": tcfg.use_igr,
                       "seed": cfg.seed})
    model.save(out / "checkpoint.json")
    log.write_csv(out / "train_log.csv")
    return model, log, train_ds, test_ds


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    model, _, _, test_ds = run_train(cfg)
    return run_eval(model, test_ds, cfg.attack, cfg.eval, cfg.out, cfg.seed)
