"""Training loop, evaluation, embedding analysis, and the experiment grid.

``run_grid`` trains every requested (framework, train-language, data
fraction) cell, optionally over several seeds, evaluates each trained
model on every test language, and writes machine-readable (CSV, JSON)
plus aligned-text reports. Cell results are persisted as each cell
finishes so a failing cell never discards completed work, and wall-clock
timings live in a separate report field so everything else is
byte-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, batch_iterator, filter_language, subset_fraction
from .errors import ContractError, GridError, TrainingError
from .losses import LossConfig
from .models import (
    AnyModel,
    Baseline2Model,
    MtsnModel,
    baseline2_train_step,
    mtsn_train_step,
    predict,
)
from .optim import AdamState, init_adam
from .seeding import derive_seed

FRAMEWORKS = ("mtsn", "baseline2")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    alpha: float = 0.5
    temperature: float = 1.0
    seed: int = 0
    train_language: str = "both"
    eval_every: int = 0
    hidden_size: int = 128
    dtype: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.eval_every < 0:
            raise ContractError(f"eval_every must be nonnegative, got {self.eval_every}")
        if self.hidden_size < 1:
            raise ContractError(f"hidden_size must be positive, got {self.hidden_size}")
        if np.dtype(self.dtype) not in (np.dtype("float32"), np.dtype("float64")):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")
        LossConfig(alpha=self.alpha, temperature=self.temperature)  # validates both


def config_hash(cfg: TrainConfig) -> str:
    canonical = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_tl: float
    loss_intent: float
    eval_accuracy: Optional[float] = None


@dataclass
class TrainResult:
    model: AnyModel
    history: List[EpochStats]
    adam: AdamState


def build_model(kind: str, dataset: Dataset, cfg: TrainConfig) -> AnyModel:
    """A fresh model sized for the dataset, initialized from cfg.seed."""
    if kind == "mtsn":
        return MtsnModel(dataset.acoustic_dim, dataset.teacher_dim, cfg.hidden_size,
                         dataset.num_intents,
                         loss_cfg=LossConfig(alpha=cfg.alpha, temperature=cfg.temperature),
                         seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    if kind == "baseline2":
        return Baseline2Model(dataset.acoustic_dim, cfg.hidden_size,
                              dataset.num_intents, seed=cfg.seed,
                              dtype=np.dtype(cfg.dtype))
    raise ContractError(f"unknown model kind '{kind}'; expected one of {FRAMEWORKS}")


def train(kind: str, train_dataset: Dataset, cfg: TrainConfig,
          eval_dataset: Optional[Dataset] = None, model: Optional[AnyModel] = None,
          adam: Optional[AdamState] = None, start_epoch: int = 0) -> TrainResult:
    """Run cfg.epochs of batched updates; deterministic under (cfg, dataset).

    Pass ``model``/``adam``/``start_epoch`` together to resume from a
    checkpoint: batch order depends only on (cfg.seed, epoch), so a
    resumed run replays exactly the batches the uninterrupted run saw.
    """
    ds = train_dataset
    if cfg.train_language != "both":
        ds = filter_language(ds, (cfg.train_language,))
    if len(ds) == 0:
        raise ContractError("training dataset is empty")
    if model is None:
        model = build_model(kind, ds, cfg)
    if adam is None:
        adam = init_adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                         beta2=cfg.beta2, eps=cfg.eps)
    history: List[EpochStats] = []
    for epoch in range(start_epoch, cfg.epochs):
        sums = np.zeros(3)
        seen = 0
        for b, batch in enumerate(batch_iterator(ds, cfg.batch_size, cfg.seed, epoch)):
            acoustics = [ex.acoustic for ex in batch]
            labels = [ex.intent for ex in batch]
            if isinstance(model, MtsnModel):
                teachers = [ex.teacher for ex in batch]
                stats = mtsn_train_step(model, acoustics, teachers, labels, adam)
            else:
                stats = baseline2_train_step(model, acoustics, labels, adam)
            if not np.isfinite(stats[0]):
                raise TrainingError("training loss became non-finite",
                                    epoch=epoch, batch=b)
            sums += np.asarray(stats) * len(batch)
            seen += len(batch)
        acc = None
        if cfg.eval_every > 0 and eval_dataset is not None and \
                (epoch + 1) % cfg.eval_every == 0:
            acc = evaluate(model, eval_dataset).accuracy
        history.append(EpochStats(epoch=epoch, loss_total=float(sums[0] / seen),
                                  loss_tl=float(sums[1] / seen),
                                  loss_intent=float(sums[2] / seen),
                                  eval_accuracy=acc))
    return TrainResult(model=model, history=history, adam=adam)


@dataclass
class EvalReport:
    accuracy: float
    per_language: Dict[str, float]
    n_examples: int
    per_language_n: Dict[str, int]


def evaluate(model: AnyModel, test_dataset: Dataset) -> EvalReport:
    """Accuracy (%) overall and per language."""
    if len(test_dataset) == 0:
        raise ContractError("evaluate: empty test dataset")
    correct: Dict[str, int] = {}
    totals: Dict[str, int] = {}
    for ex in test_dataset.examples:
        hit = int(predict(model, ex.acoustic) == ex.intent)
        correct[ex.language] = correct.get(ex.language, 0) + hit
        totals[ex.language] = totals.get(ex.language, 0) + 1
    per_language = {lang: 100.0 * correct[lang] / totals[lang] for lang in totals}
    n = sum(totals.values())
    accuracy = 100.0 * sum(correct.values()) / n
    return EvalReport(accuracy=accuracy, per_language=per_language,
                      n_examples=n, per_language_n=totals)


@dataclass
class CosineReport:
    at: str
    combined: float
    per_language: Dict[str, float]
    n_excluded: int


def cosine_analysis(model: MtsnModel, dataset: Dataset, at: str = "final") -> CosineReport:
    """Mean cosine between the pooled transferred and teacher embeddings."""
    if not isinstance(model, MtsnModel):
        raise ContractError("cosine_analysis needs a model with a transfer layer")
    if len(dataset) == 0:
        raise ContractError("cosine_analysis: empty dataset")
    w = model.transfer.w.data
    b = model.transfer.b.data
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    excluded = 0
    for ex in dataset.examples:
        frames = ex.acoustic.astype(model.dtype)
        e_te = (frames @ w.T + b).mean(axis=0)
        teacher = ex.teacher.astype(model.dtype)
        na, nb = np.linalg.norm(e_te), np.linalg.norm(teacher)
        if na < 1e-12 or nb < 1e-12:
            excluded += 1
            continue
        sim = float(np.dot(e_te, teacher) / (na * nb))
        sums[ex.language] = sums.get(ex.language, 0.0) + sim
        counts[ex.language] = counts.get(ex.language, 0) + 1
    if excluded:
        warnings.warn(f"cosine_analysis: excluded {excluded} zero-norm embeddings")
    total = sum(counts.values())
    if total == 0:
        raise ContractError("cosine_analysis: every embedding had zero norm")
    per_language = {lang: sums[lang] / counts[lang] for lang in counts}
    combined = sum(sums.values()) / total
    return CosineReport(at=at, combined=combined, per_language=per_language,
                        n_excluded=excluded)


def projection_export(embeddings: np.ndarray, intents: Sequence[int],
                      languages: Sequence[str], sources: Sequence[str],
                      path) -> np.ndarray:
    """Project rows onto their top-2 principal components and write a CSV.

    Component signs are fixed (largest-magnitude coordinate positive) so
    repeated runs produce identical files. Returns the (N, 2) coordinates.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"projection needs at least 2 embeddings, got shape {x.shape}")
    if not len(x) == len(intents) == len(languages) == len(sources):
        raise ContractError("projection: label lengths do not match embeddings")
    centered = x - x.mean(axis=0)
    if np.max(np.abs(centered)) < 1e-12:
        warnings.warn("projection: all embeddings identical; emitting zero coordinates")
        coords = np.zeros((x.shape[0], 2))
    else:
        cov = centered.T @ centered / (x.shape[0] - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        pcs = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
        if pcs.shape[1] < 2:  # 1-dimensional embeddings
            pcs = np.hstack([pcs, np.zeros((pcs.shape[0], 1))])
        for j in range(2):
            k = int(np.argmax(np.abs(pcs[:, j])))
            if pcs[k, j] < 0:
                pcs[:, j] = -pcs[:, j]
        coords = centered @ pcs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "intent", "language", "source"])
        for row, intent, lang, src in zip(coords, intents, languages, sources):
            writer.writerow([repr(float(row[0])), repr(float(row[1])),
                             int(intent), lang, src])
    return coords


# ---------------------------------------------------------------------------
# grid runner


@dataclass
class CellResult:
    cell_id: str
    framework: str
    train_language: str
    fraction: float
    seeds: List[int]
    accuracy_mean: Dict[str, float] = field(default_factory=dict)
    accuracy_per_seed: List[Dict[str, float]] = field(default_factory=list)
    cosine_initial: Optional[Dict[str, float]] = None
    cosine_final: Optional[Dict[str, float]] = None
    final_loss_mean: float = 0.0
    loss_histories: List[List[List[float]]] = field(default_factory=list)

    def to_json(self) -> Dict[str, object]:
        return asdict(self)


def _cell_id(framework: str, train_language: str, fraction: float) -> str:
    return f"{framework}:{train_language}:f{fraction:g}"


def _run_cell_seed(framework: str, train_language: str, fraction: float,
                   run_seed: int, subset_seed: int, cfg: TrainConfig,
                   train_ds: Dataset, test_ds: Dataset) -> Dict[str, object]:
    """Train and evaluate one (cell, seed) combination. Must stay module-level
    and picklable so the process pool can ship it to workers."""
    cfg = replace(cfg, seed=run_seed, train_language=train_language)
    # the subset depends only on (grid seed, fraction): identical across
    # frameworks and run seeds, and nested across fractions
    subset = subset_fraction(train_ds, fraction, subset_seed) \
        if fraction != 1.0 else train_ds
    model = build_model(framework, train_ds, cfg)
    out: Dict[str, object] = {"seed": run_seed}
    if framework == "mtsn":
        initial = cosine_analysis(model, test_ds, at="initial")
        out["cosine_initial"] = {"combined": initial.combined, **initial.per_language}
    result = train(framework, subset, cfg, model=model)
    report = evaluate(result.model, test_ds)
    out["accuracy"] = {"combined": report.accuracy, **report.per_language}
    if framework == "mtsn":
        final = cosine_analysis(result.model, test_ds, at="final")
        out["cosine_final"] = {"combined": final.combined, **final.per_language}
    out["final_loss"] = result.history[-1].loss_total
    out["loss_history"] = [[s.loss_total, s.loss_tl, s.loss_intent]
                           for s in result.history]
    return out


def _mean_over(dicts: List[Dict[str, float]]) -> Dict[str, float]:
    keys = sorted({k for d in dicts for k in d})
    return {k: float(np.mean([d[k] for d in dicts if k in d])) for k in keys}


def run_grid(train_ds: Dataset, test_ds: Dataset, frameworks: Sequence[str],
             train_languages: Sequence[str], cfg: TrainConfig, out_dir,
             fractions: Optional[Sequence[float]] = None, seeds: int = 1,
             jobs: int = 1) -> Dict[str, object]:
    """Train/evaluate every grid cell and write the report files.

    The subset used for a fraction depends only on (cfg.seed, fraction),
    so every framework sees identical subsets and smaller fractions nest
    inside larger ones.
    """
    for fw in frameworks:
        if fw not in FRAMEWORKS:
            raise ContractError(f"unknown framework '{fw}'; expected subset of {FRAMEWORKS}")
    if not frameworks or not train_languages:
        raise ContractError("grid needs at least one framework and one train language")
    for tl in train_languages:
        if tl != "both" and tl not in train_ds.languages:
            raise ContractError(
                f"train language '{tl}' not in corpus languages {list(train_ds.languages)}")
    fractions = [1.0] if fractions is None else list(fractions)
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ContractError(f"fraction must lie in (0, 1], got {f}")
    if seeds < 1:
        raise ContractError(f"seeds must be at least 1, got {seeds}")

    out_root = Path(out_dir)
    cells_dir = out_root / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    subset_seed = derive_seed(cfg.seed, "subset")
    tasks = []  # (framework, train_lang, fraction, cell id, run seed)
    for fw in frameworks:
        for tl in train_languages:
            for frac in fractions:
                cid = _cell_id(fw, tl, frac)
                for i in range(seeds):
                    run_seed = derive_seed(cfg.seed, cid, i) % (1 << 32)
                    tasks.append((fw, tl, frac, cid, run_seed))

    t_start = time.time()
    per_seed_results: Dict[str, List[Dict[str, object]]] = {}
    cell_times: Dict[str, float] = {}

    def finish_cell(cid: str, fw: str, tl: str, frac: float) -> CellResult:
        rows = per_seed_results[cid]
        cell = CellResult(cell_id=cid, framework=fw, train_language=tl, fraction=frac,
                          seeds=[int(r["seed"]) for r in rows])
        accs = [dict(r["accuracy"]) for r in rows]
        cell.accuracy_per_seed = accs
        cell.accuracy_mean = _mean_over(accs)
        if fw == "mtsn":
            cell.cosine_initial = _mean_over([dict(r["cosine_initial"]) for r in rows])
            cell.cosine_final = _mean_over([dict(r["cosine_final"]) for r in rows])
        cell.final_loss_mean = float(np.mean([r["final_loss"] for r in rows]))
        cell.loss_histories = [r["loss_history"] for r in rows]
        safe_name = cid.replace(":", "_")
        (cells_dir / f"{safe_name}.json").write_text(
            json.dumps(cell.to_json(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
        return cell

    def persist_finished_and_fail(cid: str, exc: Exception) -> None:
        for done_cid in list(per_seed_results):
            if len(per_seed_results[done_cid]) == seeds:
                meta = next(t for t in tasks if t[3] == done_cid)
                finish_cell(done_cid, meta[0], meta[1], meta[2])
        raise GridError(f"cell execution failed: {exc}", cell=cid) from exc

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(pool.submit(_run_cell_seed, fw, tl, frac, run_seed,
                                    subset_seed, cfg, train_ds, test_ds), cid)
                       for fw, tl, frac, cid, run_seed in tasks]
            for fut, cid in futures:  # submission order keeps reports deterministic
                try:
                    result = fut.result()
                except Exception as exc:
                    persist_finished_and_fail(cid, exc)
                per_seed_results.setdefault(cid, []).append(result)
    else:
        for fw, tl, frac, cid, run_seed in tasks:
            t0 = time.time()
            try:
                result = _run_cell_seed(fw, tl, frac, run_seed, subset_seed,
                                        cfg, train_ds, test_ds)
            except Exception as exc:
                persist_finished_and_fail(cid, exc)
            per_seed_results.setdefault(cid, []).append(result)
            cell_times[cid] = cell_times.get(cid, 0.0) + (time.time() - t0)

    completed: List[CellResult] = []
    seen = set()
    for fw, tl, frac, cid, _ in tasks:
        if cid in seen:
            continue
        seen.add(cid)
        completed.append(finish_cell(cid, fw, tl, frac))

    report: Dict[str, object] = {
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "frameworks": list(frameworks),
        "train_languages": list(train_languages),
        "fractions": fractions,
        "seeds_per_cell": seeds,
        "test_languages": list(test_ds.languages),
        "cells": [c.to_json() for c in completed],
        "timing": {"total_seconds": time.time() - t_start,
                   "per_cell_seconds": cell_times},
    }
    (out_root / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_accuracy_reports(out_root, completed, list(test_ds.languages))
    if fractions != [1.0]:
        _write_fraction_reports(out_root, completed, fractions)
    if any(c.framework == "mtsn" for c in completed):
        _write_cosine_reports(out_root, completed, list(test_ds.languages))
    return report


def _write_table(path: Path, header: List[str], rows: List[List[str]]) -> None:
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in [header] + rows]
    sep = "  ".join("-" * w for w in widths)
    path.write_text("\n".join([lines[0], sep] + lines[1:]) + "\n", encoding="utf-8")


def _write_accuracy_reports(root: Path, cells: List[CellResult],
                            test_langs: List[str]) -> None:
    columns = test_langs + ["combined"]
    with open(root / "accuracy_grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["framework", "train_language", "fraction", "test_language",
                         "accuracy_mean"])
        for c in cells:
            for col in columns:
                if col in c.accuracy_mean:
                    writer.writerow([c.framework, c.train_language, f"{c.fraction:g}",
                                     col, f"{c.accuracy_mean[col]:.2f}"])
    rows = []
    for c in cells:
        rows.append([c.framework, c.train_language, f"{c.fraction:g}"] +
                    [f"{c.accuracy_mean.get(col, float('nan')):.2f}" for col in columns])
    _write_table(root / "accuracy_grid.txt",
                 ["framework", "train_lang", "fraction"] + columns, rows)


def _write_fraction_reports(root: Path, cells: List[CellResult],
                            fractions: List[float]) -> None:
    groups: Dict[Tuple[str, str], Dict[float, float]] = {}
    for c in cells:
        groups.setdefault((c.framework, c.train_language), {})[c.fraction] = \
            c.accuracy_mean.get("combined", float("nan"))
    with open(root / "fraction_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["framework", "train_language"] +
                        [f"{f:g}" for f in fractions])
        for (fw, tl), vals in sorted(groups.items()):
            writer.writerow([fw, tl] + [f"{vals.get(f, float('nan')):.2f}"
                                        for f in fractions])
    rows = [[fw, tl] + [f"{vals.get(f, float('nan')):.2f}" for f in fractions]
            for (fw, tl), vals in sorted(groups.items())]
    _write_table(root / "fraction_sweep.txt",
                 ["framework", "train_lang"] + [f"{f:g}" for f in fractions], rows)


def _write_cosine_reports(root: Path, cells: List[CellResult],
                          test_langs: List[str]) -> None:
    columns = test_langs + ["combined"]
    mtsn_cells = [c for c in cells if c.framework == "mtsn"]
    with open(root / "cosine_alignment.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["train_language", "fraction", "language",
                         "cosine_initial", "cosine_final"])
        for c in mtsn_cells:
            for col in columns:
                if c.cosine_initial and col in c.cosine_initial:
                    writer.writerow([c.train_language, f"{c.fraction:g}", col,
                                     f"{c.cosine_initial[col]:.4f}",
                                     f"{c.cosine_final[col]:.4f}"])
    rows = []
    for c in mtsn_cells:
        for col in columns:
            if c.cosine_initial and col in c.cosine_initial:
                rows.append([c.train_language, f"{c.fraction:g}", col,
                             f"{c.cosine_initial[col]:.4f}",
                             f"{c.cosine_final[col]:.4f}"])
    _write_table(root / "cosine_alignment.txt",
                 ["train_lang", "fraction", "language", "initial", "final"], rows)
