"""Recall@K evaluation, attention diagnostics, and the ablation harness.

Two tasks are supported: ``predcls`` scores predicate ranking given ground
truth object classes, ``sgcls`` additionally requires the predicted classes
on both endpoints to be correct. For every ordered pair the ranked list
carries the best non-background predicate with score = P(predicate) *
P(subject class) * P(object class); class probabilities are 1 under
``predcls``. Ties break deterministically by (subject, object, predicate).

The attention alignment diagnostic folds an affinity matrix to its symmetric
triangular form and reports the mean folded weight on ground-truth related
pairs minus the mean on unrelated pairs.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, pstdev

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import ModelConfig, ModelOutput, ModelParams, forward
from .scenes import Scene
from .train import TrainConfig, train_run

__all__ = [
    "Triplet",
    "EvalReport",
    "ground_truth_triplets",
    "predict_triplets",
    "recall_at_k",
    "adjacency_matrix",
    "attention_alignment",
    "evaluate_dataset",
    "default_ablation_grid",
    "run_ablation",
    "summarize_ablation",
    "write_ablation_csv",
    "export_heatmap",
]

TASKS = ("predcls", "sgcls")


@dataclass(frozen=True)
class Triplet:
    subj_idx: int
    subj_class: int
    predicate: int
    obj_idx: int
    obj_class: int
    score: float

    def key(self) -> tuple[int, int, int, int, int]:
        return (self.subj_idx, self.obj_idx, self.predicate, self.subj_class, self.obj_class)


@dataclass
class EvalReport:
    task: str
    recalls: dict[int, float]
    per_predicate_recall: dict[int, float]
    attention_alignment: float | None
    n_scenes: int

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "recalls": {str(k): v for k, v in sorted(self.recalls.items())},
            "per_predicate_recall": {
                str(p): v for p, v in sorted(self.per_predicate_recall.items())
            },
            "attention_alignment": self.attention_alignment,
            "n_scenes": self.n_scenes,
        }


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ground_truth_triplets(scene: Scene) -> list[Triplet]:
    classes = scene.class_ids()
    return [
        Triplet(r.subj, int(classes[r.subj]), r.predicate, r.obj, int(classes[r.obj]), 1.0)
        for r in scene.relations
    ]


def predict_triplets(output: ModelOutput, scene: Scene, task: str) -> list[Triplet]:
    """Ranked triplets, one per ordered pair, best first.

    Every pair contributes exactly one triplet (its best non-background
    predicate), so the list always has N * (N - 1) rows.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    pair_probs = _softmax_rows(output.pair_logits.data)
    gt_classes = scene.class_ids()
    if task == "sgcls":
        obj_probs = _softmax_rows(output.object_logits.data)
        pred_classes = np.argmax(output.object_logits.data, axis=1)
        class_prob = obj_probs[np.arange(len(pred_classes)), pred_classes]
    else:
        pred_classes = gt_classes
        class_prob = np.ones(len(gt_classes))
    triplets = []
    for row, (i, j) in enumerate(output.pair_index):
        best = int(np.argmax(pair_probs[row, 1:])) + 1
        score = float(pair_probs[row, best] * class_prob[i] * class_prob[j])
        triplets.append(
            Triplet(int(i), int(pred_classes[i]), best, int(j), int(pred_classes[j]), score)
        )
    triplets.sort(key=lambda t: (-t.score, t.subj_idx, t.obj_idx, t.predicate))
    return triplets


def recall_at_k(ranked: list[Triplet], gt: list[Triplet], k: int) -> float:
    """Fraction of ground-truth triplets matched in the top k of the ranking.

    A match requires equal (subject index, object index, predicate) and equal
    classes on both endpoints; each ground-truth triplet matches at most
    once. Requires a non-empty ground truth.
    """
    if k < 1:
        raise ValueError("recall_at_k: k must be >= 1")
    if not gt:
        raise ValueError("recall_at_k: ground truth is empty")
    top = {t.key() for t in ranked[:k]}
    matched = sum(1 for g in gt if g.key() in top)
    return matched / len(gt)


def adjacency_matrix(scene: Scene) -> np.ndarray:
    n = scene.n_objects
    adj = np.zeros((n, n))
    for r in scene.relations:
        adj[r.subj, r.obj] = 1.0
    return adj


def attention_alignment(r: np.ndarray, adjacency: np.ndarray) -> float | None:
    """Mean folded attention on related pairs minus unrelated pairs.

    The matrix folds to triangular form by averaging the two directions;
    relatedness is symmetric (an edge either way counts). Returns None when
    every pair is related or none is, since the difference is undefined.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    if r.shape != (n, n) or adjacency.shape != (n, n):
        raise ValueError("attention_alignment: square matrices of equal size required")
    related, unrelated = [], []
    for i in range(n):
        for j in range(i + 1, n):
            folded = 0.5 * (r[i, j] + r[j, i])
            if adjacency[i, j] or adjacency[j, i]:
                related.append(folded)
            else:
                unrelated.append(folded)
    if not related or not unrelated:
        return None
    return float(np.mean(related) - np.mean(unrelated))


def evaluate_dataset(
    scenes: list[Scene],
    params: ModelParams,
    cfg: ModelConfig,
    task: str,
    ks: tuple[int, ...] = (20, 50, 100),
) -> EvalReport:
    """Recall@K over a dataset plus diagnostics.

    Scenes without ground-truth relations are skipped; recall is the mean of
    per-scene recalls over the counted scenes. Per-predicate recall is pooled
    over all counted scenes at the largest K. The alignment diagnostic uses
    the last object-stage affinity matrix, averaged over scenes where it is
    defined; it is absent for attention-free models.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("evaluate_dataset: ks must be positive")
    k_max = ks[-1]
    recall_sums = {k: 0.0 for k in ks}
    counted = 0
    pred_hits: dict[int, int] = {}
    pred_totals: dict[int, int] = {}
    alignments = []
    for scene in scenes:
        out = forward(scene, params, cfg)
        if out.object_attention:
            a = attention_alignment(out.object_attention[-1].data, adjacency_matrix(scene))
            if a is not None:
                alignments.append(a)
        gt = ground_truth_triplets(scene)
        if not gt:
            continue
        counted += 1
        ranked = predict_triplets(out, scene, task)
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, gt, k)
        top = {t.key() for t in ranked[:k_max]}
        for g in gt:
            pred_totals[g.predicate] = pred_totals.get(g.predicate, 0) + 1
            if g.key() in top:
                pred_hits[g.predicate] = pred_hits.get(g.predicate, 0) + 1
    recalls = {k: (recall_sums[k] / counted if counted else 0.0) for k in ks}
    per_pred = {
        p: pred_hits.get(p, 0) / total for p, total in sorted(pred_totals.items())
    }
    alignment = float(np.mean(alignments)) if alignments else None
    return EvalReport(task, recalls, per_pred, alignment, counted)


# ---------------------------------------------------------------------------
# ablation harness


def default_ablation_grid() -> list[tuple[str, dict]]:
    """Cells covering block count, reduction ratio, row op, similarity,
    module toggles, and both reduced edge-input constructions."""
    return [
        ("baseline", {}),
        ("blocks_0", {"attention_blocks": 0}),
        ("blocks_1", {"attention_blocks": 1}),
        ("blocks_3", {"attention_blocks": 3}),
        ("blocks_4", {"attention_blocks": 4}),
        ("ratio_1", {"reduction_ratio": 1}),
        ("ratio_4", {"reduction_ratio": 4}),
        ("ratio_8", {"reduction_ratio": 8}),
        ("row_sigmoid", {"row_op": "sigmoid"}),
        ("euclidean", {"similarity": "euclidean"}),
        ("no_geometry", {"use_geometry": False}),
        ("no_context", {"use_context": False}),
        ("attention_only", {"use_geometry": False, "use_context": False}),
        ("edge_class_only", {"edge_input_mode": "class_only"}),
        ("edge_hidden_only", {"edge_input_mode": "hidden_only"}),
    ]


def _apply_deltas(base: ModelConfig, deltas: dict) -> ModelConfig:
    try:
        return dataclasses.replace(base, **deltas).validate()
    except TypeError as exc:
        raise ConfigError(f"unknown model config field in ablation deltas: {exc}") from exc


def run_ablation(
    scenes: list[Scene],
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    grid: list[tuple[str, dict]],
    seeds: list[int],
    holdout_fraction: float = 0.2,
    ks: tuple[int, ...] = (20, 50, 100),
) -> list[dict]:
    """Train and evaluate every (cell, seed) on a deterministic holdout split.

    The first ``holdout_fraction`` of the scenes is the evaluation split; the
    rest is trained on from scratch per seed. A diverging cell is recorded in
    its row's ``error`` field instead of aborting the grid. Rows carry SGCls
    recalls and the alignment diagnostic.
    """
    if len(seeds) < 1:
        raise ValueError("run_ablation: need at least one seed")
    n_eval = max(1, int(len(scenes) * holdout_fraction))
    if n_eval >= len(scenes):
        raise ValueError("run_ablation: not enough scenes for a holdout split")
    eval_scenes, train_scenes = scenes[:n_eval], scenes[n_eval:]
    rows = []
    for name, deltas in grid:
        cfg = _apply_deltas(base_cfg, deltas)
        for seed in seeds:
            cell_train = dataclasses.replace(train_cfg, seed=seed)
            row: dict = {"cell": name, "seed": seed, "error": None}
            try:
                ckpt, _ = train_run(train_scenes, cfg, cell_train)
                report = evaluate_dataset(eval_scenes, ckpt.params(), cfg, "sgcls", ks)
                for k, v in report.recalls.items():
                    row[f"r{k}"] = v
                row["alignment"] = report.attention_alignment
            except DivergenceError as exc:
                row["error"] = str(exc)
            rows.append(row)
    return rows


def summarize_ablation(
    rows: list[dict], ks: tuple[int, ...] = (20, 50, 100)
) -> dict[str, dict[int, tuple[float, float]]]:
    """Per-cell mean and population std of recall@K over seeds."""
    cells: dict[str, list[dict]] = {}
    for row in rows:
        if row.get("error") is None:
            cells.setdefault(row["cell"], []).append(row)
    out: dict[str, dict[int, tuple[float, float]]] = {}
    for cell, cell_rows in cells.items():
        stats = {}
        for k in ks:
            vals = [r[f"r{k}"] for r in cell_rows]
            stats[k] = (mean(vals), pstdev(vals) if len(vals) > 1 else 0.0)
        out[cell] = stats
    return out


def write_ablation_csv(rows: list[dict], path: str | Path, ks=(20, 50, 100)) -> None:
    fields = ["cell", "seed"] + [f"r{k}" for k in ks] + ["alignment", "error"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({f: row.get(f) for f in fields})


# ---------------------------------------------------------------------------
# heatmap export


def export_heatmap(matrix: np.ndarray, base_path: str | Path) -> tuple[Path, Path]:
    """Write a matrix as ``<base>.csv`` and a min-max scaled ``<base>.pgm``.

    The PGM is binary 8-bit grayscale; a constant matrix maps to all zeros.
    Returns the two paths written.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("export_heatmap: matrix must be 2-D")
    base = Path(base_path)
    csv_path = base.with_name(base.name + ".csv")
    pgm_path = base.with_name(base.name + ".pgm")
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    span = m.max() - m.min()
    if span == 0.0:
        pixels = np.zeros(m.shape, dtype=np.uint8)
    else:
        pixels = np.rint((m - m.min()) / span * 255.0).astype(np.uint8)
    h, w = m.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return csv_path, pgm_path
