"""ROC AUC, bootstrap confidence intervals, macro summaries and ablation tables."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import REGISTRY, finding_index
from .errors import DegenerateLabels, IdMismatch, ParseError


def _validate_pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    return scores, labels, n_pos, n_neg


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Rank-based AUC: (concordant + half the ties) / (pos * neg) pairs."""
    scores, labels, n_pos, n_neg = _validate_pair(scores, labels)
    ranks = _average_ranks(scores)
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(scores, labels, replicates: int = 2000, level: float = 0.95,
                 seed: int = 0, redraw_cap: int = 100) -> tuple[float, float]:
    """Case-resampling percentile interval with per-replicate derived seeds.

    Replicates that come up single-class are redrawn up to redraw_cap times,
    then skipped; determinism does not depend on execution order.
    """
    scores, labels, _, _ = _validate_pair(scores, labels)
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    n = scores.size
    stats = []
    skipped = 0
    for k in range(replicates):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k])))
        for _ in range(redraw_cap):
            idx = rng.integers(0, n, n)
            picked = labels[idx]
            if picked.min() != picked.max():
                stats.append(roc_auc(scores[idx], picked))
                break
        else:
            skipped += 1
    if not stats:
        raise DegenerateLabels("every bootstrap replicate was single-class")
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def roc_curve_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, tpr, fpr) rows at every distinct score, plus the (0, 0) endpoint.

    A case is called positive when score >= threshold; the final distinct
    threshold therefore lands on (1, 1).
    """
    scores, labels, n_pos, n_neg = _validate_pair(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        points.append((float(s[i]), tp / n_pos, fp / n_neg))
        i = j + 1
    return points


def trapezoid_auc(points) -> float:
    fpr = np.array([p[2] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def emit_roc_data(scores, labels, path) -> None:
    """CSV of ROC points whose trapezoidal area equals the rank-based AUC."""
    points = roc_curve_points(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tpr", "fpr"])
        for threshold, tpr, fpr in points:
            writer.writerow([repr(threshold), repr(tpr), repr(fpr)])


@dataclass
class FindingResult:
    finding_id: str
    n_pos: int
    n_neg: int
    auc: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None

    @property
    def absent(self) -> bool:
        return self.auc is None


@dataclass
class EvalReport:
    subset: str                     # major6 | all16 | external
    rows: list[FindingResult]
    case_count: int
    macro_auc: float | None = None
    macro_std: float | None = None

    def __post_init__(self):
        aucs = [r.auc for r in self.rows if not r.absent]
        if aucs:
            self.macro_auc = float(np.mean(aucs))
            self.macro_std = float(np.std(aucs))  # population std across findings

    def row(self, finding_id: str) -> FindingResult:
        for r in self.rows:
            if r.finding_id == finding_id:
                return r
        raise KeyError(finding_id)

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "case_count": self.case_count,
            "macro_auc": self.macro_auc,
            "macro_std": self.macro_std,
            "findings": [{
                "finding_id": r.finding_id,
                "auc": r.auc,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "n_pos": r.n_pos,
                "n_neg": r.n_neg,
                "absent": r.absent,
            } for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def format_table(self) -> str:
        width = max(len(r.finding_id) for r in self.rows)
        lines = [f"{'Finding':<{width}}  AUC (95% CI)"]
        for r in self.rows:
            if r.absent:
                lines.append(f"{r.finding_id:<{width}}  absent (single-class)")
            elif r.ci_low is not None:
                lines.append(f"{r.finding_id:<{width}}  "
                             f"{r.auc:.3f} ({r.ci_low:.3f}-{r.ci_high:.3f})")
            else:
                lines.append(f"{r.finding_id:<{width}}  {r.auc:.3f}")
        if self.macro_auc is not None:
            lines.append(f"{'macro':<{width}}  {self.macro_auc:.3f} ± {self.macro_std:.3f}")
        return "\n".join(lines)


def scores_labels_report(score_matrix, label_matrix, finding_ids, subset: str,
                         ci_replicates: int = 2000, ci_seed: int = 0,
                         with_ci: bool = True) -> EvalReport:
    """Shared assembly: per-finding AUC (+CI), absent rows for single-class findings."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    label_matrix = np.asarray(label_matrix, dtype=np.int64)
    if score_matrix.shape != label_matrix.shape:
        raise ValueError("score and label matrices must share a shape")
    rows = []
    for j, fid in enumerate(finding_ids):
        scores, labels = score_matrix[:, j], label_matrix[:, j]
        n_pos = int(labels.sum())
        n_neg = int(labels.size - n_pos)
        result = FindingResult(finding_id=fid, n_pos=n_pos, n_neg=n_neg)
        if 0 < n_pos < labels.size:
            result.auc = roc_auc(scores, labels)
            if with_ci:
                result.ci_low, result.ci_high = bootstrap_ci(
                    scores, labels, replicates=ci_replicates,
                    seed=ci_seed + finding_index(fid) if fid in REGISTRY.ids else ci_seed)
        rows.append(result)
    return EvalReport(subset=subset, rows=rows, case_count=int(score_matrix.shape[0]))


def evaluate_scores(score_matrix, label_matrix, subset: str = "all16",
                    ci_replicates: int = 2000, ci_seed: int = 0,
                    with_ci: bool = True) -> EvalReport:
    """Evaluate a full 16-column score/label matrix on a registry subset."""
    if subset == "major6":
        finding_ids = REGISTRY.ids[:6]
    elif subset == "all16":
        finding_ids = REGISTRY.ids
    else:
        raise ValueError("subset must be 'major6' or 'all16'")
    cols = [finding_index(f) for f in finding_ids]
    return scores_labels_report(
        np.asarray(score_matrix)[:, cols], np.asarray(label_matrix)[:, cols],
        list(finding_ids), subset, ci_replicates, ci_seed, with_ci)


def evaluate_model(model, inputs, label_matrix, subset: str = "all16",
                   batch_size: int = 8, with_ci: bool = True,
                   ci_replicates: int = 2000, ci_seed: int = 0) -> EvalReport:
    """Run a classifier over stacked input tensors and score sigmoid outputs.

    inputs may be an (N, 3, Z, Y, X) array; label_matrix is (N, 16) when subset
    is a registry subset, or already column-matched to the requested findings.
    """
    import torch

    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            batch = torch.as_tensor(np.asarray(inputs[i:i + batch_size]),
                                    dtype=torch.float32)
            out = model(batch)
            chunks.append(torch.sigmoid(out.logits).cpu().numpy())
    model.train(was_training)
    scores = np.concatenate(chunks, axis=0)
    return evaluate_scores(scores, label_matrix, subset=subset,
                           ci_replicates=ci_replicates, ci_seed=ci_seed,
                           with_ci=with_ci)


@dataclass
class AblationRow:
    variant: str
    report: EvalReport


def ablation_table(rows: list[AblationRow]) -> str:
    """Variant name and macro AUC as "mean ± std" with three decimals."""
    if not rows:
        raise ValueError("ablation table needs at least one row")
    names = [r.variant for r in rows]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    width = max(len(n) for n in names + ["Model"])
    lines = [f"{'Model':<{width}}  Average AUC"]
    for r in rows:
        lines.append(f"{r.variant:<{width}}  "
                     f"{r.report.macro_auc:.3f} ± {r.report.macro_std:.3f}")
    return "\n".join(lines)


_ABLATION_ROW = re.compile(r"^(.*?)\s{2,}(\d\.\d{3}) ± (\d\.\d{3})\s*$")


def parse_ablation_table(text: str) -> list[tuple[str, float, float]]:
    out = []
    for line in text.splitlines()[1:]:
        m = _ABLATION_ROW.match(line)
        if m is None:
            raise ParseError(f"unparseable ablation row: {line!r}")
        out.append((m.group(1).strip(), float(m.group(2)), float(m.group(3))))
    return out


# --- externally supplied score/label files -----------------------------------

def _read_score_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (study_ids, finding_ids, value matrix)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "study_id":
                raise ParseError(f"{path}: first column must be study_id")
            finding_ids = header[1:]
            if not finding_ids:
                raise ParseError(f"{path}: no finding columns")
            for fid in finding_ids:
                finding_index(fid)  # UnknownFinding for junk columns
            ids, values = [], []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"{path}: row width {len(row)} != header {len(header)}")
                ids.append(row[0])
                values.append([float(v) for v in row[1:]])
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric cell ({exc})") from exc
    if not ids:
        raise ParseError(f"{path}: no data rows")
    return ids, finding_ids, np.asarray(values, dtype=np.float64)


def evaluate_external_scores(score_file, label_file, ci_replicates: int = 2000,
                             ci_seed: int = 0) -> EvalReport:
    """Score any dataset exported in the CSV schema, without running a model."""
    score_ids, score_findings, scores = _read_score_csv(score_file)
    label_ids, label_findings, labels = _read_score_csv(label_file)
    if score_findings != label_findings:
        raise IdMismatch(
            f"finding columns differ: {score_findings} vs {label_findings}")
    if score_ids != label_ids:
        raise IdMismatch("study_id sequences differ between score and label files")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ParseError(f"{label_file}: labels must be 0/1")
    return scores_labels_report(scores, labels.astype(np.int64), score_findings,
                                "external", ci_replicates, ci_seed)


def write_external_csv(path, study_ids, finding_ids, matrix) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study_id"] + list(finding_ids))
        for sid, row in zip(study_ids, matrix):
            writer.writerow([sid] + [repr(float(v)) for v in row])
