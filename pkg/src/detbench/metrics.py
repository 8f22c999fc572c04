"""Calibration-aware detector metrics: balanced accuracy, AUC, binary ECE,
balanced NLL, and grouped reports.

Conventions: `prob` is the predicted probability of the target (fake) class,
`label` is 1 for fake and 0 for real.  Balanced accuracy uses a fixed
threshold (0.5 by default) with prediction = [prob >= threshold].  The binary
ECE uses M equal-width bins on the target-class probability, bins left-open /
right-closed with 0 assigned to the first bin, and re-balances class
contributions with per-sample weights N / (2 * N_class) applied both to bin
masses and to the within-bin averages.  The balanced NLL averages the
per-class negative log-likelihoods with probabilities clamped to
[epsilon, 1 - epsilon].
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

DEFAULT_BINS = 15
DEFAULT_THRESHOLD = 0.5
DEFAULT_EPSILON = 1e-7


@dataclass(frozen=True)
class ScoreEntry:
    id: str
    group: str
    prob: float
    label: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob out of [0,1] for {self.id}: {self.prob}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1 for {self.id}: {self.label}")


@dataclass
class ScoreSet:
    """Paired detector outputs and ground truth, grouped by generator/source."""

    entries: list[ScoreEntry]
    threshold: float = DEFAULT_THRESHOLD
    hard_labels: bool = False

    def probs(self) -> np.ndarray:
        return np.array([e.prob for e in self.entries], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.group, None)
        return list(seen)

    def subset(self, group: str) -> "ScoreSet":
        return ScoreSet(
            [e for e in self.entries if e.group == group],
            threshold=self.threshold,
            hard_labels=self.hard_labels,
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "group", "prob", "label"])
            for e in self.entries:
                writer.writerow([e.id, e.group, repr(float(e.prob)), e.label])

    @classmethod
    def from_csv(cls, path: str | Path, threshold: float = DEFAULT_THRESHOLD) -> "ScoreSet":
        entries = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append(
                    ScoreEntry(row["id"], row["group"], float(row["prob"]), int(row["label"]))
                )
        return cls(entries, threshold=threshold)


def _split(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    probs, labels = scores.probs(), scores.labels()
    if len(probs) == 0:
        raise ValueError("empty score set")
    return probs, labels


def _require_both_classes(labels: np.ndarray, what: str) -> None:
    if labels.min(initial=1) == 1 or labels.max(initial=0) == 0:
        raise ValueError(f"{what} requires both classes present")


def balanced_accuracy(scores: ScoreSet) -> float:
    """Mean of per-class accuracies at the fixed threshold."""
    probs, labels = _split(scores)
    _require_both_classes(labels, "balanced accuracy")
    pred = probs >= scores.threshold
    acc_fake = float(np.mean(pred[labels == 1]))
    acc_real = float(np.mean(~pred[labels == 0]))
    return 0.5 * (acc_fake + acc_real)


def auc(scores: ScoreSet) -> float:
    """P(prob_fake > prob_real) + 0.5 P(tie), via the rank form of the
    Mann-Whitney U statistic; equals the trapezoidal ROC area."""
    probs, labels = _split(scores)
    _require_both_classes(labels, "AUC")
    n_fake = int(labels.sum())
    n_real = len(labels) - n_fake
    ranks = rankdata(probs)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_fake * (n_fake + 1) / 2.0
    return float(u / (n_fake * n_real))


def _class_weights(labels: np.ndarray) -> np.ndarray:
    n = len(labels)
    n_fake = int(labels.sum())
    n_real = n - n_fake
    w = np.empty(n, dtype=np.float64)
    if n_fake:
        w[labels == 1] = n / (2.0 * n_fake)
    if n_real:
        w[labels == 0] = n / (2.0 * n_real)
    return w


def bin_index(probs: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins on [0,1]: m-th bin is ((m-1)/M, m/M], 0 goes to bin 1.

    Returns 1-based bin indices.
    """
    idx = np.ceil(probs * bins).astype(np.int64)
    return np.clip(idx, 1, bins)


@dataclass
class BinStat:
    bin: int
    count_0: int
    count_1: int
    mean_pred: float
    weighted_actual: float


def binary_ece(scores: ScoreSet, bins: int = DEFAULT_BINS) -> float:
    return _ece_with_bins(scores, bins)[0]


def ece_diagnostics(scores: ScoreSet, bins: int = DEFAULT_BINS) -> list[BinStat]:
    return _ece_with_bins(scores, bins)[1]


def _ece_with_bins(scores: ScoreSet, bins: int) -> tuple[float, list[BinStat]]:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _split(scores)
    weights = _class_weights(labels)
    idx = bin_index(probs, bins)
    total_mass = weights.sum()
    ece = 0.0
    stats: list[BinStat] = []
    for m in range(1, bins + 1):
        sel = idx == m
        if not sel.any():
            continue
        mass = weights[sel].sum()
        pred = float(np.sum(weights[sel] * probs[sel]) / mass)
        actual = float(np.sum(weights[sel] * (labels[sel] == 1)) / mass)
        ece += (mass / total_mass) * abs(actual - pred)
        stats.append(
            BinStat(
                bin=m,
                count_0=int(np.sum(sel & (labels == 0))),
                count_1=int(np.sum(sel & (labels == 1))),
                mean_pred=pred,
                weighted_actual=actual,
            )
        )
    return float(ece), stats


def balanced_nll(scores: ScoreSet, epsilon: float = DEFAULT_EPSILON) -> float:
    probs, labels = _split(scores)
    _require_both_classes(labels, "balanced NLL")
    p = np.clip(probs, epsilon, 1.0 - epsilon)
    ll_fake = np.log(p[labels == 1]).mean()
    ll_real = np.log(1.0 - p[labels == 0]).mean()
    return float(-0.5 * ll_real - 0.5 * ll_fake)


@dataclass
class GroupMetrics:
    group: str
    n_real: int
    n_fake: int
    bacc: float | None
    auc: float | None
    ece: float | None
    nll: float | None
    note: str = ""


@dataclass
class MetricsReport:
    groups: list[GroupMetrics]
    aggregate: GroupMetrics
    bins: dict[str, list[BinStat]]
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def as_row(g: GroupMetrics) -> dict:
            return {
                "group": g.group,
                "n_real": g.n_real,
                "n_fake": g.n_fake,
                "bacc": g.bacc,
                "auc": g.auc,
                "ece": g.ece,
                "nll": g.nll,
                "note": g.note,
            }

        return {
            "groups": [as_row(g) for g in self.groups],
            "aggregate": as_row(self.aggregate),
            "config": self.config,
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        cols = ["group", "n_real", "n_fake", "bacc", "auc", "ece", "nll", "note"]
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for g in [*self.groups, self.aggregate]:
                writer.writerow(
                    [
                        g.group,
                        g.n_real,
                        g.n_fake,
                        *("" if v is None else f"{v:.6f}" for v in (g.bacc, g.auc, g.ece, g.nll)),
                        g.note,
                    ]
                )
        with open(out / "bins.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "bin", "count_0", "count_1", "mean_pred", "weighted_actual"])
            for group, stats in self.bins.items():
                for s in stats:
                    writer.writerow(
                        [group, s.bin, s.count_0, s.count_1, f"{s.mean_pred:.6f}", f"{s.weighted_actual:.6f}"]
                    )


def _group_metrics(scores: ScoreSet, group: str, bins: int, epsilon: float) -> GroupMetrics:
    labels = scores.labels()
    n_fake = int(labels.sum())
    n_real = len(labels) - n_fake
    single_class = n_fake == 0 or n_real == 0
    note = ""
    if single_class:
        # bAcc degrades to the accuracy over the classes present; ranking and
        # likelihood metrics are undefined.
        pred = scores.probs() >= scores.threshold
        accs = []
        if n_fake:
            accs.append(float(np.mean(pred[labels == 1])))
        if n_real:
            accs.append(float(np.mean(~pred[labels == 0])))
        bacc = float(np.mean(accs))
        note = "single class: auc/nll absent"
        return GroupMetrics(group, n_real, n_fake, bacc, None, None if scores.hard_labels else binary_ece(scores, bins), None, note)
    if scores.hard_labels:
        # hard 0/1 outputs: calibration metrics are meaningless
        return GroupMetrics(
            group, n_real, n_fake, balanced_accuracy(scores), auc(scores), None, None,
            note="hard labels: ece/nll absent",
        )
    return GroupMetrics(
        group,
        n_real,
        n_fake,
        balanced_accuracy(scores),
        auc(scores),
        binary_ece(scores, bins),
        balanced_nll(scores, epsilon),
        note,
    )


def build_report(
    scores: ScoreSet,
    bins: int = DEFAULT_BINS,
    epsilon: float = DEFAULT_EPSILON,
) -> MetricsReport:
    """Per-group metrics plus a macro-average row across groups.

    Groups missing a class get their AUC/NLL marked absent and are excluded
    from those columns' averages.
    """
    if not scores.entries:
        raise ValueError("empty score set")
    rows = []
    bin_stats: dict[str, list[BinStat]] = {}
    for group in scores.groups():
        sub = scores.subset(group)
        rows.append(_group_metrics(sub, group, bins, epsilon))
        if not scores.hard_labels:
            bin_stats[group] = ece_diagnostics(sub, bins)

    def macro(attr: str) -> float | None:
        vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    aggregate = GroupMetrics(
        "AVG",
        sum(r.n_real for r in rows),
        sum(r.n_fake for r in rows),
        macro("bacc"),
        macro("auc"),
        macro("ece"),
        macro("nll"),
    )
    config = {"bins": bins, "threshold": scores.threshold, "epsilon": epsilon}
    return MetricsReport(rows, aggregate, bin_stats, config)
