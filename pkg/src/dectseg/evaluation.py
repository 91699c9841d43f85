"""Dice metric, fold planning, cross-validation and alpha-study drivers, report files."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .cascade import fit_cascade, predict_stage1, predict_stage2, prepare_case
from .unet import save_checkpoint
from .volume import ORGAN_LABELS

log = logging.getLogger(__name__)

ORGAN_NAMES = tuple(ORGAN_LABELS.values())
SPLIT_RATIO = (5, 1, 1)


class FoldOverlapWarning(UserWarning):
    """Test windows of different folds share cases."""


def dice(pred, truth, organ):
    """``2|A & B| / (|A| + |B|)`` for the voxels labelled ``organ``; 1.0 when both are empty."""
    p = pred.values if hasattr(pred, "values") else np.asarray(pred)
    t = truth.values if hasattr(truth, "values") else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"dims mismatch: {p.shape} vs {t.shape}")
    a = p == organ
    b = t == organ
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def organ_dice(pred, truth):
    return {name: dice(pred, truth, label) for label, name in ORGAN_LABELS.items()}


# -- folds -------------------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train: list
    validation: list
    test: list


@dataclass
class FoldPlan:
    k: int
    seed: int
    window: int
    folds: list
    overlap: bool = False

    def describe_overlap(self):
        if not self.overlap:
            return ""
        n = sum(len(s) for s in (self.folds[0].train, self.folds[0].validation, self.folds[0].test))
        return (
            f"{self.k} folds x {self.window} test cases exceed the {n} available; "
            f"test windows wrap around and overlap across folds"
        )

    def to_dict(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "window": self.window,
            "overlap": self.overlap,
            "folds": [
                {"index": f.index, "train": f.train, "validation": f.validation, "test": f.test}
                for f in self.folds
            ],
        }


def make_folds(case_ids, k, seed, ratio=SPLIT_RATIO):
    """Circular-window ``train:validation:test`` splits after one seeded shuffle.

    Fold ``i`` tests on the window starting at ``i * w`` (``w = round(n * test / sum(ratio))``)
    and validates on the following window.
    """
    ids = list(case_ids)
    n = len(ids)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(set(ids)) != n:
        raise ValueError("case ids must be unique")
    if n < sum(ratio):
        raise ValueError(f"need at least {sum(ratio)} cases for a {ratio} split, got {n}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    window = max(1, int(round(n * ratio[2] / sum(ratio))))
    val_window = max(1, int(round(n * ratio[1] / sum(ratio))))
    folds = []
    for i in range(k):
        start = i * window
        test = [order[(start + j) % n] for j in range(window)]
        val = [order[(start + window + j) % n] for j in range(val_window)]
        taken = set(test) | set(val)
        train = [c for c in order if c not in taken]
        folds.append(Fold(i, train, val, test))
    plan = FoldPlan(k, seed, window, folds, overlap=k * window > n)
    if plan.overlap:
        warnings.warn(plan.describe_overlap(), FoldOverlapWarning, stacklevel=2)
    return plan


# -- reports -----------------------------------------------------------------------

@dataclass(frozen=True)
class DiceRecord:
    case_id: str
    fold: int
    alpha_train: float
    alpha_test: float
    organ: str
    dice: float


def aggregate(values):
    """``(avg, population sd, min, max)``."""
    v = np.asarray(values, np.float64)
    return float(v.mean()), float(v.std()), float(v.min()), float(v.max())


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, case_id, fold, alpha_train, alpha_test, scores):
        for organ in ORGAN_NAMES:
            self.records.append(DiceRecord(case_id, fold, alpha_train, alpha_test, organ, float(scores[organ])))

    def values(self, organ, **where):
        return [
            r.dice for r in self.records
            if r.organ == organ and all(getattr(r, k) == v for k, v in where.items())
        ]

    def aggregates(self, **where):
        return {organ: aggregate(self.values(organ, **where)) for organ in ORGAN_NAMES if self.values(organ, **where)}

    def extend(self, other):
        self.records.extend(other.records)
        self.notes.extend(n for n in other.notes if n not in self.notes)


@dataclass
class AlphaGrid:
    """Per-organ mean Dice for every ``alpha_train-alpha_test`` combination."""

    alpha_train: list
    alpha_test: list
    means: dict
    best: dict
    report: MetricsReport

    @property
    def rows(self):
        return [f"{a}-{b}" for a in self.alpha_train for b in self.alpha_test]


def flag_best(means, alpha_train, alpha_test):
    """Mark the best cell per organ within each alpha_train group; first best wins ties."""
    best = {}
    for a in alpha_train:
        for organ in ORGAN_NAMES:
            top = None
            for b in alpha_test:
                v = means[(a, b)][organ]
                if top is None or v > means[(a, top)][organ]:
                    top = b
            for b in alpha_test:
                best[(a, b, organ)] = b == top
    return best


# -- drivers -----------------------------------------------------------------------

def _load_cases(manifest, ids, alpha, threshold_hu):
    cases = []
    for cid in ids:
        pair, labels = manifest.load(cid)
        cases.append(prepare_case(pair, alpha, labels, threshold_hu))
    return cases


def fold_seed(seed, fold_index):
    return int(seed) * 1000 + 10 * int(fold_index)


@dataclass
class ExperimentSettings:
    """Everything a fold job needs besides the fold itself."""

    plan1: object
    plan2: object
    config: object
    seed: int = 0
    pretrained: tuple = (None, None)
    threshold_hu: float = -500.0
    use_validation: bool = True
    checkpoint_dir: object = None


def train_fold(manifest, fold, alpha_train, settings):
    """Train both stages on a fold's training split; returns ``(ckpt1, ckpt2)``."""
    train = _load_cases(manifest, fold.train, alpha_train, settings.threshold_hu)
    val = None
    if settings.use_validation:
        val = _load_cases(manifest, fold.validation, alpha_train, settings.threshold_hu)
    plan1 = replace(settings.plan1, alpha_training=alpha_train)
    plan2 = replace(settings.plan2, alpha_training=alpha_train)
    run_dir = None
    if settings.checkpoint_dir:
        run_dir = Path(settings.checkpoint_dir) / f"fold{fold.index}_a{alpha_train}"
        run_dir.mkdir(parents=True, exist_ok=True)
    ckpt1, ckpt2, _ = fit_cascade(
        train, plan1, plan2, fold_seed(settings.seed, fold.index), settings.config,
        validation=val, init=settings.pretrained, log_dir=run_dir,
    )
    if run_dir:
        save_checkpoint(ckpt1, run_dir / "stage1.ckpt")
        save_checkpoint(ckpt2, run_dir / "stage2.ckpt")
    return ckpt1, ckpt2


def evaluate_fold(manifest, fold, alpha_train, alpha_tests, ckpt1, ckpt2, threshold_hu=-500.0):
    """Cascade predictions on the fold's test split at every ``alpha_test``."""
    report = MetricsReport()
    net1, net2 = ckpt1.network(), ckpt2.network()
    for alpha_test in alpha_tests:
        for cid in fold.test:
            pair, labels = manifest.load(cid)
            case = prepare_case(pair, alpha_test, threshold_hu=threshold_hu)
            s1 = predict_stage1(case, ckpt1, net=net1)
            pred = predict_stage2(case, s1, ckpt2, net=net2)
            report.add(cid, fold.index, alpha_train, alpha_test, organ_dice(pred, labels))
    return report


def _run_fold_job(args):
    manifest, fold, alpha_train, alpha_tests, settings = args
    ckpt1, ckpt2 = train_fold(manifest, fold, alpha_train, settings)
    return evaluate_fold(manifest, fold, alpha_train, alpha_tests, ckpt1, ckpt2, settings.threshold_hu)


def _map_jobs(jobs, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_fold_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_run_fold_job, jobs))


def run_crossval(manifest, plan, settings, alpha_train=0.6, alpha_test=0.6, jobs=1):
    """Train and test every fold; returns the per-case, per-organ :class:`MetricsReport`.

    A failing fold aborts the run; records of the folds finished before it
    are attached to the raised exception as ``partial_report``.
    """
    report = MetricsReport()
    if plan.overlap:
        report.notes.append(plan.describe_overlap())
    job_args = [(manifest, fold, alpha_train, [alpha_test], settings) for fold in plan.folds]
    if jobs <= 1:
        for args in job_args:
            try:
                report.extend(_run_fold_job(args))
            except Exception as exc:
                exc.partial_report = report
                raise
    else:
        for part in _map_jobs(job_args, jobs):
            report.extend(part)
    return report


def run_alpha_study(manifest, plan, fold_index, alpha_train_set, alpha_test_set, settings, jobs=1):
    """One cascade per ``alpha_train`` on a single fold, tested at every ``alpha_test``."""
    fold = plan.folds[fold_index]
    alpha_train_set = [float(a) for a in alpha_train_set]
    alpha_test_set = [float(a) for a in alpha_test_set]
    report = MetricsReport()
    job_args = [(manifest, fold, a, alpha_test_set, settings) for a in alpha_train_set]
    for part in _map_jobs(job_args, jobs):
        report.extend(part)
    means = {}
    for a in alpha_train_set:
        for b in alpha_test_set:
            means[(a, b)] = {
                organ: float(np.mean(report.values(organ, alpha_train=a, alpha_test=b))) for organ in ORGAN_NAMES
            }
    return AlphaGrid(alpha_train_set, alpha_test_set, means, flag_best(means, alpha_train_set, alpha_test_set), report)


# -- report files --------------------------------------------------------------------

CSV_COLUMNS = ("case_id", "fold", "alpha_train", "alpha_test", "organ", "dice")


def records_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.records:
        writer.writerow([r.case_id, r.fold, repr(r.alpha_train), repr(r.alpha_test), r.organ, repr(r.dice)])
    return buf.getvalue()


def read_records_csv(path):
    report = MetricsReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            report.records.append(
                DiceRecord(
                    row["case_id"], int(row["fold"]), float(row["alpha_train"]),
                    float(row["alpha_test"]), row["organ"], float(row["dice"]),
                )
            )
    return report


def _num(v):
    return format(v, ".12g")


def aggregate_markdown(report, title="Dice coefficients"):
    aggs = report.aggregates()
    organs = [o for o in ORGAN_NAMES if o in aggs]
    lines = [f"# {title}", "", "| | " + " | ".join(organs) + " |", "|---|" + "---|" * len(organs)]
    for i, name in enumerate(("Avg.", "SD", "Min.", "Max.")):
        lines.append(f"| {name} | " + " | ".join(_num(aggs[o][i]) for o in organs) + " |")
    lines.append("")
    lines.append(f"Records: {len(report.records)}; SD is the population standard deviation over cases.")
    for note in report.notes:
        lines.append(f"Note: {note}")
    return "\n".join(lines) + "\n"


def alpha_grid_markdown(grid):
    lines = [
        "# Dice coefficients per alpha_train-alpha_test",
        "",
        "| alpha_train-alpha_test | " + " | ".join(ORGAN_NAMES) + " |",
        "|---|" + "---|" * len(ORGAN_NAMES),
    ]
    for a in grid.alpha_train:
        for b in grid.alpha_test:
            cells = []
            for organ in ORGAN_NAMES:
                text = f"{grid.means[(a, b)][organ]:.3f}"
                cells.append(f"**{text}**" if grid.best[(a, b, organ)] else text)
            lines.append(f"| {a}-{b} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Bold marks the best value per organ within each alpha_train group.")
    return "\n".join(lines) + "\n"


def dice_svg(report, width=640, height=360):
    """Strip plot with a box per organ; one point per record, coloured by fold."""
    organs = [o for o in ORGAN_NAMES if report.values(o)]
    folds = sorted({r.fold for r in report.records})
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    left, right, top, bottom = 50, 20, 20, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    lo = min(0.5, math.floor(min(r.dice for r in report.records) * 10) / 10)

    def ypos(v):
        return top + plot_h * (1.0 - (v - lo) / (1.0 - lo)) if 1.0 > lo else top

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for tick in np.linspace(lo, 1.0, 6):
        y = ypos(tick)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end">{tick:.2f}</text>')
    slot = plot_w / max(len(organs), 1)
    for i, organ in enumerate(organs):
        cx = left + slot * (i + 0.5)
        vals = np.asarray(report.values(organ))
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out.append(f'<g class="organ" id="organ-{escape(organ)}">')
        out.append(
            f'<rect x="{cx - slot * 0.2:.2f}" y="{ypos(q3):.2f}" width="{slot * 0.4:.2f}" '
            f'height="{max(ypos(q1) - ypos(q3), 0.5):.2f}" fill="none" stroke="black"/>'
        )
        out.append(
            f'<line x1="{cx - slot * 0.2:.2f}" y1="{ypos(med):.2f}" x2="{cx + slot * 0.2:.2f}" '
            f'y2="{ypos(med):.2f}" stroke="black" stroke-width="2"/>'
        )
        for r in (r for r in report.records if r.organ == organ):
            k = folds.index(r.fold)
            dx = (k - (len(folds) - 1) / 2) * slot * 0.3 / max(len(folds), 1)
            out.append(
                f'<circle cx="{cx + dx:.2f}" cy="{ypos(r.dice):.2f}" r="3" fill="{palette[k % len(palette)]}" '
                f'fill-opacity="0.8"><title>{escape(r.case_id)} fold {r.fold}: {r.dice:.4f}</title></circle>'
            )
        out.append(
            f'<text x="{cx:.2f}" y="{height - bottom + 16}" font-size="12" text-anchor="middle">'
            f"{escape(organ)}</text>"
        )
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report, out_dir, run_id="run", grid=None):
    """Write the records CSV, aggregate table, optional alpha grid and an SVG plot."""
    if not report.records:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "records": out / f"{run_id}_records.csv",
        "table": out / f"{run_id}_table.md",
        "plot": out / f"{run_id}_dice.svg",
    }
    files["records"].write_text(records_csv(report), encoding="utf-8")
    files["table"].write_text(aggregate_markdown(report), encoding="utf-8")
    files["plot"].write_text(dice_svg(report), encoding="utf-8")
    if grid is not None:
        files["alpha_grid"] = out / f"{run_id}_alpha_grid.md"
        files["alpha_grid"].write_text(alpha_grid_markdown(grid), encoding="utf-8")
    return files
