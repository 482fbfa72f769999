"""Ranking metrics, decision metrics and report assembly."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .anomaly import gamma_quantile
from .dsp import FrequencyBand
from .errors import DegenerateSample, InvalidGrid, InvalidP, IoFailure, OneClassOnly

logger = logging.getLogger(__name__)

COLUMNS = ("machine", "section", "domain", "band_lo_hz", "band_hi_hz", "q",
           "metric", "value", "n_normal", "n_anomaly")
ALL = "all"
FORMATS = ("csv", "markdown", "plotdata")
THRESHOLD_NOTE = ("AUC and pAUC do not depend on the threshold; the threshold sweep "
                  "reports decision-level precision, recall, F1 and FPR per q")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = anomaly
    strata: list = field(default_factory=list)  # (machine, section, domain) per score

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if len(self.scores) != len(self.labels):
            raise ValueError("scores and labels differ in length")
        if self.strata and len(self.strata) != len(self.scores):
            raise ValueError("strata and scores differ in length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 (normal) or 1 (anomaly)")

    def __len__(self):
        return len(self.scores)

    @property
    def n_normal(self) -> int:
        return int(np.sum(self.labels == 0))

    @property
    def n_anomaly(self) -> int:
        return int(np.sum(self.labels == 1))

    def subset(self, mask) -> "ScoredSet":
        mask = np.asarray(mask, dtype=bool)
        strata = [s for s, keep in zip(self.strata, mask) if keep] if self.strata else []
        return ScoredSet(self.scores[mask], self.labels[mask], strata)

    def require_both(self) -> None:
        if self.n_normal == 0 or self.n_anomaly == 0:
            raise OneClassOnly(
                f"need both classes, got {self.n_normal} normal / {self.n_anomaly} anomalous")


def _as_set(s, labels=None) -> ScoredSet:
    return s if isinstance(s, ScoredSet) else ScoredSet(s, labels)


def auc(scores, labels=None) -> float:
    """Mann-Whitney U / (n_anomaly * n_normal), ties worth one half."""
    s = _as_set(scores, labels)
    s.require_both()
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(s))
    # average 1-based rank within runs of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2
    n1, n0 = s.n_anomaly, s.n_normal
    u = ranks[s.labels == 1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


def roc_curve(scores, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) vertices from (0, 0) to (1, 1), one per distinct score."""
    s = _as_set(scores, labels)
    s.require_both()
    order = np.argsort(-s.scores, kind="mergesort")
    sc, lab = s.scores[order], s.labels[order]
    last = np.r_[sc[1:] != sc[:-1], True]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(1 - lab)[last]
    fpr = np.r_[0.0, fp / s.n_normal]
    tpr = np.r_[0.0, tp / s.n_anomaly]
    return fpr, tpr


def pauc(scores, labels=None, p: float = 0.1) -> float:
    """ROC area over FPR in [0, p], interpolated at p, divided by p."""
    if not 0 < p <= 1:
        raise InvalidP(f"p must lie in (0, 1], got {p}")
    fpr, tpr = roc_curve(scores, labels)
    area = 0.0
    for i in range(1, len(fpr)):
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], tpr[i - 1], tpr[i]
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return float(area / p)


def decision_metrics(scores, labels, threshold: float) -> dict:
    """Precision, recall, F1 and FPR of the rule ``score > threshold``.

    Undefined ratios (no predicted positives, no anomalies, no normals) are NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    nan = float("nan")
    precision = tp / (tp + fp) if tp + fp else nan
    recall = tp / (tp + fn) if tp + fn else nan
    if math.isnan(precision) or math.isnan(recall):
        f1 = nan
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    fpr = fp / (fp + tn) if fp + tn else nan
    return {"precision": precision, "recall": recall, "f1": f1, "fpr": fpr}


# --------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # dicts keyed by COLUMNS
    notes: list = field(default_factory=list)  # free-text lines (skipped strata, caveats)

    def add(self, machine, section, domain, band, q, metric, value, n_normal, n_anomaly):
        self.rows.append({
            "machine": machine, "section": section, "domain": domain,
            "band_lo_hz": float(band.f_lo), "band_hi_hz": float(band.f_hi),
            "q": "" if q is None else float(q), "metric": metric, "value": float(value),
            "n_normal": int(n_normal), "n_anomaly": int(n_anomaly)})

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.notes.extend(n for n in other.notes if n not in self.notes)

    def value(self, metric, **where) -> float:
        hits = [r["value"] for r in self.rows if r["metric"] == metric
                and all(r[k] == v for k, v in where.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {metric} {where}")
        return hits[0]

    def bands(self) -> list[FrequencyBand]:
        seen = []
        for r in self.rows:
            b = FrequencyBand(r["band_lo_hz"], r["band_hi_hz"])
            if b not in seen:
                seen.append(b)
        return seen


def _strata_masks(s: ScoredSet):
    """(machine, section, domain, mask) for every section x domain, with pooled 'all' rows."""
    machines = sorted({m for m, _, _ in s.strata})
    sections = sorted({sec for _, sec, _ in s.strata})
    out = []
    for m in machines:
        for sec in sections + [ALL]:
            for dom in ("source", "target", ALL):
                mask = np.array([mm == m and (sec == ALL or ss == sec) and (dom == ALL or dd == dom)
                                 for mm, ss, dd in s.strata], dtype=bool)
                if mask.any():
                    out.append((m, sec, dom, mask))
    return out


def evaluate_scores(scored: ScoredSet, band: FrequencyBand, pauc_p: float = 0.1) -> EvalReport:
    """AUC and pAUC for every stratum holding both classes.

    Strata missing a class are listed in ``notes``; if no stratum can be
    scored at all OneClassOnly is raised.
    """
    report = EvalReport()
    for m, sec, dom, mask in _strata_masks(scored):
        sub = scored.subset(mask)
        try:
            a, pa = auc(sub), pauc(sub, p=pauc_p)
        except OneClassOnly as exc:
            report.notes.append(f"OneClassOnly in {m} section {sec} domain {dom}: {exc}")
            continue
        for metric, v in (("auc", a), ("pauc", pa)):
            report.add(m, sec, dom, band, None, metric, v, sub.n_normal, sub.n_anomaly)
    if not report.rows:
        raise OneClassOnly("no stratum contains both normal and anomalous clips")
    return report


def run_threshold_sweep(reference, scored: ScoredSet, grid: Iterable[float],
                        band: FrequencyBand | None = None) -> EvalReport:
    """Decision metrics of the Gamma-quantile rule for each q in ``grid``.

    ``reference`` is one ReferenceModel or a mapping from section to
    ReferenceModel; each clip is judged against its own section's threshold.
    """
    grid = [float(q) for q in grid]
    if not grid or any(not 0 < q < 1 for q in grid):
        raise InvalidGrid(f"threshold grid must be non-empty with values in (0, 1): {grid}")
    if len(set(grid)) != len(grid):
        raise InvalidGrid("threshold grid has duplicates")
    band = band or FrequencyBand(0.0, 0.0)
    refs: Mapping = reference if isinstance(reference, Mapping) else None
    for ref in (refs.values() if refs is not None else [reference]):
        if ref.gamma is None:
            raise DegenerateSample("a reference has no Gamma fit; cannot sweep thresholds")
    report = EvalReport(notes=[THRESHOLD_NOTE])
    for q in grid:
        if refs is None:
            thr = np.full(len(scored), gamma_quantile(reference.gamma, q))
        else:
            cache = {sec: gamma_quantile(ref.gamma, q) for sec, ref in refs.items()}
            thr = np.array([cache[sec] for _, sec, _ in scored.strata])
        strata = _strata_masks(scored) if scored.strata else [("", ALL, ALL, np.ones(len(scored), bool))]
        for m, sec, dom, mask in strata:
            dm = decision_metrics(scored.scores[mask] - thr[mask], scored.labels[mask], 0.0)
            n0 = int(np.sum(scored.labels[mask] == 0))
            for metric, v in dm.items():
                report.add(m, sec, dom, band, q, metric, v, n0, int(mask.sum()) - n0)
    return report


def run_band_sweep(bands: Iterable[FrequencyBand],
                   evaluate_band: Callable[[FrequencyBand], EvalReport],
                   flush_path=None) -> EvalReport:
    """Run the full pipeline once per band and merge the reports in band order.

    The merged report is rewritten to ``flush_path`` after every band, so a
    failure part-way keeps the finished bands on disk.
    """
    report = EvalReport()
    for band in bands:
        logger.info("band %s", band.label)
        try:
            report.extend(evaluate_band(band))
        finally:
            if flush_path is not None:
                emit_report(report, "csv", flush_path)
    return report


def best_band(report: EvalReport, machine: str, domain: str = ALL, metric: str = "auc"):
    scores = [(r["value"], FrequencyBand(r["band_lo_hz"], r["band_hi_hz"]))
              for r in report.rows if r["metric"] == metric and r["machine"] == machine
              and r["domain"] == domain and r["section"] == ALL]
    if not scores:
        raise KeyError(f"no {metric} rows for {machine}/{domain}")
    return max(scores, key=lambda t: t[0])[1]


# --------------------------------------------------------------------------
# Emission


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    for note in report.notes:
        buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def _parse_section(text):
    return text if text == ALL else int(text)


def report_from_csv(text: str) -> EvalReport:
    lines = text.splitlines()
    notes = [ln[2:] for ln in lines if ln.startswith("# ")]
    body = [ln for ln in lines if not ln.startswith("# ")]
    rows = []
    for rec in csv.DictReader(body):
        rows.append({
            "machine": rec["machine"], "section": _parse_section(rec["section"]),
            "domain": rec["domain"], "band_lo_hz": float(rec["band_lo_hz"]),
            "band_hi_hz": float(rec["band_hi_hz"]),
            "q": "" if rec["q"] == "" else float(rec["q"]), "metric": rec["metric"],
            "value": float(rec["value"]), "n_normal": int(rec["n_normal"]),
            "n_anomaly": int(rec["n_anomaly"])})
    return EvalReport(rows, notes)


def _band_name(lo, hi) -> str:
    return f"{lo / 1000:g}-{hi / 1000:g} kHz"


def report_to_markdown(report: EvalReport, domain: str = ALL) -> str:
    """Machines as rows, one AUC/pAUC column (in percent) per band."""
    cols = []
    for r in report.rows:
        key = (r["band_lo_hz"], r["band_hi_hz"])
        if r["metric"] in ("auc", "pauc") and key not in cols:
            cols.append(key)
    machines = sorted({r["machine"] for r in report.rows if r["metric"] == "auc"})
    cell = {}
    for r in report.rows:
        if r["section"] == ALL and r["domain"] == domain and r["metric"] in ("auc", "pauc"):
            cell[(r["machine"], r["band_lo_hz"], r["band_hi_hz"], r["metric"])] = r["value"]
    out = ["| Machine | " + " | ".join(_band_name(*c) for c in cols) + " |",
           "|---|" + "---|" * len(cols)]
    for m in machines:
        vals = []
        for lo, hi in cols:
            a, p = cell.get((m, lo, hi, "auc")), cell.get((m, lo, hi, "pauc"))
            vals.append("-" if a is None else f"{100 * a:.1f}/{100 * p:.1f}")
        out.append(f"| {m} | " + " | ".join(vals) + " |")
    text = f"AUC/pAUC (%) on the test set, domain: {domain}\n\n" + "\n".join(out) + "\n"
    for note in report.notes:
        text += f"\n> {note}"
    return text + ("\n" if report.notes else "")


PLOT_COLUMNS = ("machine", "band_lo_hz", "band_hi_hz", "domain", "q", "metric", "value")


def report_to_plotdata(report: EvalReport) -> str:
    """Long-form table: section-pooled rows only, one per (machine, band, domain, q, metric)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for r in report.rows:
        if r["section"] == ALL:
            w.writerow([_fmt(r[c]) for c in PLOT_COLUMNS])
    return buf.getvalue()


def emit_report(report: EvalReport, fmt: str, path) -> Path:
    render = {"csv": report_to_csv, "markdown": report_to_markdown,
              "plotdata": report_to_plotdata}.get(fmt)
    if render is None:
        raise ValueError(f"format must be one of {FORMATS}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(render(report))
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc
    return path
