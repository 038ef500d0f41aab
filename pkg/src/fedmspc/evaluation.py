"""Fault-detection scoring, limit calibration, scenario comparison and diagnosis files."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FAULT, ExperimentSplit, PartitionedDataset
from .errors import InvalidInputError
from .mspc import PcaModel, fit_pca, is_fault, statistics, t2_contributions, q_contributions
from .protocol.inference import HolderMonitoring
from .protocol.roles import SessionConfig
from .protocol.session import fed_infer, fed_train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "fedmspc-report-v1"
SCENARIOS = ("Centralized", "LocalUnion", "Federated")


class DegenerateGridWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidInputError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_verdicts(cls, labels, verdicts) -> "ConfusionCounts":
        y = np.asarray(labels) == FAULT
        v = np.asarray(verdicts, dtype=bool)
        if y.shape != v.shape:
            raise InvalidInputError(f"{y.size} labels for {v.size} verdicts")
        return cls(
            tp=int(np.sum(y & v)),
            tn=int(np.sum(~y & ~v)),
            fp=int(np.sum(~y & v)),
            fn=int(np.sum(y & ~v)),
        )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def f1_score(c: ConfusionCounts) -> float:
    """``2tp / (2tp + fp + fn)``, or 0 when nothing was positive."""
    denom = 2 * c.tp + c.fp + c.fn
    return 0.0 if denom == 0 else 2 * c.tp / denom


# -- grid search ---------------------------------------------------------------


@dataclass(frozen=True)
class GridResult:
    t2_limit: float
    q_limit: float
    f1: float
    counts: ConfusionCounts


def _candidates(values: np.ndarray) -> np.ndarray:
    return np.append(np.unique(values), math.inf)


def grid_search_limits(t2, q, labels) -> GridResult:
    """Lowest (Q first, then T^2) pair of limits maximizing validation F1.

    Candidates are the observed T^2 and Q values plus ``+inf``. A sample is
    flagged when ``t2 > t2_limit or q > q_limit``. Since F1 only changes at
    observed values, the search over the candidate product is exhaustive.
    """
    t2 = np.asarray(t2, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() == FAULT
    if not (t2.shape == q.shape == y.shape):
        raise InvalidInputError("t2, q and labels must have the same length")
    if y.all() or not y.any():
        raise InvalidInputError("validation set needs both NOC and Fault samples")
    t2_grid, q_grid = _candidates(t2), _candidates(q)
    if t2_grid.size == 2 and q_grid.size == 2:
        warnings.warn("all validation statistics are identical; grid is degenerate", DegenerateGridWarning, stacklevel=2)

    n_pos = int(y.sum())
    # position of each sample's q in q_grid; sample flagged by q iff its position > limit position
    q_pos = np.searchsorted(q_grid, q)
    best = None  # (f1, -q_index, -t2_index)
    best_counts = None
    for ti, t_lim in enumerate(t2_grid):
        by_t2 = t2 > t_lim
        tp_t = int(np.sum(by_t2 & y))
        fp_t = int(np.sum(by_t2 & ~y))
        rest = ~by_t2
        # counts of remaining samples flagged by q for each q limit index
        pos_hist = np.bincount(q_pos[rest & y], minlength=q_grid.size)
        neg_hist = np.bincount(q_pos[rest & ~y], minlength=q_grid.size)
        # flagged when q_pos > qi: suffix sums excluding qi
        tp_q = np.concatenate([np.cumsum(pos_hist[::-1])[::-1][1:], [0]])
        fp_q = np.concatenate([np.cumsum(neg_hist[::-1])[::-1][1:], [0]])
        tp = tp_t + tp_q
        fp = fp_t + fp_q
        fn = n_pos - tp
        denom = 2 * tp + fp + fn
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
        qi = int(np.argmax(f1))  # first maximizer = lowest q limit
        key = (float(f1[qi]), -qi, -ti)
        if best is None or key > best:
            best = key
            best_counts = ConfusionCounts(
                tp=int(tp[qi]), tn=int((~y).sum() - fp[qi]), fp=int(fp[qi]), fn=int(fn[qi])
            )
    f1, neg_qi, neg_ti = best
    return GridResult(float(t2_grid[-neg_ti]), float(q_grid[-neg_qi]), f1, best_counts)


def calibrate_model(model: PcaModel, x_val, labels) -> tuple[PcaModel, GridResult]:
    t2, q = statistics(model, x_val)
    res = grid_search_limits(t2, q, labels)
    return model.with_limits(res.t2_limit, res.q_limit), res


# -- scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioReport:
    scenario: str  # Centralized | LocalUnion | Federated | Local:H<i>
    counts: ConfusionCounts
    f1: float
    t2_limit: float | list[float] | None = None
    q_limit: float | list[float] | None = None
    n_components: int | list[int] | None = None
    extension: bool = False

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "counts": self.counts.to_dict(),
            "f1": self.f1,
            "t2_limit": self.t2_limit,
            "q_limit": self.q_limit,
            "n_components": self.n_components,
            "extension": self.extension,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    variance_target: float = 0.9
    alpha: float = 0.05
    eigenvalue_scaling: str = "sigma_squared"
    limit_mode: str = "analytic"  # analytic | grid-search
    seed: int = 0
    session_id: str = "evaluate"
    runner: object = None  # transport runner for the federated scenario; None = bus

    def __post_init__(self):
        if self.limit_mode not in ("analytic", "grid-search"):
            raise InvalidInputError(f"limit_mode must be analytic or grid-search, got {self.limit_mode!r}")


@dataclass
class ScenarioOutcome:
    reports: list[ScenarioReport]
    central_model: PcaModel
    local_models: list[PcaModel]
    shares: list
    verdicts: dict[str, np.ndarray] = field(default_factory=dict)
    test_monitoring: list[HolderMonitoring] | None = None


def _fit_calibrated(x_train, x_val, y_val, cfg: ScenarioConfig, names=None) -> PcaModel:
    grid = cfg.limit_mode == "grid-search"
    model = fit_pca(
        x_train,
        cfg.variance_target,
        cfg.alpha,
        cfg.eigenvalue_scaling,
        strict_limits=not grid,
        variable_names=names,
    )
    if grid:
        model, _ = calibrate_model(model, x_val, y_val)
    return model


def run_scenarios(data: PartitionedDataset, split: ExperimentSplit, cfg: ScenarioConfig | None = None) -> ScenarioOutcome:
    """Centralized, per-holder (OR-combined) and federated models evaluated on ``split.test``.

    With ``limit_mode="grid-search"`` each model's limits are tuned on
    ``split.validation``. Per-holder rows are returned as extensions.
    """
    cfg = cfg or ScenarioConfig()
    blocks = data.matrices()
    names = data.column_names()
    train = [b[split.train] for b in blocks]
    val = [b[split.validation] for b in blocks]
    test = [b[split.test] for b in blocks]
    y_val = data.labels[split.validation]
    y_test = data.labels[split.test]
    if cfg.limit_mode == "grid-search" and split.validation.size == 0:
        raise InvalidInputError("grid-search limits need a validation split")

    def report(name, verdicts, **extra):
        counts = ConfusionCounts.from_verdicts(y_test, verdicts)
        return ScenarioReport(name, counts, f1_score(counts), **extra)

    reports, verdicts = [], {}

    # centralized
    all_names = [n for ns in names for n in ns]
    central = _fit_calibrated(np.hstack(train), np.hstack(val), y_val, cfg, all_names)
    t2, q = statistics(central, np.hstack(test))
    verdicts["Centralized"] = is_fault(t2, q, central.t2_limit, central.q_limit)
    reports.append(
        report("Centralized", verdicts["Centralized"], t2_limit=central.t2_limit, q_limit=central.q_limit,
               n_components=central.n_components)
    )

    # local models, union verdict
    local_models, local_verdicts = [], []
    for tr, va, te, ns in zip(train, val, test, names):
        mdl = _fit_calibrated(tr, va, y_val, cfg, ns)
        lt2, lq = statistics(mdl, te)
        local_models.append(mdl)
        local_verdicts.append(is_fault(lt2, lq, mdl.t2_limit, mdl.q_limit))
    verdicts["LocalUnion"] = np.logical_or.reduce(local_verdicts)
    reports.append(
        report(
            "LocalUnion",
            verdicts["LocalUnion"],
            t2_limit=[m.t2_limit for m in local_models],
            q_limit=[m.q_limit for m in local_models],
            n_components=[m.n_components for m in local_models],
        )
    )

    # federated
    session = SessionConfig(
        session_id=cfg.session_id,
        column_counts=tuple(b.shape[1] for b in blocks),
        row_count=split.train.size,
        variance_target=cfg.variance_target,
        alpha=cfg.alpha,
        eigenvalue_scaling=cfg.eigenvalue_scaling,
        seeds={"master": cfg.seed},
        strict_limits=cfg.limit_mode != "grid-search",
    )
    kwargs = {} if cfg.runner is None else {"runner": cfg.runner}
    shares, _ = fed_train(session, train, variable_names=names, **kwargs)
    if cfg.limit_mode == "grid-search":
        mon, _ = fed_infer(session, val, shares, run="validation", **kwargs)
        res = grid_search_limits(mon[0].t2, mon[0].q, y_val)
        shares = [s.with_limits(res.t2_limit, res.q_limit) for s in shares]
    mon, _ = fed_infer(session, test, shares, sample_ids=split.test.tolist(), run="test", **kwargs)
    verdicts["Federated"] = mon[0].is_fault
    reports.append(
        report("Federated", verdicts["Federated"], t2_limit=shares[0].t2_limit, q_limit=shares[0].q_limit,
               n_components=shares[0].n_components)
    )

    for i, (mdl, v) in enumerate(zip(local_models, local_verdicts), start=1):
        reports.append(
            report(f"Local:H{i}", v, t2_limit=mdl.t2_limit, q_limit=mdl.q_limit, n_components=mdl.n_components,
                   extension=True)
        )
    return ScenarioOutcome(reports, central, local_models, shares, verdicts, mon)


def write_report(reports: Sequence[ScenarioReport], path, extra: dict | None = None) -> None:
    doc = {"schema": REPORT_SCHEMA, "scenarios": [r.to_dict() for r in reports]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# -- diagnosis ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiagnosisReport:
    """Contributions of one sample restricted to one holder's columns."""

    sample_id: int
    holder: int
    names: list[str]
    t2_contrib: np.ndarray
    q_contrib: np.ndarray
    t2: float
    q: float
    t2_limit: float
    q_limit: float
    batch_shape: tuple[int, int] | None = None  # (J, K) of this holder's block
    variables: list[str] | None = None  # batch variable names (length J)


def reports_from_federated(
    monitorings: Sequence[HolderMonitoring],
    names: Sequence[Sequence[str]],
    batch_shapes: Sequence[tuple[int, int] | None] | None = None,
    variables: Sequence[Sequence[str]] | None = None,
) -> list[DiagnosisReport]:
    out = []
    for h, mon in enumerate(monitorings):
        for row, sid in enumerate(mon.sample_ids):
            out.append(
                DiagnosisReport(
                    sample_id=sid,
                    holder=mon.index,
                    names=list(names[h]),
                    t2_contrib=mon.t2_contrib[row],
                    q_contrib=mon.q_contrib[row],
                    t2=float(mon.t2[row]),
                    q=float(mon.q[row]),
                    t2_limit=mon.t2_limit,
                    q_limit=mon.q_limit,
                    batch_shape=batch_shapes[h] if batch_shapes else None,
                    variables=list(variables[h]) if variables else None,
                )
            )
    return out


def reports_from_model(model: PcaModel, x, column_counts: Sequence[int], names: Sequence[str],
                       sample_ids: Sequence[int] | None = None) -> list[DiagnosisReport]:
    """Split a centralized model's contributions into per-holder reports."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t2, q = statistics(model, x)
    xs = (x - model.mean) / model.scale
    t = xs @ model.loadings
    t2c = t2_contributions(model, t)
    qc = q_contributions(xs - t @ model.loadings.T)
    edges = np.cumsum([0, *column_counts])
    ids = list(range(x.shape[0])) if sample_ids is None else list(sample_ids)
    out = []
    for row, sid in enumerate(ids):
        for h in range(len(column_counts)):
            sl = slice(edges[h], edges[h + 1])
            out.append(
                DiagnosisReport(sid, h + 1, list(names[sl]), t2c[row, sl], qc[row, sl], float(t2[row]),
                                float(q[row]), model.t2_limit, model.q_limit)
            )
    return out


def _bar_svg(names: Sequence[str], values: np.ndarray, title: str, boundaries: Sequence[int] = ()) -> ET.Element:
    bar_w, gap, height, pad = 12, 2, 200, 30
    width = pad * 2 + len(names) * (bar_w + gap)
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", version="1.1",
                     width=str(width), height=str(height + 2 * pad))
    ET.SubElement(svg, "title").text = title
    top = float(np.max(np.abs(values))) if len(values) else 0.0
    top = top if top > 0 else 1.0
    zero = pad + height / 2 if np.any(values < 0) else pad + height
    span = height / 2 if np.any(values < 0) else height
    for i, (name, v) in enumerate(zip(names, values)):
        h = abs(float(v)) / top * span
        y = zero - h if v >= 0 else zero
        rect = ET.SubElement(svg, "rect", x=f"{pad + i * (bar_w + gap)}", y=f"{y:.4f}", width=str(bar_w),
                             height=f"{h:.4f}", fill="#4472c4")
        ET.SubElement(rect, "title").text = f"{name}: {float(v)!r}"
    for b in boundaries:
        x = pad + b * (bar_w + gap) - gap / 2
        ET.SubElement(svg, "line", x1=f"{x}", x2=f"{x}", y1=str(pad), y2=str(pad + height), stroke="black",
                      **{"stroke-dasharray": "4,3"})
    ET.SubElement(svg, "line", x1=str(pad), x2=str(width - pad), y1=f"{zero}", y2=f"{zero}", stroke="gray")
    return svg


def _write_svg(svg: ET.Element, path: Path) -> None:
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def emit_diagnosis(reports: Sequence[DiagnosisReport], out_dir, combined: bool = False) -> list[Path]:
    """Write per-holder contribution CSV and SVG files.

    Each holder's files only carry that holder's variables. Batch reports
    also get a ``_surface.csv`` with one row per (variable, time). With
    ``combined=True`` (simulation only, where one process sees every holder)
    an ``diagnosis_all_<sample>.svg`` shows all holders with dashed borders.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for rep in reports:
        stem = out / f"diagnosis_H{rep.holder}_{rep.sample_id}"
        with open(f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "t2_contrib", "q_contrib"])
            for name, a, b in zip(rep.names, rep.t2_contrib, rep.q_contrib):
                w.writerow([name, repr(float(a)), repr(float(b))])
        written.append(Path(f"{stem}.csv"))
        title = f"Q contributions, holder {rep.holder}, sample {rep.sample_id} (Q={rep.q:.6g}, limit={rep.q_limit:.6g})"
        _write_svg(_bar_svg(rep.names, np.asarray(rep.q_contrib), title), Path(f"{stem}.svg"))
        written.append(Path(f"{stem}.svg"))
        if rep.batch_shape is not None:
            n_vars, n_time = rep.batch_shape
            var_names = rep.variables or [f"v{j + 1}" for j in range(n_vars)]
            with open(f"{stem}_surface.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["variable", "time", "t2_contrib", "q_contrib"])
                column_map = [(k, j) for k in range(n_time) for j in range(n_vars)]
                for col, (k, j) in enumerate(column_map):
                    w.writerow([var_names[j], k + 1, repr(float(rep.t2_contrib[col])), repr(float(rep.q_contrib[col]))])
            written.append(Path(f"{stem}_surface.csv"))
    if combined:
        by_sample: dict[int, list[DiagnosisReport]] = {}
        for rep in reports:
            by_sample.setdefault(rep.sample_id, []).append(rep)
        for sid, reps in by_sample.items():
            reps = sorted(reps, key=lambda r: r.holder)
            names = [n for r in reps for n in r.names]
            values = np.concatenate([r.q_contrib for r in reps])
            bounds = list(np.cumsum([len(r.names) for r in reps])[:-1])
            path = out / f"diagnosis_all_{sid}.svg"
            _write_svg(_bar_svg(names, values, f"Q contributions, sample {sid}", bounds), path)
            written.append(path)
    return written
