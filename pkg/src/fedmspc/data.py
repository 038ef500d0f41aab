"""Dataset ingestion, cleaning, vertical partitioning, splitting and synthetic data."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .batch import fold_batchwise, unfold_batchwise
from .errors import InvalidInputError

log = logging.getLogger(__name__)

NOC, FAULT = 0, 1
DATASET_SCHEMA = "fedmspc-dataset-v1"
ZERO_SD = 1e-12
STAWFD_FRACTIONS = (482 / 648, 83 / 648, 83 / 648)
# SECOM keeps no validation set: analytic limits, all faults in the test set
SECOM_FRACTIONS = (488 / 562, 0.0, 74 / 562)


class DataWarning(UserWarning):
    pass


@dataclass(eq=False)
class LabeledDataset:
    """Samples (rows of a matrix or batches of a tensor) with NOC/Fault labels."""

    x: np.ndarray  # (m, n) or (I, J, K)
    labels: np.ndarray  # 0 = NOC, 1 = Fault
    variable_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.x.shape[0],):
            raise InvalidInputError(f"{self.labels.size} labels for {self.x.shape[0]} samples")
        if len(set(self.variable_names)) != len(self.variable_names):
            raise InvalidInputError("variable names must be unique")
        width = self.x.shape[1] if self.x.ndim >= 2 else 0
        if self.x.shape[0] and len(self.variable_names) != width:
            raise InvalidInputError(f"{len(self.variable_names)} names for {width} variables")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class VerticalSplit:
    holder_columns: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "holder_columns", tuple(tuple(c) for c in self.holder_columns))
        seen: set[str] = set()
        for cols in self.holder_columns:
            overlap = seen.intersection(cols)
            if overlap:
                raise InvalidInputError(f"variables assigned to more than one holder: {sorted(overlap)}")
            seen.update(cols)

    @property
    def all_columns(self) -> list[str]:
        return [c for cols in self.holder_columns for c in cols]


@dataclass(eq=False)
class PartitionedDataset:
    """Vertically partitioned data: one block per holder, shared sample axis and labels."""

    blocks: list[np.ndarray]  # (m, n_i) matrices or (I, J_i, K_i) tensors
    labels: np.ndarray
    holder_names: list[list[str]]  # variable names per holder
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        for b in self.blocks:
            if b.shape[0] != self.labels.shape[0]:
                raise InvalidInputError("every holder block must share the sample axis")

    @property
    def g(self) -> int:
        return len(self.blocks)

    @property
    def is_batch(self) -> bool:
        return self.blocks[0].ndim == 3

    def take(self, idx) -> "PartitionedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PartitionedDataset([b[idx] for b in self.blocks], self.labels[idx], self.holder_names, dict(self.meta))

    def matrices(self) -> list[np.ndarray]:
        """Per-holder 2-D views (tensors are batch-wise unfolded)."""
        return [unfold_batchwise(b).matrix if b.ndim == 3 else b for b in self.blocks]

    def column_names(self) -> list[list[str]]:
        """Names of the 2-D columns per holder (``var@t<k>`` for unfolded tensors)."""
        out = []
        for b, names in zip(self.blocks, self.holder_names):
            if b.ndim == 3:
                out.append([f"{names[j]}@t{k + 1}" for k in range(b.shape[2]) for j in range(b.shape[1])])
            else:
                out.append(list(names))
        return out


@dataclass(frozen=True)
class ExperimentSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "validation": self.validation.tolist(), "test": self.test.tolist()}


# -- partitioning -----------------------------------------------------------------


def load_vertical_split(path=None) -> VerticalSplit:
    """The bundled two-holder SECOM variable grouping, or a user file with the same layout."""
    if path is None:
        text = resources.files("fedmspc.resources").joinpath("secom_variables.json").read_text()
    else:
        text = Path(path).read_text()
    return VerticalSplit(json.loads(text)["holders"])


def partition_columns(ds: LabeledDataset, split: VerticalSplit) -> PartitionedDataset:
    index = {name: i for i, name in enumerate(ds.variable_names)}
    missing = [c for c in split.all_columns if c not in index]
    if missing:
        raise InvalidInputError(f"unknown variables {missing}")
    blocks = [ds.x[:, [index[c] for c in cols]] for cols in split.holder_columns]
    return PartitionedDataset(blocks, ds.labels, [list(c) for c in split.holder_columns], dict(ds.meta))


# -- loaders ------------------------------------------------------------------------


def load_secom(features_path, labels_path, selected_variables: Sequence[str] | None = None) -> LabeledDataset:
    """Read the SECOM feature and label files.

    Features are whitespace separated with ``NaN`` for missing entries;
    variables are named ``S1`` .. ``Sn`` by 1-based column. The first column
    of the label file is -1 (pass) or 1 (fail). Columns are restricted to
    ``selected_variables`` first, then rows with any missing value are
    dropped.
    """
    x = np.loadtxt(features_path, dtype=np.float64, ndmin=2)
    with open(labels_path) as fh:
        raw_labels = [line.split()[0] for line in fh if line.strip()]
    if len(raw_labels) != x.shape[0]:
        raise InvalidInputError(f"{x.shape[0]} feature rows but {len(raw_labels)} label rows")
    labels = np.array([FAULT if int(float(v)) == 1 else NOC for v in raw_labels], dtype=np.int64)
    names = [f"S{k + 1}" for k in range(x.shape[1])]
    if selected_variables is not None:
        index = {n: i for i, n in enumerate(names)}
        unknown = [v for v in selected_variables if v not in index]
        if unknown:
            raise InvalidInputError(f"unknown variables {unknown}; available: {names[0]}..{names[-1]}")
        x = x[:, [index[v] for v in selected_variables]]
        names = list(selected_variables)
    keep = ~np.isnan(x).any(axis=1)
    if not keep.any():
        warnings.warn("every row has a missing value; dataset is empty", DataWarning, stacklevel=2)
    return LabeledDataset(x[keep], labels[keep], names, {"source": "secom", "dropped_rows": int((~keep).sum())})


_FAULT_TOKENS = {"1", "1.0", "fault", "faulty", "anomaly", "true", "abnormal"}
_NORMAL_TOKENS = {"0", "0.0", "-1", "-1.0", "normal", "noc", "false", "ok"}


def load_stawfd(
    path,
    required_length: int = 110,
    step_lengths: tuple[int, int] = (65, 45),
    batch_column: str = "batch",
    step_column: str = "step",
    label_column: str = "label",
) -> PartitionedDataset:
    """Read a long-format batch CSV into two step-wise holder tensors.

    Expected layout: one row per time point, rows of a batch in time order,
    with a batch id column, a step column (1 or 2), a label column and one
    column per process variable. Batches whose length differs from
    ``required_length`` or whose step lengths differ from ``step_lengths``
    are excluded; rows with a missing step annotation exclude their batch.
    A batch is faulty if any of its rows is labeled faulty.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in (batch_column, step_column, label_column):
            if col not in fields:
                raise InvalidInputError(f"column {col!r} missing from {path}")
        var_names = [f for f in fields if f not in (batch_column, step_column, label_column)]
        batches: dict[str, list[dict]] = {}
        for row in reader:
            batches.setdefault(row[batch_column], []).append(row)

    k1, k2 = step_lengths
    kept1, kept2, labels, ids = [], [], [], []
    skipped_length = skipped_annotation = 0
    for bid, rows in batches.items():
        if len(rows) != required_length:
            skipped_length += 1
            continue
        steps = [r[step_column].strip() for r in rows]
        if any(s in ("", "nan", "NaN") for s in steps):
            skipped_annotation += 1
            continue
        step_vals = [int(float(s)) for s in steps]
        if step_vals.count(1) != k1 or step_vals.count(2) != k2:
            skipped_annotation += 1
            continue
        values = np.array([[float(r[v]) for v in var_names] for r in rows])  # K x J
        if not np.all(np.isfinite(values)):
            skipped_annotation += 1
            continue
        s1 = np.array(step_vals) == 1
        kept1.append(values[s1].T)
        kept2.append(values[~s1].T)
        tokens = {r[label_column].strip().lower() for r in rows}
        unknown = tokens - _FAULT_TOKENS - _NORMAL_TOKENS
        if unknown:
            raise InvalidInputError(f"batch {bid}: unrecognised labels {sorted(unknown)}")
        labels.append(FAULT if tokens & _FAULT_TOKENS else NOC)
        ids.append(bid)
    if skipped_annotation:
        warnings.warn(f"{skipped_annotation} batches skipped for missing/inconsistent step annotation", DataWarning, stacklevel=2)
    if not kept1:
        raise InvalidInputError("no batch satisfies the length requirements")
    meta = {
        "source": "st-awfd",
        "batch_ids": ids,
        "skipped_length": skipped_length,
        "skipped_annotation": skipped_annotation,
    }
    return PartitionedDataset([np.stack(kept1), np.stack(kept2)], np.array(labels), [var_names, var_names], meta)


# -- standardization ----------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    names: tuple[str, ...]  # all columns seen at fit time
    kept: tuple[str, ...]
    dropped: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    @property
    def kept_index(self) -> np.ndarray:
        pos = {n: i for i, n in enumerate(self.names)}
        return np.array([pos[n] for n in self.kept], dtype=np.int64)


def standardize_fit(x_train, names: Sequence[str] | None = None) -> Standardizer:
    """Column means and sample standard deviations; near-constant columns are dropped and reported."""
    x = np.asarray(x_train, dtype=np.float64)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    if len(names) != x.shape[1]:
        raise InvalidInputError("names do not match column count")
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    keep = sd >= ZERO_SD
    dropped = tuple(n for n, k in zip(names, keep) if not k)
    if dropped:
        log.info("dropping constant columns: %s", ", ".join(dropped))
    return Standardizer(
        names=names,
        kept=tuple(n for n, k in zip(names, keep) if k),
        dropped=dropped,
        mean=x.mean(axis=0)[keep],
        scale=sd[keep],
    )


def standardize_apply(x, std: Standardizer, names: Sequence[str] | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    names = tuple(names) if names is not None else std.names
    if names != std.names or x.shape[-1] != len(std.names):
        raise InvalidInputError("columns differ from those seen at fit time")
    return (x[..., std.kept_index] - std.mean) / std.scale


# -- splitting -----------------------------------------------------------------------


def make_split(labels, fractions=(1.0, 0.0, 0.0), seed: int = 0) -> ExperimentSplit:
    """NOC samples go to train/validation/test by ``fractions``; faults only to validation/test.

    Faults are shared between validation and test in the ratio of the two
    NOC fractions. Index arrays are sorted, and the same arrays apply to
    every holder.
    """
    labels = np.asarray(labels)
    f_train, f_val, f_test = (float(f) for f in fractions)
    if min(f_train, f_val, f_test) < 0 or not math.isclose(f_train + f_val + f_test, 1.0, abs_tol=1e-9):
        raise InvalidInputError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    noc = rng.permutation(np.flatnonzero(labels == NOC))
    fault = rng.permutation(np.flatnonzero(labels == FAULT))
    n_val = int(round(f_val * noc.size))
    n_test = int(round(f_test * noc.size))
    n_train = noc.size - n_val - n_test
    if n_train < 1:
        raise InvalidInputError(f"not enough NOC samples for a training split ({noc.size} NOC)")
    if fault.size and f_val + f_test == 0:
        raise InvalidInputError("fault samples present but validation and test fractions are zero")
    n_fault_val = int(round(fault.size * f_val / (f_val + f_test))) if fault.size else 0
    split = ExperimentSplit(
        train=np.sort(noc[:n_train]),
        validation=np.sort(np.concatenate([noc[n_train : n_train + n_val], fault[:n_fault_val]])),
        test=np.sort(np.concatenate([noc[n_train + n_val :], fault[n_fault_val:]])),
    )
    if split.test.size == 0:
        warnings.warn("test split is empty", DataWarning, stacklevel=2)
    return split


# -- synthetic data ------------------------------------------------------------------


@dataclass(frozen=True)
class FaultSpec:
    """One family of injected faults.

    kind:
      ``score_excursion`` - latent scores inflated by ``magnitude`` (drives T^2);
      ``residual_spike``  - ``magnitude * noise_sd`` added to one column (drives Q);
      ``cross_holder``    - columns before ``split_at`` follow one latent draw and
                            the rest an independent one, so each side looks normal
                            on its own while the joint sample breaks the correlation.
    """

    kind: str
    count: int
    magnitude: float = 10.0
    columns: tuple[int, ...] | None = None  # residual_spike: candidate columns
    split_at: int | None = None  # cross_holder

    def __post_init__(self):
        if self.kind not in ("score_excursion", "residual_spike", "cross_holder"):
            raise InvalidInputError(f"unknown fault kind {self.kind!r}")


def generate_synthetic(
    m: int,
    shape: int | tuple[int, int, int],
    rank: int,
    noise_sd: float = 0.1,
    fault_spec: Sequence[FaultSpec] = (),
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> LabeledDataset:
    """Low-rank latent-variable data ``t W^T + noise`` with optional injected faults.

    ``shape`` is either a column count ``n`` or a batch shape ``(I, J, K)``
    (in which case ``m`` is ignored in favour of ``I``). Columns get random
    offsets and unit scalings so standardization matters. Fault rows are
    appended after the ``m`` NOC rows; ``meta["fault_columns"]`` records the
    spiked column of each residual-spike sample (-1 otherwise).
    """
    if isinstance(shape, tuple):
        n_batches, n_vars, n_time = shape
        m, n = n_batches, n_vars * n_time
    else:
        n_vars = n_time = None
        n = int(shape)
    if rank < 1 or rank > min(m, n):
        raise InvalidInputError(f"rank {rank} must lie in [1, min(m, n) = {min(m, n)}]")
    rng = np.random.default_rng(seed)
    w = np.linalg.qr(rng.standard_normal((n, rank)))[0] * np.sqrt(n)
    latent_sd = np.linspace(3.0, 1.0, rank)
    offsets = rng.normal(0.0, 5.0, n)
    units = rng.uniform(0.5, 5.0, n)

    def draw(count: int, inflate: float = 1.0) -> np.ndarray:
        t = rng.standard_normal((count, rank)) * latent_sd * inflate
        return t @ w.T + noise_sd * rng.standard_normal((count, n))

    blocks = [draw(m)]
    labels = [np.zeros(m, dtype=np.int64)]
    fault_cols = [np.full(m, -1, dtype=np.int64)]
    kinds = [["noc"] * m]
    for spec in fault_spec:
        c = spec.count
        cols = np.full(c, -1, dtype=np.int64)
        if spec.kind == "score_excursion":
            block = draw(c, spec.magnitude)
        elif spec.kind == "residual_spike":
            block = draw(c)
            pool = np.arange(n) if spec.columns is None else np.asarray(spec.columns)
            cols = rng.choice(pool, size=c)
            block[np.arange(c), cols] += spec.magnitude * noise_sd * rng.choice([-1.0, 1.0], size=c)
        else:
            split_at = spec.split_at if spec.split_at is not None else n // 2
            a, b = draw(c), draw(c)
            block = np.hstack([a[:, :split_at], b[:, split_at:]])
        blocks.append(block)
        labels.append(np.ones(c, dtype=np.int64))
        fault_cols.append(cols)
        kinds.append([spec.kind] * c)
    x = np.vstack(blocks) * units + offsets
    meta = {
        "source": "synthetic",
        "rank": rank,
        "noise_sd": noise_sd,
        "seed": seed,
        "fault_columns": np.concatenate(fault_cols).tolist(),
        "fault_kinds": [k for ks in kinds for k in ks],
    }
    if n_vars is not None:
        tensor = fold_batchwise(x, n_vars, n_time)
        var_names = list(names) if names is not None else [f"v{j + 1}" for j in range(n_vars)]
        return LabeledDataset(tensor, np.concatenate(labels), var_names, meta)
    var_names = list(names) if names is not None else [f"x{j + 1}" for j in range(n)]
    return LabeledDataset(x, np.concatenate(labels), var_names, meta)


def split_batch_time(ds: LabeledDataset, time_counts: Sequence[int]) -> PartitionedDataset:
    """Partition a batch tensor along time into consecutive holder steps (same variables)."""
    if ds.x.ndim != 3 or sum(time_counts) != ds.x.shape[2]:
        raise InvalidInputError("time_counts must partition the tensor's time axis")
    edges = np.cumsum([0, *time_counts])
    blocks = [ds.x[:, :, edges[i] : edges[i + 1]] for i in range(len(time_counts))]
    return PartitionedDataset(blocks, ds.labels, [list(ds.variable_names)] * len(blocks), dict(ds.meta))


def split_columns(ds: LabeledDataset, column_counts: Sequence[int]) -> PartitionedDataset:
    if sum(column_counts) != len(ds.variable_names):
        raise InvalidInputError("column_counts must sum to the number of variables")
    edges = np.cumsum([0, *column_counts])
    groups = [ds.variable_names[edges[i] : edges[i + 1]] for i in range(len(column_counts))]
    return partition_columns(ds, VerticalSplit(groups))


# -- snapshots -----------------------------------------------------------------------


def save_snapshot(data: PartitionedDataset, path) -> None:
    doc = {
        "schema": DATASET_SCHEMA,
        "labels": data.labels.tolist(),
        "holders": [
            {"names": names, "shape": list(b.shape), "data": b.ravel().tolist()}
            for b, names in zip(data.blocks, data.holder_names)
        ],
        "meta": data.meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_snapshot(path) -> PartitionedDataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != DATASET_SCHEMA:
        raise InvalidInputError(f"not a {DATASET_SCHEMA} document")
    blocks = [np.asarray(h["data"], dtype=np.float64).reshape(h["shape"]) for h in doc["holders"]]
    return PartitionedDataset(blocks, doc["labels"], [h["names"] for h in doc["holders"]], doc.get("meta", {}))
