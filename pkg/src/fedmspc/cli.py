"""Command line entry point: ``fedmspc <command> --config run.json``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .batch import score_partial
from .data import (
    ExperimentSplit,
    FaultSpec,
    SECOM_FRACTIONS,
    STAWFD_FRACTIONS,
    PartitionedDataset,
    generate_synthetic,
    load_secom,
    load_snapshot,
    load_stawfd,
    load_vertical_split,
    make_split,
    partition_columns,
    save_snapshot,
    split_batch_time,
    split_columns,
)
from .errors import ConfigError, FedMSPCError, InvalidInputError
from .evaluation import (
    ScenarioConfig,
    calibrate_model,
    emit_diagnosis,
    grid_search_limits,
    reports_from_federated,
    reports_from_model,
    run_scenarios,
    write_report,
)
from .mspc import fit_pca, load_model, monitor, save_model
from .protocol.inference import InferenceAuthority, InferenceHolder, InferenceServer
from .protocol.messages import CSP, TA, PartyId, holder
from .protocol.roles import HolderModelShare, SessionConfig
from .protocol.session import fed_infer, fed_score_incomplete, fed_train, run_id
from .protocol.training import TrainingAuthority, TrainingHolder, TrainingServer
from .transport.bus import run_bus
from .transport.tcp import parse_address, run_tcp, serve_party

log = logging.getLogger("fedmspc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -- configuration ---------------------------------------------------------------


def _schema() -> dict:
    return json.loads(resources.files("fedmspc.resources").joinpath("run_config.schema.json").read_text())


def load_config(path) -> dict:
    """Read and validate a run config; raises ConfigError with the failing field."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    validate_config(doc, str(path))
    return doc


def validate_config(doc: dict, source: str = "config") -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            detail = err.message
            if err.context:
                # oneOf branches: report the branch closest to matching
                best = jsonschema.exceptions.best_match(err.context)
                detail = f"{best.message} (at {'/'.join(str(p) for p in best.absolute_path) or where})"
            lines.append(f"{source}: {where}: {detail}")
        raise ConfigError("\n".join(lines))


def bundled_simulate_config() -> dict:
    return json.loads(resources.files("fedmspc.resources").joinpath("simulate.json").read_text())


@dataclass
class Run:
    cfg: dict
    out: Path

    @property
    def model(self) -> dict:
        return {"variance_target": 0.9, "alpha": 0.05, "eigenvalue_scaling": "sigma_squared",
                "limit_mode": "analytic", **self.cfg.get("model", {})}

    @property
    def seeds(self) -> dict:
        return dict(self.cfg.get("seeds", {"master": 0}))

    @property
    def session_id(self) -> str:
        return self.cfg.get("session_id", "fedmspc")

    @property
    def transport(self) -> dict:
        return {"kind": "bus", "timeout": 30.0, "endpoints": {}, **self.cfg.get("transport", {})}

    def runner(self):
        t = self.transport
        if t["kind"] == "tcp":
            return lambda parties, seed: run_tcp(parties, seed, timeout=t["timeout"])
        return lambda parties, seed: run_bus(parties, seed)


def _prepare(run: Run) -> tuple[PartitionedDataset, ExperimentSplit]:
    ds_cfg = run.cfg["dataset"]
    part = run.cfg.get("partition", {})
    src = ds_cfg["source"]
    if src == "synthetic":
        shape = tuple(ds_cfg["batch_shape"]) if "batch_shape" in ds_cfg else ds_cfg.get("n")
        if shape is None:
            raise ConfigError("dataset: synthetic source needs n or batch_shape")
        faults = [FaultSpec(**{**f, "columns": tuple(f["columns"]) if "columns" in f else None})
                  for f in ds_cfg.get("faults", [])]
        ds = generate_synthetic(ds_cfg.get("m", 100), shape, ds_cfg["rank"], ds_cfg.get("noise_sd", 0.1), faults,
                                ds_cfg.get("seed", 0))
        if ds.x.ndim == 3:
            if "time_counts" not in part:
                raise ConfigError("partition: batch synthetic data needs time_counts")
            data = split_batch_time(ds, part["time_counts"])
        else:
            if "column_counts" not in part:
                raise ConfigError("partition: synthetic data needs column_counts")
            data = split_columns(ds, part["column_counts"])
    elif src == "secom":
        vsplit = load_vertical_split(ds_cfg.get("variables_file"))
        ds = load_secom(ds_cfg["features_path"], ds_cfg["labels_path"], vsplit.all_columns)
        data = partition_columns(ds, vsplit)
    elif src == "stawfd":
        data = load_stawfd(ds_cfg["path"], ds_cfg.get("required_length", 110), tuple(ds_cfg.get("step_lengths", (65, 45))))
    else:
        data = load_snapshot(ds_cfg["path"])
    default_fractions = {"stawfd": STAWFD_FRACTIONS, "secom": SECOM_FRACTIONS}.get(src, (0.8, 0.0, 0.2))
    sp = run.cfg.get("split", {})
    split = make_split(data.labels, sp.get("fractions", default_fractions), sp.get("seed", 0))
    return data, split


def _session(run: Run, data: PartitionedDataset, split: ExperimentSplit) -> SessionConfig:
    m = run.model
    blocks = data.matrices()
    return SessionConfig(
        session_id=run.session_id,
        column_counts=tuple(b.shape[1] for b in blocks),
        row_count=int(split.train.size),
        variance_target=m["variance_target"],
        alpha=m["alpha"],
        eigenvalue_scaling=m["eigenvalue_scaling"],
        seeds=run.seeds,
        batch_shapes=tuple(b.shape[1:] for b in data.blocks) if data.is_batch else None,
        strict_limits=m["limit_mode"] == "analytic",
    )


def _variables(data: PartitionedDataset):
    return data.holder_names if data.is_batch else None


# -- commands ---------------------------------------------------------------------


def cmd_prepare(run: Run, args) -> int:
    data, split = _prepare(run)
    run.out.mkdir(parents=True, exist_ok=True)
    save_snapshot(data, run.out / "dataset.json")
    doc = {
        "schema": "fedmspc-split-v1",
        **split.to_dict(),
        "counts": {
            name: {"noc": int(np.sum(data.labels[idx] == 0)), "fault": int(np.sum(data.labels[idx] == 1))}
            for name, idx in (("train", split.train), ("validation", split.validation), ("test", split.test))
        },
        "holders": [len(n) for n in data.column_names()],
    }
    (run.out / "split.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc["counts"]))
    return EXIT_OK


def cmd_fit(run: Run, args) -> int:
    data, split = _prepare(run)
    blocks, names = data.matrices(), data.column_names()
    grid = run.model["limit_mode"] == "grid-search"
    run.out.mkdir(parents=True, exist_ok=True)
    if args.mode == "central":
        m = run.model
        model = fit_pca(np.hstack([b[split.train] for b in blocks]), m["variance_target"], m["alpha"],
                        m["eigenvalue_scaling"], strict_limits=not grid,
                        variable_names=[n for ns in names for n in ns])
        if grid:
            model, _ = calibrate_model(model, np.hstack([b[split.validation] for b in blocks]),
                                       data.labels[split.validation])
        save_model(model, run.out / "model.json")
        print(json.dumps({"n_components": model.n_components, "t2_limit": model.t2_limit, "q_limit": model.q_limit}))
        return EXIT_OK
    session = _session(run, data, split)
    shares, transcript = fed_train(session, [b[split.train] for b in blocks], variable_names=names,
                                   runner=run.runner())
    if grid:
        mon, _ = fed_infer(session, [b[split.validation] for b in blocks], shares, run="validation",
                           runner=run.runner())
        res = grid_search_limits(mon[0].t2, mon[0].q, data.labels[split.validation])
        shares = [s.with_limits(res.t2_limit, res.q_limit) for s in shares]
    _save_shares(shares, run.out)
    transcript.to_ndjson(run.out / "train_transcript.ndjson")
    print(json.dumps({"n_components": shares[0].n_components, "t2_limit": shares[0].t2_limit,
                      "q_limit": shares[0].q_limit}))
    return EXIT_OK


def _save_shares(shares, out: Path) -> None:
    d = out / "shares"
    d.mkdir(parents=True, exist_ok=True)
    for s in shares:
        (d / f"H{s.index}.json").write_text(json.dumps(s.to_dict()))


def _load_shares(out: Path, g: int) -> list[HolderModelShare]:
    shares = []
    for i in range(1, g + 1):
        path = out / "shares" / f"H{i}.json"
        if not path.exists():
            raise InvalidInputError(f"missing share {path}; run `fit --mode federated` first")
        shares.append(HolderModelShare.from_dict(json.loads(path.read_text())))
    return shares


def _read_samples(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path} is empty")
    header = rows[0]
    try:
        x = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if x.size == 0:
        raise InvalidInputError(f"{path} has no sample rows")
    if x.shape[1] != len(header):
        raise InvalidInputError(f"{path}: {x.shape[1]} values per row for {len(header)} header names")
    return header, x


def cmd_monitor(run: Run, args) -> int:
    data, split = _prepare(run)
    names = data.column_names()
    all_names = [n for ns in names for n in ns]
    header, x = _read_samples(args.input)
    run.out.mkdir(parents=True, exist_ok=True)
    stream = run.out / "monitor.ndjson"

    if args.incomplete is not None:
        return _monitor_incomplete(run, data, split, header, x, args, stream)

    pos = {n: i for i, n in enumerate(header)}
    missing = [n for n in all_names if n not in pos]
    if missing:
        raise InvalidInputError(f"{args.input}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}")
    x = x[:, [pos[n] for n in all_names]]
    counts = [len(ns) for ns in names]
    edges = np.cumsum([0, *counts])
    with open(stream, "w") as fh:
        if args.mode == "central":
            model = load_model(run.out / "model.json")
            for row in range(x.shape[0]):
                fh.write(json.dumps({"sample": row, **monitor(model, x[row]).to_dict()}) + "\n")
            reports = reports_from_model(model, x, counts, all_names)
        else:
            session = _session(run, data, split)
            shares = _load_shares(run.out, session.g)
            blocks = [x[:, edges[h] : edges[h + 1]] for h in range(session.g)]
            mon, _ = fed_infer(session, blocks, shares, run="monitor", runner=run.runner())
            for row in range(x.shape[0]):
                doc = {"sample": row, "t2": float(mon[0].t2[row]), "q": float(mon[0].q[row]),
                       "is_fault": bool(mon[0].is_fault[row]),
                       "holders": [{"holder": m.index, **m.result(row).to_dict()} for m in mon]}
                fh.write(json.dumps(doc) + "\n")
            reports = reports_from_federated(
                mon, names, [b.shape[1:] for b in data.blocks] if data.is_batch else None, _variables(data)
            )
    if args.diagnose:
        emit_diagnosis(reports, run.out / "diagnosis")
    return EXIT_OK


def _monitor_incomplete(run, data, split, header, x, args, stream) -> int:
    if not data.is_batch:
        raise InvalidInputError("--incomplete needs a batch dataset")
    shapes = [b.shape[1:] for b in data.blocks]  # (J_i, K_i)
    total_k = sum(k for _, k in shapes)
    k_global = int(args.incomplete)
    if not 1 <= k_global <= total_k:
        raise InvalidInputError(f"--incomplete k={k_global} outside [1, {total_k}]")
    # locate the active holder and its local time index
    active, k_local = 1, k_global
    for j, kk in shapes:
        if k_local <= kk:
            break
        k_local -= kk
        active += 1
    widths = [j * kk for j, kk in shapes[: active - 1]] + [shapes[active - 1][0] * k_local]
    n_elapsed = sum(widths)
    if x.shape[1] < n_elapsed:
        raise InvalidInputError(f"k={k_global} needs {n_elapsed} unfolded columns, input has {x.shape[1]}")
    x = x[:, :n_elapsed]
    with open(stream, "w") as fh:
        if args.mode == "central":
            model = load_model(run.out / "model.json")
            t = score_partial(model, x, n_elapsed, k_global)
        else:
            session = _session(run, data, split)
            shares = _load_shares(run.out, session.g)
            edges = np.cumsum([0, *widths])
            parts = [x[:, edges[h] : edges[h + 1]] for h in range(active)]
            t, _ = fed_score_incomplete(session, parts, shares, k_local, run="incomplete", runner=run.runner())
        for row in range(x.shape[0]):
            fh.write(json.dumps({"sample": row, "k": k_global, "scores": t[row].tolist()}) + "\n")
    return EXIT_OK


def cmd_evaluate(run: Run, args) -> int:
    data, split = _prepare(run)
    m = run.model
    cfg = ScenarioConfig(m["variance_target"], m["alpha"], m["eigenvalue_scaling"], m["limit_mode"],
                         seed=int(run.seeds.get("master", 0)), session_id=run.session_id, runner=run.runner())
    outcome = run_scenarios(data, split, cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    write_report(outcome.reports, run.out / "report.json", {"config": run.cfg, "version": __version__})
    for r in outcome.reports:
        print(f"{r.scenario:12s} tp={r.counts.tp} tn={r.counts.tn} fp={r.counts.fp} fn={r.counts.fn} f1={r.f1:.4f}")
    if args.diagnose:
        faulty = np.flatnonzero(outcome.verdicts["Federated"])[: args.diagnose]
        mon = outcome.test_monitoring
        picked = [_select_rows(mm, faulty) for mm in mon]
        shapes = [b.shape[1:] for b in data.blocks] if data.is_batch else None
        emit_diagnosis(reports_from_federated(picked, data.column_names(), shapes, _variables(data)),
                       run.out / "diagnosis", combined=True)
    return EXIT_OK


def _select_rows(mon, rows):
    return replace(
        mon,
        sample_ids=[mon.sample_ids[r] for r in rows],
        scores=mon.scores[rows], t2=mon.t2[rows], q=mon.q[rows], t2_contrib=mon.t2_contrib[rows],
        q_contrib=mon.q_contrib[rows], residual=mon.residual[rows], is_fault=mon.is_fault[rows],
    )


def cmd_simulate(run: Run, args) -> int:
    cmd_prepare(run, args)
    args.mode = "federated"
    cmd_fit(run, args)
    args.diagnose = args.diagnose or 3
    return cmd_evaluate(run, args)


def cmd_party(run: Run, args) -> int:
    """Run a single role of a TCP session (training or monitoring of the test split)."""
    t = run.transport
    endpoints = {PartyId.parse(k): parse_address(v) for k, v in t["endpoints"].items()}
    data, split = _prepare(run)
    session = _session(run, data, split)
    expected = [TA, CSP, *session.holders]
    missing = [str(p) for p in expected if p not in endpoints]
    if missing:
        raise ConfigError(f"transport/endpoints: missing {', '.join(missing)}")
    if args.role == "holder":
        if args.index is None or not 1 <= args.index <= session.g:
            raise InvalidInputError(f"--index must lie in [1, {session.g}] for a holder")
        me = holder(args.index)
    else:
        me = TA if args.role == "ta" else CSP
    listen = parse_address(args.listen) if args.listen else endpoints[me]
    blocks, names = data.matrices(), data.column_names()
    if args.protocol == "train":
        rid = run_id(session, "train", 0)
        if me == TA:
            machine = TrainingAuthority(session, rid)
        elif me == CSP:
            machine = TrainingServer(session, rid)
        else:
            machine = TrainingHolder(session, rid, args.index, blocks[args.index - 1][split.train], names[args.index - 1])
    else:
        rid = run_id(session, "infer", "test")
        ids = split.test.tolist()
        if me == TA:
            machine = InferenceAuthority(session, rid, ids)
        elif me == CSP:
            machine = InferenceServer(session, rid, len(ids))
        else:
            share = _load_shares(run.out, session.g)[args.index - 1]
            machine = InferenceHolder(session, rid, share, blocks[args.index - 1][split.test], ids)
    peers = {p: a for p, a in endpoints.items() if p != me}
    serve_party(machine, listen, peers, timeout=t["timeout"])
    run.out.mkdir(parents=True, exist_ok=True)
    if args.role == "holder" and args.protocol == "train":
        (run.out / "shares").mkdir(exist_ok=True)
        (run.out / "shares" / f"H{args.index}.json").write_text(json.dumps(machine.share.to_dict()))
    elif args.role == "holder":
        res = machine.result
        with open(run.out / f"monitor_H{args.index}.ndjson", "w") as fh:
            for row, sid in enumerate(res.sample_ids):
                fh.write(json.dumps({"sample": sid, **res.result(row).to_dict()}) + "\n")
    print(f"{me}: session {rid} complete")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "fit": cmd_fit,
    "party": cmd_party,
    "monitor": cmd_monitor,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmspc", description="Federated PCA / multiway PCA process monitoring.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration JSON")
        sp.add_argument("--out", help="output directory (overrides output_dir in the config)")

    common(sub.add_parser("prepare", help="build the dataset snapshot and split report"))
    sp = sub.add_parser("fit", help="fit a centralized model or federated holder shares")
    common(sp)
    sp.add_argument("--mode", choices=["central", "federated"], default="federated")
    sp = sub.add_parser("party", help="run one role of a TCP session")
    common(sp)
    sp.add_argument("--role", choices=["ta", "csp", "holder"], required=True)
    sp.add_argument("--index", type=int)
    sp.add_argument("--listen", help="host:port (defaults to this role's endpoint in the config)")
    sp.add_argument("--protocol", choices=["train", "infer"], default="train")
    sp = sub.add_parser("monitor", help="monitor samples from a CSV file")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--mode", choices=["central", "federated"], default="federated")
    sp.add_argument("--incomplete", type=int, metavar="K", help="score in-progress batches observed up to time K")
    sp.add_argument("--diagnose", action="store_true", help="write contribution CSV/SVG files")
    sp = sub.add_parser("evaluate", help="three-scenario comparison")
    common(sp)
    sp.add_argument("--diagnose", type=int, default=0, metavar="N", help="diagnosis files for N flagged samples")
    sp = sub.add_parser("simulate", help="prepare, fit and evaluate on the bus (bundled config by default)")
    common(sp, config_required=False)
    sp.add_argument("--diagnose", type=int, default=0, metavar="N")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None:
            cfg = bundled_simulate_config()
            validate_config(cfg, "bundled simulate.json")
        else:
            cfg = load_config(args.config)
        out = Path(args.out or cfg.get("output_dir") or "fedmspc-out")
        return COMMANDS[args.command](Run(cfg, out), args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedMSPCError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
