"""Command-line entry point: ``smhgc {synth,analyze,baseline,train,eval,sweep}``.

Settings resolve as built-in defaults < ``--config`` file (flat YAML key/value)
< explicit flags. Every command writes its resolved settings to
``<out>/run.json``. Exit codes: 0 ok, 1 contract/validation error, 2 I/O
error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from smhgc.errors import ContractError, SmhgcError
from smhgc.graphdata import (
    MultiViewDataset,
    load_dataset,
    save_dataset,
    sweep_synthesize,
)
from smhgc.homophily import default_k, homophily_profile, message_passing_baseline
from smhgc.metrics import ClusterReport, cluster_and_evaluate, evaluate
from smhgc.model import SmhgcConfig, SmhgcModel, load_checkpoint, save_checkpoint, train

log = logging.getLogger("smhgc")

DEFAULT_HR_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]

MODEL_KEYS = {f.name for f in fields(SmhgcConfig)} - {"seed"}
OPTION_KEYS = {
    "grid",
    "orders",
    "hr_grid",
    "k_grid",
    "order_grid",
    "gamma_sim_grid",
    "gamma_r_grid",
    "checkpoint",
    "assignment",
    "jobs",
}


@dataclass
class RunConfig:
    command: str
    dataset_path: str | None = None
    seed: int = 0
    output_dir: str = "smhgc-out"
    thread_count: int = 1
    hyperparams: SmhgcConfig = field(default_factory=SmhgcConfig)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyperparams"] = asdict(self.hyperparams)
        return d

    def write(self, out: Path) -> None:
        (out / "run.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# argument parsing


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    text = str(text).strip()
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def _numbers(text) -> list[float]:
    return _floats(text)


def _add_shared(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--dataset", default=S, help="dataset directory")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=S, help="flat YAML key/value settings file")
    p.add_argument("--threads", type=int, default=S, help="BLAS thread count (results are deterministic per count)")


def _add_model(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--k", type=int, default=S, help="top-k edges per node (default 10%% of N)")
    p.add_argument("--order", type=int, default=S)
    p.add_argument("--rho", type=float, default=S)
    p.add_argument("--gamma-sim", dest="gamma_sim", type=float, default=S)
    p.add_argument("--gamma-r", dest="gamma_r", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--d-z", dest="d_z", type=int, default=S)
    p.add_argument("--d-f", dest="d_f", type=int, default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float, default=S)
    p.add_argument("--restarts", type=int, default=S)
    p.add_argument("--no-sim-loss", dest="use_sim_loss", action="store_false", default=S)
    p.add_argument("--no-recon-loss", dest="use_recon_loss", action="store_false", default=S)
    p.add_argument("--no-kl", dest="use_kl", action="store_false", default=S)
    p.add_argument("--no-ax", dest="use_ax", action="store_false", default=S)
    p.add_argument("--no-aa", dest="use_aa", action="store_false", default=S)
    p.add_argument("--uniform-fusion-weights", dest="uniform_fusion", action="store_true", default=S)
    p.add_argument("--per-view-centroids", dest="per_view_centroids", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="smhgc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate homophily-sweep datasets from a labelled source")
    _add_shared(p)
    p.add_argument("--grid", default=S, help="comma-separated target hr values (default 0.0..0.5 step 0.1)")

    p = sub.add_parser("analyze", help="homophily ratios of the raw graph and similarity graphs")
    _add_shared(p)
    p.add_argument("--k", type=int, default=S)

    p = sub.add_parser("baseline", help="parameter-free message passing + K-means")
    _add_shared(p)
    p.add_argument("--orders", type=int, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--restarts", type=int, default=S)
    p.add_argument("--hr-grid", dest="hr_grid", default=S, help="also sweep synthesized hr values")

    p = sub.add_parser("train", help="train SMHGC and cluster the consensus embedding")
    _add_shared(p)
    _add_model(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or an assignment file against labels")
    _add_shared(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--assignment", default=S)
    p.add_argument("--restarts", type=int, default=S)

    p = sub.add_parser("sweep", help="cross-product hyperparameter / hr sweep")
    _add_shared(p)
    _add_model(p)
    p.add_argument("--k-grid", dest="k_grid", default=S, help="ints, or fractions of N when < 1")
    p.add_argument("--order-grid", dest="order_grid", default=S)
    p.add_argument("--gamma-sim-grid", dest="gamma_sim_grid", default=S)
    p.add_argument("--gamma-r-grid", dest="gamma_r_grid", default=S)
    p.add_argument("--hr-grid", dest="hr_grid", default=S)
    p.add_argument("--jobs", type=int, default=S, help="parallel runs (processes)")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    given = vars(args).copy()
    command = given.pop("command")
    settings: dict = {}
    cfg_path = given.pop("config", None)
    if cfg_path is not None:
        try:
            loaded = yaml.safe_load(Path(cfg_path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ContractError(f"{cfg_path}: invalid config ({exc})") from None
        if not isinstance(loaded, dict):
            raise ContractError(f"{cfg_path}: config must be a flat key/value mapping")
        settings.update(loaded)
    settings.update(given)

    rc = RunConfig(command)
    hyper = {}
    for key, value in settings.items():
        key = key.replace("-", "_")
        if key == "dataset":
            rc.dataset_path = str(value)
        elif key == "seed":
            rc.seed = int(value)
        elif key == "out":
            rc.output_dir = str(value)
        elif key == "threads":
            rc.thread_count = int(value)
        elif key in MODEL_KEYS:
            hyper[key] = value
        elif key in OPTION_KEYS:
            rc.options[key] = value
        else:
            raise ContractError(f"unknown setting {key!r}")
    if "orders" in rc.options:
        rc.options["orders"] = int(rc.options["orders"])
    rc.hyperparams = SmhgcConfig(seed=rc.seed, **hyper)
    return rc


# --------------------------------------------------------------------------
# helpers


def _require_dataset(rc: RunConfig) -> MultiViewDataset:
    if rc.dataset_path is None:
        raise ContractError(f"{rc.command} needs --dataset")
    return load_dataset(rc.dataset_path)


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_report(out: Path, stem: str, report: ClusterReport) -> None:
    assign_name = f"{stem}_assignment.csv"
    np.savetxt(out / assign_name, report.assignment, fmt="%d")
    (out / f"{stem}.json").write_text(report.to_json(assign_name))


def _hr_label(hr: float) -> str:
    return f"hr_{hr:.2f}"


# --------------------------------------------------------------------------
# commands


def cmd_synth(rc: RunConfig) -> int:
    source = _require_dataset(rc)
    if source.labels is None:
        raise ContractError("synth needs a labelled source dataset")
    grid = _floats(rc.options.get("grid", DEFAULT_HR_GRID))
    out = _out_dir(rc)
    rc.write(out)
    if not grid:
        log.warning("empty hr grid; nothing to do")
        return 0
    failed = 0
    for hr in grid:
        try:
            (ds,) = sweep_synthesize(source, [hr], rc.seed)
        except ContractError as exc:
            log.error("hr=%.4f: %s", hr, exc)
            print(f"hr={hr}: {exc}", file=sys.stderr)
            failed += 1
            continue
        save_dataset(ds, out / _hr_label(hr))
        log.info("wrote %s", out / _hr_label(hr))
    return 1 if failed else 0


def cmd_analyze(rc: RunConfig) -> int:
    ds = _require_dataset(rc)
    if ds.labels is None:
        raise ContractError("analyze needs labels: homophily ratio is defined through ground-truth classes")
    k = int(rc.hyperparams.k) if rc.hyperparams.k is not None else default_k(ds.n_nodes)
    out = _out_dir(rc)
    rc.write(out)
    rows = []
    for v, view in enumerate(ds.views):
        prof = homophily_profile(view, ds.labels, k)
        for transform, hr in prof.items():
            rows.append([v, transform, f"{hr:.6f}", "" if transform == "adjacency" else k])
    _write_csv(out / "homophily.csv", ["view", "transform", "hr", "k"], rows)
    return 0


def cmd_baseline(rc: RunConfig) -> int:
    ds = _require_dataset(rc)
    orders = int(rc.options.get("orders", 2))
    k = rc.hyperparams.k
    restarts = rc.hyperparams.restarts
    out = _out_dir(rc)
    rc.write(out)
    choices = ["raw", "sim_enhanced"] if ds.labels is not None else ["raw"]
    if ds.labels is None:
        log.warning("no labels: sim_enhanced baseline skipped (its weights need labels), metrics omitted")
    for choice in choices:
        rep = message_passing_baseline(ds, choice, orders, k, restarts, rc.seed)
        _write_report(out, f"baseline_{choice}", rep)
    hr_grid = _floats(rc.options.get("hr_grid", []))
    if hr_grid:
        rows = []
        for hr, sd in zip(hr_grid, sweep_synthesize(ds, hr_grid, rc.seed)):
            for choice in choices:
                rep = message_passing_baseline(sd, choice, orders, k, restarts, rc.seed)
                rows.append([f"{hr:.4f}", choice, f"{rep.nmi:.6f}", f"{rep.ari:.6f}", f"{rep.acc:.6f}", f"{rep.f1:.6f}"])
        _write_csv(out / "baseline_sweep.csv", ["hr", "variant", "nmi", "ari", "acc", "f1"], rows)
    return 0


def run_training(ds: MultiViewDataset, cfg: SmhgcConfig, seed: int):
    model = SmhgcModel.init(ds, cfg)
    result = train(ds, model)
    report = cluster_and_evaluate(result.consensus, ds.num_clusters, ds.labels, cfg.restarts, seed)
    return model, result, report


def cmd_train(rc: RunConfig) -> int:
    ds = _require_dataset(rc)
    cfg = rc.hyperparams
    out = _out_dir(rc)
    rc.write(out)
    model, result, report = run_training(ds, cfg, rc.seed)
    _write_report(out, "report", report)
    save_checkpoint(out / "checkpoint.bin", model, cfg.epochs, result.consensus, n_clusters=ds.num_clusters)
    _write_csv(
        out / "losses.csv",
        ["epoch", "sim", "recon", "kl", "total"],
        [[r["epoch"], repr(r["sim"]), repr(r["recon"]), repr(r["kl"]), repr(r["total"])] for r in result.loss_history],
    )
    rows = []
    for st in result.fusion_history:
        for v in range(len(st.omega_h)):
            rows.append([st.epoch, v, repr(st.omega_x[v]), repr(st.omega_a[v]), repr(st.omega_h[v])])
    _write_csv(out / "weights.csv", ["epoch", "view", "omega_x", "omega_a", "omega_h"], rows)
    return 0


def cmd_eval(rc: RunConfig) -> int:
    ckpt = rc.options.get("checkpoint")
    assign = rc.options.get("assignment")
    if (ckpt is None) == (assign is None):
        raise ContractError("eval needs exactly one of --checkpoint or --assignment")
    ds = load_dataset(rc.dataset_path) if rc.dataset_path is not None else None
    labels = ds.labels if ds is not None else None
    out = _out_dir(rc)
    rc.write(out)
    if ckpt is not None:
        _, header, consensus = load_checkpoint(ckpt)
        if consensus is None:
            raise ContractError(f"{ckpt}: checkpoint holds no consensus embedding")
        k = ds.num_clusters if ds is not None else header.get("n_clusters")
        if k is None:
            raise ContractError("cluster count unknown: pass --dataset")
        report = cluster_and_evaluate(consensus, int(k), labels, rc.hyperparams.restarts, rc.seed)
    else:
        try:
            pred = np.loadtxt(assign, dtype=np.int64, ndmin=1)
        except ValueError as exc:
            raise ContractError(f"{assign}: {exc}") from None
        report = evaluate(pred, labels, rc.seed)
    _write_report(out, "eval_report", report)
    return 0


def _sweep_values(rc: RunConfig, key: str, default):
    vals = _numbers(rc.options[key]) if key in rc.options else [default]
    return vals or [default]


def _sweep_one(job):
    ds_path, hr, cfg_dict, seed = job
    cfg = SmhgcConfig(**cfg_dict)
    ds = load_dataset(ds_path)
    if hr is not None:
        (ds,) = sweep_synthesize(ds, [hr], seed)
    t0 = time.perf_counter()
    try:
        _, _, rep = run_training(ds, cfg, seed)
        return [rep.nmi, rep.ari, rep.acc, rep.f1, time.perf_counter() - t0, "ok", ""]
    except SmhgcError as exc:
        return [None, None, None, None, time.perf_counter() - t0, "error", str(exc)]


def cmd_sweep(rc: RunConfig) -> int:
    ds = _require_dataset(rc)
    base = rc.hyperparams
    n = ds.n_nodes

    def k_value(x):
        return default_k(n, x) if x < 1 else int(x)

    ks = [k_value(x) for x in _numbers(rc.options["k_grid"])] if "k_grid" in rc.options else [base.k]
    orders = [int(x) for x in _sweep_values(rc, "order_grid", base.order)]
    gsims = _sweep_values(rc, "gamma_sim_grid", base.gamma_sim)
    grs = _sweep_values(rc, "gamma_r_grid", base.gamma_r)
    hrs = _floats(rc.options["hr_grid"]) if "hr_grid" in rc.options else [None]
    out = _out_dir(rc)
    rc.write(out)
    combos = list(itertools.product(hrs, ks, orders, gsims, grs))
    jobs = []
    for hr, k, order, gs, gr in combos:
        cfg = asdict(base)
        cfg.update(k=k, order=order, gamma_sim=gs, gamma_r=gr)
        jobs.append((rc.dataset_path, hr, cfg, rc.seed))
    n_jobs = int(rc.options.get("jobs", 1))
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    rows = []
    for i, ((hr, k, order, gs, gr), res) in enumerate(zip(combos, results)):
        if res[5] != "ok":
            log.error("run %d failed: %s", i, res[6])
        metrics = ["" if m is None else f"{m:.6f}" for m in res[:4]]
        rows.append([i, "" if hr is None else f"{hr:.4f}", base.resolved_k(n) if k is None else k, order, gs, gr, rc.seed,
                     *metrics, f"{res[4]:.3f}", res[5], res[6]])
    _write_csv(
        out / "sweep.csv",
        ["run", "hr", "k", "order", "gamma_sim", "gamma_r", "seed", "nmi", "ari", "acc", "f1", "wall_time", "status", "error"],
        rows,
    )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "baseline": cmd_baseline,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _setup_logging() -> None:
    level = os.environ.get("SMHGC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        rc = resolve(args)
        with threadpool_limits(limits=rc.thread_count):
            return COMMANDS[rc.command](rc)
    except SmhgcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
