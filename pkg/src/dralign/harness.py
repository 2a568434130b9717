"""Experiment runner: grid sweeps over methods and weights, repeated seeds,
parity audits of saved models, Welch's t-test and trade-off tables.

Outputs of :func:`run` (all plain CSV/JSON):

- ``results.csv``   one row per (grid point, seed), wall-clock excluded
- ``timing.csv``    wall-clock seconds per run
- ``summary.csv``   mean and population std per grid point
- ``history_<run>.csv``, ``model_<run>.json``, ``parity_<run>.csv``
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .data import DatasetTable, Schema, load_adult, load_csv, prepare, synth_biased
from .metrics import (SubgroupPredictions, average_precision, eop_ratio, hard_dp, hard_eo,
                      pp_diff)
from .network import MlpParams, predict
from .rationale import (ParityReport, layer_normalize, network_parity, prediction_gap,
                        taylor_importance, top_k_indices, top_k_overlap)
from .training import METHODS, METRICS, TrainConfig, alignment_profile, relaxed_value, train

log = logging.getLogger(__name__)

DEFAULT_CAP = 512


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    """A sweep: dataset, method grid, seeds and training settings.

    ``dataset`` is one of
    ``{"kind": "synth", "n": .., "d": .., "bias": .., "noise": .., "seed": ..}``,
    ``{"kind": "adult", "path": dir}`` or
    ``{"kind": "csv", "path": file, "schema": {...Schema fields}}``.
    """

    dataset: dict = field(default_factory=lambda: {"kind": "synth", "n": 10000, "bias": 0.8})
    methods: list = field(default_factory=lambda: ["fairreg"])
    metrics: list = field(default_factory=lambda: ["dp"])
    lams: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    betas: list = field(default_factory=lambda: [0.0])
    hidden: list = field(default_factory=lambda: [[200, 200]])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 20
    batch_size: int = 1000
    learning_rate: float = 1e-3
    fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    cap: int = DEFAULT_CAP
    workers: int = 1
    out: str = "results"

    def __post_init__(self):
        for name in ("methods", "metrics", "lams", "betas", "hidden", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"{name} grid is empty")
        self.hidden = [tuple(int(h) for h in hs) for hs in self.hidden]
        if self.cap < 1 or self.workers < 1:
            raise ValueError("cap and workers must be >= 1")
        if self.dataset.get("kind") not in ("synth", "adult", "csv"):
            raise ValueError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        for point in self.grid():
            self.train_config(point, self.seeds[0])

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        for plural, singular in (("lams", "lambda"), ("betas", "beta"), ("methods", "method"),
                                 ("metrics", "metric"), ("seeds", "seed")):
            if singular in doc:
                val = doc.pop(singular)
                doc[plural] = val if isinstance(val, list) else [val]
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = [list(h) for h in self.hidden]
        return doc

    def grid(self) -> list["GridPoint"]:
        """Distinct grid points; weights a method ignores are pinned to 0."""
        points = []
        for method, metric, lam, beta, hidden in itertools.product(
                self.methods, self.metrics, self.lams, self.betas, self.hidden):
            lam = float(lam) if method in ("fairreg", "dralign") else 0.0
            beta = float(beta) if method == "dralign" else 0.0
            p = GridPoint(method, metric, lam, beta, tuple(hidden))
            if p not in points:
                points.append(p)
        return points

    def train_config(self, point: "GridPoint", seed: int) -> TrainConfig:
        return TrainConfig(method=point.method, metric=point.metric, lam=point.lam, beta=point.beta,
                           hidden_dims=point.hidden, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=int(seed))


@dataclass(frozen=True)
class GridPoint:
    method: str
    metric: str
    lam: float
    beta: float
    hidden: tuple

    def run_id(self, seed: int) -> str:
        h = "x".join(str(v) for v in self.hidden)
        return f"{self.method}_{self.metric}_lam{self.lam:g}_beta{self.beta:g}_h{h}_s{seed}"


def load_dataset(spec: dict) -> DatasetTable:
    kind = spec.get("kind")
    if kind == "synth":
        args = {k: spec[k] for k in ("n", "d", "bias", "noise", "seed") if k in spec}
        return synth_biased(**args)
    if kind == "adult":
        return load_adult(spec["path"])
    if kind == "csv":
        return load_csv(spec["path"], Schema(**spec["schema"]))
    raise ValueError(f"unknown dataset kind {kind!r}")


# -- per-run evaluation ------------------------------------------------------


@dataclass
class ResultRow:
    method: str
    metric: str
    lam: float
    beta: float
    hidden: str
    seed: int
    status: str = "ok"
    ap: float = math.nan
    hard_dp: float = math.nan
    soft_dp: float = math.nan
    hard_eo: float = math.nan
    soft_eo: float = math.nan
    eop_ratio: float = math.nan
    pp_diff: float = math.nan
    d_F: float = math.nan
    sum_S: float = math.nan
    S_layers: str = ""
    seconds: float = math.nan


RESULT_COLUMNS = [f.name for f in fields(ResultRow) if f.name != "seconds"]
SUMMARY_METRICS = ("ap", "hard_dp", "soft_dp", "hard_eo", "soft_eo", "eop_ratio", "pp_diff", "d_F", "sum_S")


def _nan_on_error(fn, *args) -> float:
    try:
        return float(fn(*args))
    except ValueError:
        return math.nan


def capped_groups(data: DatasetTable, cap: int, seed: int) -> tuple[DatasetTable, DatasetTable]:
    """At most ``cap`` rows of each attribute group, drawn without replacement."""
    rng = np.random.default_rng([seed, 104729])
    groups = []
    for a in (0, 1):
        idx = np.flatnonzero(data.mask(a))
        if idx.size == 0:
            raise ValueError(f"group a={a} is empty")
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, cap, replace=False))
        groups.append(data.take(idx))
    return groups[0], groups[1]


def evaluate(params: MlpParams, data: DatasetTable, metric: str, cap: int = DEFAULT_CAP,
             seed: int = 0) -> tuple[dict, ParityReport]:
    """Fairness, ranking and rationale scores of a trained model on ``data``."""
    p = predict(params, data.features)
    preds = SubgroupPredictions(p, data.labels, data.attrs)
    sub0, sub1 = capped_groups(data, cap, seed)
    report = network_parity(params, sub0, sub1)
    report.meta.update({"cap": cap, "n0": len(sub0), "n1": len(sub1)})
    sims = alignment_profile(params, data, metric)
    scores = {
        "ap": _nan_on_error(average_precision, p, data.labels),
        "hard_dp": _nan_on_error(hard_dp, preds),
        "soft_dp": relaxed_value(params, data, "dp"),
        "hard_eo": _nan_on_error(hard_eo, preds),
        "soft_eo": relaxed_value(params, data, "eo"),
        "eop_ratio": _nan_on_error(eop_ratio, preds),
        "pp_diff": _nan_on_error(pp_diff, preds),
        "d_F": report.d_F,
        "sum_S": float(sum(sims)),
        "S_layers": ";".join(repr(float(s)) for s in sims),
    }
    return scores, report


def _run_one(config: ExperimentConfig, point: GridPoint, seed: int, splits=None) -> ResultRow:
    out = Path(config.out)
    row = ResultRow(point.method, point.metric, point.lam, point.beta,
                    "x".join(str(h) for h in point.hidden), int(seed))
    start = time.perf_counter()
    try:
        if splits is None:
            splits = prepare(load_dataset(config.dataset), tuple(config.fractions), seed=int(seed))
        tr, va, te = splits
        params, history = train(tr, config.train_config(point, seed), val=va)
        scores, report = evaluate(params, te, point.metric, config.cap, int(seed))
        rid = point.run_id(seed)
        history.to_csv(out / f"history_{rid}.csv")
        params.save(out / f"model_{rid}.json")
        report.to_csv(out / f"parity_{rid}.csv")
        row = replace(row, **scores)
    except Exception as exc:  # recorded, the rest of the grid continues
        log.error("run %s failed: %s", point.run_id(seed), exc)
        row = replace(row, status=f"failed: {type(exc).__name__}: {exc}")
    return replace(row, seconds=time.perf_counter() - start)


def _worker(args) -> ResultRow:
    doc, point, seed = args
    return _run_one(ExperimentConfig.from_dict(doc), point, seed)


def run(config: ExperimentConfig) -> list[ResultRow]:
    """Train every (grid point, seed) and write the result files."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    jobs = [(p, s) for p in config.grid() for s in config.seeds]
    log.info("running %d jobs with %d worker(s)", len(jobs), config.workers)
    if config.workers > 1:
        doc = config.to_dict()
        with ProcessPoolExecutor(config.workers) as pool:
            rows = list(pool.map(_worker, [(doc, p, s) for p, s in jobs]))
    else:
        data = load_dataset(config.dataset)
        split_cache = {}
        rows = []
        for point, seed in jobs:
            if seed not in split_cache:
                split_cache[seed] = prepare(data, tuple(config.fractions), seed=int(seed))
            rows.append(_run_one(config, point, seed, split_cache[seed]))
    write_results(rows, out / "results.csv")
    write_timing(rows, out / "timing.csv")
    summarize(rows).to_csv(out / "summary.csv", index=False)
    emit_tradeoff_table(rows, out / "tradeoff.csv")
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def write_results(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in RESULT_COLUMNS])


def write_timing(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "lam", "beta", "hidden", "seed", "seconds"])
        for r in rows:
            w.writerow([r.method, r.metric, r.lam, r.beta, r.hidden, r.seed, f"{r.seconds:.3f}"])


def read_results(path) -> list[ResultRow]:
    df = pd.read_csv(path, dtype={"hidden": str, "S_layers": str}, keep_default_na=False,
                     na_values=["nan"])
    rows = []
    for rec in df.to_dict("records"):
        rec["S_layers"] = rec.get("S_layers") or ""
        rows.append(ResultRow(**rec))
    return rows


# -- aggregation ---------------------------------------------------------------


GRID_KEYS = ["method", "metric", "lam", "beta", "hidden"]


def _frame(rows) -> pd.DataFrame:
    df = pd.DataFrame([asdict(r) if isinstance(r, ResultRow) else dict(r) for r in rows])
    if df.empty:
        raise ValueError("no result rows")
    if "status" in df:
        df = df[df["status"] == "ok"]
        if df.empty:
            raise ValueError("every run failed")
    return df


def summarize(rows) -> pd.DataFrame:
    """Mean and population (ddof=0) std of every score per grid point."""
    df = _frame(rows)
    g = df.groupby(GRID_KEYS, sort=True)
    out = g.size().rename("n_runs").reset_index()
    for m in SUMMARY_METRICS:
        out[f"{m}_mean"] = g[m].mean().to_numpy()
        out[f"{m}_std_pop"] = g[m].std(ddof=0).to_numpy()
    return out


def fairness_score(row: dict) -> float:
    """The negated hard fairness metric matching the row's training metric."""
    metric = row["metric"]
    if metric == "dp":
        return -row["hard_dp"]
    if metric == "eo":
        return -row["hard_eo"]
    if metric == "eop":
        return -abs(1.0 - row["eop_ratio"])
    return -row["pp_diff"]


def emit_tradeoff_table(rows, path=None) -> pd.DataFrame:
    """AP against the negated fairness metric, mean and population std per grid point.

    Sorted by (method, metric, lam).
    """
    df = _frame(rows).copy()
    df["neg_fairness"] = [fairness_score(r) for r in df.to_dict("records")]
    g = df.groupby(GRID_KEYS, sort=False)
    out = g.agg(n_runs=("ap", "size"), ap_mean=("ap", "mean"),
                ap_std_pop=("ap", lambda s: float(np.std(s, ddof=0))),
                neg_fairness_mean=("neg_fairness", "mean"),
                neg_fairness_std_pop=("neg_fairness", lambda s: float(np.std(s, ddof=0)))).reset_index()
    out = out.sort_values(["method", "metric", "lam"], kind="stable").reset_index(drop=True)
    if path is not None:
        out.to_csv(path, index=False)
    return out


# -- significance ------------------------------------------------------------


def ttest(sample_a, sample_b) -> tuple[float, float]:
    """Welch's unequal-variance t-test; returns ``(t, two-sided p)``."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return float(t), float(min(p, 1.0))


# -- audit ---------------------------------------------------------------------


@dataclass
class AuditResult:
    report: ParityReport
    top_k: list[tuple[int, int, float, float]]   # (param_index, layer, d_k, prediction gap)
    overlaps: list[float]
    n0: int
    n1: int


def audit_groups(params: MlpParams, sub0, sub1, topk: int = 10) -> AuditResult:
    """Parity, Taylor similarity, top-k overlap and prediction gaps on two subgroups."""
    report = network_parity(params, sub0, sub1)
    imp0 = layer_normalize(taylor_importance(params, sub0))
    imp1 = layer_normalize(taylor_importance(params, sub1))
    k_layer = max(1, min(topk, min(len(v) for v in imp0.values())))
    overlaps = top_k_overlap(imp0, imp1, k_layer)
    d = report.d
    layers = report.layer_of()
    top = []
    for k in top_k_indices(d, min(topk, d.size)):
        k = int(k)
        top.append((k, int(layers[k]), float(d[k]), prediction_gap(params, k, sub0, sub1)))
    return AuditResult(report, top, overlaps, len(sub0), len(sub1))


def audit(model_file, data: DatasetTable, cap: int = DEFAULT_CAP, topk: int = 10,
          seed: int = 0, out=None) -> AuditResult:
    """Audit a saved model on at most ``cap`` rows per attribute group."""
    params = MlpParams.load(model_file)
    if params.spec.input_dim != data.n_features:
        raise ValueError(f"model expects {params.spec.input_dim} features, data has {data.n_features}")
    sub0, sub1 = capped_groups(data, cap, seed)
    result = audit_groups(params, sub0, sub1, topk)
    result.report.meta.update({"cap": cap, "n0": result.n0, "n1": result.n1, "model": str(model_file)})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(model_file).stem
        result.report.to_csv(out / f"parity_{stem}.csv")
        with open(out / f"topk_{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "param_index", "layer", "d_k", "prediction_gap"])
            for rank, (k, layer, dk, gap) in enumerate(result.top_k):
                w.writerow([rank, k, layer, repr(dk), repr(gap)])
            w.writerow([])
            w.writerow(["layer", "topk_jaccard"])
            for layer, ov in enumerate(result.overlaps):
                w.writerow([layer, repr(ov)])
    return result


# -- CLI -------------------------------------------------------------------------


def _dataset_arg(value: str) -> dict:
    """``synth`` / ``synth:bias=0.8,n=5000`` / ``adult:DIR`` / a JSON object."""
    if value.startswith("{"):
        return json.loads(value)
    kind, _, rest = value.partition(":")
    if kind == "adult":
        return {"kind": "adult", "path": rest or "data/adult"}
    if kind == "synth":
        doc = {"kind": "synth"}
        for item in filter(None, rest.split(",")):
            k, _, v = item.partition("=")
            doc[k] = float(v) if k in ("bias", "noise") else int(v)
        return doc
    raise argparse.ArgumentTypeError(f"cannot parse dataset {value!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dralign", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", type=Path, help="JSON experiment config")
    ap.add_argument("--dataset", type=_dataset_arg, help="synth[:k=v,...], adult:DIR or JSON")
    ap.add_argument("--method", nargs="+", choices=METHODS)
    ap.add_argument("--metric", nargs="+", choices=METRICS)
    ap.add_argument("--lambda", dest="lams", nargs="+", type=float)
    ap.add_argument("--beta", dest="betas", nargs="+", type=float)
    ap.add_argument("--hidden", nargs="+", help="hidden sizes per setting, e.g. 200x200 32x32")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seed", dest="seeds", nargs="+", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", type=str)
    ap.add_argument("--audit", type=Path, metavar="MODEL_JSON", help="audit a saved model instead of training")
    ap.add_argument("--topk", type=int, default=10)
    ap.add_argument("--cap", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> ExperimentConfig:
    doc = json.loads(args.config.read_text()) if args.config else {}
    overrides = {"dataset": args.dataset, "methods": args.method, "metrics": args.metric,
                 "lams": args.lams, "betas": args.betas, "epochs": args.epochs, "seeds": args.seeds,
                 "workers": args.workers, "out": args.out, "cap": args.cap}
    if args.hidden:
        overrides["hidden"] = [[int(v) for v in h.split("x") if v] for h in args.hidden]
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = config_from_args(args)
    if args.audit:
        seed = config.seeds[0]
        _, _, test = prepare(load_dataset(config.dataset), tuple(config.fractions), seed=seed)
        res = audit(args.audit, test, config.cap, args.topk, seed, config.out)
        print(f"d_F={res.report.d_F:.6g} sum_S={res.report.similarity_sum:.4f} "
              f"n0={res.n0} n1={res.n1} -> {config.out}")
        return 0
    rows = run(config)
    failed = [r for r in rows if r.status != "ok"]
    table = emit_tradeoff_table(rows)
    print(table.to_string(index=False))
    if failed:
        print(f"{len(failed)} of {len(rows)} runs failed; see results.csv", file=sys.stderr)
        return 1
    return 0
