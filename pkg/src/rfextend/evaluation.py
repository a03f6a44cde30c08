"""Mantel statistics and the extension benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import autoencoder as ae
from .data import Dataset, SplitSpec, load_builtin, load_csv, split
from .embed import DiffusionConfig, Embedding, rfphate_embed
from .forest import ForestParams, fit_forest
from .proximity import train_proximities

log = logging.getLogger(__name__)


class MantelError(ValueError):
    pass


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class MantelResult:
    correlation: float
    method: str
    n_pairs: int
    permutation_p: float | None = None


def pairwise_distances(E) -> np.ndarray:
    """Euclidean distance matrix of an embedding's rows."""
    X = E.coords if isinstance(E, Embedding) else np.asarray(E, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return squareform(pdist(X))


def rank_average(x) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _pearson(a, b) -> float:
    same = np.array_equal(a, b)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise MantelError("correlation undefined: a distance matrix has a constant upper triangle")
    if same:
        return 1.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def _upper(D):
    D = np.asarray(D, dtype=np.float64)
    return D[np.triu_indices(D.shape[0], 1)]


def _corr(u, v, method):
    if method == "spearman":
        if np.all(u == u[0]) or np.all(v == v[0]):
            raise MantelError("correlation undefined: a distance matrix has a constant upper triangle")
        return _pearson(rank_average(u), rank_average(v))
    return _pearson(u, v)


def mantel(D1, D2, method: str = "spearman", n_permutations: int = 0, seed: int = 0) -> MantelResult:
    """Correlation between the strict upper triangles of two distance matrices.

    With ``n_permutations > 0`` a two-sided p-value is estimated by jointly
    permuting rows and columns of ``D2``.
    """
    if method not in ("spearman", "pearson"):
        raise MantelError(f"unknown method '{method}'")
    D1 = np.asarray(D1, dtype=np.float64)
    D2 = np.asarray(D2, dtype=np.float64)
    if D1.shape != D2.shape or D1.ndim != 2 or D1.shape[0] != D1.shape[1]:
        raise MantelError(f"distance matrices must be square and equal-shaped: {D1.shape} vs {D2.shape}")
    if D1.shape[0] < 3:
        raise MantelError("need at least 3 points")
    u, v = _upper(D1), _upper(D2)
    r = _corr(u, v, method)
    p = None
    if n_permutations > 0:
        rng = np.random.default_rng(seed)
        hits = 0
        for _ in range(n_permutations):
            perm = rng.permutation(D2.shape[0])
            rp = _corr(u, _upper(D2[np.ix_(perm, perm)]), method)
            hits += abs(rp) >= abs(r)
        p = (hits + 1) / (n_permutations + 1)
    return MantelResult(r, method, len(u), p)


# -- experiment harness ---------------------------------------------------


@dataclass
class ExperimentConfig:
    """Benchmark grid. ``datasets`` entries are ``{"name"}`` for bundled
    tables or ``{"name", "path", "label"}`` for CSV files."""

    datasets: list
    variants: list = field(default_factory=lambda: list(ae.VARIANTS))
    lambdas: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    proto_fractions: list = field(default_factory=lambda: [0.1, 0.2, 0.5])
    seeds: list = field(default_factory=lambda: list(range(10)))
    train_fraction: float = 0.7
    forest: dict = field(default_factory=dict)
    embed: dict = field(default_factory=dict)
    ae: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets:
            raise ReportError("experiment needs at least one dataset")
        if not self.variants:
            raise ReportError("experiment needs at least one variant")
        self.variants = [ae.canonical_variant(v) for v in self.variants]
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        self.datasets = [d if isinstance(d, dict) else {"name": d} for d in self.datasets]

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        doc = json.loads(Path(path).read_text())
        base = Path(path).parent
        for d in doc.get("datasets", []):
            if isinstance(d, dict) and "path" in d and not Path(d["path"]).is_absolute():
                d["path"] = str(base / d["path"])
        return cls(**doc)


def cell_label(variant, fraction=None) -> str:
    if variant == ae.RF_PRN_PRO and fraction is not None:
        return f"{variant}({fraction * 100:g}%)"
    return variant


def plan_cells(cfg: ExperimentConfig) -> list:
    """Every (dataset, seed, variant, lambda, fraction) combination, in run order."""
    cells = []
    for d in cfg.datasets:
        for seed in cfg.seeds:
            for variant in cfg.variants:
                fracs = cfg.proto_fractions if variant == ae.RF_PRN_PRO else [None]
                for frac in fracs:
                    for lam in cfg.lambdas:
                        cells.append(
                            {"dataset": d["name"], "seed": int(seed), "variant": variant,
                             "label": cell_label(variant, frac), "lam": float(lam),
                             "fraction": frac}
                        )
    return cells


def _load_dataset(entry) -> Dataset:
    if "path" in entry:
        return load_csv(entry["path"], entry["label"])
    return load_builtin(entry["name"])


def _train_config(cfg: ExperimentConfig, seed):
    keys = {"epochs", "batch_size", "learning_rate", "optimizer", "beta1", "beta2", "eps", "lr_decay"}
    return ae.TrainConfig(seed=int(seed), **{k: v for k, v in cfg.ae.items() if k in keys})


def run_unit(cfg: ExperimentConfig, entry, seed) -> list:
    """All cells for one (dataset, seed): forests and embeddings are shared."""
    ds = _load_dataset(entry)
    train_idx, test_idx = split(ds, SplitSpec(cfg.train_fraction, int(seed), stratified=True))
    fparams = ForestParams(**{**cfg.forest, "seed": int(seed)})
    ecfg = DiffusionConfig(**{**cfg.embed, "seed": int(seed)})
    # comparison target: the reference pipeline run on train + test together
    G_all = rfphate_embed(fit_forest(ds, None, fparams), ds, ecfg)
    target = pairwise_distances(G_all.coords[test_idx])
    ds_train = ds.subset(train_idx)
    f = fit_forest(ds_train, None, fparams)
    G = rfphate_embed(f, ds_train, ecfg)
    P = train_proximities(f, ds_train, mode="zero")
    hidden = tuple(cfg.ae.get("hidden", (800, 400, 100)))
    out = []
    unit_cells = [c for c in plan_cells(cfg) if c["dataset"] == entry["name"] and c["seed"] == seed]
    for cell in unit_cells:
        rec = dict(cell, mantel=math.nan, fit_seconds=math.nan, recon_mse=math.nan, error="")
        try:
            fit = ae.fit_extension(
                cell["variant"], f, ds_train, G, lam=cell["lam"],
                gamma=cfg.ae.get("gamma", 1.0), proto_frac=cell["fraction"], hidden=hidden,
                train_cfg=_train_config(cfg, seed), P=P,
                standardize_g=cfg.ae.get("standardize_g", True),
            )
            E = ae.extend(fit.model, f, ds_train, ds.features[test_idx])
            rec["mantel"] = mantel(target, pairwise_distances(E)).correlation
            rec["fit_seconds"] = fit.seconds
            rec["recon_mse"] = fit.recon_mse
        except Exception as exc:  # recorded per cell; the run continues
            log.warning("cell %s failed: %s", cell, exc)
            rec["error"] = f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


def _unit_failure(cfg, entry, seed, exc):
    cells = [c for c in plan_cells(cfg) if c["dataset"] == entry["name"] and c["seed"] == seed]
    return [dict(c, mantel=math.nan, fit_seconds=math.nan, recon_mse=math.nan,
                 error=f"{type(exc).__name__}: {exc}") for c in cells]


def _safe_unit(cfg, entry, seed):
    try:
        return run_unit(cfg, entry, seed)
    except Exception as exc:
        log.warning("unit %s seed %s failed: %s", entry["name"], seed, exc)
        return _unit_failure(cfg, entry, seed, exc)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> "ExperimentReport":
    """Run the full grid and aggregate Mantel scores per variant."""
    units = [(entry, seed) for entry in cfg.datasets for seed in cfg.seeds]
    if jobs == 1:
        results = [_safe_unit(cfg, e, s) for e, s in units]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_safe_unit, cfg, e, s) for e, s in units]
            results = [fut.result() for fut in futures]
    cells = [c for unit in results for c in unit]
    return ExperimentReport(cells, config=asdict(cfg))


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "std": std, "count": int(v.size)}


def aggregate(cells) -> dict:
    """Mean/std of Mantel scores, every successful cell weighted equally.

    Keys: ``by_variant`` (prototype fractions pooled), ``by_label``
    (fractions separate) and ``by_label_lambda``.
    """
    ok = [c for c in cells if not c.get("error") and np.isfinite(c["mantel"])]
    groups = {"by_variant": {}, "by_label": {}, "by_label_lambda": {}}
    for c in ok:
        groups["by_variant"].setdefault(c["variant"], []).append(c["mantel"])
        groups["by_label"].setdefault(c["label"], []).append(c["mantel"])
        groups["by_label_lambda"].setdefault(f"{c['label']}|{c['lam']:g}", []).append(c["mantel"])
    return {k: {name: _stats(v) for name, v in g.items()} for k, g in groups.items()}


CELL_FIELDS = ["dataset", "seed", "variant", "label", "lam", "fraction", "mantel",
               "fit_seconds", "recon_mse", "error"]


class ExperimentReport:
    def __init__(self, cells, config=None, aggregates=None):
        self.cells = list(cells)
        self.config = config or {}
        self.aggregates = aggregate(self.cells)
        if aggregates is not None:
            self.check(aggregates)

    def check(self, aggregates, tol=1e-12):
        """Raise if stored aggregates disagree with a recomputation from the cells."""
        for group, entries in self.aggregates.items():
            stored = aggregates.get(group, {})
            if set(stored) != set(entries):
                raise ReportError(f"aggregate group '{group}' does not match the cells")
            for name, st in entries.items():
                for key in ("mean", "std"):
                    a, b = st[key], stored[name][key]
                    if not (abs(a - b) <= tol or (math.isnan(a) and math.isnan(b))):
                        raise ReportError(f"aggregate {group}/{name}/{key} differs from cells")

    @property
    def n_failed(self) -> int:
        return sum(bool(c.get("error")) for c in self.cells)

    def variant_means_by_lambda(self, label) -> dict:
        out = {}
        for key, st in self.aggregates["by_label_lambda"].items():
            lab, lam = key.rsplit("|", 1)
            if lab == label:
                out[float(lam)] = st["mean"]
        return dict(sorted(out.items()))

    def table(self) -> str:
        """Plain-text summary in the layout of a 'Model | Mean ± Std' table."""
        rows = []
        agg = self.aggregates
        for name, st in sorted(agg["by_variant"].items(), key=lambda kv: -kv[1]["mean"]):
            rows.append((name, st))
            if name == ae.RF_PRN_PRO:
                for lab, s in sorted(agg["by_label"].items()):
                    if lab.startswith(ae.RF_PRN_PRO + "("):
                        rows.append(("  " + lab, s))
        width = max([len("Model")] + [len(r[0]) for r in rows])
        lines = [f"{'Model':<{width}}  Mean ± Std       (cells)", "-" * (width + 26)]
        for name, st in rows:
            lines.append(f"{name:<{width}}  {st['mean']:.3f} ± {st['std']:.3f}    ({st['count']})")
        return "\n".join(lines)

    def write(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"cells": out_dir / "cells.csv", "aggregates": out_dir / "aggregates.json",
                 "table": out_dir / "table.txt"}
        with paths["cells"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CELL_FIELDS)
            w.writeheader()
            for c in self.cells:
                w.writerow({k: ("" if c.get(k) is None else c.get(k)) for k in CELL_FIELDS})
        paths["aggregates"].write_text(json.dumps(
            {"aggregates": self.aggregates, "config": self.config,
             "n_cells": len(self.cells), "n_failed": self.n_failed}, indent=2, default=str))
        paths["table"].write_text(self.table() + "\n")
        return paths

    @classmethod
    def read(cls, out_dir) -> "ExperimentReport":
        out_dir = Path(out_dir)
        cells = []
        with (out_dir / "cells.csv").open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                cells.append({
                    "dataset": row["dataset"], "seed": int(row["seed"]),
                    "variant": row["variant"], "label": row["label"], "lam": float(row["lam"]),
                    "fraction": float(row["fraction"]) if row["fraction"] else None,
                    "mantel": float(row["mantel"]), "fit_seconds": float(row["fit_seconds"]),
                    "recon_mse": float(row["recon_mse"]), "error": row["error"],
                })
        doc = json.loads((out_dir / "aggregates.json").read_text())
        return cls(cells, doc.get("config"), doc["aggregates"])


def timing_ratio(report: ExperimentReport, label_a: str, label_b: str) -> float:
    """Mean of ``fit_seconds(a) / fit_seconds(b)`` over cells matched on (dataset, seed, lambda)."""
    def index(label):
        return {(c["dataset"], c["seed"], c["lam"]): c["fit_seconds"]
                for c in report.cells if c["label"] == label and not c.get("error")}

    a, b = index(label_a), index(label_b)
    if not a or not b or set(a) != set(b):
        raise ReportError(f"cells for '{label_a}' and '{label_b}' are not matched")
    return float(np.mean([a[k] / b[k] for k in sorted(a)]))


__all__ = [
    "MantelResult", "MantelError", "ReportError", "pairwise_distances", "mantel",
    "rank_average", "ExperimentConfig", "ExperimentReport", "plan_cells", "run_experiment",
    "aggregate", "timing_ratio", "cell_label",
]
