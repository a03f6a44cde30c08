"""Command-line pipeline: fit -> embed -> train-ae -> extend, plus benchmark.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from . import autoencoder as ae
from .data import load_csv, load_unlabeled_csv
from .embed import DiffusionConfig, Embedding, rfphate_embed
from .evaluation import ExperimentConfig, plan_cells, run_experiment
from .forest import Forest, ForestParams, fit_forest, oob_accuracy
from .proximity import train_proximities

log = logging.getLogger("rfextend")

SECTIONS = ("forest", "embed", "ae", "eval", "io")


class CLIError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _t_value(text):
    return "auto" if text == "auto" else _positive_int(text)


def _fraction(text):
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return value


def load_run_config(args) -> dict:
    """Config-file sections overlaid with explicit flags (flags win)."""
    cfg = {s: {} for s in SECTIONS}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        for s in SECTIONS:
            cfg[s].update(doc.get(s, {}))
    flag_map = {
        "trees": ("forest", "n_trees"),
        "k": ("embed", "k_dim"),
        "t": ("embed", "t"),
        "variant": ("ae", "variant"),
        "lam": ("ae", "lambda"),
        "proto_frac": ("ae", "proto_frac"),
        "epochs": ("ae", "epochs"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None:
        for section in ("forest", "embed", "ae"):
            cfg[section]["seed"] = args.seed
    for attr in ("data", "label", "out_dir"):
        value = getattr(args, attr, None)
        if value is not None:
            cfg["io"][attr] = str(value)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["io"].get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _training_data(cfg, out):
    """Training dataset from flags, or from the settings recorded by ``fit``."""
    io = dict(cfg["io"])
    if "data" not in io or "label" not in io:
        meta_path = out / "fit.meta.json"
        if not meta_path.exists():
            raise CLIError("training data unknown: pass --data and --label or run 'fit' first")
        recorded = json.loads(meta_path.read_text())["settings"]["io"]
        io.setdefault("data", recorded["data"])
        io.setdefault("label", recorded["label"])
    return load_csv(io["data"], io["label"])


def _read_forest(args, out) -> Forest:
    path = Path(args.forest) if args.forest else out / "forest.json"
    if not path.exists():
        raise CLIError(f"forest file not found: {path}")
    return Forest.from_json(path.read_text())


def cmd_fit(args):
    cfg = load_run_config(args)
    if "data" not in cfg["io"] or "label" not in cfg["io"]:
        raise CLIError("fit needs --data and --label")
    out = _out_dir(cfg)
    ds = load_csv(cfg["io"]["data"], cfg["io"]["label"])
    params = ForestParams(**{k: v for k, v in cfg["forest"].items()})
    f = fit_forest(ds, None, params)
    mode = {"zero": "zero", "passdown": "inbag_passdown"}[args.self_sim]
    P = train_proximities(f, ds, mode=mode)
    (out / "forest.json").write_text(f.to_json())
    P.to_csv(out / "prox.csv")
    acc = oob_accuracy(f, ds)
    _write_json(out / "fit.meta.json", {
        "command": "fit", "settings": cfg, "forest_params": asdict(params),
        "self_similarity_mode": mode, "oob_accuracy": acc, "n_train": ds.n,
        "class_names": ds.class_names, "feature_names": ds.feature_names,
    })
    print(f"OOB accuracy: {acc:.4f}")
    print(f"wrote {out / 'forest.json'} and {out / 'prox.csv'}")
    return 0


def cmd_embed(args):
    cfg = load_run_config(args)
    out = _out_dir(cfg)
    f = _read_forest(args, out)
    ds = _training_data(cfg, out)
    ecfg = DiffusionConfig(**cfg["embed"])
    E = rfphate_embed(f, ds, ecfg)
    E.meta["settings"] = cfg
    E.write(out / "embedding.csv")
    print(f"t = {E.meta['t']}, stress = {E.meta['stress']:.6g}, iterations = {E.meta['iterations']}")
    print(f"wrote {out / 'embedding.csv'}")
    return 0


def cmd_train_ae(args):
    cfg = load_run_config(args)
    out = _out_dir(cfg)
    f = _read_forest(args, out)
    ds = _training_data(cfg, out)
    emb_path = Path(args.embedding) if args.embedding else out / "embedding.csv"
    if not emb_path.exists():
        raise CLIError(f"embedding file not found: {emb_path}")
    G = Embedding.read_csv(emb_path)
    a = cfg["ae"]
    variant = ae.canonical_variant(a.get("variant", ae.RF_PRN))
    if variant == ae.RF_PRN_PRO and a.get("proto_frac") is None:
        raise CLIError("RF-PRN-PRO needs --proto-frac")
    if variant != ae.RF_PRN_PRO and a.get("proto_frac") is not None:
        raise CLIError(f"--proto-frac only applies to RF-PRN-PRO, not {variant}")
    keys = {"epochs", "batch_size", "learning_rate", "optimizer", "beta1", "beta2", "eps",
            "lr_decay", "seed"}
    tcfg = ae.TrainConfig(**{k: v for k, v in a.items() if k in keys})
    fit = ae.fit_extension(
        variant, f, ds, G, lam=float(a.get("lambda", 1.0)), gamma=float(a.get("gamma", 1.0)),
        proto_frac=a.get("proto_frac"), hidden=tuple(a.get("hidden", (800, 400, 100))),
        train_cfg=tcfg, standardize_g=a.get("standardize_g", True),
    )
    fit.model.meta.update({"settings": cfg, "fit_seconds": fit.seconds, "recon_mse": fit.recon_mse,
                           "final_loss": fit.history["total"][-1] if fit.history["total"] else None})
    (out / "model.json").write_text(fit.model.to_json())
    Embedding(fit.train_latent, "encoder").to_csv(out / "train_latent.csv")
    print(f"{variant} lambda={fit.model.lam:g}: trained in {fit.seconds:.2f}s, "
          f"reconstruction MSE {fit.recon_mse:.4g}")
    print(f"wrote {out / 'model.json'}")
    return 0


class _TrainingShape:
    """Row/column counts of the forest's training set; extension needs nothing more."""

    def __init__(self, f: Forest):
        self.n = f.n_train
        self.d = f.n_features


def cmd_extend(args):
    cfg = load_run_config(args)
    out = _out_dir(cfg)
    if "data" not in cfg["io"]:
        raise CLIError("extend needs --data (an unlabeled feature CSV)")
    model_path = Path(args.model) if args.model else out / "model.json"
    if not model_path.exists():
        raise CLIError(f"model file not found: {model_path}")
    m = ae.AEModel.from_json(model_path.read_text())
    f = _read_forest(args, out)
    X = load_unlabeled_csv(cfg["io"]["data"], m.meta.get("feature_names"))
    E = ae.extend(m, f, _TrainingShape(f), X)
    E.meta["settings"] = cfg
    target = Path(args.output) if args.output else out / "extension.csv"
    E.write(target)
    print(f"embedded {E.n} points with {m.variant}; wrote {target}")
    return 0


def default_benchmark_config() -> Path:
    return Path(str(resources.files("rfextend") / "configs" / "desk_scale.json"))


def cmd_benchmark(args):
    path = Path(args.config) if args.config else default_benchmark_config()
    cfg = ExperimentConfig.from_json(path)
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.epochs is not None:
        cfg.ae["epochs"] = args.epochs
    cells = plan_cells(cfg)
    if args.dry_run:
        for c in cells:
            print(f"{c['dataset']}\tseed={c['seed']}\t{c['label']}\tlambda={c['lam']:g}")
        print(f"{len(cells)} cells")
        return 0
    report = run_experiment(cfg, jobs=args.jobs)
    out = Path(args.out_dir or "benchmark")
    paths = report.write(out)
    print(report.table())
    print(f"wrote {paths['cells']}, {paths['aggregates']}, {paths['table']}")
    if report.n_failed:
        print(f"{report.n_failed} of {len(report.cells)} cells failed", file=sys.stderr)
    return 1 if report.n_failed == len(report.cells) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfextend", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file with forest/embed/ae/eval/io sections")
        sp.add_argument("--out-dir", dest="out_dir", help="directory for artifacts (default .)")
        sp.add_argument("--seed", type=_nonneg_int)
        if data:
            sp.add_argument("--data", help="CSV file")
            sp.add_argument("--label", help="label column name")

    sp = sub.add_parser("fit", help="fit the forest and export training proximities")
    common(sp)
    sp.add_argument("--trees", type=_positive_int)
    sp.add_argument("--self-sim", dest="self_sim", choices=("zero", "passdown"), default="zero")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("embed", help="reference embedding of the training rows")
    common(sp)
    sp.add_argument("--forest")
    sp.add_argument("--k", type=_positive_int)
    sp.add_argument("--t", type=_t_value, help="diffusion time or 'auto'")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train-ae", help="train an extension autoencoder")
    common(sp)
    sp.add_argument("--forest")
    sp.add_argument("--embedding")
    sp.add_argument("--variant", type=str.lower,
                    choices=[v.lower() for v in ae.VARIANTS], default=None)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--proto-frac", dest="proto_frac", type=_fraction)
    sp.add_argument("--epochs", type=_nonneg_int)
    sp.set_defaults(func=cmd_train_ae)

    sp = sub.add_parser("extend", help="embed unlabeled points with a trained model")
    common(sp, data=False)
    sp.add_argument("--data", help="unlabeled feature CSV")
    sp.add_argument("--model")
    sp.add_argument("--forest")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_extend)

    sp = sub.add_parser("benchmark", help="run the extension benchmark grid")
    sp.add_argument("--config", help="experiment JSON (default: bundled desk-scale suite)")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--jobs", type=_positive_int, default=1)
    sp.add_argument("--seeds", type=_positive_int, help="override the number of seeds")
    sp.add_argument("--epochs", type=_nonneg_int)
    sp.add_argument("--dry-run", dest="dry_run", action="store_true")
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "load_run_config"]
