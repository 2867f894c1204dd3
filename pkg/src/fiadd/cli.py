"""Operator surface: synth, train, eval, analyze, sweep and gradcheck
subcommands driven by an INI config with dotted flag overrides.

Every command is deterministic given its config and seeds; text reports
carry a generation timestamp unless --no-timestamp is passed, and the
line-delimited reports never do. Exit codes: 0 on success, 2 for
validation problems (bad config, malformed input), 1 for runtime failures
(divergence, failed checks, I/O).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis as an
from . import data as dt
from . import model as md
from .clusters import dump_index
from .gradcheck import TOLERANCE, run_gradcheck

REPORT_DIR_ENV = "FIADD_REPORT_DIR"


class ConfigError(ValueError):
    pass


class RunConfig:
    """Flat section/key string store from an INI file plus overrides."""

    def __init__(self, sections: dict[str, dict[str, str]] | None = None):
        self.sections = sections or {}

    @staticmethod
    def load(path: str | None) -> "RunConfig":
        cfg = RunConfig()
        if path is None:
            return cfg
        parser = configparser.ConfigParser()
        parser.optionxform = str
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            cfg.sections[section] = dict(parser.items(section))
        return cfg

    def set(self, dotted: str, value: str) -> None:
        if "." not in dotted:
            raise ConfigError(f"override '{dotted}' must look like section.key")
        section, key = dotted.split(".", 1)
        self.sections.setdefault(section, {})[key] = value

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def get_int(self, section: str, key: str, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer, got '{raw}'") from exc

    def get_float(self, section: str, key: str, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number, got '{raw}'") from exc

    def get_list(self, section: str, key: str, default=None, cast=str):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return [cast(part.strip()) for part in str(raw).split(",") if part.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse '{raw}'") from exc


def _parse_vector(raw: str, where: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in raw.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse vector '{raw}'") from exc


def _parse_cov(raw: str, where: str) -> np.ndarray:
    if ";" in raw:
        try:
            rows = [[float(p) for p in row.split(",")] for row in raw.split(";")]
            return np.array(rows, dtype=np.float64)
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse covariance '{raw}'") from exc
    return _parse_vector(raw, where)


def synthetic_spec_from_config(cfg: RunConfig) -> dt.SyntheticSpec:
    """Build a SyntheticSpec from [synth] / [class.<name>] sections; with no
    class sections the documented default geometry applies."""
    class_sections = {name[len("class."):]: body
                      for name, body in cfg.sections.items() if name.startswith("class.")}
    if not class_sections:
        spec = dt.SyntheticSpec.default()
        count = cfg.get_int("synth", "count")
        if count is not None:
            for cs in spec.classes:
                cs.count = count
        return spec
    names = cfg.get_list("synth", "class_names", default=sorted(class_sections))
    d_in = cfg.get_int("synth", "d_in")
    implicit = set(cfg.get_list("synth", "implicit_labels", default=[], cast=int))
    classes: list[dt.ClassSpec] = []
    for label, name in enumerate(names):
        if name not in class_sections:
            raise ConfigError(f"missing [class.{name}] section")
        body = class_sections[name]
        if "mean" not in body or "count" not in body:
            raise ConfigError(f"[class.{name}] needs count and mean")
        mean = _parse_vector(body["mean"], f"[class.{name}] mean")
        if d_in is None:
            d_in = mean.shape[0]
        cov = _parse_cov(body.get("cov", ",".join(["1"] * d_in)), f"[class.{name}] cov")
        default_count = cfg.get_int("synth", "count")
        count = int(body.get("count", default_count if default_count is not None else 0))
        implied_mean = None
        implied_cov = None
        if "implied_mean" in body:
            implied_mean = _parse_vector(body["implied_mean"], f"[class.{name}] implied_mean")
            implied_cov = _parse_cov(body["implied_cov"], f"[class.{name}]") if "implied_cov" in body else None
            implicit.add(label)
        classes.append(dt.ClassSpec(count, mean, cov, implied_mean, implied_cov))
    return dt.SyntheticSpec(d_in=d_in, class_names=list(names), implicit_labels=implicit, classes=classes)


def train_config_from(cfg: RunConfig, seed: int) -> md.TrainConfig:
    g = cfg
    kwargs = dict(
        epochs=g.get_int("train", "epochs", 5000),
        k=g.get_int("train", "k", 3),
        m=g.get_int("train", "m", 2),
        d=g.get_int("train", "d", None),
        gamma=g.get_float("train", "gamma", 2.0),
        beta=g.get_float("train", "beta", 0.5),
        alpha=g.get_float("train", "alpha", 1.0),
        learning_rate=g.get_float("train", "learning_rate", 0.01),
        optimizer=g.get("train", "optimizer", "sgd-momentum"),
        momentum=g.get_float("train", "momentum", 0.9),
        seed=seed,
        eval_every=g.get_int("train", "eval_every", 25),
        warmup_epochs=g.get_int("train", "warmup_epochs", None),
        variant=g.get("train", "variant", "add_inf_foc"),
        d_proj=g.get_int("train", "d_proj", 128),
        activation=g.get("train", "activation", "identity"),
        epsilon=g.get_float("train", "epsilon", 1e-7),
        minority_class=g.get_int("train", "minority_class", None),
        kmeans_max_iter=g.get_int("train", "kmeans_max_iter", 100),
    )
    weights = g.get_list("train", "class_weights", None, cast=float)
    if weights is not None:
        kwargs["class_weights"] = weights
    try:
        return md.TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _report_dir(cfg: RunConfig, args) -> Path:
    raw = getattr(args, "report_dir", None) or cfg.get("paths", "report_dir") \
        or os.environ.get(REPORT_DIR_ENV) or "."
    path = Path(raw)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stamp(args) -> list[str]:
    if getattr(args, "no_timestamp", False):
        return []
    return [f"# generated {datetime.now(timezone.utc).isoformat()}"]


def _write_text(path: Path, lines: list[str]) -> None:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as out:
        for rec in records:
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _parse_merge_map(cfg: RunConfig) -> tuple[dict[int, int] | None, dict[int, str]]:
    raw = cfg.get("eval", "merge")
    names_raw = cfg.get("eval", "merged_names")
    merged_names: dict[int, str] = {}
    if names_raw:
        for part in names_raw.split(","):
            key, name = part.split(":")
            merged_names[int(key)] = name.strip()
    if not raw:
        return None, merged_names
    merge: dict[int, int] = {}
    for part in raw.split(","):
        src, dst = part.split(":")
        merge[int(src)] = int(dst)
    return merge, merged_names


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = synthetic_spec_from_config(cfg)
    seed = cfg.get_int("synth", "seed", 1)
    out = cfg.get("synth", "out", "synthetic.jsonl")
    ds = dt.generate_synthetic(spec, seed)
    out_path = _report_dir(cfg, args) / out
    dt.dump_dataset(ds, out_path)
    print(f"wrote {len(ds)} samples to {out_path}")
    return 0


def _train_all_seeds(cfg: RunConfig, args, report_dir: Path, tag: str = "") -> tuple[list[dict], bool]:
    ds = dt.load_dataset(cfg.get("paths", "dataset", "synthetic.jsonl"))
    ratio = cfg.get_float("train", "ratio", 0.8)
    seeds = cfg.get_list("train", "seeds", [1, 4, 7], cast=int)
    rows: list[dict] = []
    any_aborted = False
    for seed in seeds:
        pair = dt.split(ds, ratio, seed)
        tcfg = train_config_from(cfg, seed)
        model = md.train(pair, tcfg)
        any_aborted = any_aborted or model.aborted
        ckpt = report_dir / f"checkpoint{tag}.seed{seed}.json"
        md.save_checkpoint(model, ckpt)
        _write_jsonl(report_dir / f"history{tag}.seed{seed}.jsonl", model.history)
        rows.append({
            "seed": seed,
            "best_epoch": model.best_checkpoint["epoch"],
            "macro_f1": model.best_checkpoint["macro_f1"],
            "highest_minority_f1": model.highest_minority_f1,
            "minority_class": model.minority_class,
            "aborted": model.aborted,
            "checkpoint": ckpt.name,
        })
    return rows, any_aborted


def cmd_train(cfg: RunConfig, args) -> int:
    report_dir = _report_dir(cfg, args)
    rows, any_aborted = _train_all_seeds(cfg, args, report_dir)
    best = max(rows, key=lambda r: r["macro_f1"])
    lines = _stamp(args) + ["seed  best_epoch  macro_f1  highest_minority_f1"]
    for r in rows:
        mark = " *" if r is best else ""
        lines.append(f"{r['seed']:<5} {r['best_epoch']:<11} {r['macro_f1']:.6f}  "
                     f"{r['highest_minority_f1']:.6f}{mark}")
    lines.append(f"best seed: {best['seed']} (macro-F1 {best['macro_f1']:.6f})")
    _write_text(report_dir / "summary.txt", lines)
    _write_jsonl(report_dir / "summary.jsonl",
                 rows + [{"best_seed": best["seed"], "best_macro_f1": best["macro_f1"]}])
    print("\n".join(lines))
    return 1 if any_aborted else 0


def cmd_eval(cfg: RunConfig, args) -> int:
    report_dir = _report_dir(cfg, args)
    ckpt_path = cfg.get("paths", "checkpoint")
    if ckpt_path is None:
        raise ConfigError("[paths] checkpoint is required for eval")
    model = md.load_checkpoint(ckpt_path)
    d_in = model.projection.weight.shape[0]
    try:
        ds = dt.load_dataset(cfg.get("paths", "dataset"), expected_dim=d_in)
    except dt.DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    mode = getattr(args, "mode", None) or cfg.get("eval", "mode", "classifier")
    if mode not in ("classifier", "nearest-cluster"):
        raise ConfigError(f"unknown eval mode '{mode}'")
    params = getattr(args, "params", None) or cfg.get("eval", "params", "final")
    if params not in ("final", "best"):
        raise ConfigError(f"unknown eval params '{params}'")
    if params == "best":
        if mode == "nearest-cluster":
            raise ConfigError("nearest-cluster mode requires the final parameters "
                              "(the stored index is built on final projections)")
        best = model.best_checkpoint
        model.projection.weight = best["projection_weight"]
        model.projection.bias = best["projection_bias"]
        model.classifier.weight = best["classifier_weight"]
        model.classifier.bias = best["classifier_bias"]
    labels = ds.labels()
    if mode == "nearest-cluster":
        preds = np.array([md.predict_nearest_cluster(model, model.final_index, s.vector)
                          for s in ds.samples])
    else:
        preds = md.predict_batch(model, ds.vectors())
    merge, merged_names = _parse_merge_map(cfg)

    def row_name(c: int) -> str:
        if merge:
            if c in merged_names:
                return merged_names[c]
            parts = [ds.class_names[src] for src in range(ds.n_classes) if merge.get(src, src) == c]
            return "+".join(parts)
        return ds.class_names[c]

    if merge:
        labels_m = np.array([merge.get(int(l), int(l)) for l in labels])
        preds_m = np.array([merge.get(int(p), int(p)) for p in preds])
        space = sorted({merge.get(c, c) for c in range(ds.n_classes)})
        metrics = md.per_class_f1(labels_m, preds_m, space)
    else:
        metrics = md.per_class_f1(labels, preds, list(range(ds.n_classes)))

    lines = _stamp(args) + [f"mode: {mode}", f"Macro      {metrics.macro_f1:.6f}"]
    records = [{"metric": "macro_f1", "value": metrics.macro_f1, "mode": mode}]
    for c, f1 in zip(metrics.class_ids, metrics.per_class_f1):
        flag = "  (absent)" if c in metrics.absent else ""
        lines.append(f"{row_name(c):<10} {f1:.6f}{flag}")
        records.append({"metric": f"f1[{row_name(c)}]", "value": f1, "mode": mode})
    _write_text(report_dir / "metrics.txt", lines)
    _write_jsonl(report_dir / "metrics.jsonl", records)
    print("\n".join(lines))
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    report_dir = _report_dir(cfg, args)
    ds = dt.load_dataset(cfg.get("paths", "dataset"))
    lines = _stamp(args)
    records: list[dict] = []

    try:
        motivation = an.motivation_report(ds, "raw")
        lines.append("motivation report (L1, raw embeddings)")
        for col in an.MOTIVATION_COLUMNS:
            lines.append(f"  {col:<9} {motivation[col]:.6f}")
        records.append({"section": "motivation", **{k: float(v) for k, v in motivation.items()}})
    except ValueError as exc:
        lines.append(f"motivation report skipped: {exc}")

    ckpt_path = cfg.get("paths", "checkpoint")
    if ckpt_path:
        model = md.load_checkpoint(ckpt_path)
        sil = an.subcluster_silhouettes(model, ds)
        lines.append("per-class subcluster silhouettes (L2, latent)")
        for cls, value in sil.items():
            lines.append(f"  class {cls} ({ds.class_names[cls]}): {value:.6f}")
            records.append({"section": "subcluster_silhouette", "class": cls, "value": float(value)})
        try:
            ii = an.implicit_implied_silhouette(model, ds)
            lines.append(f"implicit vs implied silhouette: {ii:.6f}")
            records.append({"section": "implicit_implied_silhouette", "value": float(ii)})
        except ValueError:
            lines.append("implicit vs implied silhouette skipped: no implied vectors")
        try:
            err = an.error_analysis_scores(model, ds, k=cfg.get_int("analyze", "k", 3))
            mean_score = float(np.mean(err["scores"])) if len(err["scores"]) else 0.5
            frac = float(np.mean(np.asarray(err["scores"]) < 0.5)) if len(err["scores"]) else 0.0
            lines.append(f"relative explicit distance: mean {mean_score:.6f}, "
                         f"fraction closer to explicit {frac:.6f}")
            for sid, score in zip(err["ids"], err["scores"]):
                records.append({"section": "relative_distance", "id": sid, "score": float(score)})
        except ValueError as exc:
            lines.append(f"relative-distance analysis skipped: {exc}")
        latent_path = report_dir / cfg.get("analyze", "latent_out", "latent.jsonl")
        an.dump_latent(model, ds, latent_path)
        lines.append(f"latent dump: {latent_path.name}")
        index_path = report_dir / cfg.get("analyze", "index_out", "index.jsonl")
        dump_index(model.final_index, index_path)
        lines.append(f"cluster index dump: {index_path.name}")

    _write_text(report_dir / "analysis.txt", lines)
    _write_jsonl(report_dir / "analysis.jsonl", records)
    print("\n".join(lines))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    report_dir = _report_dir(cfg, args)
    param = cfg.get("sweep", "param")
    values = cfg.get_list("sweep", "values", [])
    if not param or not values:
        raise ConfigError("[sweep] needs param (section.key) and a non-empty values list")
    if "." not in param:
        raise ConfigError("[sweep] param must look like section.key")
    rows = []
    for value in values:
        sub = RunConfig({k: dict(v) for k, v in cfg.sections.items()})
        sub.set(param, value)
        subdir = report_dir / f"sweep_{param.replace('.', '_')}_{value}"
        subdir.mkdir(parents=True, exist_ok=True)
        seed_rows, _ = _train_all_seeds(sub, args, subdir)
        best = max(seed_rows, key=lambda r: r["macro_f1"])
        rows.append({"param": param, "value": value, "macro_f1": best["macro_f1"],
                     "best_seed": best["seed"]})
    best_row = max(rows, key=lambda r: r["macro_f1"])
    for r in rows:
        r["argmax"] = r is best_row
    lines = _stamp(args) + [f"sweep over {param}", "value   macro_f1   argmax"]
    for r in rows:
        lines.append(f"{r['value']:<7} {r['macro_f1']:.6f}   {'*' if r['argmax'] else ''}")
    _write_text(report_dir / "sweep.txt", lines)
    _write_jsonl(report_dir / "sweep.jsonl", rows)
    print("\n".join(lines))
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report_dir = _report_dir(cfg, args)
    n_batches = cfg.get_int("gradcheck", "batches", 20)
    step = cfg.get_float("gradcheck", "step", 1e-5)
    rows = run_gradcheck(n_batches=n_batches, step=step, corrupt=getattr(args, "corrupt", None))
    lines = _stamp(args) + [f"tolerance {TOLERANCE:g}", "operation                max_rel_err  status"]
    records = []
    for row in rows:
        status = "PASS" if row.passed else "FAIL"
        lines.append(f"{row.operation:<24} {row.max_rel_err:.3e}    {status}")
        records.append({"operation": row.operation, "max_rel_err": row.max_rel_err,
                        "passed": row.passed})
    ok = all(row.passed for row in rows)
    lines.append("all checks passed" if ok else "FAILED: "
                 + ", ".join(r.operation for r in rows if not r.passed))
    _write_text(report_dir / "gradcheck.txt", lines)
    _write_jsonl(report_dir / "gradcheck.jsonl", records)
    print("\n".join(lines))
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fiadd",
                                     description="metric-learning engine over frozen embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--report-dir", default=None)
        p.add_argument("--no-timestamp", action="store_true")
        if name == "synth":
            p.add_argument("--seed", default=None)
            p.add_argument("--count", default=None)
            p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--mode", default=None, choices=["classifier", "nearest-cluster"])
            p.add_argument("--params", default=None, choices=["final", "best"])
        if name == "gradcheck":
            p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        # dotted overrides: --section.key value
        i = 0
        while i < len(extra):
            token = extra[i]
            if not token.startswith("--") or "." not in token:
                raise ConfigError(f"unrecognized argument '{token}'")
            if i + 1 >= len(extra):
                raise ConfigError(f"override '{token}' is missing a value")
            cfg.set(token[2:], extra[i + 1])
            i += 2
        if args.command == "synth":
            for key in ("seed", "count", "out"):
                value = getattr(args, key, None)
                if value is not None:
                    cfg.set(f"synth.{key}", value)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, dt.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
