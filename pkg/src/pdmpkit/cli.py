"""Command line front end: ``pdmpkit {simulate,verify,density,report}``.

Output layout under ``--out DIR``::

    paths.pdmp            path store (see pdmpkit.store for the record format)
    summary.json          digest, event statistics, error and suppression rates
    class_histogram.csv   class_key, count, fraction
    class_images.csv      per-class bounding boxes of the target particle's v(t), x(t)
    verify_<suite>.json   verification reports
    density/*.csv         class-restricted density tables

Seeds: ``--seed`` wins over the ``PDMP_SEED`` environment variable, which
wins over the config file. Every CSV starts with a ``# config_hash`` line and
writes numbers with 17 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig, config_hash, dump_config, load_config
from .errors import ConfigError, HorizonOnEvent, PdmpError
from .reduced import trajectory_class
from .simulator import ensemble_header, iter_path_chunks
from .store import StoreWriter, encode_record, iter_store_chunks, store_digest

STORE_NAME = "paths.pdmp"


def _num(x: float) -> str:
    return f"{float(x):.17g}"


def resolve_seed(flag: Optional[int], cfg: RunConfig) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get("PDMP_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PDMP_SEED must be an integer, got {env!r}") from None
    return cfg.seed


# ---------------------------------------------------------------------------
# per-path summaries


def _path_summary(idx: int, item) -> Dict:
    """Compact per-path record for the run summary and class histogram."""
    if isinstance(item, Exception):
        return {"error": getattr(item, "kind", type(item).__name__)}
    try:
        cls = trajectory_class(item)
        key = cls.key
        last = cls.last
    except HorizonOnEvent:
        return {"error": "HorizonOnEvent"}
    if last is None:
        particle = 0
    else:
        particle = last[1]
    return {
        "error": None,
        "key": key,
        "collisions": item.n_collisions,
        "reflections": item.n_reflections,
        "suppressed": sum(1 for ev in item.events if getattr(ev, "suppressed", False)),
        "pass_through": item.n_pass,
        "cancelled": item.n_cancel,
        "particle": particle,
        "v": item.velocities_at(item.t_max)[particle],
        "x": item.positions_at(item.t_max)[particle],
    }


def _record_and_summary(idx: int, item):
    return encode_record(idx, item), _path_summary(idx, item)


class Summary:
    """Accumulates event statistics, the class histogram and class image boxes."""

    def __init__(self):
        self.n = 0
        self.errors: Dict[str, int] = {}
        self.classes: Dict[str, int] = {}
        self.boxes: Dict[str, List] = {}
        self.totals = {"collisions": 0, "reflections": 0, "suppressed": 0, "pass_through": 0, "cancelled": 0}
        self.paths_with_suppression = 0

    def add(self, s: Dict) -> None:
        self.n += 1
        if s["error"] is not None:
            self.errors[s["error"]] = self.errors.get(s["error"], 0) + 1
            return
        key = s["key"]
        self.classes[key] = self.classes.get(key, 0) + 1
        for k in self.totals:
            self.totals[k] += s[k]
        if s["suppressed"]:
            self.paths_with_suppression += 1
        v, x = np.asarray(s["v"]), np.asarray(s["x"])
        box = self.boxes.get(key)
        if box is None:
            self.boxes[key] = [s["particle"], v.copy(), v.copy(), x.copy(), x.copy()]
        else:
            box[1] = np.minimum(box[1], v)
            box[2] = np.maximum(box[2], v)
            box[3] = np.minimum(box[3], x)
            box[4] = np.maximum(box[4], x)

    @property
    def n_error(self) -> int:
        return sum(self.errors.values())

    def as_dict(self) -> Dict:
        n = max(self.n, 1)
        ok = max(self.n - self.n_error, 1)
        return {
            "n_paths": self.n,
            "n_error_paths": self.n_error,
            "fraction_error_paths": self.n_error / n,
            "error_kinds": dict(sorted(self.errors.items())),
            "n_classes": len(self.classes),
            "events": dict(self.totals),
            "mean_collisions_per_path": self.totals["collisions"] / ok,
            "mean_reflections_per_path": self.totals["reflections"] / ok,
            "suppression_rate": self.totals["suppressed"] / max(self.totals["collisions"], 1),
            "fraction_paths_with_suppression": self.paths_with_suppression / n,
        }

    def write_histogram(self, path: Path, chash: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# config_hash {chash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_key", "count", "fraction"])
            for key in sorted(self.classes, key=lambda k: (-self.classes[k], k)):
                w.writerow([key, self.classes[key], _num(self.classes[key] / self.n)])

    def write_boxes(self, path: Path, chash: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# config_hash {chash}\n")
            w = csv.writer(fh, lineterminator="\n")
            if not self.boxes:
                w.writerow(["class_key", "particle"])
                return
            d = len(next(iter(self.boxes.values()))[1])
            head = ["class_key", "particle"]
            for name in ("v", "x"):
                for r in range(d):
                    head += [f"{name}{r}_min", f"{name}{r}_max"]
            w.writerow(head)
            for key in sorted(self.boxes):
                p, vlo, vhi, xlo, xhi = self.boxes[key]
                row = [key, p]
                for lo, hi in ((vlo, vhi), (xlo, xhi)):
                    for r in range(d):
                        row += [_num(lo[r]), _num(hi[r])]
                w.writerow(row)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finish_summary(out: Path, summary: Summary, extra: Dict, chash: str) -> Dict:
    body = summary.as_dict()
    body.update(extra)
    body["config_hash"] = chash
    _write_json(out / "summary.json", body)
    summary.write_histogram(out / "class_histogram.csv", chash)
    summary.write_boxes(out / "class_images.csv", chash)
    return body


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, seed: int, n_paths: int, workers: int, out: Path) -> Dict:
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model
    chash = config_hash(model)
    writer = StoreWriter(out / STORE_NAME, ensemble_header(model, seed, n_paths))
    summary = Summary()
    for part in iter_path_chunks(model, seed, n_paths, _record_and_summary, workers=workers):
        for rec, s in part:
            writer.append(rec)
            summary.add(s)
    digest = writer.close()
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    return _finish_summary(out, summary, {"digest": digest, "seed": seed, "store": STORE_NAME}, chash)


def cmd_report(cfg: RunConfig, out: Path, workers: int = 1) -> Dict:
    store = out / STORE_NAME
    if not store.exists():
        raise PdmpError(f"{store}: no path store (run 'pdmpkit simulate' first)")
    header, chunks = iter_store_chunks(store, _path_summary, workers=workers)
    summary = Summary()
    for part in chunks:
        for s in part:
            summary.add(s)
    return _finish_summary(out, summary, {"digest": store_digest(store), "seed": header.get("seed"), "store": STORE_NAME}, header.get("config_hash", config_hash(cfg.model)))


def _store_or_none(out: Path, cfg: RunConfig) -> Optional[Path]:
    store = out / STORE_NAME
    return store if store.exists() else None


def cmd_verify(cfg: RunConfig, suite: str, seed: int, n_paths: Optional[int], workers: int, out: Path, key: Optional[str], target: str) -> List[Dict]:
    from . import verify as V

    model, vc, dc = cfg.model, cfg.verify, cfg.density
    store = _store_or_none(out, cfg)
    if suite == "exercise":
        reps = V.exercise_suite(model, vc, seed)
    elif suite == "ibp2":
        reps = V.ibp2_suite(model, vc, seed)
    elif suite == "flow":
        reps = V.flow_suite(model, vc, seed, n_paths or vc.flow_paths, workers, store)
    elif suite == "duality":
        reps = V.duality_suite(model, vc, seed, n_paths or vc.duality_paths, workers, store)
    elif suite == "density-ibp":
        reps = V.density_ibp_suite(model, vc, dc, seed, n_paths or cfg.n_paths, key, target, workers, store=store)
    else:
        raise ConfigError(f"unknown suite {suite!r}")
    out.mkdir(parents=True, exist_ok=True)
    for r in reps:
        r.setdefault("config_hash", config_hash(model))
    _write_json(out / f"verify_{suite}.json", reps)
    return reps


def _safe_name(key: str) -> str:
    base = re.sub(r"[^A-Za-z0-9]+", "_", key).strip("_") or "class"
    return f"{base}_{hashlib.blake2b(key.encode(), digest_size=3).hexdigest()}"


def cmd_density(cfg: RunConfig, seed: int, n_paths: Optional[int], workers: int, out: Path, key: Optional[str], target: str):
    from .density import write_density_csv
    from .verify import density_tables

    store = _store_or_none(out, cfg)
    tables, failures = density_tables(cfg.model, cfg.density, seed, n_paths or cfg.n_paths, key, target, workers, store)
    ddir = out / "density"
    ddir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg.model)
    index = []
    for k, table in sorted(tables.items()):
        name = f"{_safe_name(k)}_{target}.csv"
        write_density_csv(table, ddir / name, chash)
        index.append({"class_key": k, "file": name, "n_class": table.n_class})
    _write_json(ddir / f"index_{target}.json", {"tables": index, "insufficient": failures, "config_hash": chash})
    return tables, failures


def all_pass(reports: Sequence[Dict]) -> bool:
    return all(r["pass"] for r in reports if r.get("gated", True))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdmpkit", description="Hard-sphere particle system in a ball: simulation, verification and class densities.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides PDMP_SEED and the config)")
        sp.add_argument("--paths", type=int, default=None, help="number of paths")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
        sp.add_argument("--out", type=Path, default=None, help="output directory")

    common(sub.add_parser("simulate", help="simulate an ensemble into a path store"))
    v = sub.add_parser("verify", help="run a verification suite")
    common(v)
    v.add_argument("--suite", required=True, choices=["exercise", "ibp2", "flow", "duality", "density-ibp"])
    v.add_argument("--class", dest="class_key", default=None, help="class key for density-ibp")
    v.add_argument("--target", choices=["v", "x"], default="v")
    d = sub.add_parser("density", help="class-restricted density tables")
    common(d)
    d.add_argument("--class", dest="class_key", default=None, help="class key (default: every class with enough paths)")
    d.add_argument("--target", choices=["v", "x"], default="v")
    common(sub.add_parser("report", help="summaries and class histogram of an existing path store"))
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(args.seed, cfg)
        out = args.out or Path(cfg.out)
        workers = max(1, args.workers)
        if args.command == "simulate":
            body = cmd_simulate(cfg, seed, args.paths or cfg.n_paths, workers, out)
            print(json.dumps(body, indent=2, sort_keys=True))
            return 0
        if args.command == "report":
            body = cmd_report(cfg, out, workers)
            print(json.dumps(body, indent=2, sort_keys=True))
            return 0
        if args.command == "verify":
            reps = cmd_verify(cfg, args.suite, seed, args.paths, workers, out, args.class_key, args.target)
            print(json.dumps(reps, indent=2))
            ok = all_pass(reps)
            if not ok:
                for r in reps:
                    if not r["pass"] and r.get("gated", True):
                        print(f"FAILED {r['identity']}: residual {r['residual']:.6g}", file=sys.stderr)
            return 0 if ok else 1
        if args.command == "density":
            tables, failures = cmd_density(cfg, seed, args.paths, workers, out, args.class_key, args.target)
            for k, msg in sorted(failures.items()):
                print(f"skipped: {msg}", file=sys.stderr)
            print(json.dumps({"tables": sorted(tables), "insufficient": len(failures)}, indent=2))
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PdmpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
