"""Command-line runner: gen-data, train-index, run-fl, export-heatmap.

Every subcommand reads one JSON config document with optional sections
``data``, ``index``, ``fl``, ``enhancements`` and ``paths``.  Unknown keys are
rejected.  Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .embeddings import SynthesisSpec, ShardFormatError, load_shards, save_shards, synth_client_shards
from .fl_sim import FlConfig, run_experiment, write_round_csv, write_summary_json
from .index_gen import (
    IndexGenConfig,
    NumericalError,
    compute_client_indices,
    index_similarity_matrix,
    init_params,
    read_index_csv,
    save_params,
    train,
    write_index_csv,
)

log = logging.getLogger("clientindex")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

ENHANCEMENT_KEYS = {"sampling", "tau", "aggregation", "gamma", "lambda1", "local_reg",
                    "reg_weight", "kl_direction", "stop_grad_main"}
PATH_KEYS = {"shards", "index_params", "index_csv"}
SECTIONS = {"data", "index", "fl", "enhancements", "paths", "output_dir", "seed"}

SHARDS_FILE = "shards.fidx"
SPEC_FILE = "synthesis_spec.json"
PARAMS_FILE = "index_params.dsai"
INDEX_CSV = "client_index.csv"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: SynthesisSpec
    index: IndexGenConfig
    fl: FlConfig
    output_dir: Path
    seed: int
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        fl = dataclasses.asdict(self.fl)
        enh = {k: fl.pop(k) for k in sorted(ENHANCEMENT_KEYS)}
        return {
            "data": self.data.to_dict(),
            "index": dataclasses.asdict(self.index),
            "fl": fl,
            "enhancements": enh,
            "paths": dict(self.paths),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
        }


def _build(cls, section: dict, name: str, **forced):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    try:
        return cls(**{**section, **forced})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from None


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    enh = raw.get("enhancements", {})
    bad = set(enh) - ENHANCEMENT_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in 'enhancements': {', '.join(sorted(bad))}")
    fl_section = dict(raw.get("fl", {}))
    clash = set(fl_section) & ENHANCEMENT_KEYS
    if clash:
        raise ConfigError(f"enhancement key(s) belong in 'enhancements': {', '.join(sorted(clash))}")
    paths = dict(raw.get("paths", {}))
    bad = set(paths) - PATH_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in 'paths': {', '.join(sorted(bad))}")
    data = _build(SynthesisSpec, raw.get("data", {}), "data", seed=seed)
    index = _build(IndexGenConfig, raw.get("index", {}), "index", seed=seed)
    fl = _build(FlConfig, {**fl_section, **enh}, "fl", seed=seed)
    output_dir = Path(out if out is not None else raw.get("output_dir", "runs"))
    return ExperimentConfig(data, index, fl, output_dir, int(seed), paths)


def _write_manifest(cfg: ExperimentConfig, command: str, artifacts: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "version": __version__,
        "duration_sec": round(time.perf_counter() - started, 3),
    }
    path = cfg.output_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _shard_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.get("shards", cfg.output_dir / SHARDS_FILE))


def _load_shards(cfg: ExperimentConfig):
    path = _shard_path(cfg)
    try:
        return load_shards(path)
    except (OSError, ShardFormatError) as exc:
        raise ConfigError(f"cannot read shard file {path}: {exc}") from None


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    shards = synth_client_shards(cfg.data)
    path = cfg.output_dir / SHARDS_FILE
    save_shards(shards, path)
    spec_path = cfg.output_dir / SPEC_FILE
    spec_path.write_text(json.dumps(cfg.data.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d shards to %s", len(shards), path)
    return {"shards": path, "synthesis_spec": spec_path}


def cmd_train_index(cfg: ExperimentConfig) -> dict:
    shards = _load_shards(cfg)
    if not shards:
        raise ConfigError("shard file holds no clients")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if cfg.index.epochs == 0 and cfg.index.strategy == "global":
        params = init_params(shards[0].d_emb, cfg.index)
    else:
        params = train(shards, cfg.index)
    params_path = cfg.output_dir / PARAMS_FILE
    csv_path = cfg.output_dir / INDEX_CSV
    save_params(params, params_path)
    write_index_csv(compute_client_indices(params, shards), csv_path)
    return {"index_params": params_path, "index_csv": csv_path}


def cmd_run_fl(cfg: ExperimentConfig, baseline: bool = False) -> dict:
    fl = cfg.fl.without_enhancements() if baseline else cfg.fl
    indices = None
    if fl.enhanced:
        idx_path = Path(cfg.paths.get("index_csv", cfg.output_dir / INDEX_CSV))
        if not idx_path.exists():
            raise ConfigError(f"enhancements are on but index file {idx_path} does not exist")
        try:
            indices = read_index_csv(idx_path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read index file {idx_path}: {exc}") from None
    shards = _load_shards(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run_experiment(shards, indices, fl)
    except NumericalError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tag = "_baseline" if baseline else ""
    rounds_path = cfg.output_dir / f"rounds{tag}.csv"
    summary_path = cfg.output_dir / f"summary{tag}.json"
    write_round_csv(result, rounds_path)
    write_summary_json(result, fl, summary_path)
    log.info("best mean accuracy %.4f (round %d)", result.best_accuracy, result.best_round)
    return {"rounds_csv": rounds_path, "summary_json": summary_path}


def cmd_export_heatmap(index_csv: Path, part: str, out: Path) -> dict:
    try:
        indices = read_index_csv(index_csv)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read index CSV {index_csv}: {exc}") from None
    if not indices:
        raise ConfigError(f"{index_csv} holds no client indices")
    try:
        S = index_similarity_matrix(indices, part)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    ids = [i.client_id for i in indices]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id"] + ids)
        for cid, row in zip(ids, S):
            w.writerow([cid] + [repr(float(v)) for v in row])
    return {"heatmap_csv": out}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clientindex", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    common(sub.add_parser("gen-data", help="generate synthetic client shards"))
    common(sub.add_parser("train-index", help="train the index network and export client indices"))
    p = sub.add_parser("run-fl", help="run a federated experiment")
    common(p)
    p.add_argument("--baseline", action="store_true",
                   help="switch every enhancement off; writes *_baseline outputs")
    p.add_argument("--workers", type=int, help="threads for per-round client training")
    p = sub.add_parser("export-heatmap", help="client-by-client index similarity CSV")
    common(p)
    p.add_argument("--index-csv", help="client index CSV (default: <out>/client_index.csv)")
    p.add_argument("--part", choices=("feature", "label", "full"), default="feature")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        if args.command == "export-heatmap" and args.config is None:
            out_dir = Path(args.out or ".")
            idx = Path(args.index_csv) if args.index_csv else out_dir / INDEX_CSV
            cmd_export_heatmap(idx, args.part, out_dir / f"heatmap_{args.part}.csv")
            return EXIT_OK
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "gen-data":
            artifacts = cmd_gen_data(cfg)
        elif args.command == "train-index":
            artifacts = cmd_train_index(cfg)
        elif args.command == "run-fl":
            if args.workers is not None:
                cfg.fl = dataclasses.replace(cfg.fl, workers=args.workers)
            artifacts = cmd_run_fl(cfg, baseline=args.baseline)
        else:
            idx = Path(args.index_csv or cfg.paths.get("index_csv", cfg.output_dir / INDEX_CSV))
            artifacts = cmd_export_heatmap(idx, args.part, cfg.output_dir / f"heatmap_{args.part}.csv")
        _write_manifest(cfg, args.command.replace("-", "_"), artifacts, started)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
