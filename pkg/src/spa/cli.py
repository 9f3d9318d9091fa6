"""Command-line entry point: ``spa <command> [options]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime errors. Runtime errors print one ``ERROR:<module>:<kind>: message``
line on standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence, TextIO

from spa.data import SyntheticConfig, TemporalKG, dataset_stats, generate_synthetic, load_dataset, write_dataset
from spa.errors import ConfigurationError, GenerationError, SpaError
from spa.objective import evaluate
from spa.search import (
    EpochLog,
    FinetuneSpace,
    SearchConfig,
    SearchRecord,
    finetune,
    rank_correlation_study,
    search_architectures,
    train_supernet,
)
from spa.supernet import ArchDescriptor, load_checkpoint, save_checkpoint

COMMANDS = ("stats", "synth", "train-supernet", "search", "finetune", "evaluate", "rank-corr")
CONFIG_KEYS = {"dataset", "search", "finetune", "architecture", "supernet", "rank_correlation", "split", "workers"}
DATASET_FILES = ("train", "valid", "test")


class UsageFailure(Exception):
    """Bad command line or configuration file; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spa", description="Architecture search for temporal KG completion.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (default: the current directory)")
        p.add_argument("--seed", type=int, help="overrides search.seed")
        p.add_argument("--workers", type=int, help="threads for architecture scoring")
        p.add_argument("--train")
        p.add_argument("--valid")
        p.add_argument("--test")
        p.add_argument("--supernet", help="supernet or model checkpoint")
        p.add_argument("--arch", help="architecture descriptor JSON file")
        p.add_argument("--split", choices=("valid", "test"))
    return parser


# ---------------------------------------------------------------------------
# configuration

@dataclasses.dataclass
class RunConfig:
    dataset: dict
    search: SearchConfig
    finetune: FinetuneSpace
    architecture: ArchDescriptor | None = None
    supernet: str | None = None
    rank_correlation: dict = dataclasses.field(default_factory=lambda: {"n": 20, "standalone_epochs": 50})
    split: str = "test"
    workers: int = 1

    def to_dict(self) -> dict:
        ft = dataclasses.asdict(self.finetune)
        return {
            "dataset": self.dataset,
            "search": self.search.to_dict(),
            "finetune": {k: list(v) if isinstance(v, tuple) else v for k, v in ft.items()},
            "architecture": self.architecture.to_dict() if self.architecture else None,
            "supernet": self.supernet,
            "rank_correlation": self.rank_correlation,
            "split": self.split,
            "workers": self.workers,
        }


def _strict(obj: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(obj, Mapping):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(obj)


def _resolve(path: str, base: Path) -> str:
    p = Path(path)
    return str((p if p.is_absolute() else base / p).resolve())


def _parse_dataset(obj: Any, base: Path) -> dict:
    obj = _strict(obj, {*DATASET_FILES, "synthetic"}, "dataset")
    if "synthetic" in obj:
        if set(obj) != {"synthetic"}:
            raise ConfigurationError("dataset takes either 'synthetic' or file paths, not both")
        known = {f.name for f in dataclasses.fields(SyntheticConfig)}
        synth = _strict(obj["synthetic"], known, "dataset.synthetic")
        return {"synthetic": dataclasses.asdict(SyntheticConfig(**synth))}
    if obj and set(obj) != set(DATASET_FILES):
        raise ConfigurationError("dataset needs all of train, valid and test")
    return {k: _resolve(v, base) for k, v in obj.items()}


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Read the config file (if any) and apply command-line overrides; all paths come back absolute."""
    raw: dict = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageFailure(f"cannot read config {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageFailure(f"config {path} is not valid JSON: {exc}") from None
        base = path.resolve().parent
    elif args.command != "stats":
        raise UsageFailure(f"spa {args.command}: --config is required")
    try:
        raw = _strict(raw, CONFIG_KEYS, "config")
        dataset = _parse_dataset(raw.get("dataset", {}), base)
        files = {k: getattr(args, k) for k in DATASET_FILES if getattr(args, k)}
        if files:
            if set(files) != set(DATASET_FILES):
                raise ConfigurationError("--train, --valid and --test must be given together")
            dataset = {k: _resolve(v, Path.cwd()) for k, v in files.items()}
        search = _strict(raw.get("search", {}), {f.name for f in dataclasses.fields(SearchConfig)}, "search")
        if args.seed is not None:
            search["seed"] = args.seed
        search_cfg = SearchConfig.from_dict(search)
        ft = _strict(raw.get("finetune", {}), {f.name for f in dataclasses.fields(FinetuneSpace)}, "finetune")
        ft = {k: tuple(v) if isinstance(v, list) else v for k, v in ft.items()}
        ft.setdefault("trial_count", search_cfg.finetune_trials)
        arch = raw.get("architecture")
        if args.arch:
            arch = _read_json(Path(args.arch))
        supernet = raw.get("supernet")
        supernet = _resolve(args.supernet, Path.cwd()) if args.supernet else (
            _resolve(supernet, base) if supernet else None)
        rc = _strict(raw.get("rank_correlation", {}), {"n", "standalone_epochs"}, "rank_correlation")
        cfg = RunConfig(
            dataset=dataset,
            search=search_cfg,
            finetune=FinetuneSpace(**ft),
            architecture=ArchDescriptor.from_dict(arch) if arch is not None else None,
            supernet=supernet,
            rank_correlation={"n": 20, "standalone_epochs": 50, **rc},
            split=args.split or raw.get("split", "test"),
            workers=args.workers if args.workers is not None else raw.get("workers", 1),
        )
    except (TypeError, ConfigurationError, GenerationError) as exc:
        raise UsageFailure(f"invalid configuration: {exc}") from None
    if cfg.split not in ("valid", "test"):
        raise UsageFailure(f"split must be 'valid' or 'test', got {cfg.split!r}")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        raise UsageFailure(f"workers must be a positive integer, got {cfg.workers!r}")
    return cfg


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageFailure(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageFailure(f"{path} is not valid JSON: {exc}") from None


def load_kg(cfg: RunConfig) -> TemporalKG:
    if "synthetic" in cfg.dataset:
        return generate_synthetic(SyntheticConfig(**cfg.dataset["synthetic"]))
    if not cfg.dataset:
        raise UsageFailure("no dataset given: set dataset in the config or pass --train/--valid/--test")
    return load_dataset(*(cfg.dataset[k] for k in DATASET_FILES))


# ---------------------------------------------------------------------------
# commands

class Run:
    def __init__(self, cfg: RunConfig, out: Path, stdout: TextIO, stderr: TextIO):
        self.cfg, self.out, self.stdout, self.stderr = cfg, out, stdout, stderr

    def emit(self, event: str, **fields) -> None:
        self.stdout.write(json.dumps({"event": event, **fields}, sort_keys=True) + "\n")
        self.stdout.flush()

    def say(self, text: str) -> None:
        self.stderr.write(text + "\n")

    def write_json(self, name: str, obj: Any) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def epoch(self, entry: EpochLog) -> None:
        self.emit("epoch", **dataclasses.asdict(entry))

    def need_arch(self) -> ArchDescriptor:
        if self.cfg.architecture is None:
            raise UsageFailure("an architecture is required: set 'architecture' or pass --arch")
        return self.cfg.architecture

    def need_supernet(self):
        if self.cfg.supernet is None:
            raise UsageFailure("a checkpoint is required: set 'supernet' or pass --supernet")
        return load_checkpoint(self.cfg.supernet)


def cmd_stats(run: Run) -> None:
    stats = dataset_stats(load_kg(run.cfg))
    run.write_json("stats.json", stats)
    print(json.dumps(stats, sort_keys=True), file=run.stdout)
    run.say(f"{stats['entityCount']} entities, {stats['relationCount']} relations, "
            f"{stats['timestepCount']} timesteps, {stats['trainSize']} train quadruples")


def cmd_synth(run: Run) -> None:
    if "synthetic" not in run.cfg.dataset:
        raise UsageFailure("synth needs a 'dataset.synthetic' section")
    kg = load_kg(run.cfg)
    paths = write_dataset(kg, run.out)
    run.emit("written", files={k: str(v) for k, v in paths.items()})
    run.say(f"wrote {len(kg.train)}/{len(kg.valid)}/{len(kg.test)} quadruples to {run.out}")


def cmd_train_supernet(run: Run) -> None:
    kg = load_kg(run.cfg)
    params, history = train_supernet(kg, run.cfg.search, progress=run.epoch)
    save_checkpoint(params, run.out / "supernet.ckpt")
    run.say(f"trained {len(history)} epochs, final loss {history[-1].loss:.4f}; "
            f"checkpoint at {run.out / 'supernet.ckpt'}")


def cmd_search(run: Run) -> None:
    kg = load_kg(run.cfg)
    supernet = run.need_supernet()

    def progress(rec: SearchRecord) -> None:
        run.emit("candidate", **rec.to_dict())

    records = search_architectures(kg, supernet, run.cfg.search, workers=run.cfg.workers, progress=progress)
    with open(run.out / "search_records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    best = records[0]
    run.write_json("architecture.json", best.descriptor.to_dict())
    run.say(f"evaluated {len(records)} architectures; best {best.descriptor} "
            f"with {best.metric_kind} {best.metric_value:.4f}")


def cmd_finetune(run: Run) -> None:
    kg = load_kg(run.cfg)
    arch = run.need_arch()
    result = finetune(kg, arch, run.cfg.search, run.cfg.finetune, progress=lambda t: run.emit("trial", **t))
    save_checkpoint(result.params, run.out / "model.ckpt")
    run.write_json("finetune.json", {
        "architecture": arch.to_dict(),
        "bestHyperparameters": result.best_hyperparameters,
        "trials": result.trials,
        "valid": result.valid.to_dict(),
        "test": result.test.to_dict(),
    })
    run.say(f"{arch}: valid MRR {result.valid.mrr:.4f}, test MRR {result.test.mrr:.4f}")


def cmd_evaluate(run: Run) -> None:
    kg = load_kg(run.cfg)
    arch = run.need_arch()
    params = run.need_supernet()
    result = evaluate(kg, run.cfg.split, arch, params, run.cfg.search.tau)
    run.write_json("evaluation.json", result.to_dict())
    result.write_rank_dump(run.out / "ranks.tsv")
    run.emit("evaluation", split=run.cfg.split, **result.to_dict())
    run.say(f"{run.cfg.split}: MRR {result.mrr:.4f}, Hits@1 {result.hits_at_1:.4f}, "
            f"Hits@3 {result.hits_at_3:.4f}, Hits@10 {result.hits_at_10:.4f}")


def cmd_rank_corr(run: Run) -> None:
    kg = load_kg(run.cfg)
    supernet = run.need_supernet()
    rc = run.cfg.rank_correlation
    rho, pairs = rank_correlation_study(kg, supernet, rc["n"], rc["standalone_epochs"], run.cfg.search)
    rows = [{"architecture": a.to_dict(), "supernetMRR": s, "standaloneMRR": t} for a, s, t in pairs]
    for row in rows:
        run.emit("pair", **row)
    run.write_json("rank_correlation.json", {"spearman": rho, "pairs": rows})
    run.say(f"Spearman rho over {len(pairs)} architectures: {rho:.4f}")


HANDLERS = {
    "stats": cmd_stats,
    "synth": cmd_synth,
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "rank-corr": cmd_rank_corr,
}


def run_command(argv: Sequence[str], stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageFailure("spa: a command is required: " + ", ".join(COMMANDS))
        cfg = load_run_config(args)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out, stdout, stderr)
        run.write_json("resolved_config.json", cfg.to_dict())
        HANDLERS[args.command](run)
    except UsageFailure as exc:
        print(str(exc), file=stderr)
        print(parser.format_usage().rstrip(), file=stderr)
        return 1
    except SpaError as exc:
        print(f"ERROR:{exc.module}:{exc.kind}: {exc}", file=stderr)
        return 2
    except OSError as exc:
        print(f"ERROR:io:{type(exc).__name__}: {exc}", file=stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
