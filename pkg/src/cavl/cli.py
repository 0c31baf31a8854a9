"""Command-line interface: ``python -m cavl <subcommand> ...``.

Subcommands: ``gen-data``, ``pretrain``, ``finetune``, ``eval``, ``heatmap``,
``gradcheck``. Exit status is 0 on success, 1 on a usage error and 2 on a
runtime error. ``CAVL_LOG`` (error, info, debug) sets the log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .adapters import MODES, TaskSpec
from .data import Corpus, CorpusConfig, generate_synthetic_corpus, read_corpus, write_corpus
from .errors import CAVLError, ConfigError
from .evaluation import (
    alignment_stats, emit_metrics, evaluate_retrieval, export_heatmap, finetuned_encoder,
    heatmap_summary, zero_shot_encoder,
)
from .gradcheck import available_checks, format_table, run_gradchecks
from .model import ModelConfig
from .training import (
    FinetuneConfig, TrainConfig, finetune, load_checkpoint, pretrain, save_checkpoint,
)

log = logging.getLogger("cavl")

SPLITS = ("train", "test", "finetune", "val")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None
    seed: int = 0
    n_classes: int = 4
    train_samples: int = 512
    test_samples: int = 64
    finetune_samples: int = 256
    corpus: CorpusConfig = CorpusConfig()

    def sizes(self) -> dict[str, int]:
        return {"train": self.train_samples, "test": self.test_samples,
                "finetune": self.finetune_samples, "val": self.test_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _reject_unknown(d, cls, "data")
        d = dict(d)
        if "corpus" in d:
            _reject_unknown(d["corpus"], CorpusConfig, "data.corpus")
            d["corpus"] = CorpusConfig(**d["corpus"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FinetuneSection:
    mode: str = "adapter1"
    task: TaskSpec = TaskSpec()
    train: FinetuneConfig = FinetuneConfig()

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneSection":
        _reject_unknown(d, cls, "finetune")
        d = dict(d)
        if "task" in d:
            d["task"] = TaskSpec.from_dict(d["task"])
        if "train" in d:
            d["train"] = FinetuneConfig.from_dict(d["train"])
        if d.get("mode", "adapter1") not in MODES:
            raise ConfigError(f"unknown mode {d['mode']!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "task": self.task.to_dict(), "train": self.train.to_dict()}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    finetune: FinetuneSection = FinetuneSection()
    eval_candidates: int = 64
    heatmap_n: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, cls, "config")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "finetune" in d:
            d["finetune"] = FinetuneSection.from_dict(d["finetune"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"seed": self.seed, "output_dir": self.output_dir,
                "model": self.model.to_dict(), "data": self.data.to_dict(),
                "train": self.train.to_dict(), "finetune": self.finetune.to_dict(),
                "eval_candidates": self.eval_candidates, "heatmap_n": self.heatmap_n}


def _reject_unknown(d, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def _replace(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    d = {f.name: getattr(obj, f.name) for f in fields(obj)}
    d.update(changes)
    return type(obj)(**d)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over the config file, which wins over defaults."""
    g = lambda name: getattr(args, name, None)  # noqa: E731
    weights = _replace(cfg.train.weights, mlm=g("w_mlm"), nsp=g("w_nsp"),
                       caption=g("w_caption"), pwcl=g("w_pwcl"))
    train = _replace(cfg.train, epochs=g("epochs"), batch_size=g("batch_size"),
                     base_lr=g("lr"), weights=weights)
    ft = cfg.finetune
    ft_train = _replace(ft.train, epochs=g("ft_epochs"), batch_size=g("ft_batch_size"),
                        base_lr=g("ft_lr"), bottleneck=g("bottleneck"))
    task = ft.task if g("task") is None else TaskSpec(
        kind=g("task"), n_classes=cfg.data.n_classes if g("task") == "classification" else 0)
    ft = _replace(ft, mode=g("mode"), task=task, train=ft_train)
    data = _replace(cfg.data, dir=g("data"))
    return _replace(cfg, seed=g("seed"), output_dir=g("out"), train=train, finetune=ft,
                    data=data)


def load_split(cfg: RunConfig, split: str) -> Corpus:
    d = cfg.data
    if d.dir is not None:
        return read_corpus(d.dir, split, d.n_classes, d.corpus)
    return generate_synthetic_corpus(d.seed, d.n_classes, d.sizes()[split], d.corpus, split)


# ---------------------------------------------------------------- subcommands

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_file_log(out: Path) -> None:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


def cmd_gen_data(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    # for gen-data the seed names the corpus, not a training run
    d = _replace(cfg.data, seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    for split in ("train", "test", "finetune"):
        corpus = generate_synthetic_corpus(d.seed, d.n_classes, d.sizes()[split], d.corpus, split)
        jsonl, rois = write_corpus(corpus, out, split)
        log.info("wrote %s and %s (%d samples)", jsonl, rois, len(corpus))
    print(out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    out = _out_dir(cfg)
    _attach_file_log(out)
    train, test = load_split(cfg, "train"), load_split(cfg, "test")

    def ev(params, epoch):
        stats = alignment_stats(params, cfg.model, test)
        log.info("epoch %d: test aps %.4f off-diagonal %.4f", epoch, stats["aps"],
                 stats["off_diag"])
        return stats

    res = pretrain(cfg.model, cfg.train, train, cfg.seed, eval_fn=ev)
    run = cfg.to_dict()
    del run["output_dir"]  # where a run is written must not change its bytes
    blob = {**res.config, "run": run}
    save_checkpoint(out / "checkpoint.bin", res.params, res.optim, blob, cfg.seed)
    emit_metrics(res.records, out / "metrics.jsonl")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(out / "checkpoint.bin")
    return 0


def cmd_finetune(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    out = _out_dir(cfg)
    _attach_file_log(out)
    ckpt = load_checkpoint(args.checkpoint)
    ft = cfg.finetune
    corpus, test = load_split(cfg, "finetune"), load_split(cfg, "test")
    mc = ckpt.model_config
    n = min(cfg.eval_candidates, len(test))

    def ev(params, epoch):
        if ft.task.kind != "retrieval":
            return None
        r = evaluate_retrieval(finetuned_encoder(params, mc, ft.mode, ft.task), test, n)
        log.info("epoch %d: %s", epoch, r)
        return r

    res = finetune(ckpt, ft.mode, ft.task, corpus, cfg.seed, ft.train, eval_fn=ev)
    save_checkpoint(out / "checkpoint.bin", res.params, res.optim, res.config, cfg.seed)
    emit_metrics(res.records, out / "metrics.jsonl",
                 keys=("step", "epoch", "lr", "task_loss", "task_acc"))
    report = res.partition.report()
    (out / "partition.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(out / "checkpoint.bin")
    return 0


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    ckpt = load_checkpoint(args.checkpoint)
    mc = ckpt.model_config
    test = load_split(cfg, args.split)
    n = args.n if args.n is not None else min(cfg.eval_candidates, len(test))
    ft = ckpt.config.get("finetune")
    if args.zero_shot or ft is None:
        encoder, how = zero_shot_encoder(ckpt.params, mc), "zero-shot"
    else:
        task = TaskSpec.from_dict(ft["task"])
        if task.kind != "retrieval":
            raise ConfigError("eval needs a retrieval checkpoint or --zero-shot")
        encoder, how = finetuned_encoder(ckpt.params, mc, ft["mode"], task), ft["mode"]
    result = {"scoring": how, "candidates": n, **evaluate_retrieval(encoder, test, n)}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_heatmap(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_split(cfg, args.split)
    n = args.n if args.n is not None else cfg.heatmap_n
    out = Path(args.out or cfg.output_dir)
    S, csv_path, pgm_path = export_heatmap(ckpt.params, ckpt.model_config, corpus, n, out)
    print(json.dumps({"csv": str(csv_path), "pgm": str(pgm_path), **heatmap_summary(S)},
                     sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    names = None if args.ops == "all" else [s.strip() for s in args.ops.split(",") if s.strip()]
    if names is not None:
        unknown = set(names) - set(available_checks())
        if unknown:
            raise UsageError(f"unknown ops: {sorted(unknown)}; "
                             f"choose from {', '.join(available_checks())}")
    results = run_gradchecks(names)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 2


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cavl", description="Vision-language pre-training with adapters.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="directory with {split}.jsonl/.rois files")
        if out:
            sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-data", help="write synthetic corpus splits")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="pre-train from scratch")
    common(pt)
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--batch-size", type=int)
    pt.add_argument("--lr", type=float)
    for term in ("mlm", "nsp", "caption", "pwcl"):
        pt.add_argument(f"--w-{term}", type=float, help=f"{term} loss weight")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    common(ft)
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--mode", choices=MODES)
    ft.add_argument("--task", choices=("retrieval", "classification"))
    ft.add_argument("--bottleneck", type=int)
    ft.add_argument("--epochs", dest="ft_epochs", type=int)
    ft.add_argument("--batch-size", dest="ft_batch_size", type=int)
    ft.add_argument("--lr", dest="ft_lr", type=float)
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="caption-to-image Recall@K")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--zero-shot", action="store_true",
                    help="score with the pre-trained backbone, ignoring any fine-tuned head")
    ev.add_argument("--split", default="test", choices=SPLITS)
    ev.add_argument("--n", type=int, help="number of candidates")
    ev.set_defaults(func=cmd_eval)

    hm = sub.add_parser("heatmap", help="export the text-image similarity matrix")
    common(hm)
    hm.add_argument("--checkpoint", required=True)
    hm.add_argument("--split", default="test", choices=SPLITS)
    hm.add_argument("--n", type=int)
    hm.set_defaults(func=cmd_heatmap)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--ops", default="all", help="'all' or a comma-separated list")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _configure_logging() -> None:
    level_name = os.environ.get("CAVL_LOG", "error").lower()
    level = LOG_LEVELS.get(level_name, logging.ERROR)
    root = logging.getLogger()
    root.setLevel(level)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)


def run_cli(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand", parser.format_usage())
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write((exc.usage or parser.format_usage()) + f"error: {exc}\n")
        return 1
    except ConfigError as exc:
        sys.stderr.write(f"error: invalid configuration: {exc}\n")
        return 1
    except (CAVLError, OSError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


def main() -> None:
    sys.exit(run_cli())
