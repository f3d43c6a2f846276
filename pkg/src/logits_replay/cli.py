"""Command-line entry point for the two-stage workflow.

Subcommands::

    gen-data   write the corpora described by a config
    pretrain   train the base model on the A+B mix
    collect    Stage 0: record candidate sets from a checkpoint
    train      Stage 1 (with --replay) or full-vocabulary fine-tuning
    verify     run the randomised theory checks
    report     compare finished runs in Markdown and CSV

Every command that writes a directory also writes ``config.echo``, the fully
resolved config as JSON; passing it back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import read_corpus, write_corpus
from .errors import ConfigError, FingerprintMismatch, NumericError, ParseError, ReplayError, ValidationError
from .experiment import ExperimentConfig, build_corpora, collect, finetune, pretrain_base
from .harness import evaluate, flop_accounting, write_summary
from .model import fingerprint, load_checkpoint, param_distance, save_checkpoint
from .optim import OPTIMIZERS
from .replay import POSITION_STRATEGIES
from .theory import verify_theory

log = logging.getLogger("logits_replay")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_FINGERPRINT = 5
EXIT_INVALID_DATA = 6
EXIT_NUMERIC = 7
EXIT_VERIFY_FAILED = 8

CORPUS_FILES = ("pretrain", "finetune_a", "val_a", "val_b")
STRATEGY_CHOICES = (*POSITION_STRATEGIES, "last")


class RunConfig:
    """Experiment settings plus the run's seed and fine-tuning optimizer."""

    def __init__(self, experiment: ExperimentConfig, seed: int = 0, optimizer: str = "moclip"):
        if optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {optimizer!r}; choose from {sorted(OPTIMIZERS)}")
        self.experiment = experiment
        self.seed = int(seed)
        self.optimizer = optimizer

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        seed = d.pop("seed", 0)
        optimizer = d.pop("optimizer", "moclip")
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            exp = ExperimentConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        return cls(exp, seed, optimizer)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "optimizer": self.optimizer, **self.experiment.to_dict()}

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        (out_dir / "config.echo").write_text(text, encoding="utf-8")


def load_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "optimizer", None):
        cfg = RunConfig(cfg.experiment, cfg.seed, args.optimizer)
    if getattr(args, "strategy", None):
        try:
            kind = "last_token" if args.strategy == "last" else args.strategy
            strategy = replace(cfg.experiment.strategy, kind=kind)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        cfg.experiment = replace(cfg.experiment, strategy=strategy)
    return cfg


def _corpora(cfg: RunConfig, data_dir) -> dict:
    """Corpora from ``data_dir`` when given, otherwise regenerated from the config."""
    if data_dir is None:
        return build_corpora(cfg.experiment, cfg.seed)
    data_dir = Path(data_dir)
    out = {}
    for name in CORPUS_FILES:
        path = data_dir / f"{name}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"corpus file not found: {path}")
        out[name] = read_corpus(path)
    return out


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    data = build_corpora(cfg.experiment, cfg.seed)
    for name in CORPUS_FILES:
        write_corpus(out / f"{name}.txt", data[name])
    cfg.echo(out)
    print(" ".join(f"{k}={len(v)}" for k, v in data.items()))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    data = _corpora(cfg, args.data)
    base, metrics = pretrain_base(cfg.experiment, cfg.seed, data["pretrain"])
    nll_a, ppl_a = evaluate(base, data["val_a"])
    nll_b, ppl_b = evaluate(base, data["val_b"])
    cfg.echo(out)
    save_checkpoint(base, out / "checkpoint.bin")
    metrics.write_csv(out / "metrics.csv")
    summary = _summary(cfg, "pretrain", metrics)
    summary.update(nll_a=nll_a, ppl_a=ppl_a, nll_b=nll_b, ppl_b=ppl_b, fingerprint=f"{fingerprint(base):016x}")
    _write_run(out, summary, metrics)
    print(f"base model: nll_a={nll_a:.4f} nll_b={nll_b:.4f} fingerprint={fingerprint(base):016x}")
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = load_config(args)
    base = load_checkpoint(_require(args.checkpoint))
    data = _corpora(cfg, args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header, stats = collect(cfg.experiment, cfg.seed, base, data["finetune_a"], out)
    flops = flop_accounting(stats, header.vocab_size) if stats.record_count else None
    doc = {"stats": stats.to_dict(), "r_ratio": flops.r if flops else None,
           "softmax_saving": flops.saving if flops else None,
           "model_fingerprint": f"{header.model_fingerprint:016x}"}
    write_summary(out.with_name(out.stem + ".stats.json"), doc)
    cfg.echo(out.parent)
    print(f"{stats.record_count} records, median |S|={stats.median_set_size}, mean |S|={stats.mean_set_size}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    base = load_checkpoint(_require(args.checkpoint))
    data = _corpora(cfg, args.data)
    replay = _require(args.replay) if args.replay else None
    out = Path(args.out)
    tuned, metrics = finetune(cfg.experiment, cfg.seed, base, data["finetune_a"], cfg.optimizer,
                              replay, args.override_fingerprint)
    nll_a, ppl_a = evaluate(tuned, data["val_a"])
    nll_b, ppl_b = evaluate(tuned, data["val_b"])
    base_nll_b, base_ppl_b = evaluate(base, data["val_b"])
    metrics.rel_l2_distance = param_distance(tuned, base)
    metrics.delta_ppl_base = ppl_b - base_ppl_b
    cfg.echo(out)
    save_checkpoint(tuned, out / "checkpoint.bin")
    metrics.write_csv(out / "metrics.csv")
    mode = "replay" if replay else "sft"
    summary = _summary(cfg, f"{cfg.optimizer}_{mode}", metrics)
    summary.update(nll_a=nll_a, ppl_a=ppl_a, nll_b=nll_b, ppl_b=ppl_b,
                   delta_nll_b=nll_b - base_nll_b, replay_file=replay.name if replay else None)
    _write_run(out, summary, metrics)
    print(f"{summary['run']}: nll_a={nll_a:.4f} delta_ppl_b={metrics.delta_ppl_base:.4f} "
          f"rel_l2={metrics.rel_l2_distance:.4f} spikes={metrics.spike_count}")
    return EXIT_OK


def _summary(cfg: RunConfig, run: str, metrics) -> dict:
    s = metrics.summary()
    s.pop("timing")
    return {"run": run, "seed": cfg.seed, "config": cfg.to_dict(), **s}


def _write_run(out: Path, summary: dict, metrics) -> None:
    write_summary(out / "summary.json", summary)
    write_summary(out / "timing.json", metrics.summary()["timing"])


def cmd_verify(args) -> int:
    report = verify_theory(args.seed, args.trials)
    print(report.to_text())
    if args.out:
        write_summary(args.out, report.to_dict())
    return EXIT_OK if report.ok else EXIT_VERIFY_FAILED


REPORT_COLUMNS = ("run", "seed", "n_steps", "final_loss", "nll_a", "delta_ppl_base", "delta_nll_b",
                  "rel_l2_distance", "loss_variance", "grad_norm_cv", "spike_count", "r_ratio", "max_abs_step")


def cmd_report(args) -> int:
    rows = []
    for d in args.runs:
        s = json.loads(_require(Path(d) / "summary.json").read_text(encoding="utf-8"))
        rows.append({c: s.get(c) for c in REPORT_COLUMNS} | {"dir": str(d)})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[*REPORT_COLUMNS, "dir"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)

    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else ("" if v is None else str(v))

    md = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    md += ["| " + " | ".join(fmt(r[c]) for c in REPORT_COLUMNS) + " |" for r in rows]
    md.append("")
    md.append("delta_ppl_base: perplexity change on held-out B relative to the starting checkpoint. "
              "Spikes: loss above trailing 100-step mean + 4 std, 10-step refractory period.")
    text = "\n".join(md) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(text, encoding="utf-8")
        (out / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="logits-replay",
        description="Two-stage logits replay fine-tuning with the MoClip optimizer, at desk scale.",
        epilog="exit codes: 0 ok, 1 unexpected error, 2 usage, 3 missing file, 4 bad config, "
               "5 fingerprint mismatch, 6 invalid data, 7 numeric failure, 8 verification failed",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (unknown keys are rejected); defaults apply if omitted")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if data:
            sp.add_argument("--data", help="directory written by gen-data; regenerated from the config if omitted")

    sp = sub.add_parser("gen-data", help="write corpora to a directory")
    common(sp, data=False)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train the base model on the A+B mix")
    common(sp)
    sp.add_argument("--out", required=True, help="output run directory")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("collect", help="Stage 0: record candidate sets into a replay file")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="base model checkpoint")
    sp.add_argument("--strategy", choices=STRATEGY_CHOICES,
                    help="override the position strategy ('last' is short for last_token)")
    sp.add_argument("--out", required=True, help="replay file to write (stats go next to it)")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="fine-tune on A; Stage 1 when --replay is given, full SFT otherwise")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="starting checkpoint")
    sp.add_argument("--replay", help="replay file from collect")
    sp.add_argument("--optimizer", choices=sorted(OPTIMIZERS), help="override the config optimizer")
    sp.add_argument("--override-fingerprint", action="store_true",
                    help="train even if the replay file came from a different model")
    sp.add_argument("--out", required=True, help="output run directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="run the randomised theory checks")
    sp.add_argument("--seed", type=int, default=0, help="check seed (default 0)")
    sp.add_argument("--trials", type=int, default=10_000, help="instances per check (default 10000)")
    sp.add_argument("--out", help="also write the report as JSON")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="compare run directories")
    sp.add_argument("runs", nargs="+", help="run directories containing summary.json")
    sp.add_argument("--out", help="directory for report.md and report.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING_FILE, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except FingerprintMismatch as exc:
        code, msg = EXIT_FINGERPRINT, f"fingerprint mismatch: {exc} (use --override-fingerprint to proceed)"
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (ParseError, ValidationError) as exc:
        code, msg = EXIT_INVALID_DATA, str(exc)
    except ReplayError as exc:
        code, msg = EXIT_ERROR, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
