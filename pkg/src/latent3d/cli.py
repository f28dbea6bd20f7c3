"""Command line entry point: ``latent3d <subcommand> ...``.

Exit status: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .checkpoint import load_module, load_tensors, read_manifest, save_checkpoint
from .config import RunConfig, load_config, write_effective
from .errors import ConfigHashMismatch, DataError, IoFailure, Latent3DError, MissingComponent, NumericError
from .evaluation import run_benchmark
from .export import extract_and_project, serialize_dumps
from .synthetic import GENERATOR_VERSION, balance_audit, read_dataset_with_manifest, write_dataset

log = logging.getLogger("latent3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML file or preset name")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="latent3d", description="Latent 3D token training pipeline on procedural multi-view scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a dataset file")
    _common(p)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("-n", type=int, help="number of examples (default from config)")

    p = sub.add_parser("train-sft", help="stage 1: supervised latent alignment")
    _common(p)
    p.add_argument("--data", required=True, help="training dataset file")

    p = sub.add_parser("train-rl", help="stage 2: group-relative policy optimisation")
    _common(p)
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--init", required=True, help="stage-1 checkpoint directory")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=("json", "table", "both"), default="both")

    p = sub.add_parser("export-latents", help="dump latent states, projections and cosine maps")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit", type=int, default=0, help="only the first N examples")

    p = sub.add_parser("ablate", help="run one ablation axis with shared seeds")
    _common(p)
    p.add_argument("--axis", required=True, help="latent-size, token-position or reward-removal")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_data(path, cfg: RunConfig):
    try:
        manifest, examples = read_dataset_with_manifest(path)
    except OSError as e:
        raise IoFailure(f"cannot read dataset {path}: {e}") from e
    if manifest is not None and manifest.get("generation_hash") not in (None, cfg.generation().hash()):
        raise ConfigHashMismatch(f"{path} was generated with a different data configuration")
    return examples


def _check_resume(out: Path, cfg: RunConfig) -> Path:
    ckpt = out / "latest"
    m = read_manifest(ckpt)
    if m.get("config_hash") != cfg.hash():
        raise ConfigHashMismatch(f"checkpoint {ckpt} has config {m.get('config_hash')}, current config is {cfg.hash()}")
    return ckpt


def _load_models(cfg: RunConfig, ckpt, need_projector: bool = True):
    m = read_manifest(ckpt)
    model, projector = pipeline.fresh_models(cfg)
    load_module(model, ckpt, "vlm")
    if m.get("has_projector"):
        load_module(projector, ckpt, "projector")
    elif need_projector:
        raise MissingComponent(f"checkpoint {ckpt} has no projector weights")
    else:
        projector = None
    model.eval()
    return model, projector, m


def cmd_datagen(args, cfg: RunConfig) -> int:
    gen = cfg.generation()
    n = args.n if args.n is not None else (cfg.data.n_train if args.split == "train" else cfg.data.n_test)
    seed = cfg.data.train_seed if args.split == "train" else cfg.data.test_seed
    from .synthetic import build_dataset

    examples = build_dataset(n, seed, gen)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(
        examples,
        out,
        {"generator": GENERATOR_VERSION, "split": args.split, "seed": seed, "generation_hash": gen.hash(), "config_hash": cfg.hash()},
    )
    write_effective(cfg, out.with_name(out.name + ".config.yaml"))
    audit = balance_audit(examples)
    print(f"wrote {len(examples)} records to {out}")
    print("answer labels: " + " ".join(f"{k}={v}" for k, v in audit.items()))
    return 0


def cmd_train_sft(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    train = _load_data(args.data, cfg)
    resume = _check_resume(out, cfg) if args.resume else None
    write_effective(cfg, out / "config.yaml")
    manifest = {"config_hash": cfg.hash(), "config": cfg.to_dict()}
    sched = cfg.sft_schedule()
    if sched.ckpt_every == 0:
        cfg = cfg.replace(**{"sft.ckpt_every": sched.total_steps(len(train))})
    res = pipeline.stage1(cfg, train, out_dir=out, manifest=manifest, resume=resume)
    last = res.history[-1] if res.history else {}
    print(f"stage 1 finished at step {res.step}: " + ", ".join(f"{k}={last[k]:.4f}" for k in ("l_3d", "l_text", "l_total") if k in last))
    return 0


def cmd_train_rl(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    train = _load_data(args.data, cfg)
    model, projector, _ = _load_models(cfg, args.init, need_projector=True)
    ref, _, _ = _load_models(cfg, args.init, need_projector=True)
    resume = _check_resume(out, cfg) if args.resume else None
    write_effective(cfg, out / "config.yaml")
    manifest = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "init": str(args.init)}
    from .rl import train_rl

    res = train_rl(
        train, model, projector, cfg.rl_config(), cfg.rl_schedule(), ref_model=ref, out_dir=out,
        manifest=manifest, grammar=pipeline.grammar_for(cfg), resume=resume,
    )
    if res.projector_hash_before != res.projector_hash_after:
        raise RuntimeError("projector changed during stage 2")
    last = res.history[-1] if res.history else {}
    print(f"stage 2 finished at step {res.step}: mean reward {last.get('mean_total', float('nan')):.3f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    test = _load_data(args.data, cfg)
    model, _, m = _load_models(cfg, args.checkpoint, need_projector=False)
    rep = pipeline.evaluate(cfg, model, test, {"checkpoint": str(args.checkpoint), "stage": m.get("stage"), "step": m.get("step")})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective(cfg, out / "config.yaml")
    if args.format in ("json", "both"):
        (out / "report.json").write_text(rep.to_json() + "\n")
    if args.format in ("table", "both"):
        (out / "report.txt").write_text(rep.to_table() + "\n")
    print(rep.to_table() if args.format != "json" else rep.to_json())
    return 0


def cmd_export(args, cfg: RunConfig) -> int:
    examples = _load_data(args.data, cfg)
    if args.limit:
        examples = examples[: args.limit]
    model, projector, _ = _load_models(cfg, args.checkpoint, need_projector=True)
    dumps = extract_and_project(model, projector, examples, cfg.sampling(), metadata={"config_hash": cfg.hash()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    serialize_dumps(dumps, out)
    write_effective(cfg, out.with_name(out.name + ".config.yaml"))
    flagged = sum(d.no_latent_block for d in dumps)
    means = [d.mean_cosine for d in dumps if not d.no_latent_block]
    avg = sum(means) / len(means) if means else float("nan")
    print(f"wrote {len(dumps)} dumps to {out} ({flagged} without a latent block), mean patch cosine {avg:.3f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"bad --seeds value {args.seeds!r}") from e
    rows = pipeline.run_ablation(cfg, args.axis, seeds)
    table = pipeline.ablation_table(args.axis, rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective(cfg, out / "config.yaml")
    (out / f"{args.axis}.txt").write_text(table + "\n")
    record = {
        "axis": args.axis,
        "config_hash": cfg.hash(),
        "rows": [
            {"setting": r.label, "overrides": r.overrides, "seeds": r.seeds, "scores": r.scores,
             "degenerate": r.degenerate, "format_rate": r.format_rate}
            for r in rows
        ],
    }
    (out / f"{args.axis}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(table)
    return 0


COMMANDS = {
    "datagen": cmd_datagen,
    "train-sft": cmd_train_sft,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "export-latents": cmd_export,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"latent3d: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"latent3d: error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"latent3d: data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"latent3d: numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
