"""Command-line entry point.

Verbs: train, decompose, perturb, heatmap, ternary, check. Exit codes:
0 success, 1 usage error (bad flags, missing files), 2 runtime failure.
Verbosity via the MOEDIV_LOG environment variable (error | info | debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import analysis, checks, data as data_mod, trainer as trainer_mod
from .model import ModelConfig, MoEModel, load_checkpoint
from .trainer import TrainConfig

log = logging.getLogger("moediv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# keys accepted in the plain-text config file, with their owning dataclass
_MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_DATA_KEYS = {"seq_len": int, "batch_size": int, "val_sequences": int}
_DATA_DEFAULTS = {"seq_len": 64, "batch_size": 8, "val_sequences": 100}


def parse_config(path=None):
    """Read key = value lines into (ModelConfig, TrainConfig, data options).

    Every key has a default, so an empty or missing config is valid.
    """
    model_kw, train_kw = {}, {}
    data_kw = dict(_DATA_DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"--config: no such file: {path}")
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                if key in _MODEL_KEYS:
                    model_kw[key] = int(value)
                elif key in _DATA_KEYS:
                    data_kw[key] = int(value)
                elif key in _TRAIN_KEYS:
                    if key == "layer_combine":
                        train_kw[key] = value
                    elif key in ("warmup_steps", "total_steps", "seed", "checkpoint_interval"):
                        train_kw[key] = int(value)
                    else:
                        train_kw[key] = float(value)
                else:
                    raise UsageError(f"{path}:{lineno}: unknown config key '{key}'")
    return ModelConfig(**model_kw), TrainConfig(**train_kw), data_kw


def _require_file(path, flag):
    if path is None or not os.path.exists(path):
        raise UsageError(f"{flag}: no such file: {path}")


def _load_valsets(path, seq_len, limit):
    docs, _ = data_mod.load_corpus(path)
    sequences, labels = data_mod.pack_sequences(docs, seq_len)
    valsets: dict[str, list] = {}
    for s, d in zip(sequences, labels):
        valsets.setdefault(d, []).append(s)
    return {
        d: np.stack(seqs[:limit]).astype(np.intp) for d, seqs in valsets.items()
    }


def _load_model(ckpt_path):
    _require_file(ckpt_path, "--ckpt")
    model, step, _ = load_checkpoint(ckpt_path)
    log.info("loaded checkpoint at step %d", step)
    return model


def cmd_train(args):
    model_cfg, train_cfg, data_cfg = parse_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    _require_file(args.data, "--data")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"--out: {args.out} exists and is not empty (use --force)")
    os.makedirs(args.out, exist_ok=True)

    docs, _ = data_mod.load_corpus(args.data)
    batches = data_mod.pack_batches(
        docs, data_cfg["seq_len"], data_cfg["batch_size"], train_cfg.seed
    )
    start_step = 0
    opt_state = None
    if args.resume:
        _require_file(args.resume, "--resume")
        model, start_step, opt_state = load_checkpoint(args.resume)
        log.info("resuming at step %d", start_step)
    else:
        model = MoEModel(model_cfg, seed=train_cfg.seed)

    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as f:
        for section in (dataclasses.asdict(model.config), dataclasses.asdict(train_cfg), data_cfg):
            for k, v in section.items():
                f.write(f"{k} = {v}\n")

    final, metrics = trainer_mod.run_training(
        model, batches, train_cfg, args.out,
        start_step=start_step, opt_state=opt_state,
    )
    print(f"final checkpoint: {final}")
    print(f"metrics log: {metrics}")
    return 0


def cmd_decompose(args):
    model = _load_model(args.ckpt)
    _require_file(args.data, "--data")
    valsets = _load_valsets(args.data, model.config.max_seq_len, args.limit)
    reports = analysis.divergence_report(model, valsets)
    sys.stdout.write(analysis.report_csv(reports))
    return 0


def cmd_perturb(args):
    model = _load_model(args.ckpt)
    _require_file(args.data, "--data")
    if not 0 <= args.layer < model.config.num_layers:
        raise ValueError(
            f"--layer {args.layer} out of range: model has {model.config.num_layers} layers"
        )
    valsets = _load_valsets(args.data, model.config.max_seq_len, args.limit)
    result = analysis.delta_ppl_mean(model, args.layer, valsets, args.seed, draws=args.draws)
    for draw in result["draws"]:
        for rec in draw.to_records():
            print(json.dumps(rec, sort_keys=True))
    print(json.dumps({"layer": args.layer, "mean_delta": result["mean_delta"]}, sort_keys=True))
    return 0


def cmd_heatmap(args):
    model = _load_model(args.ckpt)
    _require_file(args.data, "--data")
    valsets = _load_valsets(args.data, model.config.max_seq_len, args.limit)
    for layer in range(model.config.num_layers):
        if args.inverse:
            hm = analysis.inverse_heatmap(model, valsets, layer)
        else:
            hm = analysis.activation_heatmap(model, valsets, layer)
        print(f"# layer {layer}")
        sys.stdout.write(hm.to_csv())
    return 0


def cmd_ternary(args):
    model = _load_model(args.ckpt)
    _require_file(args.data, "--data")
    valsets = _load_valsets(args.data, model.config.max_seq_len, args.limit)
    if len(valsets) != 3:
        raise ValueError(f"ternary requires exactly 3 domains, data has {len(valsets)}")
    for layer in range(model.config.num_layers):
        inv = analysis.inverse_heatmap(model, valsets, layer)
        pts = analysis.ternary_coords(inv)
        print(f"# layer {layer}")
        print("expert,x,y," + ",".join(f"p_{d}" for d in inv.cols))
        for i, (pt, row) in enumerate(zip(pts, inv.values)):
            vals = ",".join(f"{v:.10g}" for v in row)
            print(f"{i},{pt[0]:.10g},{pt[1]:.10g},{vals}")
    return 0


def cmd_check(args):
    ok = checks.run_all(out=print)
    if not ok:
        raise RuntimeError("invariant suite failed")
    return 0


def build_parser():
    parser = _Parser(prog="moediv", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model on a labeled corpus")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", required=True, help="JSONL corpus with text/domain fields")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", help="allow non-empty --out")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decompose", help="per-layer divergence report on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=100, help="sequences per domain")
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("perturb", help="router-permutation delta-PPL analysis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=3)
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("heatmap", help="expert activation heatmaps as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--inverse", action="store_true", help="P(domain|expert) form")
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("ternary", help="3-domain simplex coordinates per expert")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(fn=cmd_ternary)

    p = sub.add_parser("check", help="run the invariant suite")
    p.set_defaults(fn=cmd_check)
    return parser


def run(argv=None) -> int:
    level = os.environ.get("MOEDIV_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
