"""Operator surface.

Subcommands: make-data, pretrain, finetune, eval, generate, ground, dump-attn.
Exit codes: 0 success, 1 usage/config error, 2 data error. Set REFEXP_LOG to
DEBUG/INFO/WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import objectives as obj
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, build_config, validate
from .model import InvalidRegion, Vocab
from .shapeworld import (DatasetError, GenerationError, make_dataset, read_ppm,
                         write_ppm)
from .tensor import ContractViolation
from .train import (CheckpointMismatch, GroundingData, evaluate,
                    model_from_checkpoint, train, write_eval_outputs)

log = logging.getLogger("refexp")

USAGE_ERRORS = (ConfigError,)
DATA_ERRORS = (DatasetError, CheckpointError, CheckpointMismatch, GenerationError,
               InvalidRegion, ContractViolation, FileNotFoundError, OSError)

# "task" is set by the subcommand itself, never via a flag
_CONFIG_KEYS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "task"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(sp):
    sp.add_argument("--config", help="flat key=value config file")
    for key in _CONFIG_KEYS:
        sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                        metavar="V", help=f"override config key {key}")


def _config_from(args, **forced) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    overrides.update(forced)
    return build_config(args.config, overrides)


def _parse_box(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--box expects cx,cy,w,h, got {text!r}")
    try:
        box = np.array([float(p) for p in parts], dtype=np.float32)
    except ValueError:
        raise ConfigError(f"--box has a non-numeric field: {text!r}") from None
    return box


def _load_model(path):
    ck = load_checkpoint(path)
    model, vocab = model_from_checkpoint(ck)
    log.info("loaded checkpoint %s (step %d)", path, ck.step)
    return model, vocab


def _draw_box(img: np.ndarray, box, color) -> None:
    h, w, _ = img.shape
    cx, cy, bw, bh = (float(v) for v in box)
    x0 = int(round(max(cx - bw / 2, 0) * w))
    x1 = int(round(min(cx + bw / 2, 1) * w)) - 1
    y0 = int(round(max(cy - bh / 2, 0) * h))
    y1 = int(round(min(cy + bh / 2, 1) * h)) - 1
    x0, x1 = np.clip([x0, x1], 0, w - 1)
    y0, y1 = np.clip([y0, y1], 0, h - 1)
    img[y0, x0:x1 + 1] = color
    img[y1, x0:x1 + 1] = color
    img[y0:y1 + 1, x0] = color
    img[y0:y1 + 1, x1] = color


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    make_dataset(args.out, args.samples, args.seed, canvas=args.image_size,
                 difficulty_mix=args.difficulty, train_frac=args.train_frac,
                 val_frac=args.val_frac)
    log.info("dataset written: %s (%d samples)", args.out, args.samples)
    print(args.out)
    return 0


def cmd_pretrain(args) -> int:
    task = "pretrain" if args.objective == "joint" else "vmlm"
    cfg = validate(_config_from(args, task=task))
    path = train(cfg, task)
    print(path)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from(args, task=f"finetune-{args.finetune_task}")
    if args.init:
        cfg = dataclasses.replace(cfg, checkpoint=args.init)
    validate(cfg, need_checkpoint=bool(args.init))
    path = train(cfg, args.finetune_task, init_checkpoint=args.init or None)
    print(path)
    return 0


def cmd_eval(args) -> int:
    cfg = validate(_config_from(args, task="eval"), need_checkpoint=True)
    model, vocab = _load_model(cfg.checkpoint)
    data = GroundingData(cfg.data_dir, vocab=vocab)
    tasks = ("rec", "reg") if args.eval_task == "both" else (args.eval_task,)
    report, per = evaluate(model, data, cfg.split, tasks=tasks,
                           max_decode_len=cfg.max_decode_len)
    report_path, per_path = write_eval_outputs(cfg.out_dir, report, per)
    log.info("report: %s", report_path)
    log.info("per-sample dump: %s", per_path)
    for section in ("rec", "reg"):
        if section in report:
            line = " ".join(f"{k}={v:.4f}" for k, v in sorted(report[section].items())
                            if isinstance(v, float))
            print(f"{section}: {line}")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    image = read_ppm(args.image)
    box = _parse_box(args.box)
    result = obj.reg_decode(model, image, box, max_len=args.max_len)
    print(vocab.decode(result.token_ids))
    return 0


def cmd_ground(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    image = read_ppm(args.image)
    ids = vocab.encode(args.text)
    box = obj.rec_predict(model, image, ids)
    print(",".join(f"{v:.4f}" for v in box))
    overlay = image.copy()
    _draw_box(overlay, box, (255, 140, 0))
    if args.truth:
        _draw_box(overlay, _parse_box(args.truth), (0, 255, 0))
    out = args.out or os.path.splitext(args.image)[0] + ".overlay.ppm"
    write_ppm(out, overlay)
    log.info("overlay written: %s", out)
    return 0


def cmd_dump_attn(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    image = read_ppm(args.image)
    box = _parse_box(args.box)
    result = obj.reg_decode(model, image, box, max_len=args.max_len, collect=True)
    grid = model.grid
    os.makedirs(args.out, exist_ok=True)
    payload = {"grid": [grid.rows, grid.cols], "steps": []}
    for t, step in enumerate(result.steps):
        token = vocab.tokens[step.token_id]
        entry = {"token": token, "layers": []}
        for li, layer in enumerate(step.attention):
            layer_entry = {}
            for name, rows in layer.items():  # rows: (heads, L_I)
                layer_entry[name] = rows.tolist()
                avg = rows.mean(axis=0)
                for tag, vec in [("avg", avg)] + [(f"head{h}", rows[h])
                                                  for h in range(rows.shape[0])]:
                    raster = (vec / max(vec.max(), 1e-12) * 255).astype(np.uint8)
                    gray = raster.reshape(grid.rows, grid.cols)
                    write_ppm(os.path.join(
                        args.out, f"step{t:02d}_layer{li}_{name}_{tag}.ppm"),
                        np.repeat(gray[:, :, None], 3, axis=2))
            entry["layers"].append(layer_entry)
        payload["steps"].append(entry)
    json_path = os.path.join(args.out, "attention.json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    log.info("attention dump: %s (%d steps)", args.out, len(result.steps))
    print(json_path)
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="refexp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-data", help="generate a synthetic shape-world dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--difficulty", default="easy:0.4,medium:0.4,hard:0.2")
    sp.add_argument("--train-frac", type=float, default=0.9)
    sp.add_argument("--val-frac", type=float, default=0.05)
    sp.set_defaults(fn=cmd_make_data)

    sp = sub.add_parser("pretrain", help="joint pre-training on both objectives")
    sp.add_argument("--objective", choices=("joint", "vmlm"), default="joint",
                    help="'vmlm' drops the region objective (ablation)")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune one task from a checkpoint")
    sp.add_argument("--task", dest="finetune_task", choices=("reg", "rec"), required=True)
    sp.add_argument("--init", help="starting checkpoint (omit to train from scratch)")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--task", dest="eval_task", choices=("rec", "reg", "both"),
                    default="both")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("generate", help="describe a region of an image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--box", required=True, help="cx,cy,w,h normalized")
    sp.add_argument("--max-len", type=int, default=12)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("ground", help="locate the region an expression describes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--truth", help="optional cx,cy,w,h to draw in green")
    sp.add_argument("--out", help="overlay output path (.ppm)")
    sp.set_defaults(fn=cmd_ground)

    sp = sub.add_parser("dump-attn", help="dump per-step cross-attention maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--box", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-len", type=int, default=12)
    sp.set_defaults(fn=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("REFEXP_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except USAGE_ERRORS as e:
        print(f"refexp: error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"refexp: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
