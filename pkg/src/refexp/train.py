"""Training loops (joint pre-training, per-task fine-tuning) and evaluation.

All randomness derives from the run seed through three named streams (init,
data order, masking), so a fixed seed reproduces checkpoints bit for bit.
Pre-training sums the masked-token loss and the region-prediction loss on the
same batch and takes one optimizer step, so the shared fusion parameters
receive gradients from both objectives at once.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import objectives as obj
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import CiderD, grounding_metrics, mask_f1
from .model import Model, ModelConfig, Vocab, region_mask
from .shapeworld import DatasetError, load_dataset, matches, parse_expression, read_ppm
from .tensor import AdamW, Tape, backward

log = logging.getLogger("refexp")


@dataclass
class Batch:
    images: np.ndarray   # (B, H, W, 3) uint8
    boxes: np.ndarray    # (B, 4) float32
    ids: np.ndarray      # (B, S) int64, PAD-padded
    indices: np.ndarray


class GroundingData:
    """Dataset directory wrapper: samples, vocabulary, cached images/tokens."""

    def __init__(self, data_dir, vocab: Vocab | None = None):
        self.dir = data_dir
        self.samples = load_dataset(data_dir)
        vocab_path = os.path.join(data_dir, "vocab.txt")
        if vocab is not None:
            self.vocab = vocab
        elif os.path.exists(vocab_path):
            self.vocab = Vocab.load(vocab_path)
        else:
            self.vocab = Vocab.from_texts([s.text for s in self.samples
                                           if s.split == "train"])
        self.token_ids = [np.asarray(self.vocab.encode(s.text), dtype=np.int64)
                          for s in self.samples]
        self.by_split = {"train": [], "val": [], "test": []}
        for i, s in enumerate(self.samples):
            self.by_split[s.split].append(i)
        self._images: dict = {}

    def image(self, idx: int) -> np.ndarray:
        s = self.samples[idx]
        if s.image not in self._images:
            self._images[s.image] = read_ppm(os.path.join(self.dir, s.image))
        return self._images[s.image]

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices)
        images = np.stack([self.image(i) for i in indices])
        boxes = np.stack([self.samples[i].box for i in indices]).astype(np.float32)
        toks = [self.token_ids[i] for i in indices]
        width = max(len(t) for t in toks)
        ids = np.zeros((len(indices), width), dtype=np.int64)
        for row, t in enumerate(toks):
            ids[row, :len(t)] = t
        return Batch(images, boxes, ids, indices)

    def train_indices(self, limit: int = 0) -> list:
        idx = self.by_split["train"]
        return idx[:limit] if limit else idx


def epoch_stream(indices, batch_size: int, rng: np.random.Generator):
    """Yields index arrays forever, reshuffling each epoch."""
    indices = np.asarray(indices)
    while True:
        order = rng.permutation(len(indices))
        for lo in range(0, len(order), batch_size):
            chunk = order[lo:lo + batch_size]
            if len(chunk) == batch_size or len(order) < batch_size:
                yield indices[chunk]


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""
    warmup = max(1, int(round(cfg.steps * cfg.warmup_frac)))
    if step <= warmup:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / warmup
    frac = (step - warmup) / max(1, cfg.steps - warmup)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1 + np.cos(np.pi * frac))


def _rngs(seed: int):
    init_ss, data_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(data_ss),
            np.random.default_rng(mask_ss))


def build_model(cfg: RunConfig, vocab_size: int, rng) -> Model:
    return Model(ModelConfig.from_dict(cfg.model_dict(vocab_size)), rng)


def model_from_checkpoint(ck: Checkpoint) -> tuple[Model, Vocab]:
    vocab = Vocab(ck.config["vocab"])
    model = Model(ModelConfig.from_dict(ck.config["model"]), np.random.default_rng(0))
    params = dict(model.named_parameters())
    saved = ck.params()
    if set(params) != set(saved):
        missing = set(params) ^ set(saved)
        raise CheckpointMismatch(f"parameter names do not match: {sorted(missing)[:4]}")
    for name, p in params.items():
        if p.data.shape != saved[name].shape:
            raise CheckpointMismatch(
                f"parameter {name}: shape {saved[name].shape} != {p.data.shape}")
        p.data = saved[name].copy()
    return model, vocab


class CheckpointMismatch(ValueError):
    pass


def _save(path, cfg: RunConfig, model: Model, opt: AdamW, vocab: Vocab):
    arrays = {f"param/{k}": p.data for k, p in model.named_parameters()}
    arrays.update(opt.state_arrays())
    config = {"model": model.cfg.to_dict(), "run": vars(cfg).copy(),
              "vocab": vocab.tokens}
    save_checkpoint(path, config, opt.step_count, arrays)
    log.info("checkpoint written: %s", path)


def region_masks_for(boxes: np.ndarray, model: Model) -> np.ndarray:
    return np.stack([region_mask(b, model.grid) for b in boxes]).astype(bool)


def train(cfg: RunConfig, task: str, init_checkpoint: str | None = None) -> str:
    """task: "pretrain" (joint), "vmlm" (ablation: pre-train without the
    region objective), "reg" or "rec" fine-tuning. Returns the final
    checkpoint path."""
    if task not in ("pretrain", "vmlm", "reg", "rec"):
        raise ValueError(f"unknown training task {task!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    init_rng, data_rng, mask_rng = _rngs(cfg.seed)

    opt_state = None
    if init_checkpoint:
        ck = load_checkpoint(init_checkpoint)
        model, vocab = model_from_checkpoint(ck)
        data = GroundingData(cfg.data_dir, vocab=vocab)
        opt_state = ck
    else:
        data = GroundingData(cfg.data_dir)
        model = build_model(cfg, len(data.vocab), init_rng)
        vocab = data.vocab

    params = dict(model.named_parameters())
    opt = AdamW(params, lr=cfg.lr_peak, weight_decay=cfg.weight_decay)
    if opt_state is not None:
        opt.load_state_arrays(opt_state.arrays, opt_state.step)

    train_idx = data.train_indices(cfg.limit_train)
    if not train_idx:
        raise DatasetError("train split is empty")
    stream = epoch_stream(train_idx, cfg.batch_size, data_rng)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, f"{task}.ckpt")
    t0 = time.time()
    with open(metrics_path, "w", encoding="utf-8") as mlog:
        for step in range(1, cfg.steps + 1):
            batch = data.batch(next(stream))
            masks = region_masks_for(batch.boxes, model)
            lr = lr_at(step, cfg)
            record = {"task": task, "step": step, "global_step": opt.step_count + 1,
                      "lr": lr, "mask_ratio": cfg.mask_ratio}
            with Tape() as tape:
                feats = model.encode_image(batch.images)
                terms = []
                if task in ("pretrain", "vmlm", "reg"):
                    masked = obj.mask_tokens(batch.ids, cfg.mask_ratio, mask_rng)
                    mode = "unidirectional" if task == "reg" else "bidirectional"
                    l_vmlm = obj.vmlm_loss(model, feats, masks, masked, mode)
                    record["vmlm"] = l_vmlm.item()
                    terms.append(l_vmlm)
                if task in ("pretrain", "rec"):
                    pred_box, fused = obj.rec_forward(model, feats, batch.ids)
                    l_bbox = obj.bbox_loss(pred_box, batch.boxes)
                    l_pred = obj.region_pred_loss(fused.predictions,
                                                  masks.astype(np.float32))
                    record["bbox"] = l_bbox.item()
                    record["pred"] = l_pred.item()
                    record["l1"] = obj.l1_box_error(pred_box.data, batch.boxes)
                    terms.append(T.add(l_bbox, l_pred))
                loss = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
            backward(loss, tape)
            opt.step(lr=lr)
            opt.clear_grads()
            record["loss"] = loss.item()
            mlog.write(json.dumps(record) + "\n")
            if step % cfg.log_every == 0 or step == cfg.steps:
                log.info("%s step %d/%d loss %.4f lr %.2e (%.1fs)", task, step,
                         cfg.steps, record["loss"], lr, time.time() - t0)
            if cfg.ckpt_every and step % cfg.ckpt_every == 0:
                _save(ckpt_path, cfg, model, opt, vocab)
    _save(ckpt_path, cfg, model, opt, vocab)
    log.info("metrics log: %s", metrics_path)
    return ckpt_path


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: Model, data: GroundingData, split: str, tasks=("rec", "reg"),
             max_decode_len: int = 12, chunk: int = 64):
    """Returns (report dict, per-sample record list). Every reported number is
    recomputable from the per-sample records."""
    indices = data.by_split[split]
    if not indices:
        raise DatasetError(f"split {split!r} is empty")
    per = [{"index": int(i), "image": data.samples[i].image, "split": split,
            "text": data.samples[i].text,
            "box_true": [float(v) for v in data.samples[i].box]}
           for i in indices]
    report = {"split": split, "samples": len(indices)}

    if "rec" in tasks:
        pred_boxes, sel_masks, true_masks = [], [], []
        for lo in range(0, len(indices), chunk):
            part = indices[lo:lo + chunk]
            batch = data.batch(part)
            boxes_t, fused = obj.rec_forward(model, batch.images, batch.ids)
            pred_boxes.append(boxes_t.data.copy())
            sel_masks.append(fused.predictions[-1].selected.copy())
            true_masks.append(region_masks_for(batch.boxes, model))
        pred_boxes = np.concatenate(pred_boxes)
        sel_masks = np.concatenate(sel_masks)
        true_masks = np.concatenate(true_masks)
        truth = np.stack([data.samples[i].box for i in indices])
        ground = grounding_metrics(pred_boxes, truth)
        f1 = mask_f1(sel_masks, true_masks)
        report["rec"] = {"accuracy": ground["accuracy"],
                         "mean_iou": ground["mean_iou"],
                         "mask_f1": f1["f1"], "mask_precision": f1["precision"],
                         "mask_recall": f1["recall"]}
        for row, rec in enumerate(per):
            rec["box_pred"] = [float(v) for v in pred_boxes[row]]
            rec["iou"] = float(ground["ious"][row])
            rec["correct"] = bool(ground["ious"][row] > 0.5)
            rec["mask_pred"] = [int(v) for v in sel_masks[row]]
            rec["mask_true"] = [int(v) for v in true_masks[row]]

    if "reg" in tasks:
        candidates, references = {}, {}
        oracle_hits, oracle_total = 0, 0
        for row, i in enumerate(indices):
            s = data.samples[i]
            decoded = obj.reg_decode(model, data.image(i), s.box,
                                     max_len=max_decode_len)
            words = [data.vocab.tokens[t] for t in decoded.token_ids]
            candidates[row] = words
            references[row] = [s.text.lower().split()]
            rec = per[row]
            rec["decoded"] = " ".join(words)
            if s.objects and s.target is not None:
                expr = parse_expression(" ".join(words)) if words else None
                hit = expr is not None and matches(expr, s.objects) == [s.target]
                rec["oracle_match"] = bool(hit)
                oracle_hits += int(hit)
                oracle_total += 1
        mean_cider, per_cider = CiderD().score(candidates, references)
        for row, rec in enumerate(per):
            rec["cider"] = per_cider[row]
        report["reg"] = {"cider": mean_cider,
                         "exact_match": float(np.mean(
                             [per[r]["decoded"] == data.samples[i].text
                              for r, i in enumerate(indices)]))}
        if oracle_total:
            report["reg"]["oracle_accuracy"] = oracle_hits / oracle_total
    return report, per


def write_eval_outputs(out_dir, report: dict, per: list):
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path + ".tmp", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    os.replace(report_path + ".tmp", report_path)
    per_path = os.path.join(out_dir, "per_sample.jsonl")
    with open(per_path + ".tmp", "w", encoding="utf-8") as f:
        for rec in per:
            f.write(json.dumps(rec) + "\n")
    os.replace(per_path + ".tmp", per_path)
    return report_path, per_path
