"""Training losses and inference procedures.

Losses: masked-token recovery conditioned on image+region (mean cross-entropy
over masked slots only), and region prediction = box regression
((1 - gIoU) + L1) plus per-fusion-layer patch-mask binary cross-entropy.

Inference: greedy append-a-mask decoding for generation, and a single fused
forward with the box head for grounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (MASK_ID, PAD_ID, SEP_ID, FusionOutput, Model, PatchFeatures,
                    region_mask)
from .tensor import ContractViolation, ShapeMismatch, Tensor

# ---------------------------------------------------------------------------
# box geometry (normalized center form unless stated otherwise)
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(box, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_iou(a, b) -> float:
    """Plain IoU of two center-form boxes."""
    ax0, ay0, ax1, ay1 = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64))
    bx0, by0, bx1, by1 = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64))
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _corners(box: Tensor):
    cx, cy = T.select_last(box, 0), T.select_last(box, 1)
    w, h = T.select_last(box, 2), T.select_last(box, 3)
    return (T.sub(cx, T.mul(w, 0.5)), T.sub(cy, T.mul(h, 0.5)),
            T.add(cx, T.mul(w, 0.5)), T.add(cy, T.mul(h, 0.5)))


def giou_pairwise(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise generalized IoU of predicted (B, 4) boxes against constants."""
    if pred.shape[-1] != 4:
        raise ShapeMismatch(f"boxes must have 4 coordinates, got {pred.shape}")
    tgt = Tensor(np.asarray(target, dtype=np.float64), dtype=pred.data.dtype)
    px0, py0, px1, py1 = _corners(pred)
    tx0, ty0, tx1, ty1 = _corners(tgt)
    iw = T.maximum(T.sub(T.minimum(px1, tx1), T.maximum(px0, tx0)), 0.0)
    ih = T.maximum(T.sub(T.minimum(py1, ty1), T.maximum(py0, ty0)), 0.0)
    inter = T.mul(iw, ih)
    area_p = T.mul(T.maximum(T.sub(px1, px0), 0.0), T.maximum(T.sub(py1, py0), 0.0))
    area_t = T.mul(T.sub(tx1, tx0), T.sub(ty1, ty0))
    union = T.sub(T.add(area_p, area_t), inter)
    ex = T.sub(T.maximum(px1, tx1), T.minimum(px0, tx0))
    ey = T.sub(T.maximum(py1, ty1), T.minimum(py0, ty0))
    enclosing = T.mul(ex, ey)
    iou = T.div(inter, union)
    return T.sub(iou, T.div(T.sub(enclosing, union), enclosing))


def giou(a, b) -> float:
    """Generalized IoU in (-1, 1]; -1 for the degenerate all-zero-area case."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] * a[3] <= 0 and b[2] * b[3] <= 0:
        return -1.0
    val = giou_pairwise(Tensor(a[None], dtype=np.float64), b[None]).data
    return float(val[0])


def bbox_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """(1 - gIoU) plus the coordinate L1 distance, averaged over the batch."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"bbox_loss: {pred.shape} vs target {target.shape}")
    g = giou_pairwise(pred, target)
    giou_term = T.mean_(T.add(T.neg(g), 1.0))
    diff = T.abs_(T.sub(pred, Tensor(target, dtype=pred.data.dtype)))
    l1_term = T.mul(T.sum_(diff), 1.0 / pred.shape[0])
    return T.add(giou_term, l1_term)


def l1_box_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-sample sum of absolute coordinate errors (monitoring only)."""
    return float(np.abs(np.asarray(pred) - np.asarray(target)).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# masked batches
# ---------------------------------------------------------------------------

@dataclass
class MaskedBatch:
    input_ids: np.ndarray   # (B, S) with masked slots replaced by [MASK]
    targets: np.ndarray     # (B, S) original ids at masked slots, -1 elsewhere
    positions: np.ndarray   # (B, S) bool, True at masked slots


def mask_tokens(ids: np.ndarray, ratio: float = 0.25,
                rng: np.random.Generator | None = None) -> MaskedBatch:
    """Replace ~ratio of the non-pad tokens with [MASK], at least one per row."""
    if rng is None:
        raise ContractViolation("mask_tokens requires an rng")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    maskable = ids != PAD_ID
    if not maskable.any(axis=1).all():
        raise ContractViolation("mask_tokens: a row has no maskable token")
    pick = (rng.random(ids.shape) < ratio) & maskable
    for row in np.nonzero(~pick.any(axis=1))[0]:
        choices = np.nonzero(maskable[row])[0]
        pick[row, rng.integers(len(choices))] = True
    corrupted = np.where(pick, MASK_ID, ids)
    targets = np.where(pick, ids, -1)
    return MaskedBatch(corrupted, targets, pick)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def vmlm_loss(model: Model, image: PatchFeatures | np.ndarray,
              region_allowed: np.ndarray | None, masked: MaskedBatch,
              attention_mode: str = "bidirectional") -> Tensor:
    """Mean cross-entropy of the masked tokens given image, region and the
    corrupted text."""
    if attention_mode not in ("bidirectional", "unidirectional"):
        raise ContractViolation(f"unknown attention mode {attention_mode!r}")
    if region_allowed is None:
        raise ContractViolation("masked-token recovery runs on the region-given path")
    if not masked.positions.any():
        raise ContractViolation("masked batch has no masked positions")
    if isinstance(image, np.ndarray):
        image = model.encode_image(image)
    text = model.encode_text(masked.input_ids)
    fused = model.fuse(text, image, region_allowed, task="reg",
                       unidirectional=(attention_mode == "unidirectional"))
    b, s = masked.input_ids.shape
    rows, cols = np.nonzero(masked.positions)
    flat = rows * (s + 1) + (cols + 1)  # +1 shifts past [CLS]
    logits = model.lm_logits(fused.hidden, flat)
    return T.cross_entropy(logits, masked.targets[rows, cols])


@dataclass
class TRPTarget:
    box: np.ndarray    # (B, 4) normalized center form
    mask: np.ndarray   # (B, L_I) ground-truth patch overlap in {0, 1}


def region_pred_loss(predictions: list, target_mask: np.ndarray) -> Tensor:
    """Sum over fusion layers of the mean per-patch BCE against the target mask."""
    if not predictions:
        raise ContractViolation("no region predictions were produced")
    target = np.asarray(target_mask, dtype=np.float32)
    total = None
    for pred in predictions:
        if pred.logits.shape != target.shape:
            raise ContractViolation(
                f"mask length mismatch: {pred.logits.shape} vs {target.shape}")
        term = T.bce_with_logits(pred.logits, target)
        total = term if total is None else T.add(total, term)
    return total


def trp_loss(pred_box: Tensor, target: TRPTarget, predictions: list) -> Tensor:
    return T.add(bbox_loss(pred_box, target.box), region_pred_loss(predictions, target.mask))


def rec_forward(model: Model, image: PatchFeatures | np.ndarray, ids: np.ndarray,
                collect: bool = False):
    """Grounding-path forward: returns (predicted boxes (B, 4), fusion output)."""
    if isinstance(image, np.ndarray):
        image = model.encode_image(image)
    text = model.encode_text(ids)
    fused = model.fuse(text, image, None, task="rec", collect=collect)
    return model.predict_box(fused), fused


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class DecodeStep:
    token_id: int
    attention: list = field(default_factory=list)  # per fusion layer: dict of (H, L_I) rows


@dataclass
class DecodeResult:
    token_ids: list          # generated ids with special tokens removed
    steps: list              # DecodeStep per forward pass (incl. the final [SEP])


def reg_decode(model: Model, image: PatchFeatures | np.ndarray, box,
               max_len: int | None = None, collect: bool = False) -> DecodeResult:
    """Greedy generation: append [MASK], run the region-given path with a
    unidirectional mask, emit the argmax token; stop on [SEP] or max_len."""
    if isinstance(image, np.ndarray):
        if image.ndim == 3:
            image = image[None]
        image = model.encode_image(image)
    allowed = region_mask(box, image.grid).astype(bool)[None]
    limit = model.cfg.max_text_len - 1
    max_len = limit if max_len is None else min(max_len, limit)
    seq: list[int] = []
    steps: list[DecodeStep] = []
    for _ in range(max_len + 1):
        ids = np.asarray([seq + [MASK_ID]], dtype=np.int64)
        text = model.encode_text(ids)
        fused = model.fuse(text, image, allowed, task="reg",
                           unidirectional=True, collect=collect)
        pos = len(seq) + 1  # the [MASK] slot, shifted past [CLS]
        logits = model.lm_logits(fused.hidden, np.asarray([pos]))
        token = int(np.argmax(logits.data[0]))
        attn = []
        if collect:
            for layer_attn in fused.attention:
                row = {}
                for name in ("image", "region"):
                    if name in layer_attn:
                        row[name] = layer_attn[name].data[0, :, pos, :].copy()
                if row:
                    attn.append(row)
        steps.append(DecodeStep(token, attn))
        if token == SEP_ID:
            break
        seq.append(token)
        if len(seq) >= max_len:
            break
    clean = [t for t in seq if t > MASK_ID]
    return DecodeResult(clean, steps)


def rec_predict(model: Model, image: PatchFeatures | np.ndarray, ids) -> np.ndarray:
    """Ground a single expression: returns the predicted (4,) box."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if isinstance(image, np.ndarray) and image.ndim == 3:
        image = image[None]
    boxes, _ = rec_forward(model, image, ids)
    return boxes.data[0].copy()
