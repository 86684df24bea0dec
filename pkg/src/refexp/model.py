"""Unified grounding/generation model.

One fusion encoder serves both tasks: text-to-region grounding feeds it clean
text and lets each fusion layer's region predictor synthesize pseudo region
features, while region-to-text generation feeds it (possibly masked) text plus
the ground-truth region patches. A vanilla decoder stack runs first, then the
image-region-text fusion layers with their two chained cross-attentions.

Region features are realized as key masks over the full patch sequence, which
is numerically identical to attending over the extracted patch subsequence
(softmax renormalizes over the allowed set).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (GLU, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
                 TransformerDecoderLayer, TransformerEncoderLayer, init_weight, zeros)
from .tensor import ContractViolation, ShapeMismatch, Tensor

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


class InvalidRegion(ValueError):
    """Region has no positive-area overlap with the canvas."""


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

class Vocab:
    """Whitespace word-level vocabulary with fixed special tokens."""

    def __init__(self, tokens: list[str]):
        if tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        words = sorted({w for text in texts for w in text.lower().split()})
        return cls(SPECIAL_TOKENS + words)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, add_sep: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK_ID) for w in text.lower().split()]
        if add_sep:
            ids.append(SEP_ID)
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    image_w: int
    image_h: int
    patch: int

    def __post_init__(self):
        if self.image_w % self.patch or self.image_h % self.patch:
            raise ShapeMismatch(
                f"image {self.image_w}x{self.image_h} not divisible by patch {self.patch}")

    @property
    def cols(self):
        return self.image_w // self.patch

    @property
    def rows(self):
        return self.image_h // self.patch

    @property
    def count(self):
        return self.rows * self.cols


def clip_box(box) -> np.ndarray:
    """Clip a normalized (cx, cy, w, h) box's corners into the unit square."""
    cx, cy, w, h = (float(v) for v in box)
    x0 = min(max(cx - w / 2, 0.0), 1.0)
    x1 = min(max(cx + w / 2, 0.0), 1.0)
    y0 = min(max(cy - h / 2, 0.0), 1.0)
    y1 = min(max(cy + h / 2, 0.0), 1.0)
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dtype=np.float64)


def region_patch_indexes(box, grid: PatchGrid) -> np.ndarray:
    """Indexes of every patch whose pixel rectangle overlaps the box with
    positive area, in row-major order."""
    cx, cy, w, h = (float(v) for v in clip_box(box))
    bx0, bx1 = (cx - w / 2) * grid.image_w, (cx + w / 2) * grid.image_w
    by0, by1 = (cy - h / 2) * grid.image_h, (cy + h / 2) * grid.image_h
    if bx1 <= bx0 or by1 <= by0:
        raise InvalidRegion(f"region {box} has zero area after clipping")
    p = grid.patch
    c0, c1 = int(np.floor(bx0 / p)), int(np.ceil(bx1 / p))
    r0, r1 = int(np.floor(by0 / p)), int(np.ceil(by1 / p))
    cols = np.arange(max(c0, 0), min(c1, grid.cols))
    rows = np.arange(max(r0, 0), min(r1, grid.rows))
    return (rows[:, None] * grid.cols + cols[None, :]).reshape(-1)


def region_mask(box, grid: PatchGrid) -> np.ndarray:
    """Per-patch {0,1} overlap indicator (the predictor's supervision target)."""
    m = np.zeros(grid.count, dtype=np.uint8)
    m[region_patch_indexes(box, grid)] = 1
    return m


# ---------------------------------------------------------------------------
# feature containers
# ---------------------------------------------------------------------------

@dataclass
class PatchFeatures:
    features: Tensor          # (B, L_I, D)
    grid: PatchGrid
    pos: Tensor               # (L_I, D), the encoder's patch position embeddings


@dataclass
class RegionFeatures:
    features: Tensor          # (L_R, D)
    indexes: np.ndarray       # strictly increasing patch indexes


@dataclass
class TextFeatures:
    features: Tensor          # (B, S+1, D): [CLS] + tokens
    ids: np.ndarray           # (B, S) without [CLS]
    key_pad: np.ndarray       # (B, S+1) bool, True where the key is padding


@dataclass
class FusionState:
    """Intermediates of one fusion layer, in equation order."""
    x: Tensor
    x_q: Tensor
    z_i: Tensor
    x_i: Tensor
    z_r: Tensor
    x_r: Tensor
    h: Tensor


@dataclass
class PredictorOutput:
    logits: Tensor            # (B, L_I)
    alphas: Tensor            # (B, L_I) in (0, 1)
    selected: np.ndarray      # (B, L_I) bool; alpha >= threshold, argmax fallback
    threshold: float


@dataclass
class FusionOutput:
    hidden: Tensor                       # (B, S+1, D)
    states: list = field(default_factory=list)        # FusionState per fusion layer
    predictions: list = field(default_factory=list)   # PredictorOutput per fusion layer
    attention: list = field(default_factory=list)     # dict of weight tensors per layer


def extract_region_features(feats: PatchFeatures, box, sample: int = 0) -> RegionFeatures:
    """Order-preserving subsequence of one sample's patch features."""
    idx = region_patch_indexes(box, feats.grid)
    l_i = feats.grid.count
    flat = T.reshape(feats.features, (-1, feats.features.shape[-1]))
    rows = T.gather_rows(flat, idx + sample * l_i)
    return RegionFeatures(rows, idx)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(B, H, W, 3) uint8 -> (B, L_I, patch*patch*3) float32 in [-1, 1]."""
    b, h, w, c = images.shape
    if (w, h) != (grid.image_w, grid.image_h):
        raise ShapeMismatch(f"images {w}x{h} vs grid {grid.image_w}x{grid.image_h}")
    p = grid.patch
    x = images.astype(np.float32) / 127.5 - 1.0
    x = x.reshape(b, grid.rows, p, grid.cols, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid.count, p * p * c)


class VisionEncoder(Module):
    def __init__(self, rng, grid: PatchGrid, width: int, heads: int, layers: int, ffn_hidden: int):
        self.grid = grid
        self.proj = Linear(rng, grid.patch * grid.patch * 3, width)
        # grounding is a positional task: position embeddings start at content
        # scale so patch identity is visible to attention from step one
        self.pos = init_weight(rng, (grid.count, width), scale=0.5)
        self.layers = [TransformerEncoderLayer(rng, width, heads, ffn_hidden)
                       for _ in range(layers)]

    def __call__(self, images: np.ndarray) -> PatchFeatures:
        patches = patchify(images, self.grid)
        x = self.proj(Tensor(patches, dtype=self.pos.data.dtype))
        x = T.add(x, T.broadcast_to(T.reshape(self.pos, (1, *self.pos.shape)), x.shape))
        for layer in self.layers:
            x, _ = layer(x)
        return PatchFeatures(x, self.grid, self.pos)

    def embed(self, images: np.ndarray) -> Tensor:
        """Patch embeddings before the encoder stack (projection + position)."""
        x = self.proj(Tensor(patchify(images, self.grid), dtype=self.pos.data.dtype))
        return T.add(x, T.broadcast_to(T.reshape(self.pos, (1, *self.pos.shape)), x.shape))


class TextEncoder(Module):
    def __init__(self, rng, vocab_size: int, max_len: int, width: int, heads: int,
                 layers: int, ffn_hidden: int):
        self.max_len = max_len
        self.tok = init_weight(rng, (vocab_size, width))
        self.pos = init_weight(rng, (max_len + 1, width), scale=0.5)
        self.layers = [TransformerEncoderLayer(rng, width, heads, ffn_hidden)
                       for _ in range(layers)]

    def __call__(self, ids: np.ndarray) -> TextFeatures:
        ids = np.asarray(ids, dtype=np.int64)
        b, s = ids.shape
        if s > self.max_len:
            raise ContractViolation(f"text length {s} exceeds maximum {self.max_len}")
        full = np.concatenate([np.full((b, 1), CLS_ID, dtype=np.int64), ids], axis=1)
        key_pad = full == PAD_ID
        x = T.embedding(self.tok, full)
        pe = T.embedding(self.pos, np.arange(s + 1))
        x = T.add(x, T.broadcast_to(T.reshape(pe, (1, s + 1, -1)), x.shape))
        mask = key_pad[:, None, None, :]
        for layer in self.layers:
            x, _ = layer(x, mask if key_pad.any() else None)
        return TextFeatures(x, ids, key_pad)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

class RegionPredictor(Module):
    """Scores each patch from the fused [CLS] state and the patch position."""

    def __init__(self, rng, width: int):
        self.fc1 = Linear(rng, 2 * width, width)
        self.fc2 = Linear(rng, width, 1)

    def __call__(self, cls_state: Tensor, pos: Tensor, threshold: float) -> PredictorOutput:
        b, d = cls_state.shape
        l_i = pos.shape[0]
        cls_b = T.broadcast_to(T.reshape(cls_state, (b, 1, d)), (b, l_i, d))
        pos_b = T.broadcast_to(T.reshape(pos, (1, l_i, d)), (b, l_i, d))
        h = T.gelu(self.fc1(T.concat_last([cls_b, pos_b])))
        logits = T.reshape(self.fc2(h), (b, l_i))
        alphas = T.sigmoid(logits)
        selected = alphas.data >= threshold
        for row in np.nonzero(~selected.any(axis=1))[0]:
            selected[row, int(np.argmax(alphas.data[row]))] = True
        return PredictorOutput(logits, alphas, selected, threshold)


class IRTFLayer(Module):
    """Self-attention, then image cross-attention and region cross-attention,
    each refined by a gated linear unit, then feed-forward."""

    def __init__(self, rng, width: int, heads: int, ffn_hidden: int, use_glu: bool = True):
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.image_attn = MultiHeadAttention(rng, width, heads)
        self.region_attn = MultiHeadAttention(rng, width, heads)
        self.glu_image = GLU(rng, width) if use_glu else None
        self.glu_region = GLU(rng, width) if use_glu else None
        self.predictor = RegionPredictor(rng, width)
        self.ln1 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_hidden)
        self.ln2 = LayerNorm(width)

    def __call__(self, x: Tensor, image: Tensor, pos: Tensor,
                 region_allowed: np.ndarray | None, self_mask: np.ndarray | None,
                 threshold: float):
        x_q = T.add(self.self_attn(x, x, x, self_mask)[0], x)
        z_i, attn_image = self.image_attn(x_q, image, image)
        if self.glu_image is not None:
            x_i = T.add(self.glu_image(z_i, x_q), x_q)
        else:
            x_i = T.add(z_i, x_q)

        prediction = None
        if region_allowed is None:
            cls_state = T.select_last(T.transpose(x_i, (0, 2, 1)), 0)
            prediction = self.predictor(cls_state, pos, threshold)
            region_allowed = prediction.selected
        elif not region_allowed.any(axis=1).all():
            raise ContractViolation("fusion layer given an empty region")

        z_r, attn_region = self.region_attn(x_i, image, image,
                                            ~region_allowed[:, None, None, :])
        # the second gate takes x_q (not x_i); the residual is x_i
        if self.glu_region is not None:
            x_r = T.add(self.glu_region(z_r, x_q), x_i)
        else:
            x_r = T.add(z_r, x_i)

        a = self.ln1(x_r)
        h = self.ln2(T.add(a, self.ffn(a)))
        state = FusionState(x, x_q, z_i, x_i, z_r, x_r, h)
        attn = {"image": attn_image, "region": attn_region}
        return h, state, prediction, attn


@dataclass(frozen=True)
class FusionConfig:
    n_f1: int = 2              # vanilla decoder layers
    n_f2: int = 1              # fusion layers with image+region cross-attention
    use_glu: bool = True
    rec_memory: str = "image"  # vanilla-layer memory when no region is given

    def __post_init__(self):
        if self.n_f1 + self.n_f2 < 1:
            raise ValueError("fusion encoder needs at least one layer")
        if self.rec_memory != "image":
            raise ValueError(f"unsupported memory routing {self.rec_memory!r}")


class FusionEncoder(Module):
    def __init__(self, rng, cfg: FusionConfig, width: int, heads: int, ffn_hidden: int):
        self.cfg = cfg
        self.vanilla = [TransformerDecoderLayer(rng, width, heads, ffn_hidden)
                        for _ in range(cfg.n_f1)]
        self.irtf = [IRTFLayer(rng, width, heads, ffn_hidden, cfg.use_glu)
                     for _ in range(cfg.n_f2)]

    def __call__(self, text: Tensor, image: PatchFeatures,
                 region_allowed: np.ndarray | None, self_mask: np.ndarray | None,
                 threshold: float, collect: bool = False) -> FusionOutput:
        x = text
        out = FusionOutput(hidden=text)
        memory_mask = None
        if region_allowed is not None:
            memory_mask = ~region_allowed[:, None, None, :]
        for layer in self.vanilla:
            x, attn = layer(x, image.features, self_mask, memory_mask)
            if collect:
                out.attention.append(attn)
        for layer in self.irtf:
            x, state, prediction, attn = layer(
                x, image.features, image.pos, region_allowed, self_mask, threshold)
            if prediction is not None:
                out.predictions.append(prediction)
            if collect:
                out.states.append(state)
                out.attention.append(attn)
        out.hidden = x
        return out


class LMHead(Module):
    def __init__(self, rng, width: int, vocab_size: int):
        self.proj = Linear(rng, width, vocab_size)

    def __call__(self, hidden_rows: Tensor) -> Tensor:
        return self.proj(hidden_rows)


class BoxHead(Module):
    """[CLS] hidden state -> (cx, cy, w, h), each squashed into (0, 1)."""

    def __init__(self, rng, width: int):
        self.fc1 = Linear(rng, width, width)
        self.fc2 = Linear(rng, width, 4)

    def __call__(self, cls_state: Tensor) -> Tensor:
        return T.sigmoid(self.fc2(T.gelu(self.fc1(cls_state))))


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 128
    heads: int = 4
    vision_layers: int = 2
    text_layers: int = 2
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ffn_mult: int = 2
    image_size: int = 64
    patch_size: int = 16
    max_text_len: int = 20
    threshold: float = 0.5

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["fusion"] = dict(vars(self.fusion))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["fusion"] = FusionConfig(**d["fusion"])
        return cls(**d)


def build_self_mask(key_pad: np.ndarray, unidirectional: bool) -> np.ndarray | None:
    """(B, S) key padding -> (B, 1, S, S) disallowed mask, optionally causal."""
    b, s = key_pad.shape
    mask = np.broadcast_to(key_pad[:, None, None, :], (b, 1, s, s))
    if unidirectional:
        causal = np.triu(np.ones((s, s), dtype=bool), k=1)
        mask = mask | causal[None, None]
    elif not key_pad.any():
        return None
    return np.ascontiguousarray(mask)


class Model(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        grid = PatchGrid(cfg.image_size, cfg.image_size, cfg.patch_size)
        hidden = cfg.width * cfg.ffn_mult
        self.vision = VisionEncoder(rng, grid, cfg.width, cfg.heads, cfg.vision_layers, hidden)
        self.text = TextEncoder(rng, cfg.vocab_size, cfg.max_text_len, cfg.width,
                                cfg.heads, cfg.text_layers, hidden)
        self.fusion = FusionEncoder(rng, cfg.fusion, cfg.width, cfg.heads, hidden)
        self.lm_head = LMHead(rng, cfg.width, cfg.vocab_size)
        self.box_head = BoxHead(rng, cfg.width)

    @property
    def grid(self) -> PatchGrid:
        return self.vision.grid

    def encode_image(self, images: np.ndarray) -> PatchFeatures:
        return self.vision(images)

    def encode_text(self, ids: np.ndarray) -> TextFeatures:
        return self.text(ids)

    def fuse(self, text: TextFeatures, image: PatchFeatures,
             region_allowed: np.ndarray | None, task: str,
             unidirectional: bool = False, collect: bool = False) -> FusionOutput:
        if task not in ("reg", "rec"):
            raise ContractViolation(f"unknown task {task!r}")
        if task == "reg":
            if region_allowed is None:
                raise ContractViolation("generation requires region features")
            region_allowed = np.asarray(region_allowed, dtype=bool)
            if not region_allowed.any(axis=1).all():
                raise ContractViolation("a sample's region mask selects no patch")
        else:
            region_allowed = None
        self_mask = build_self_mask(text.key_pad, unidirectional)
        return self.fusion(text.features, image, region_allowed, self_mask,
                           self.cfg.threshold, collect=collect)

    def lm_logits(self, hidden: Tensor, flat_positions: np.ndarray) -> Tensor:
        """Vocabulary logits at the given positions of the flattened (B*S) axis."""
        rows = T.gather_rows(T.reshape(hidden, (-1, hidden.shape[-1])), flat_positions)
        return self.lm_head(rows)

    def predict_box(self, fused: FusionOutput) -> Tensor:
        cls_state = T.select_last(T.transpose(fused.hidden, (0, 2, 1)), 0)
        return self.box_head(cls_state)

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        groups = {"vision": {}, "text": {}, "fusion": {}, "predictor": {},
                  "lm_head": {}, "box_head": {}}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            if top == "fusion" and ".predictor." in name:
                groups["predictor"][name] = p
            else:
                groups[top][name] = p
        return groups
