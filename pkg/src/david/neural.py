"""Small from-scratch encoders: token encoder, L2V layout embedding, entity visual encoder, fusion.

Everything here is a plain ``torch.nn.Module`` working on one document at a
time (batch dimension of 1, or a padded batch of queries with a key mask).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .docmodel import COORD_MAX, BBox, Document, Entity

INIT_STD = 0.02


class SequenceOverflowError(ValueError):
    """Sequence longer than the configured maximum."""


class EmptyQueryError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4000
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_tokens: int = 192
    max_entities: int = 64
    dropout: float = 0.1
    seed: int = 0
    ffn_dim: int = 256
    decoder_layers: int = 2
    conv_channels: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "conv_channels": tuple(d["conv_channels"])})


def init_weights(module: nn.Module) -> None:
    """Seeded-Gaussian initialisation (std 0.02), zero biases, unit LayerNorm gains."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

_DIGIT = re.compile(r"\d")


def word_shape(text: str) -> str:
    return _DIGIT.sub("0", text.casefold())


class Vocab:
    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, words: Sequence[str]):
        self.itos = [self.PAD, self.UNK] + [w for w in words if w not in (self.PAD, self.UNK)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int) -> "Vocab":
        counts = Counter(word_shape(w) for text in texts for w in text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[: max(max_size - 2, 0)]])

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.stoi.get(word_shape(w), 1) for w in words]


# --------------------------------------------------------------------------
# rasters
# --------------------------------------------------------------------------


def render_l2v(doc_or_size) -> np.ndarray:
    """Colour-coded layout raster: R ramps with x, G with y, B fixed at 128."""
    if isinstance(doc_or_size, Document):
        w, h = doc_or_size.page_width, doc_or_size.page_height
    else:
        w, h = doc_or_size
    if w < 1 or h < 1:
        raise ValueError("page dimensions must be >= 1")
    xs = np.arange(w, dtype=np.int64)
    ys = np.arange(h, dtype=np.int64)
    r = (255 * xs) // (w - 1) if w > 1 else np.zeros(w, dtype=np.int64)
    g = (255 * ys) // (h - 1) if h > 1 else np.zeros(h, dtype=np.int64)
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:, :, 0] = r[None, :]
    img[:, :, 1] = g[:, None]
    img[:, :, 2] = 128
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, rest = data.split(maxsplit=4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError("not an 8-bit binary PPM")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w), 3)


_CATEGORY_SHADE = {"title": 200, "header": 200, "field": 230, "paragraph": 215, "menu": 225,
                   "subtotal": 210, "total": 190}


def render_page(doc: Document) -> np.ndarray:
    """Synthetic page image: white page, entity regions shaded by category, darkened word boxes."""
    h, w = doc.page_height, doc.page_width
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    for e in doc.entities:
        y0, y1, x0, x1 = pixel_region(e.bbox, w, h)
        shade = _CATEGORY_SHADE.get(e.category or "", 235)
        img[y0:y1, x0:x1] = shade
    for t in doc.tokens:
        y0, y1, x0, x1 = pixel_region(t.bbox, w, h)
        img[y0:y1, x0:x1] = 40
    return img


def pixel_region(bbox: BBox, w: int, h: int) -> tuple[int, int, int, int]:
    """Rescale a [0, 1000] box to a pixel slice (y0, y1, x0, x1), at least 1x1."""
    x0 = min(bbox.x0 * w // COORD_MAX, w - 1)
    y0 = min(bbox.y0 * h // COORD_MAX, h - 1)
    x1 = max(-(-bbox.x1 * w // COORD_MAX), x0 + 1)
    y1 = max(-(-bbox.y1 * h // COORD_MAX), y0 + 1)
    return y0, min(y1, h), x0, min(x1, w)


def region_means(img: np.ndarray, boxes: Sequence[BBox]) -> np.ndarray:
    """Mean of each channel over each box, via an integral image."""
    h, w, c = img.shape
    integral = np.zeros((h + 1, w + 1, c), dtype=np.int64)
    integral[1:, 1:] = img.astype(np.int64).cumsum(0).cumsum(1)
    out = np.zeros((len(boxes), c), dtype=np.float64)
    for k, b in enumerate(boxes):
        y0, y1, x0, x1 = pixel_region(b, w, h)
        s = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
        out[k] = s / ((y1 - y0) * (x1 - x0))
    return out


def roi_mean_pool(fmap: torch.Tensor, boxes: Sequence[BBox]) -> torch.Tensor:
    """Mean-pool a (C, H, W) feature map over each [0, 1000] box -> (len(boxes), C)."""
    c, h, w = fmap.shape
    if not boxes:
        return fmap.new_zeros((0, c))
    integral = F.pad(fmap.cumsum(1).cumsum(2), (1, 0, 1, 0))
    regions = [pixel_region(b, w, h) for b in boxes]
    y0 = torch.tensor([r[0] for r in regions])
    y1 = torch.tensor([r[1] for r in regions])
    x0 = torch.tensor([r[2] for r in regions])
    x1 = torch.tensor([r[3] for r in regions])
    s = integral[:, y1, x1] - integral[:, y0, x1] - integral[:, y1, x0] + integral[:, y0, x0]
    area = ((y1 - y0) * (x1 - x0)).to(fmap.dtype)
    return (s / area).T


# --------------------------------------------------------------------------
# transformer pieces
# --------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, key_pad: Optional[torch.Tensor] = None):
        """x: (B, Lq, H), mem: (B, Lk, H), key_pad: (B, Lk) bool, True = padding."""
        b, lq, hdim = x.shape
        lk = mem.shape[1]
        if lk == 0:
            return torch.zeros_like(x)
        dh = hdim // self.heads
        q = self.q(x).view(b, lq, self.heads, dh).transpose(1, 2)
        k = self.k(mem).view(b, lk, self.heads, dh).transpose(1, 2)
        v = self.v(mem).view(b, lk, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = self.drop(scores.softmax(-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, lq, hdim)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(hidden, ffn)
        self.fc2 = nn.Linear(ffn, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, hidden: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, heads, dropout)
        self.ln2 = nn.LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad=None):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, pad))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    """Pre-norm self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, hidden: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.self_attn = MultiHeadAttention(hidden, heads, dropout)
        self.ln2 = nn.LayerNorm(hidden)
        self.cross_attn = MultiHeadAttention(hidden, heads, dropout)
        self.ln3 = nn.LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, mem_pad=None):
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h))
        x = x + self.drop(self.cross_attn(self.ln2(x), mem, mem_pad))
        return x + self.drop(self.ffn(self.ln3(x)))


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_layers: Optional[int] = None):
        super().__init__()
        n = cfg.n_layers if n_layers is None else n_layers
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.hidden_dim, cfg.n_heads, cfg.ffn_dim, cfg.dropout) for _ in range(n))
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, x, pad=None):
        for layer in self.layers:
            x = layer(x, pad)
        return self.norm(x)


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.hidden_dim, cfg.n_heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, x, mem, mem_pad=None):
        for layer in self.layers:
            x = layer(x, mem, mem_pad)
        return self.norm(x)


# --------------------------------------------------------------------------
# general domain encoders
# --------------------------------------------------------------------------


class TokenEncoder(nn.Module):
    """Word + four coordinate + 1D position embeddings through a transformer encoder."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        hd = cfg.hidden_dim
        self.word = nn.Embedding(cfg.vocab_size, hd)
        self.coord = nn.ModuleList(nn.Embedding(COORD_MAX + 1, hd) for _ in range(4))
        self.position = nn.Embedding(cfg.max_tokens, hd)
        self.emb_norm = nn.LayerNorm(hd)
        self.drop = nn.Dropout(cfg.dropout)
        self.encoder = TransformerEncoder(cfg)

    def forward(self, word_ids, boxes=None, pad=None, layout_drop=None):
        """word_ids: (B, L) long; boxes: (B, L, 4) long or None for a zero layout embedding.

        ``layout_drop`` (B, L) bool zeroes the coordinate embedding of the marked tokens.
        """
        length = word_ids.shape[1]
        if length > self.cfg.max_tokens:
            raise SequenceOverflowError(f"{length} tokens exceed max_tokens={self.cfg.max_tokens}")
        x = self.word(word_ids) + self.position(torch.arange(length))[None]
        if boxes is not None:
            layout = sum(self.coord[k](boxes[..., k]) for k in range(4))
            if layout_drop is not None:
                layout = layout * (~layout_drop).to(layout.dtype)[..., None]
            x = x + layout
        x = self.drop(self.emb_norm(x))
        return self.encoder(x, pad)


class L2VProjection(nn.Module):
    """Linear 3 -> hidden over region-mean L2V colours (scaled to [0, 1])."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(3, cfg.hidden_dim)

    def forward(self, channel_means):
        return self.proj(channel_means / 255.0)


def pool_l2v(raster: np.ndarray, bbox: BBox, proj: L2VProjection) -> torch.Tensor:
    means = torch.as_tensor(region_means(raster, [bbox]), dtype=proj.proj.weight.dtype)
    return proj(means)[0]


class VisualEncoder(nn.Module):
    """Two stride-2 convolutions, RoI mean-pooling per entity, linear projection to hidden."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.proj = nn.Linear(c2, cfg.hidden_dim)

    def feature_map(self, page):
        """page: (3, H, W) float in [0, 1]."""
        return F.gelu(self.conv2(F.gelu(self.conv1(page[None]))))[0]

    def forward(self, page, boxes: Sequence[BBox]):
        return self.proj(roi_mean_pool(self.feature_map(page), boxes))


def encode_entity_visual(page: torch.Tensor, entity: Entity, visual: VisualEncoder) -> torch.Tensor:
    return visual(page, [entity.bbox])[0]


class EntityFusion(nn.Module):
    """E_j = Linear(V'_j concat T_j) + L_E_j."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.hidden = cfg.hidden_dim
        self.linear = nn.Linear(2 * cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, visual, token_pool, l2v):
        if visual.shape[-1] != self.hidden or token_pool.shape[-1] != self.hidden or l2v.shape[-1] != self.hidden:
            raise ValueError("fusion inputs must all have hidden_dim features")
        return self.linear(torch.cat([visual, token_pool], dim=-1)) + l2v


def child_mean(token_states: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
    """Mean of each entity's child-token vectors; zero for childless entities.

    token_states: (n, H); relation: (n, m) {0, 1}.
    """
    counts = relation.sum(0).clamp(min=1.0)
    return (relation.T @ token_states) / counts[:, None]
