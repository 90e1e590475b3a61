"""Domain knowledge infuser: joint-grained encoder, SDS alignment, SST token decoder, SIT entity decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .neural import EncoderConfig, SequenceOverflowError, TransformerDecoder, TransformerEncoder

TOKEN_SEGMENT, ENTITY_SEGMENT = 0, 1


@dataclass(frozen=True)
class JointEncoding:
    tokens: torch.Tensor
    entities: torch.Tensor


@dataclass(frozen=True)
class AlignmentPrediction:
    scores: torch.Tensor
    probabilities: torch.Tensor


class JointEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.segment = nn.Embedding(2, cfg.hidden_dim)
        self.encoder = TransformerEncoder(cfg)

    def forward(self, tokens: torch.Tensor, entities: torch.Tensor) -> JointEncoding:
        n, m = tokens.shape[0], entities.shape[0]
        if n > self.cfg.max_tokens or m > self.cfg.max_entities:
            raise SequenceOverflowError(f"joint input ({n} tokens, {m} entities) exceeds configured maxima")
        x = torch.cat([tokens + self.segment.weight[TOKEN_SEGMENT], entities + self.segment.weight[ENTITY_SEGMENT]])
        out = self.encoder(x[None])[0]
        return JointEncoding(out[:n], out[n:])

    def encode_tokens_only(self, tokens: torch.Tensor, pad: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Joint-encode a padded batch of token-only sequences (B, L, H), e.g. queries."""
        return self.encoder(tokens + self.segment.weight[TOKEN_SEGMENT], pad)


def joint_encode(token_states: torch.Tensor, entity_states: torch.Tensor, joint: JointEncoder) -> JointEncoding:
    return joint(token_states, entity_states)


class AlignmentHead(nn.Module):
    """gamma_ij = <A T'_i, B E'_j>."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.token_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.entity_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, tokens: torch.Tensor, entities: torch.Tensor) -> AlignmentPrediction:
        scores = self.token_proj(tokens) @ self.entity_proj(entities).T
        return AlignmentPrediction(scores, torch.sigmoid(scores))


def alignment_scores(tokens: torch.Tensor, entities: torch.Tensor, head: AlignmentHead) -> AlignmentPrediction:
    return head(tokens, entities)


def sds_loss(pred: AlignmentPrediction, truth: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted relation probabilities and the 0/1 relation matrix."""
    if pred.probabilities.shape != truth.shape:
        raise ValueError(f"relation shapes differ: {tuple(pred.probabilities.shape)} vs {tuple(truth.shape)}")
    return ((pred.probabilities - truth.to(pred.probabilities.dtype)) ** 2).mean()


class TokenDecoder(nn.Module):
    """D_T: tokens as source, entities as memory, then a linear tagger over the synthetic label space."""

    def __init__(self, cfg: EncoderConfig, n_labels: int):
        super().__init__()
        self.cfg = cfg
        self.decoder = TransformerDecoder(cfg)
        self.classifier = nn.Linear(cfg.hidden_dim, n_labels)

    def forward(self, tokens: torch.Tensor, entities: torch.Tensor):
        if tokens.shape[0] > self.cfg.max_tokens:
            raise SequenceOverflowError(f"{tokens.shape[0]} tokens exceed max_tokens")
        states = self.decoder(tokens[None], entities[None])[0]
        return states, self.classifier(states)


def sst_decode(tokens: torch.Tensor, entities: torch.Tensor, decoder: TokenDecoder):
    return decoder(tokens, entities)


class MissingLabelError(ValueError):
    pass


def sst_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and int(labels.min()) < 0:
        raise MissingLabelError("every token needs a synthetic label for SST")
    return F.cross_entropy(logits, labels)


class PointerNet(nn.Module):
    """Dot-product attention between a pooled query and projected candidate states."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.query_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.key_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, query: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        """query: (B, H); states: (B, m, H) -> logits (B, m)."""
        return (self.key_proj(states) @ self.query_proj(query)[..., None])[..., 0]

    @torch.no_grad()
    def copy_from_alignment(self, head: AlignmentHead) -> None:
        """Start from the token/entity alignment form: queries play tokens, candidates play entities."""
        self.query_proj.load_state_dict(head.token_proj.state_dict())
        self.key_proj.load_state_dict(head.entity_proj.state_dict())


def ground_query(query_words: torch.Tensor, query_pad: Optional[torch.Tensor], doc_words: torch.Tensor,
                 doc_states: torch.Tensor, temperature: float = 0.05) -> torch.Tensor:
    """Locate each query word on the page and pool the matched token states.

    query_words: (B, L, H) word embeddings; doc_words / doc_states: (n, H).
    Each query word attends over page tokens by cosine similarity of word
    embeddings; words are weighted by their best match so that words absent
    from the page contribute little. Returns (B, H).
    """
    if doc_states.shape[0] == 0:
        raise ValueError("grounding needs at least one page token")
    sim = F.normalize(query_words, dim=-1) @ F.normalize(doc_words, dim=-1).T  # (B, L, n)
    matched = (sim / temperature).softmax(-1) @ doc_states  # (B, L, H)
    weight = sim.max(-1).values.clamp(min=0.0)
    if query_pad is not None:
        weight = weight.masked_fill(query_pad, 0.0)
    weight = weight / weight.sum(-1, keepdim=True).clamp(min=1e-6)
    return (weight[..., None] * matched).sum(1)


class NoEntitiesError(ValueError):
    pass


def masked_mean(seq: torch.Tensor, pad: Optional[torch.Tensor]) -> torch.Tensor:
    if pad is None:
        return seq.mean(1)
    keep = (~pad).to(seq.dtype)[..., None]
    return (seq * keep).sum(1) / keep.sum(1).clamp(min=1.0)


class EntityDecoder(nn.Module):
    """D_E plus pointer net: entities as source; memory = query sequence then fine-grained states."""

    def __init__(self, cfg: EncoderConfig, memory: str = "tokens"):
        super().__init__()
        if memory not in ("tokens", "entities"):
            raise ValueError("memory must be 'tokens' or 'entities'")
        self.memory = memory
        self.decoder = TransformerDecoder(cfg)
        self.pointer = PointerNet(cfg)

    def decode(self, entities, tokens, query_seq, query_pad=None):
        """Returns E'' of shape (B, m, H) for a batch of B queries."""
        b = query_seq.shape[0]
        context = tokens if self.memory == "tokens" else entities
        mem = torch.cat([query_seq, context[None].expand(b, -1, -1)], dim=1)
        pad = None
        if query_pad is not None:
            pad = torch.cat([query_pad, query_pad.new_zeros((b, context.shape[0]))], dim=1)
        return self.decoder(entities[None].expand(b, -1, -1), mem, pad)

    def forward(self, entities, tokens, query_seq, query_pad=None, query_vector=None):
        """``query_vector`` (B, H) overrides the mean-pooled query used by the pointer."""
        if entities.shape[0] == 0:
            raise NoEntitiesError("entity decoding needs at least one entity")
        states = self.decode(entities, tokens, query_seq, query_pad)
        if query_vector is None:
            query_vector = masked_mean(query_seq, query_pad)
        return states, self.pointer(query_vector, states)


def sit_decode(entities, tokens, query_seq, decoder: EntityDecoder, query_pad=None) -> torch.Tensor:
    """Pointer distribution over entities, one row per query."""
    _, logits = decoder(entities, tokens, query_seq, query_pad)
    return logits.softmax(-1)


def sit_loss(distribution: torch.Tensor, target) -> torch.Tensor:
    """-log p(target); ``distribution`` is (m,) or (B, m) with matching targets."""
    target = torch.as_tensor(target)
    m = distribution.shape[-1]
    if bool((target < 0).any()) or bool((target >= m).any()):
        raise IndexError(f"target outside 0..{m - 1}")
    if distribution.dim() == 1:
        return -torch.log(distribution[target])
    return -torch.log(distribution.gather(1, target.view(-1, 1))).mean()


def pointer_nll(logits: torch.Tensor, target) -> torch.Tensor:
    """Same loss as :func:`sit_loss`, computed from logits."""
    return F.cross_entropy(logits, torch.as_tensor(target).view(-1))
