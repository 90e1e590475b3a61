"""The full framework: encoders, infuser and heads wired per document, plus document tensorisation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .docmodel import Document
from .enhancers import RetrievalHead, TagHead, sequence_tag_head
from .infuser import AlignmentHead, EntityDecoder, JointEncoder, TokenDecoder, ground_query, masked_mean
from .neural import (
    EmptyQueryError,
    EncoderConfig,
    EntityFusion,
    L2VProjection,
    SequenceOverflowError,
    TokenEncoder,
    VisualEncoder,
    Vocab,
    child_mean,
    init_weights,
    region_means,
    render_l2v,
    render_page,
)

GROUPS = ("token_encoder", "l2v", "entity_encoder", "joint_encoder", "alignment", "token_decoder",
          "entity_decoder", "tag_head", "retrieval_head")
# components frozen after structural domain shifting
FREEZE_AFTER_SDS = ("token_encoder", "l2v", "entity_encoder", "joint_encoder", "alignment")


@dataclass(frozen=True)
class ModelOptions:
    n_gold: int
    n_synthetic: int
    use_l2v: bool = True
    joint_grained: bool = True
    sit_memory: str = "tokens"
    query_through_joint: bool = True
    ground_queries: bool = True

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class DocTensors:
    doc_id: str
    word_ids: torch.Tensor  # (1, n)
    boxes: torch.Tensor  # (1, n, 4)
    token_l2v: torch.Tensor  # (n, 3)
    entity_l2v: torch.Tensor  # (m, 3)
    entity_boxes: list
    page: torch.Tensor  # (3, H, W)
    relation: torch.Tensor  # (n, m)
    synthetic_labels: Optional[torch.Tensor]
    gold_labels: Optional[torch.Tensor]
    query_ids: list[list[int]]
    query_targets: list[int]

    @property
    def n_tokens(self) -> int:
        return self.word_ids.shape[1]

    @property
    def n_entities(self) -> int:
        return len(self.entity_boxes)


def tensorize(doc: Document, vocab: Vocab, dtype=torch.float32) -> DocTensors:
    l2v = render_l2v(doc)
    tokens, entities = doc.tokens, doc.entities
    word_ids = torch.tensor([vocab.encode([t.text])[0] for t in tokens], dtype=torch.long)[None]
    boxes = torch.tensor([t.bbox.as_list() for t in tokens], dtype=torch.long).view(1, len(tokens), 4)
    syn = gold = None
    if tokens and all(t.synthetic_label is not None for t in tokens):
        syn = torch.tensor([t.synthetic_label for t in tokens], dtype=torch.long)
    if tokens and all(t.gold_label is not None for t in tokens):
        gold = torch.tensor([t.gold_label for t in tokens], dtype=torch.long)
    page = torch.as_tensor(render_page(doc).transpose(2, 0, 1).copy(), dtype=dtype) / 255.0
    col = {e.id: j for j, e in enumerate(entities)}
    return DocTensors(
        doc_id=doc.id,
        word_ids=word_ids,
        boxes=boxes,
        token_l2v=torch.as_tensor(region_means(l2v, [t.bbox for t in tokens]), dtype=dtype),
        entity_l2v=torch.as_tensor(region_means(l2v, [e.bbox for e in entities]), dtype=dtype),
        entity_boxes=[e.bbox for e in entities],
        page=page,
        relation=torch.tensor(doc.relation_matrix.entries, dtype=dtype),
        synthetic_labels=syn,
        gold_labels=gold,
        query_ids=[vocab.encode(q.key_text.split()) for q in doc.qa_pairs],
        query_targets=[col[q.target_entity] for q in doc.qa_pairs],
    )


def pad_queries(query_ids: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    if not query_ids or any(len(q) == 0 for q in query_ids):
        raise EmptyQueryError("queries must contain at least one word")
    length = max(len(q) for q in query_ids)
    ids = torch.zeros((len(query_ids), length), dtype=torch.long)
    pad = torch.ones((len(query_ids), length), dtype=torch.bool)
    for i, q in enumerate(query_ids):
        ids[i, :len(q)] = torch.tensor(q)
        pad[i, :len(q)] = False
    return ids, pad


@dataclass
class Representations:
    tokens_gde: torch.Tensor  # T (n, H): encoder output plus L2V
    entities: torch.Tensor  # E (m, H)
    tokens_joint: torch.Tensor  # T'
    entities_joint: torch.Tensor  # E'


@dataclass(frozen=True)
class QueryEncoding:
    sequence: torch.Tensor
    pooled: torch.Tensor


class DavidModel(nn.Module):
    def __init__(self, cfg: EncoderConfig, options: ModelOptions):
        super().__init__()
        self.cfg = cfg
        self.options = options
        self.token_encoder = TokenEncoder(cfg)
        self.l2v = L2VProjection(cfg)
        self.entity_encoder = nn.ModuleDict({"visual": VisualEncoder(cfg), "fusion": EntityFusion(cfg)})
        self.joint_encoder = JointEncoder(cfg)
        self.alignment = AlignmentHead(cfg)
        self.token_decoder = TokenDecoder(cfg, options.n_synthetic)
        self.entity_decoder = EntityDecoder(cfg, options.sit_memory)
        self.tag_head = TagHead(cfg, options.n_gold)
        self.retrieval_head = RetrievalHead(cfg)
        init_weights(self)

    # ------------------------------------------------------------------
    # parameter groups
    # ------------------------------------------------------------------

    def group_of(self, param_name: str) -> str:
        return param_name.split(".", 1)[0]

    def group_parameters(self, groups: Sequence[str]):
        return [p for name, p in self.named_parameters() if self.group_of(name) in groups]

    def set_frozen(self, groups: Sequence[str]) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(self.group_of(name) not in groups)

    def frozen_groups(self) -> list[str]:
        frozen = {self.group_of(n) for n, p in self.named_parameters() if not p.requires_grad}
        return [g for g in GROUPS if g in frozen]

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def encode_tokens_gde(self, dt: DocTensors, layout_drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        if dt.n_tokens > self.cfg.max_tokens:
            raise SequenceOverflowError(f"{dt.doc_id}: {dt.n_tokens} tokens exceed max_tokens")
        if dt.n_tokens == 0:
            return torch.zeros((0, self.cfg.hidden_dim), dtype=self.l2v.proj.weight.dtype)
        drop = None if layout_drop is None else layout_drop[None]
        states = self.token_encoder(dt.word_ids, dt.boxes, None, drop)[0]
        if self.options.use_l2v:
            l2v = self.l2v(dt.token_l2v)
            if layout_drop is not None:
                l2v = l2v * (~layout_drop).to(l2v.dtype)[:, None]
            states = states + l2v
        return states

    def encode_entities(self, dt: DocTensors, tokens_gde: torch.Tensor) -> torch.Tensor:
        if dt.n_entities == 0:
            return tokens_gde.new_zeros((0, self.cfg.hidden_dim))
        visual = self.entity_encoder["visual"](dt.page, dt.entity_boxes)
        pooled = child_mean(tokens_gde, dt.relation)
        layout = self.l2v(dt.entity_l2v) if self.options.use_l2v else torch.zeros_like(visual)
        return self.entity_encoder["fusion"](visual, pooled, layout)

    def represent(self, dt: DocTensors, layout_drop: Optional[torch.Tensor] = None) -> Representations:
        """``layout_drop`` (n,) bool hides the layout of the marked tokens (training-time augmentation)."""
        t = self.encode_tokens_gde(dt, layout_drop)
        e = self.encode_entities(dt, t)
        joint = self.joint_encoder(t, e)
        return Representations(t, e, joint.tokens, joint.entities)

    def encode_query(self, query_ids: Sequence[Sequence[int]]):
        """Returns (sequence (B, L, H), pad mask (B, L)) for a batch of queries."""
        seq, pad, _ = self._encode_query(query_ids)
        return seq, pad

    def _encode_query(self, query_ids):
        ids, pad = pad_queries(query_ids)
        seq = self.token_encoder(ids, None, pad)
        if self.options.query_through_joint:
            seq = self.joint_encoder.encode_tokens_only(seq, pad)
        return seq, pad, ids

    def query_vector(self, dt: DocTensors, reps: Representations, ids, pad, seq) -> torch.Tensor:
        """Pointer query: page-grounded token states, or the plain mean of the query sequence."""
        if not self.options.ground_queries or dt.n_tokens == 0:
            return masked_mean(seq, pad)
        emb = self.token_encoder.word
        return ground_query(emb(ids), pad, emb(dt.word_ids[0]), reps.tokens_joint)

    def query_encoding(self, query_ids: Sequence[int]) -> QueryEncoding:
        seq, pad = self.encode_query([query_ids])
        return QueryEncoding(seq[0], masked_mean(seq, pad)[0])

    def alignment_prediction(self, reps: Representations):
        return self.alignment(reps.tokens_joint, reps.entities_joint)

    def sst_logits(self, reps: Representations):
        return self.token_decoder(reps.tokens_joint, reps.entities_joint)

    def sit_logits(self, dt: DocTensors, reps: Representations):
        seq, pad, ids = self._encode_query(dt.query_ids)
        qv = self.query_vector(dt, reps, ids, pad, seq)
        _, logits = self.entity_decoder(reps.entities_joint, reps.tokens_joint, seq, pad, qv)
        return logits

    def tag_logits(self, reps: Representations) -> torch.Tensor:
        if not self.options.joint_grained:
            return sequence_tag_head(reps.tokens_gde, None, None, self.tag_head)
        decoded, _ = self.token_decoder(reps.tokens_joint, reps.entities_joint)
        return sequence_tag_head(reps.tokens_gde, reps.tokens_joint, decoded, self.tag_head)

    def retrieval_logits(self, dt: DocTensors, reps: Representations) -> torch.Tensor:
        seq, pad, ids = self._encode_query(dt.query_ids)
        if not self.options.joint_grained:
            qv = self.query_vector(dt, replace(reps, tokens_joint=reps.tokens_gde), ids, pad, seq)
            return self.retrieval_head(reps.entities, None, seq, pad, qv)
        qv = self.query_vector(dt, reps, ids, pad, seq)
        decoded = self.entity_decoder.decode(reps.entities_joint, reps.tokens_joint, seq, pad)
        return self.retrieval_head(reps.entities_joint, decoded, seq, pad, qv)

    def seed_pointers_from_alignment(self) -> None:
        self.entity_decoder.pointer.copy_from_alignment(self.alignment)
        self.retrieval_head.pointer.copy_from_alignment(self.alignment)


def build_model(cfg: EncoderConfig, options: ModelOptions, seed: Optional[int] = None) -> DavidModel:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return DavidModel(cfg, options)


def vocab_texts(documents: Sequence[Document]) -> list[str]:
    texts = [t.text for d in documents for t in d.tokens]
    texts += [q.key_text for d in documents for q in d.qa_pairs]
    return texts


def count_parameters(model: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in model.parameters()))
