"""Task-specific heads trained on the guidance set: sequence tagging and entity retrieval."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .infuser import NoEntitiesError, PointerNet, masked_mean
from .neural import EncoderConfig, TransformerDecoder


def maxpool_stages(stages: Sequence[torch.Tensor]) -> torch.Tensor:
    """Elementwise maximum across representation stages of identical shape."""
    if not stages:
        raise ValueError("at least one stage is required")
    shape = stages[0].shape
    if any(s.shape != shape for s in stages):
        raise ValueError(f"stage shapes differ: {[tuple(s.shape) for s in stages]}")
    out = stages[0]
    for s in stages[1:]:
        out = torch.maximum(out, s)
    return out


class TagHead(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_labels: int):
        super().__init__()
        self.classifier = nn.Linear(cfg.hidden_dim, n_labels)

    def forward(self, stages: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.classifier(maxpool_stages(stages))


def sequence_tag_head(gde: torch.Tensor, joint: Optional[torch.Tensor], decoder: Optional[torch.Tensor],
                      head: TagHead) -> torch.Tensor:
    """Logits over the gold label space from whichever token stages are available."""
    return head([s for s in (gde, joint, decoder) if s is not None])


class RetrievalHead(nn.Module):
    """D_er over max-pooled entity states with the query sequence as memory, then a pointer net."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.decoder = TransformerDecoder(cfg)
        self.pointer = PointerNet(cfg)

    def forward(self, joint_entities: torch.Tensor, decoded_entities: Optional[torch.Tensor],
                query_seq: torch.Tensor, query_pad: Optional[torch.Tensor] = None,
                query_vector: Optional[torch.Tensor] = None) -> torch.Tensor:
        """joint_entities: (m, H); decoded_entities: (B, m, H) or None; query_seq: (B, L, H) -> logits (B, m).

        ``query_vector`` (B, H) overrides the mean-pooled query used by the pointer.
        """
        m = joint_entities.shape[0]
        if m == 0:
            raise NoEntitiesError("entity retrieval needs at least one entity")
        b = query_seq.shape[0]
        source = joint_entities[None].expand(b, -1, -1)
        if decoded_entities is not None:
            source = maxpool_stages([source, decoded_entities])
        states = self.decoder(source, query_seq, query_pad)
        if query_vector is None:
            query_vector = masked_mean(query_seq, query_pad)
        return self.pointer(query_vector, states)


def entity_retrieval_head(joint_entities, decoded_entities, query_seq, head: RetrievalHead,
                          query_pad=None) -> torch.Tensor:
    return head(joint_entities, decoded_entities, query_seq, query_pad).softmax(-1)


def predict_tags(logits) -> np.ndarray:
    """Argmax per token; ties go to the lowest label id."""
    return np.argmax(np.asarray(torch.as_tensor(logits).detach().cpu()), axis=-1)


def retrieve_entity(distribution) -> int | np.ndarray:
    """Argmax over entities; ties go to the lowest index."""
    idx = np.argmax(np.asarray(torch.as_tensor(distribution).detach().cpu()), axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx
