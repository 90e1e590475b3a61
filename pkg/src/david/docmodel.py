"""Document data model: geometry, tokens, entities, relations and collection splits.

Coordinates are integers in [0, 1000], page-normalized, x to the right and y
downwards. All types are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

COORD_MAX = 1000
SPLITS = ("n", "g", "i")
PROVENANCES = ("gold", "synthetic")


class DimensionMismatchError(ValueError):
    pass


class InsufficientDocumentsError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 <= COORD_MAX and 0 <= self.y0 <= self.y1 <= COORD_MAX):
            raise ValueError(f"invalid bbox {self.as_list()}")

    @classmethod
    def clamped(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        """Round and clamp arbitrary coordinates into a valid box."""
        xs = sorted((int(round(x0)), int(round(x1))))
        ys = sorted((int(round(y0)), int(round(y1))))
        c = lambda v: min(max(v, 0), COORD_MAX)  # noqa: E731
        return cls(c(xs[0]), c(ys[0]), c(xs[1]), c(ys[1]))

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def iou(self, other: "BBox") -> float:
        iw = min(self.x1, other.x1) - max(self.x0, other.x0)
        ih = min(self.y1, other.y1) - max(self.y0, other.y0)
        if iw <= 0 or ih <= 0:
            inter = 0
        else:
            inter = iw * ih
        union = self.area + other.area - inter
        if union <= 0:
            # two degenerate boxes: identical ones count as a perfect match
            return 1.0 if self == other else 0.0
        return inter / union

    def union(self, other: "BBox") -> "BBox":
        return BBox(min(self.x0, other.x0), min(self.y0, other.y0),
                    max(self.x1, other.x1), max(self.y1, other.y1))


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    bbox: BBox
    gold_label: Optional[int] = None
    synthetic_label: Optional[int] = None
    parent_entity: Optional[int] = None

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"token {self.id} has empty text")


@dataclass(frozen=True)
class Entity:
    id: int
    text: str
    bbox: BBox
    category: Optional[str] = None
    provenance: str = "gold"


@dataclass(frozen=True)
class QAPair:
    key_text: str
    answer_text: str
    target_entity: int
    match_score: float


@dataclass(frozen=True)
class RelationMatrix:
    n_tokens: int
    n_entities: int
    entries: np.ndarray

    def __post_init__(self):
        if self.entries.shape != (self.n_tokens, self.n_entities):
            raise DimensionMismatchError(
                f"entries shape {self.entries.shape} != ({self.n_tokens}, {self.n_entities})")
        self.entries.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, RelationMatrix):
            return NotImplemented
        return (self.n_tokens, self.n_entities) == (other.n_tokens, other.n_entities) and bool(
            np.array_equal(self.entries, other.entries))

    __hash__ = None

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)


@dataclass(frozen=True)
class LabelSpace:
    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("label categories must be distinct")
        if not self.categories or any(not c for c in self.categories):
            raise ValueError("label categories must be non-empty strings")

    def __len__(self) -> int:
        return len(self.categories)

    def index(self, category: str) -> int:
        return self.categories.index(category)

    @property
    def outside(self) -> int:
        return 0

    def to_json(self) -> dict:
        return {"name": self.name, "categories": list(self.categories)}

    @classmethod
    def from_json(cls, d: dict) -> "LabelSpace":
        return cls(d["name"], tuple(d["categories"]))


@dataclass(frozen=True)
class Document:
    id: str
    page_width: int
    page_height: int
    tokens: tuple[Token, ...]
    entities: tuple[Entity, ...]
    qa_pairs: tuple[QAPair, ...] = ()
    split: str = "g"
    annotation_provenance: str = "gold"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "qa_pairs", tuple(self.qa_pairs))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.annotation_provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.annotation_provenance!r}")
        if self.page_width < 1 or self.page_height < 1:
            raise ValueError("page dimensions must be >= 1")
        ent_ids = {e.id for e in self.entities}
        if len(ent_ids) != len(self.entities):
            raise DimensionMismatchError(f"{self.id}: duplicate entity ids")
        if len({t.id for t in self.tokens}) != len(self.tokens):
            raise DimensionMismatchError(f"{self.id}: duplicate token ids")
        for t in self.tokens:
            if t.parent_entity is not None and t.parent_entity not in ent_ids:
                raise ValueError(f"{self.id}: token {t.id} references missing entity {t.parent_entity}")
        for qa in self.qa_pairs:
            if qa.target_entity not in ent_ids:
                raise ValueError(f"{self.id}: QA target {qa.target_entity} missing")

    @cached_property
    def relation_matrix(self) -> RelationMatrix:
        col = {e.id: j for j, e in enumerate(self.entities)}
        m = np.zeros((len(self.tokens), len(self.entities)), dtype=np.uint8)
        for i, t in enumerate(self.tokens):
            if t.parent_entity is not None:
                m[i, col[t.parent_entity]] = 1
        return RelationMatrix(len(self.tokens), len(self.entities), m)

    def entity_index(self, entity_id: int) -> int:
        for j, e in enumerate(self.entities):
            if e.id == entity_id:
                return j
        raise KeyError(entity_id)

    def children(self, entity_id: int) -> list[Token]:
        return [t for t in self.tokens if t.parent_entity == entity_id]


@dataclass(frozen=True)
class CollectionSplit:
    d_n: tuple[Document, ...] = field(default_factory=tuple)
    d_g: tuple[Document, ...] = field(default_factory=tuple)
    d_i: tuple[Document, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("d_n", "d_g", "d_i"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids = [d.id for d in self.d_n + self.d_g + self.d_i]
        if len(set(ids)) != len(ids):
            raise ValueError("document ids overlap across splits")
        if any(d.annotation_provenance != "synthetic" for d in self.d_n):
            raise ValueError("d_n documents must carry synthetic provenance")
        if any(d.annotation_provenance != "gold" for d in self.d_g + self.d_i):
            raise ValueError("d_g and d_i documents must carry gold provenance")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def compute_relation_matrix(tokens: Sequence[Token], entities: Sequence[Entity]) -> RelationMatrix:
    """Assign each token to the entity containing its center point.

    Multiple containing entities are resolved by the highest token/entity IoU,
    then by the lowest entity id. Tokens whose center lies in no entity get an
    all-zero row.
    """
    if len({t.id for t in tokens}) != len(tokens) or len({e.id for e in entities}) != len(entities):
        raise DimensionMismatchError("duplicate token or entity ids")
    n, m = len(tokens), len(entities)
    entries = np.zeros((n, m), dtype=np.uint8)
    if n == 0 or m == 0:
        return RelationMatrix(n, m, entries)
    tb = np.array([t.bbox.as_list() for t in tokens], dtype=np.float64)
    eb = np.array([e.bbox.as_list() for e in entities], dtype=np.float64)
    cx = (tb[:, 0] + tb[:, 2]) / 2.0
    cy = (tb[:, 1] + tb[:, 3]) / 2.0
    inside = ((eb[None, :, 0] <= cx[:, None]) & (cx[:, None] <= eb[None, :, 2])
              & (eb[None, :, 1] <= cy[:, None]) & (cy[:, None] <= eb[None, :, 3]))
    iou = _pairwise_iou(tb, eb)
    ent_ids = np.array([e.id for e in entities])
    for i in np.flatnonzero(inside.any(axis=1)):
        cand = np.flatnonzero(inside[i])
        best = cand[iou[i, cand] == iou[i, cand].max()]
        j = best[np.argmin(ent_ids[best])]
        entries[i, j] = 1
    return RelationMatrix(n, m, entries)


def _pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, np.where(same, 1.0, 0.0))


def assign_parents(tokens: Sequence[Token], entities: Sequence[Entity]) -> tuple[Token, ...]:
    """Return tokens re-parented geometrically against ``entities``."""
    rel = compute_relation_matrix(tokens, entities)
    out = []
    for i, t in enumerate(tokens):
        cols = np.flatnonzero(rel.entries[i])
        parent = entities[int(cols[0])].id if len(cols) else None
        out.append(replace(t, parent_entity=parent))
    return tuple(out)


def _word_set(s: str) -> set[str]:
    return set(s.casefold().split())


def jaccard_similarity(a: str, b: str) -> float:
    sa, sb = _word_set(a), _word_set(b)
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def strip_gold(doc: Document) -> Document:
    """Drop gold labels, entities and QA pairs; the document awaits synthetic annotation."""
    tokens = tuple(replace(t, gold_label=None, parent_entity=None) for t in doc.tokens)
    return replace(doc, tokens=tokens, entities=(), qa_pairs=(), split="n",
                   annotation_provenance="synthetic")


def split_collection(documents: Sequence[Document], n_count: int, g_count: int, i_count: int,
                     seed: int) -> CollectionSplit:
    total = n_count + g_count + i_count
    if min(n_count, g_count, i_count) < 0:
        raise ValueError("split counts must be non-negative")
    if total > len(documents):
        raise InsufficientDocumentsError(f"need {total} documents, have {len(documents)}")
    order = np.random.default_rng(seed).permutation(len(documents))
    picked = [documents[int(k)] for k in order[:total]]
    d_n = [strip_gold(d) for d in picked[:n_count]]
    d_g = [replace(d, split="g") for d in picked[n_count:n_count + g_count]]
    d_i = [replace(d, split="i") for d in picked[n_count + g_count:]]
    return CollectionSplit(d_n, d_g, d_i)


# --------------------------------------------------------------------------
# JSON Lines corpus format
# --------------------------------------------------------------------------


def document_to_json(doc: Document) -> dict:
    return {
        "id": doc.id,
        "page_width": doc.page_width,
        "page_height": doc.page_height,
        "split": doc.split,
        "provenance": doc.annotation_provenance,
        "tokens": [
            {"id": t.id, "text": t.text, "bbox": t.bbox.as_list(), "gold_label": t.gold_label,
             "synthetic_label": t.synthetic_label, "parent": t.parent_entity}
            for t in doc.tokens
        ],
        "entities": [
            {"id": e.id, "text": e.text, "bbox": e.bbox.as_list(), "category": e.category,
             "provenance": e.provenance}
            for e in doc.entities
        ],
        "qa_pairs": [
            {"key": q.key_text, "answer": q.answer_text, "target": q.target_entity, "score": q.match_score}
            for q in doc.qa_pairs
        ],
    }


def document_from_json(d: dict) -> Document:
    tokens = tuple(
        Token(id=t["id"], text=t["text"], bbox=BBox(*t["bbox"]), gold_label=t.get("gold_label"),
              synthetic_label=t.get("synthetic_label"), parent_entity=t.get("parent"))
        for t in d["tokens"])
    entities = tuple(
        Entity(id=e["id"], text=e["text"], bbox=BBox(*e["bbox"]), category=e.get("category"),
               provenance=e.get("provenance") or "gold")
        for e in d["entities"])
    qa = tuple(QAPair(q["key"], q["answer"], q["target"], float(q["score"])) for q in d.get("qa_pairs", []))
    return Document(id=d["id"], page_width=d["page_width"], page_height=d["page_height"], tokens=tokens,
                    entities=entities, qa_pairs=qa, split=d["split"], annotation_provenance=d["provenance"])


def write_corpus(path: str | Path, documents: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps(document_to_json(doc), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_corpus(path: str | Path) -> list[Document]:
    """Load a JSON Lines corpus, e.g. an external CORD or Form-NLU export in this schema."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(document_from_json(json.loads(line)))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed document ({exc})") from exc
    return docs
