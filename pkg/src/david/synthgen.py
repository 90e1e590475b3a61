"""Synthetic form/receipt corpus and the synthetic-annotation workflows.

Layouts are sampled from a handful of templates. Annotation tools are
simulated: layout annotation by a calibrated box/text perturbation model,
sequence tags and inquiries by an :class:`~david.providers.AnnotationProvider`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .docmodel import (
    COORD_MAX,
    BBox,
    CollectionSplit,
    Document,
    Entity,
    LabelSpace,
    QAPair,
    Token,
    assign_parents,
    jaccard_similarity,
    split_collection,
)

log = logging.getLogger(__name__)

QA_MIN_SCORE = 0.2


class ProviderError(RuntimeError):
    """An annotation provider failed on one document."""


# --------------------------------------------------------------------------
# label spaces
# --------------------------------------------------------------------------

FORM_FIELDS = (
    ("Company Name", "company_name"),
    ("ACN/ARSN", "cid"),
    ("Shareholder Name", "holder_name"),
    ("Shareholder ACN", "holder_cid"),
    ("Share Class", "share_class"),
    ("Change Date", "change_date"),
    ("Given Date", "given_date"),
    ("Previous Notice Date", "prev_notice_date"),
    ("Previous Voting Power", "prev_voting_power"),
    ("Present Voting Power", "pres_voting_power"),
    ("Previous Person's Votes", "prev_votes"),
    ("Present Person's Votes", "pres_votes"),
)

RECEIPT_CATEGORIES = (
    "O", "store.name", "store.addr", "date", "menu.cnt", "menu.nm", "menu.unitprice", "menu.price",
    "sub.subtotal", "sub.tax", "total.price", "total.cash", "total.change",
)

FORM_LABEL_SPACE = LabelSpace("gold", ("O",) + tuple(c for _, c in FORM_FIELDS))
RECEIPT_LABEL_SPACE = LabelSpace("gold", RECEIPT_CATEGORIES)
SYNTHETIC_LABEL_SPACE = LabelSpace("synthetic", ("other", "header", "key", "value", "amount", "date"))

RECEIPT_KEYS = {
    "Subtotal": "sub.subtotal",
    "Tax": "sub.tax",
    "Total": "total.price",
    "Cash": "total.cash",
    "Change": "total.change",
}


def gold_label_space(kind: str) -> LabelSpace:
    return {"form": FORM_LABEL_SPACE, "receipt": RECEIPT_LABEL_SPACE}[kind]


# --------------------------------------------------------------------------
# corpus generation
# --------------------------------------------------------------------------

_TITLES = (
    "Notice of change of interests of substantial holder",
    "Notice of initial substantial holder",
    "Form 604 Notice of change of interests",
    "Substantial holder notice",
)
_BOILERPLATE = (
    "the holder became aware of the change on the date above",
    "details of present registered holders are set out below",
    "this notice is given under section 671B of the act",
    "signature of the person giving this notice",
    "particulars of each change in relevant interests",
)
_COMPANY_WORDS = ("Acme", "Boral", "Crown", "Delta", "Eagle", "Fortune", "Granite", "Harbour", "Iron",
                  "Jade", "Kestrel", "Lumen", "Mosaic", "Northern", "Orbit", "Pacific", "Quantum",
                  "Regal", "Summit", "Titan", "Unity", "Vertex", "Westfield", "Zenith")
_COMPANY_SUFFIX = ("Limited", "Ltd", "Pty Ltd", "Holdings Limited", "Group Ltd", "Resources Ltd")
_SHARE_CLASSES = ("Ordinary", "Ordinary Shares", "Fully Paid Ordinary", "Preference", "Class A Ordinary")
_FOODS = ("Nasi", "Goreng", "Ayam", "Bakar", "Mie", "Kopi", "Susu", "Teh", "Manis", "Es", "Jeruk",
          "Roti", "Bakso", "Sate", "Soto", "Pisang", "Keju", "Coklat", "Latte", "Burger", "Fries",
          "Cola", "Salad", "Tea", "Green", "Ice", "Cream", "Rice", "Chicken", "Beef")
_STORE_WORDS = ("Warung", "Kedai", "Cafe", "Resto", "Bakery", "Kitchen", "Dapur", "Corner", "House",
                "Express", "Bistro", "Garden")
_STREETS = ("Jl", "Jalan", "Street", "Road", "Avenue")
_STREET_NAMES = ("Sudirman", "Thamrin", "Gatot", "Merdeka", "Kemang", "Senopati", "Melawai", "Pondok",
                 "Kelapa", "Gading")
_CITIES = ("Jakarta", "Bandung", "Surabaya", "Depok", "Bekasi", "Tangerang")

CHAR_W = 14
LINE_H = 22
WORD_GAP = 10


@dataclass(frozen=True)
class CorpusSpec:
    n_documents: int
    document_kind: str = "form"
    fields_per_doc: tuple[int, int] = (5, 12)
    gold_label_space: Optional[LabelSpace] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_documents < 1:
            raise ValueError("n_documents must be >= 1")
        if self.document_kind not in ("form", "receipt"):
            raise ValueError(f"unknown document kind {self.document_kind!r}")
        lo, hi = self.fields_per_doc
        if not 1 <= lo <= hi:
            raise ValueError("fields_per_doc must satisfy 1 <= min <= max")
        if self.gold_label_space is None:
            object.__setattr__(self, "gold_label_space", gold_label_space(self.document_kind))


class _PageBuilder:
    """Accumulates words into lines and lines into entities."""

    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        self.tokens: list[Token] = []
        self.entities: list[Entity] = []
        self.qa: list[QAPair] = []

    def word_box(self, x: int, y: int, word: str) -> BBox:
        return BBox.clamped(x, y, x + CHAR_W * len(word), y + LINE_H)

    def add_entity(self, words: Sequence[tuple[str, int, int, int]], category: str) -> Entity:
        """words: (text, label, x, y) tuples; returns the entity enclosing them."""
        eid = len(self.entities)
        boxes = []
        for text, label, x, y in words:
            box = self.word_box(x, y, text)
            boxes.append(box)
            self.tokens.append(Token(len(self.tokens), text, box, gold_label=label, parent_entity=eid))
        ebox = boxes[0]
        for b in boxes[1:]:
            ebox = ebox.union(b)
        ebox = BBox.clamped(ebox.x0 - 4, ebox.y0 - 3, ebox.x1 + 4, ebox.y1 + 3)
        ent = Entity(eid, " ".join(w[0] for w in words), ebox, category, "gold")
        self.entities.append(ent)
        return ent

    def line(self, parts: Sequence[tuple[str, int]], x: int, y: int, right: Optional[int] = None):
        """Lay out (text, label) words left to right from x (or right-aligned to ``right``)."""
        widths = [CHAR_W * len(t) for t, _ in parts]
        if right is not None:
            x = right - (sum(widths) + WORD_GAP * (len(parts) - 1))
        out = []
        for (text, label), w in zip(parts, widths):
            out.append((text, label, x, y))
            x += w + WORD_GAP
        return out


def _price(rng: np.random.Generator, lo: float = 1.0, hi: float = 60.0) -> str:
    return f"{rng.uniform(lo, hi):.2f}"


def _date(rng: np.random.Generator) -> str:
    return f"{rng.integers(1, 29):02d}/{rng.integers(1, 13):02d}/{rng.integers(2015, 2024)}"


def _company(rng: np.random.Generator) -> str:
    n = int(rng.integers(1, 3))
    words = [str(w) for w in rng.choice(_COMPANY_WORDS, size=n, replace=False)]
    return " ".join(words + [str(rng.choice(_COMPANY_SUFFIX))])


def _form_value(rng: np.random.Generator, category: str) -> str:
    if category in ("company_name", "holder_name"):
        return _company(rng)
    if category in ("cid", "holder_cid"):
        return " ".join(f"{rng.integers(0, 1000):03d}" for _ in range(3))
    if category == "share_class":
        return str(rng.choice(_SHARE_CLASSES))
    if category.endswith("date"):
        return _date(rng)
    if category.endswith("voting_power"):
        return f"{rng.uniform(0.5, 30):.2f}%"
    return f"{int(rng.integers(100_000, 90_000_000)):,}"


def _generate_form(idx: int, spec: CorpusSpec, rng: np.random.Generator) -> Document:
    space = spec.gold_label_space
    pb = _PageBuilder(f"form-{spec.seed}-{idx:05d}")
    lo, hi = spec.fields_per_doc
    n_fields = int(rng.integers(lo, hi + 1))
    chosen = sorted(rng.choice(len(FORM_FIELDS), size=min(n_fields, len(FORM_FIELDS)), replace=False))
    y = int(rng.integers(30, 60))
    title = str(rng.choice(_TITLES))
    pb.add_entity(pb.line([(w, 0) for w in title.split()], int(rng.integers(40, 120)), y), "title")
    y += LINE_H + int(rng.integers(25, 45))
    value_x = int(rng.integers(420, 480))
    key_x = int(rng.integers(30, 60))
    row_gap = int(rng.integers(18, 30))
    for k in chosen:
        key, cat = FORM_FIELDS[k]
        value = _form_value(rng, cat)
        label = space.index(cat)
        words = pb.line([(w, 0) for w in key.split()], key_x, y)
        words += pb.line([(w, label) for w in value.split()], value_x, y)
        ent = pb.add_entity(words, "field")
        pb.qa.append(QAPair(key, value, ent.id, jaccard_similarity(value, ent.text)))
        y += LINE_H + row_gap
    if y < 900 and rng.random() < 0.8:
        y += int(rng.integers(10, 40))
        text = str(rng.choice(_BOILERPLATE))
        pb.add_entity(pb.line([(w, 0) for w in text.split()], key_x, min(y, 950)), "paragraph")
    return Document(pb.doc_id, 160, 208, pb.tokens, pb.entities, pb.qa, "g", "gold")


def _generate_receipt(idx: int, spec: CorpusSpec, rng: np.random.Generator) -> Document:
    space = spec.gold_label_space
    L = space.index
    pb = _PageBuilder(f"receipt-{spec.seed}-{idx:05d}")
    lo, hi = spec.fields_per_doc
    n_items = int(rng.integers(lo, hi + 1))
    step = LINE_H + int(rng.integers(6, 12))
    y = int(rng.integers(15, 40))
    x_left = int(rng.integers(30, 70))
    right = int(rng.integers(930, 975))

    store = " ".join([str(rng.choice(_STORE_WORDS)), str(rng.choice(_FOODS))])
    pb.add_entity(pb.line([(w, L("store.name")) for w in store.split()], x_left + 150, y), "header")
    y += step
    addr = f"{rng.choice(_STREETS)} {rng.choice(_STREET_NAMES)} No {rng.integers(1, 200)} {rng.choice(_CITIES)}"
    pb.add_entity(pb.line([(w, L("store.addr")) for w in addr.split()], x_left, y), "header")
    y += step
    date_words = [(_date(rng), L("date")), (f"{rng.integers(7, 23):02d}:{rng.integers(0, 60):02d}", L("date"))]
    pb.add_entity(pb.line(date_words, x_left, y), "header")
    y += step + 10

    subtotal = 0.0
    for _ in range(n_items):
        cnt = int(rng.integers(1, 5))
        unit = float(_price(rng, 1, 40))
        total = cnt * unit
        subtotal += total
        name = [str(w) for w in rng.choice(_FOODS, size=int(rng.integers(1, 4)), replace=False)]
        words = pb.line([(str(cnt), L("menu.cnt"))], x_left, y)
        words += pb.line([(w, L("menu.nm")) for w in name], x_left + 60, y)
        if cnt > 1 and rng.random() < 0.6:
            words += pb.line([(f"{unit:.2f}", L("menu.unitprice"))], 0, y, right=right - 220)
        words += pb.line([(f"{total:.2f}", L("menu.price"))], 0, y, right=right)
        pb.add_entity(words, "menu")
        y += step
    y += 10

    def key_row(key: str, value: float, category: str):
        words = pb.line([(key, 0)], x_left, y)
        words += pb.line([(f"{value:.2f}", L(RECEIPT_KEYS[key]))], 0, y, right=right)
        ent = pb.add_entity(words, category)
        pb.qa.append(QAPair(key, f"{value:.2f}", ent.id, jaccard_similarity(f"{value:.2f}", ent.text)))

    key_row("Subtotal", subtotal, "subtotal")
    y += step
    tax = 0.0
    if rng.random() < 0.7:
        tax = round(subtotal * 0.1, 2)
        key_row("Tax", tax, "subtotal")
        y += step
    y += 8
    grand = subtotal + tax
    key_row("Total", grand, "total")
    y += step
    if rng.random() < 0.6:
        cash = float(np.ceil(grand / 10.0) * 10.0)
        key_row("Cash", cash, "total")
        y += step
        key_row("Change", cash - grand, "total")
        y += step
    return Document(pb.doc_id, 112, 256, pb.tokens, pb.entities, pb.qa, "g", "gold")


def generate_corpus(spec: CorpusSpec) -> list[Document]:
    make = _generate_form if spec.document_kind == "form" else _generate_receipt
    return [make(i, spec, np.random.default_rng([spec.seed, i])) for i in range(spec.n_documents)]


# --------------------------------------------------------------------------
# synthetic layout annotation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutNoiseConfig:
    target_mean_iou: float = 0.3
    text_drop_rate: float = 0.1
    merge_split_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_mean_iou <= 1.0:
            raise ValueError("target_mean_iou must lie in (0, 1]")
        if not 0.0 <= self.text_drop_rate < 1.0:
            raise ValueError("text_drop_rate must lie in [0, 1)")
        if not 0.0 <= self.merge_split_rate < 1.0:
            raise ValueError("merge_split_rate must lie in [0, 1)")


MIN_SYNTH_IOU = 0.05


def _box_with_iou(box: BBox, u: float, mode: int, sign: int, jitter: float = 0.0) -> BBox:
    """Construct a box whose IoU with ``box`` is about ``u``, the way a layout detector errs.

    Boxes stay on their text line: the detector covers part of the line
    (mode 1), slides along it (mode 0), spills sideways into blank space
    (mode 2) or swallows the neighbouring lines (mode 3). ``jitter`` in
    [-1, 1] nudges the box vertically by up to a sixth of its height.
    """
    if u >= 1.0:
        return box
    u = min(max(u, MIN_SYNTH_IOU), 1.0)
    w, h = box.x1 - box.x0, box.y1 - box.y0
    cx = (box.x0 + box.x1) / 2
    dy = jitter * h / 6
    y0, y1 = box.y0 + dy, box.y1 + dy
    if mode == 0:  # slide along the line: IoU = (w - d) / (w + d)
        d = w * (1 - u) / (1 + u)
        if not (0 <= box.x0 + sign * d and box.x1 + sign * d <= COORD_MAX):
            sign = -sign
        if 0 <= box.x0 + sign * d and box.x1 + sign * d <= COORD_MAX:
            return BBox.clamped(box.x0 + sign * d, y0, box.x1 + sign * d, y1)
        mode = 1
    if mode == 2:  # spill sideways: IoU = w / w'
        grow = w / u - w
        left = grow * (0.5 + 0.5 * sign * 0.8)
        x0, x1 = box.x0 - left, box.x1 + grow - left
        if x0 >= 0 and x1 <= COORD_MAX:
            return BBox.clamped(x0, y0, x1, y1)
        mode = 3
    if mode == 3:  # swallow neighbouring lines: IoU = h / h'
        extra = h / u - h
        top = extra * (0.5 - 0.5 * sign * 0.6)
        a, b = box.y0 - top, box.y1 + extra - top
        if a >= 0 and b <= COORD_MAX:
            return BBox.clamped(box.x0, a, box.x1, b)
    # cover part of the line: IoU = w' / w
    keep = max(w * u, 2.0)
    lo = box.x0 + (w - keep) * (0.5 + 0.5 * sign * 0.8)
    return BBox.clamped(lo, y0, lo + keep, y1)


def _mean_best_iou(gold: Sequence[BBox], synth: Sequence[BBox]) -> float:
    if not gold:
        return 1.0
    if not synth:
        return 0.0
    return float(np.mean([max(g.iou(s) for s in synth) for g in gold]))


def _structural_ops(boxes: list[BBox], rate: float, rng: np.random.Generator) -> list[list[int]]:
    """Group gold entity indices into synthetic entities (merge) or mark splits (negative)."""
    groups: list[list[int]] = []
    j = 0
    while j < len(boxes):
        r = rng.random()
        if r < rate / 2 and j + 1 < len(boxes):
            groups.append([j, j + 1])
            j += 2
            continue
        if r < rate:
            groups.append([-(j + 1)])  # split marker
        else:
            groups.append([j])
        j += 1
    return groups


def perturb_layout_annotations(doc: Document, cfg: LayoutNoiseConfig) -> Document:
    """Simulate an off-the-shelf layout tool run over ``doc``.

    Synthetic entity boxes are merged, split and distorted so that the mean
    best-match IoU against the gold entities equals a per-document target drawn
    around ``cfg.target_mean_iou``. Entity text is read back from the tokens
    falling inside each synthetic box, then words are dropped or garbled.
    """
    rng = np.random.default_rng([cfg.seed, _stable_hash(doc.id)])
    gold = [e.bbox for e in doc.entities]
    if cfg.target_mean_iou >= 1.0 and cfg.text_drop_rate == 0.0 and cfg.merge_split_rate == 0.0:
        entities = [replace(e, provenance="synthetic") for e in doc.entities]
        tokens = tuple(replace(t, gold_label=None) for t in doc.tokens)
        return replace(doc, tokens=tokens, entities=entities, qa_pairs=(), split="n",
                       annotation_provenance="synthetic")

    groups = _structural_ops(gold, cfg.merge_split_rate, rng)
    base: list[tuple[BBox, Optional[str]]] = []
    for g in groups:
        if len(g) == 2:
            base.append((gold[g[0]].union(gold[g[1]]), doc.entities[g[0]].category))
        elif g[0] < 0:
            b = gold[-g[0] - 1]
            mid = (b.x0 + b.x1) // 2
            cat = doc.entities[-g[0] - 1].category
            base.append((BBox(b.x0, b.y0, mid, b.y1), cat))
            base.append((BBox(mid, b.y0, b.x1, b.y1), cat))
        else:
            base.append((gold[g[0]], doc.entities[g[0]].category))

    k = len(base)
    modes = rng.integers(0, 4, size=k)
    signs = rng.choice([-1, 1], size=k)
    jitters = rng.uniform(-1.0, 1.0, size=k)
    weights = rng.uniform(0.4, 1.6, size=k)
    if cfg.target_mean_iou >= 1.0:
        doc_target = 1.0
    else:
        conc = 20.0
        doc_target = float(rng.beta(cfg.target_mean_iou * conc, (1 - cfg.target_mean_iou) * conc))

    def realize(severity: float) -> list[BBox]:
        return [_box_with_iou(b, 1.0 - severity * w, int(md), int(sg), float(jt))
                for (b, _), md, sg, w, jt in zip(base, modes, signs, weights, jitters)]

    if doc_target >= 1.0 or not base:
        boxes = [b for b, _ in base]
    else:
        lo, hi = 0.0, 1.0 / weights.min() + 0.5
        for _ in range(40):
            mid = (lo + hi) / 2
            if _mean_best_iou(gold, realize(mid)) > doc_target:
                lo = mid
            else:
                hi = mid
        boxes = realize((lo + hi) / 2)

    ents = [Entity(j, "", b, cat, "synthetic") for j, (b, (_, cat)) in enumerate(zip(boxes, base))]
    tokens = tuple(replace(t, gold_label=None) for t in assign_parents(doc.tokens, ents))
    out_ents = []
    for e in ents:
        words = [t.text for t in tokens if t.parent_entity == e.id]
        kept = []
        for w in words:
            r = rng.random()
            if r < cfg.text_drop_rate:
                continue
            if r < 2 * cfg.text_drop_rate and len(w) > 1:
                pos = int(rng.integers(0, len(w)))
                w = w[:pos] + str(rng.choice(list("Il0O5S8B"))) + w[pos + 1:]
            kept.append(w)
        out_ents.append(replace(e, text=" ".join(kept)))
    return replace(doc, tokens=tokens, entities=tuple(out_ents), qa_pairs=(), split="n",
                   annotation_provenance="synthetic")


def _stable_hash(s: str) -> int:
    import zlib
    return zlib.crc32(s.encode("utf-8"))


@dataclass(frozen=True)
class AnnotationQualityStats:
    doc_ids: tuple[str, ...]
    mean_iou: tuple[float, ...]
    mean_jaccard: tuple[float, ...]

    @property
    def corpus_mean_iou(self) -> float:
        return float(np.mean(self.mean_iou)) if self.mean_iou else 0.0

    @property
    def corpus_mean_jaccard(self) -> float:
        return float(np.mean(self.mean_jaccard)) if self.mean_jaccard else 0.0


def measure_annotation_quality(synthetic: Sequence[Document], gold: Sequence[Document]) -> AnnotationQualityStats:
    gold_by_id = {d.id: d for d in gold}
    if len(gold_by_id) != len(synthetic) or any(d.id not in gold_by_id for d in synthetic):
        raise KeyError("synthetic and gold collections are not aligned by document id")
    ids, ious, jacs = [], [], []
    for s in synthetic:
        g = gold_by_id[s.id]
        doc_iou, doc_jac = [], []
        for ge in g.entities:
            if not s.entities:
                doc_iou.append(0.0)
                doc_jac.append(0.0)
                continue
            scores = [ge.bbox.iou(se.bbox) for se in s.entities]
            j = int(np.argmax(scores))
            doc_iou.append(scores[j])
            doc_jac.append(jaccard_similarity(ge.text, s.entities[j].text))
        ids.append(s.id)
        ious.append(float(np.mean(doc_iou)) if doc_iou else 1.0)
        jacs.append(float(np.mean(doc_jac)) if doc_jac else 1.0)
    return AnnotationQualityStats(tuple(ids), tuple(ious), tuple(jacs))


# --------------------------------------------------------------------------
# synthetic tags and inquiries
# --------------------------------------------------------------------------


def generate_synthetic_tags(doc: Document, provider, synthetic_space: LabelSpace = SYNTHETIC_LABEL_SPACE) -> Document:
    if doc.annotation_provenance != "synthetic":
        raise ValueError(f"{doc.id}: synthetic tags apply to synthetic-provenance documents only")
    if not doc.tokens:
        return doc
    names = provider.tag(doc, synthetic_space)
    if len(names) != len(doc.tokens):
        raise ValueError(f"{doc.id}: provider returned {len(names)} tags for {len(doc.tokens)} tokens")
    tokens = tuple(replace(t, synthetic_label=synthetic_space.index(n)) for t, n in zip(doc.tokens, names))
    return replace(doc, tokens=tokens)


def match_answer(doc: Document, key: str, answer: str) -> Optional[QAPair]:
    """Attach a (key, answer) pair to the best Jaccard-matching entity, or None below threshold."""
    if not doc.entities:
        return None
    scores = [jaccard_similarity(answer, e.text) for e in doc.entities]
    j = int(np.argmax(scores))
    if scores[j] < QA_MIN_SCORE:
        return None
    return QAPair(key, answer, doc.entities[j].id, scores[j])


def generate_synthetic_inquiries(doc: Document, provider, max_pairs: int) -> Document:
    if not doc.entities:
        raise ValueError(f"{doc.id}: inquiry generation needs at least one entity")
    pairs = []
    for key, answer in provider.inquire(doc, max_pairs):
        qa = match_answer(doc, key, answer)
        if qa is not None:
            pairs.append(qa)
        if len(pairs) >= max_pairs:
            break
    return replace(doc, qa_pairs=tuple(pairs))


# --------------------------------------------------------------------------
# guidance label corruption
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelNoiseConfig:
    lam: float
    mode: str = "incorrect"
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.mode not in ("incorrect", "incomplete"):
            raise ValueError(f"unknown corruption mode {self.mode!r}")


@dataclass
class CorruptionStats:
    n_labeled: int = 0
    n_selected: int = 0

    @property
    def fraction(self) -> float:
        return self.n_selected / self.n_labeled if self.n_labeled else 0.0


def corrupt_guidance_labels(d_g: Sequence[Document], cfg: LabelNoiseConfig, n_categories: int,
                            stats: Optional[CorruptionStats] = None) -> list[Document]:
    """Replace gold labels of tokens selected by |X| > lam, X ~ N(0, 1)."""
    rng = np.random.default_rng(cfg.seed)
    stats = stats if stats is not None else CorruptionStats()
    out = []
    for doc in d_g:
        tokens = []
        for t in doc.tokens:
            if t.gold_label is None:
                tokens.append(t)
                continue
            stats.n_labeled += 1
            x = rng.standard_normal()
            if abs(x) <= cfg.lam:
                tokens.append(t)
                continue
            stats.n_selected += 1
            if cfg.mode == "incorrect":
                new = int(rng.integers(0, n_categories - 1))
                new += new >= t.gold_label
            else:
                new = 0
            tokens.append(replace(t, gold_label=new))
        out.append(replace(doc, tokens=tuple(tokens)))
    return out


# --------------------------------------------------------------------------
# end-to-end preparation
# --------------------------------------------------------------------------


@dataclass
class AnnotationReport:
    quality: Optional[AnnotationQualityStats] = None
    skipped: list[str] = field(default_factory=list)
    n_qa: int = 0


def annotate_collection(documents: Sequence[Document], counts: tuple[int, int, int], seed: int,
                        layout_noise: LayoutNoiseConfig, provider, max_qa: int = 20,
                        tags: bool = True, inquiries: bool = True) -> tuple[CollectionSplit, AnnotationReport]:
    """Re-allocate, then run synthetic layout annotation, tagging and inquiry generation on D_n.

    The layout tool sees the original page, so perturbation works from the
    gold document sharing the D_n document's id.
    """
    split = split_collection(documents, *counts, seed=seed)
    originals = {d.id: d for d in documents}
    report = AnnotationReport()
    perturbed = [perturb_layout_annotations(originals[d.id], layout_noise) for d in split.d_n]

    def annotate_one(doc: Document) -> Document:
        if tags:
            doc = generate_synthetic_tags(doc, provider)
        if inquiries and doc.entities:
            doc = generate_synthetic_inquiries(doc, provider, max_qa)
        return doc

    if hasattr(provider, "map_documents"):
        d_n, report.skipped = provider.map_documents(annotate_one, perturbed)
    else:
        d_n = []
        for doc in perturbed:
            try:
                d_n.append(annotate_one(doc))
            except ProviderError as exc:
                log.warning("skipping %s: %s", doc.id, exc)
                report.skipped.append(doc.id)
    report.n_qa = sum(len(d.qa_pairs) for d in d_n)
    report.quality = measure_annotation_quality(d_n, [originals[d.id] for d in d_n])
    return CollectionSplit(d_n, split.d_g, split.d_i), report
