"""Staged workflow: adapt on D_n (SDS, freeze, SST/SIT), fine-tune on D_g, infer on D_i."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import Checkpoint
from .docmodel import Document, LabelSpace, write_corpus
from .infuser import pointer_nll, sds_loss, sst_loss
from .model import FREEZE_AFTER_SDS, GROUPS, DavidModel, DocTensors, ModelOptions, tensorize, vocab_texts
from .neural import EncoderConfig, Vocab
from .synthgen import SYNTHETIC_LABEL_SPACE

log = logging.getLogger(__name__)

TASK_MODES = ("fine", "coarse", "both")


class MissingAnnotationError(ValueError):
    pass


class EmptyGuidanceError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptationPlan:
    sds_epochs: int = 1
    sst_epochs: int = 1
    sit_epochs: int = 1
    freeze_after_sds: bool = True
    learning_rate: float = 2e-4
    batch_size: int = 2
    seed: int = 0
    task_mode: str = "both"
    finetune_epochs: int = 10
    finetune_min_steps: int = 200
    finetune_learning_rate: Optional[float] = None
    finetune_decoders: bool = True
    sds_layout_dropout: float = 0.3

    def __post_init__(self):
        if min(self.sds_epochs, self.sst_epochs, self.sit_epochs) < 0:
            raise ValueError("stage epochs must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.finetune_epochs < 1 or self.finetune_min_steps < 0:
            raise ValueError("finetune_epochs must be >= 1 and finetune_min_steps >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.sds_layout_dropout < 1:
            raise ValueError("sds_layout_dropout must lie in [0, 1)")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}")

    def finetune_epochs_for(self, n_docs: int) -> int:
        """Epochs for a guidance subset of ``n_docs``: at least ``finetune_min_steps`` optimizer steps."""
        steps_per_epoch = max(1, math.ceil(n_docs / self.batch_size))
        return max(self.finetune_epochs, math.ceil(self.finetune_min_steps / steps_per_epoch))

    @property
    def ft_lr(self) -> float:
        return self.learning_rate if self.finetune_learning_rate is None else self.finetune_learning_rate

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "AdaptationPlan":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def corpus_hash(documents: Sequence[Document]) -> str:
    from .docmodel import document_to_json

    h = hashlib.sha256()
    for d in documents:
        h.update(json.dumps(document_to_json(d), sort_keys=True).encode("utf-8"))
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# model <-> checkpoint
# --------------------------------------------------------------------------


@dataclass
class RunLog:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, stage: str, loss: float) -> None:
        self.rows.append((len(self.rows), stage, loss))

    def losses(self, stage: str) -> list[float]:
        return [r[2] for r in self.rows if r[1] == stage]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "loss"])
            for step, stage, loss in self.rows:
                w.writerow([step, stage, repr(loss)])


def initial_checkpoint(documents: Sequence[Document], gold_space: LabelSpace, cfg: EncoderConfig = EncoderConfig(),
                       seed: int = 0, synthetic_space: LabelSpace = SYNTHETIC_LABEL_SPACE, **option_kw) -> Checkpoint:
    """Build the vocabulary from ``documents`` and a freshly initialised model."""
    vocab = Vocab.build(vocab_texts(documents), cfg.vocab_size)
    cfg = EncoderConfig.from_json({**cfg.to_json(), "vocab_size": len(vocab), "seed": seed})
    options = ModelOptions(n_gold=len(gold_space), n_synthetic=len(synthetic_space), **option_kw)
    torch.manual_seed(seed)
    model = DavidModel(cfg, options)
    meta = {"encoder": cfg.to_json(), "options": options.to_json(), "vocab": vocab.itos,
            "gold_space": gold_space.to_json(), "synthetic_space": synthetic_space.to_json()}
    return to_checkpoint(model, "init", meta)


def to_checkpoint(model: DavidModel, stage: str, meta: dict, plan_hash: str = "", metrics=None) -> Checkpoint:
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    return Checkpoint(arrays, frozenset(frozen), stage, plan_hash, metrics or {}, meta)


def from_checkpoint(ckpt: Checkpoint) -> tuple[DavidModel, Vocab]:
    cfg = EncoderConfig.from_json(ckpt.meta["encoder"])
    options = ModelOptions(**ckpt.meta["options"])
    model = DavidModel(cfg, options)
    state = model.state_dict()
    if set(state) != set(ckpt.arrays):
        raise ShapeMismatchError("checkpoint arrays do not match the model layout")
    for name, arr in ckpt.arrays.items():
        if tuple(state[name].shape) != arr.shape:
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.arrays.items()})
    for name, p in model.named_parameters():
        p.requires_grad_(name not in ckpt.frozen)
    return model, Vocab(ckpt.meta["vocab"][2:])


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def _epoch_order(n: int, seed: int, tag: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, tag, epoch]).permutation(n)


def _set_modes(model: DavidModel) -> None:
    """Frozen groups run in eval mode (no dropout); trainable ones in train mode."""
    model.train()
    for g in model.frozen_groups():
        getattr(model, g).eval()


def _upstream_frozen(model: DavidModel) -> bool:
    frozen = set(model.frozen_groups())
    return all(g in frozen for g in ("token_encoder", "l2v", "entity_encoder", "joint_encoder"))


def _train_stage(model: DavidModel, tensors: Sequence[DocTensors], loss_fn, epochs: int, lr: float,
                 batch_size: int, seed: int, tag: int, stage: str, log_: RunLog,
                 layout_dropout: float = 0.0) -> None:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params or epochs == 0 or not tensors:
        return
    opt = torch.optim.Adam(params, lr=lr)
    _set_modes(model)
    frozen_upstream = _upstream_frozen(model)
    torch.manual_seed(seed * 1000 + tag)
    drop_rng = np.random.default_rng([seed, tag, 99])
    for epoch in range(epochs):
        order = _epoch_order(len(tensors), seed, tag, epoch)
        for start in range(0, len(order), batch_size):
            batch = [tensors[int(k)] for k in order[start:start + batch_size]]
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for dt in batch:
                drop = None
                if layout_dropout > 0:
                    drop = torch.from_numpy(drop_rng.random(dt.n_tokens) < layout_dropout)
                if frozen_upstream:
                    with torch.no_grad():
                        reps = model.represent(dt)
                else:
                    reps = model.represent(dt, drop)
                loss = loss_fn(model, dt, reps) / len(batch)
                loss.backward()
                total += float(loss.detach())
            opt.step()
            log_.add(stage, total)


def _sds_term(model, dt, reps):
    return sds_loss(model.alignment_prediction(reps), dt.relation)


def _sst_term(model, dt, reps):
    _, logits = model.sst_logits(reps)
    return sst_loss(logits, dt.synthetic_labels)


def _sit_term(model, dt, reps):
    return pointer_nll(model.sit_logits(dt, reps), dt.query_targets)


def _tag_term(model, dt, reps):
    return F.cross_entropy(model.tag_logits(reps), dt.gold_labels)


def _retrieval_term(model, dt, reps):
    return pointer_nll(model.retrieval_logits(dt, reps), dt.query_targets)


def run_adaptation(d_n: Sequence[Document], plan: AdaptationPlan, start: Checkpoint,
                   log_: Optional[RunLog] = None) -> Checkpoint:
    """Train the infuser on synthetic data: SDS, freeze, then SST (fine) and SIT (coarse)."""
    if plan.sds_epochs + plan.sst_epochs + plan.sit_epochs == 0:
        raise ValueError("an adaptation run needs at least one stage with epochs > 0")
    log_ = log_ if log_ is not None else RunLog()
    model, vocab = from_checkpoint(start)
    do_sst = plan.sst_epochs > 0 and plan.task_mode in ("fine", "both")
    do_sit = plan.sit_epochs > 0 and plan.task_mode in ("coarse", "both")
    for d in d_n:
        if do_sst and any(t.synthetic_label is None for t in d.tokens):
            raise MissingAnnotationError(f"SST: document {d.id} has tokens without synthetic labels")
    if do_sit and not any(d.qa_pairs for d in d_n):
        raise MissingAnnotationError("SIT: no document in D_n carries synthetic QA pairs")
    tensors = [tensorize(d, vocab) for d in d_n]

    if plan.sds_epochs > 0:
        sds_docs = [t for t in tensors if t.n_tokens and t.n_entities]
        _train_stage(model, sds_docs, _sds_term, plan.sds_epochs, plan.learning_rate, plan.batch_size,
                     plan.seed, 1, "sds", log_, plan.sds_layout_dropout)
        model.seed_pointers_from_alignment()
        if plan.freeze_after_sds:
            model.set_frozen(FREEZE_AFTER_SDS)
    if do_sst:
        sst_docs = [t for t in tensors if t.n_tokens]
        _train_stage(model, sst_docs, _sst_term, plan.sst_epochs, plan.learning_rate, plan.batch_size,
                     plan.seed, 2, "sst", log_)
    if do_sit:
        sit_docs = [t for t in tensors if t.query_ids and t.n_entities]
        _train_stage(model, sit_docs, _sit_term, plan.sit_epochs, plan.learning_rate, plan.batch_size,
                     plan.seed, 3, "sit", log_)
    metrics = {f"final_{s}_loss": float(np.mean(log_.losses(s)[-20:]))
               for s in ("sds", "sst", "sit") if log_.losses(s)}
    meta = {**start.meta, "corpus_hash": corpus_hash(d_n), "plan": plan.to_json()}
    return to_checkpoint(model, "F_n", meta, plan.digest(), metrics)


def guidance_subset(d_g: Sequence[Document], ratio: float, seed: int) -> list[Document]:
    if not 0 < ratio <= 1:
        raise ValueError("guidance ratio must lie in (0, 1]")
    exact = round(ratio * len(d_g), 9)
    if exact < 1:
        raise EmptyGuidanceError("guidance subset is empty; evaluate zero-shot with run_inference instead")
    order = np.random.default_rng([seed, 7]).permutation(len(d_g))
    return [d_g[int(i)] for i in order[:math.ceil(exact)]]


def run_finetune(d_g: Sequence[Document], start: Checkpoint, plan: AdaptationPlan, task: str,
                 ratio: float = 1.0, log_: Optional[RunLog] = None) -> Checkpoint:
    """Train the task head (and the unfrozen decoders) on gold guidance documents."""
    if task not in ("fine", "coarse"):
        raise ValueError("fine-tuning task must be 'fine' or 'coarse'")
    if any(d.annotation_provenance != "gold" for d in d_g):
        raise ValueError("guidance documents must carry gold annotations")
    log_ = log_ if log_ is not None else RunLog()
    subset = guidance_subset(d_g, ratio, plan.seed)
    model, vocab = from_checkpoint(start)
    adapted = start.stage in ("F_n", "F_nt")
    if adapted and not plan.finetune_decoders:
        model.set_frozen(tuple(set(model.frozen_groups()) | {"token_decoder", "entity_decoder"}))
    tensors = [tensorize(d, vocab) for d in subset]
    if task == "fine":
        for dt in tensors:
            if dt.n_tokens and dt.gold_labels is None:
                raise MissingAnnotationError(f"fine-tune: document {dt.doc_id} lacks gold labels")
        docs = [t for t in tensors if t.n_tokens]
        _train_stage(model, docs, _tag_term, plan.finetune_epochs_for(len(docs)), plan.ft_lr, plan.batch_size,
                     plan.seed, 4, "tag", log_)
    else:
        docs = [t for t in tensors if t.query_ids and t.n_entities]
        if not docs:
            raise MissingAnnotationError("fine-tune: no guidance document carries QA pairs")
        _train_stage(model, docs, _retrieval_term, plan.finetune_epochs_for(len(docs)), plan.ft_lr, plan.batch_size,
                     plan.seed, 5, "retrieval", log_)
    stage = "F_nt" if adapted else "F_t"
    meta = {**start.meta, "finetune": {"task": task, "ratio": ratio, "n_docs": len(subset),
                                       "corpus_hash": corpus_hash(subset), "plan": plan.to_json()}}
    losses = log_.losses("tag" if task == "fine" else "retrieval")
    metrics = {**start.metrics, "final_finetune_loss": float(np.mean(losses[-20:])) if losses else None}
    return to_checkpoint(model, stage, meta, plan.digest(), metrics)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


def run_inference(d_i: Sequence[Document], ckpt: Checkpoint, task_mode: str) -> list[dict]:
    """Deterministic predictions for every token (fine) and/or every query (coarse)."""
    if task_mode not in TASK_MODES:
        raise ValueError(f"task_mode must be one of {TASK_MODES}")
    model, vocab = from_checkpoint(ckpt)
    model.eval()
    gold_space = LabelSpace.from_json(ckpt.meta["gold_space"])
    records: list[dict] = []
    with torch.no_grad():
        for doc in d_i:
            dt = tensorize(doc, vocab)
            if dt.n_tokens == 0 and dt.n_entities == 0:
                continue
            reps = model.represent(dt)
            if task_mode in ("fine", "both") and dt.n_tokens:
                preds = model.tag_logits(reps).argmax(-1).tolist()
                for i, (t, p) in enumerate(zip(doc.tokens, preds)):
                    gold = t.gold_label
                    records.append({"doc_id": doc.id, "kind": "token", "index": i, "gold": gold, "pred": p,
                                    "gold_name": gold_space.categories[gold] if gold is not None else None,
                                    "pred_name": gold_space.categories[p]})
            if task_mode in ("coarse", "both") and dt.query_ids and dt.n_entities:
                preds = model.retrieval_logits(dt, reps).argmax(-1).tolist()
                for k, (qa, tgt, p) in enumerate(zip(doc.qa_pairs, dt.query_targets, preds)):
                    records.append({"doc_id": doc.id, "kind": "query", "index": k, "query": qa.key_text,
                                    "gold": tgt, "pred": p, "n_candidates": dt.n_entities,
                                    "gold_text": doc.entities[tgt].text, "pred_text": doc.entities[p].text})
    return records


def write_predictions(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def frozen_arrays_equal(a: Checkpoint, b: Checkpoint, groups: Sequence[str] = FREEZE_AFTER_SDS) -> bool:
    names = [n for n in a.arrays if n.split(".", 1)[0] in groups]
    return all(a.arrays[n].tobytes() == b.arrays[n].tobytes() for n in names)


def write_run(directory: str | Path, ckpt: Checkpoint, log_: RunLog, record: dict[str, Any]) -> Path:
    """Write ``ckpt-<stage>.bin``, ``log.csv`` and ``run.json`` under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ckpt-{ckpt.stage}.bin"
    ckpt.save(path)
    log_.write_csv(out / "log.csv")
    record = {**record, "stage": ckpt.stage, "plan_hash": ckpt.plan_hash, "checkpoint": path.name,
              "checkpoint_sha256": ckpt.digest()}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


__all__ = [
    "AdaptationPlan", "Checkpoint", "EmptyGuidanceError", "GROUPS", "MissingAnnotationError", "RunLog",
    "corpus_hash", "frozen_arrays_equal", "guidance_subset", "initial_checkpoint", "read_predictions",
    "run_adaptation", "run_finetune", "run_inference", "write_corpus", "write_predictions", "write_run",
]
