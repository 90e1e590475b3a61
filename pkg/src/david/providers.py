"""Annotation providers: a deterministic rule-based oracle and a remote chat-completion adapter."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .docmodel import Document, LabelSpace, Token
from .synthgen import FORM_FIELDS, LINE_H, RECEIPT_KEYS, SYNTHETIC_LABEL_SPACE, ProviderError, _stable_hash

log = logging.getLogger(__name__)

_DATE_RE = re.compile(r"^\d{1,2}[/-]\d{1,2}[/-]\d{2,4}$|^\d{1,2}:\d{2}$")
_AMOUNT_RE = re.compile(r"^[$]?\d[\d,]*(\.\d+)?%?$")
KEY_PHRASES = tuple(k for k, _ in FORM_FIELDS) + tuple(RECEIPT_KEYS)

TAG_PROMPT = ("Context: {} \n Above is the context of the target document, please extract the {} "
              "label of every token \n, the output format strictly follow: one line per token, token<TAB>label")
INQUIRY_PROMPT = ("Context: {} \n Above is the context of the target form document, please extract the {} \n, "
                  "the output format strictly follow: Question: xxx Value: xxx")


def reading_lines(tokens: Sequence[Token]) -> list[list[Token]]:
    """Group tokens into text lines (top to bottom, left to right)."""
    lines: list[list[Token]] = []
    for t in sorted(tokens, key=lambda t: (t.bbox.y0, t.bbox.x0, t.id)):
        if lines and abs(lines[-1][0].bbox.y0 - t.bbox.y0) < LINE_H / 2:
            lines[-1].append(t)
        else:
            lines.append([t])
    return [sorted(line, key=lambda t: (t.bbox.x0, t.id)) for line in lines]


def document_context(doc: Document) -> str:
    return "\n".join(" ".join(t.text for t in line) for line in reading_lines(doc.tokens))


def _leading_key(words: list[str]) -> Optional[str]:
    best = None
    for key in KEY_PHRASES:
        kw = key.split()
        if [w.casefold() for w in words[:len(kw)]] == [w.casefold() for w in kw]:
            if best is None or len(kw) > len(best.split()):
                best = key
    return best


class RuleBasedProvider:
    """Deterministic stand-in for an LLM annotator.

    Tags come from the parent entity's category plus character classes; inquiries
    are read off key/value lines and menu rows, with occasional paraphrases and
    truncated answers.
    """

    tags_capable = True
    inquiries_capable = True

    def __init__(self, seed: int = 0, truncate_rate: float = 0.1):
        self.seed = seed
        self.truncate_rate = truncate_rate

    def tag(self, doc: Document, space: LabelSpace = SYNTHETIC_LABEL_SPACE) -> list[str]:
        category = {e.id: e.category for e in doc.entities}
        key_ids = set()
        for line in reading_lines(doc.tokens):
            key = _leading_key([t.text for t in line])
            if key:
                key_ids.update(t.id for t in line[:len(key.split())])
        out = []
        for t in doc.tokens:
            cat = category.get(t.parent_entity)
            if _DATE_RE.match(t.text):
                name = "date"
            elif _AMOUNT_RE.match(t.text):
                name = "amount"
            elif t.id in key_ids:
                name = "key"
            elif t.parent_entity is None:
                name = "other"
            elif cat in ("header", "title"):
                name = "header"
            else:
                name = "value"
            out.append(name if name in space.categories else space.categories[0])
        return out

    def inquire(self, doc: Document, max_pairs: int) -> list[tuple[str, str]]:
        rng = np.random.default_rng([self.seed, _stable_hash(doc.id)])
        plain, para = [], []
        for line in reading_lines(doc.tokens):
            words = [t.text for t in line]
            key = _leading_key(words)
            if key:
                answer = words[len(key.split()):]
            elif len(words) >= 3 and _AMOUNT_RE.match(words[0]) and _AMOUNT_RE.match(words[-1]):
                key = " ".join(w for w in words[1:-1] if not _AMOUNT_RE.match(w)) + " price"
                answer = words[-1:]
            else:
                continue
            if not answer:
                continue
            if len(answer) > 1 and rng.random() < self.truncate_rate:
                answer = answer[:-1]
            plain.append((key, " ".join(answer)))
            para.append((f"what is the {key.lower()}", " ".join(answer)))
        return (plain + para)[:max_pairs]


class RemoteChatProvider:
    """Chat-completion adapter configured through ``DAVID_LLM_URL`` / ``DAVID_LLM_KEY``.

    Requests are retried with exponential backoff and every request/response
    body is appended to an audit log (JSON Lines).
    """

    tags_capable = True
    inquiries_capable = True

    def __init__(self, base_url: Optional[str] = None, api_key: Optional[str] = None, model: str = "default",
                 audit_path: Optional[str | Path] = None, max_in_flight: int = 4, max_retries: int = 3,
                 backoff: float = 0.5, timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep):
        self.base_url = (base_url or os.environ.get("DAVID_LLM_URL") or "").rstrip("/")
        if not self.base_url:
            raise ProviderError("remote provider needs DAVID_LLM_URL or an explicit base_url")
        self.api_key = api_key if api_key is not None else os.environ.get("DAVID_LLM_KEY", "")
        self.model = model
        self.audit_path = Path(audit_path) if audit_path else None
        self.max_in_flight = max_in_flight
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._audit_lock = threading.Lock()

    def _audit(self, record: dict) -> None:
        if self.audit_path is None:
            return
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def complete(self, prompt: str) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            req = urllib.request.Request(f"{self.base_url}/chat/completions", data=data, headers=headers)
            try:
                with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                content = payload["choices"][0]["message"]["content"]
                self._audit({"request": body, "response": payload, "attempt": attempt})
                return content
            except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                self._audit({"request": body, "error": repr(exc), "attempt": attempt})
                if attempt < self.max_retries:
                    self._sleep(self.backoff * 2 ** attempt)
        raise ProviderError(f"remote provider failed after {self.max_retries + 1} attempts: {last_error}")

    def tag(self, doc: Document, space: LabelSpace = SYNTHETIC_LABEL_SPACE) -> list[str]:
        prompt = TAG_PROMPT.format(" ".join(t.text for t in doc.tokens), ", ".join(space.categories))
        reply = self.complete(prompt)
        labels = []
        for line in reply.strip().splitlines():
            parts = line.rsplit("\t", 1) if "\t" in line else line.rsplit(None, 1)
            if len(parts) == 2:
                lab = parts[1].strip()
                labels.append(lab if lab in space.categories else space.categories[0])
        if len(labels) != len(doc.tokens):
            raise ProviderError(f"{doc.id}: expected {len(doc.tokens)} tags, got {len(labels)}")
        return labels

    def inquire(self, doc: Document, max_pairs: int) -> list[tuple[str, str]]:
        prompt = INQUIRY_PROMPT.format(document_context(doc), f"{max_pairs} question-answer pairs")
        reply = self.complete(prompt)
        pairs = []
        for m in re.finditer(r"Question:\s*(.+?)\s*Value:\s*(.+)", reply):
            pairs.append((m.group(1).strip(), m.group(2).strip()))
        return pairs[:max_pairs]

    def map_documents(self, fn: Callable[[Document], Document], docs: Sequence[Document]):
        """Apply ``fn`` concurrently; returns (results, failed ids) preserving input order."""
        results: list[Optional[Document]] = [None] * len(docs)
        failed: list[str] = []

        def run(i: int):
            try:
                results[i] = fn(docs[i])
            except ProviderError as exc:
                log.warning("provider failed on %s: %s", docs[i].id, exc)
                failed.append(docs[i].id)

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            list(pool.map(run, range(len(docs))))
        return [r for r in results if r is not None], sorted(failed)


def make_provider(name: str, seed: int = 0, **kwargs):
    if name == "rule":
        return RuleBasedProvider(seed=seed)
    if name == "remote":
        return RemoteChatProvider(**kwargs)
    raise ValueError(f"unknown provider {name!r}")
