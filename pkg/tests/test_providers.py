import json
import re
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from david.providers import RemoteChatProvider, RuleBasedProvider, make_provider
from david.synthgen import (SYNTHETIC_LABEL_SPACE, CorpusSpec, LayoutNoiseConfig, ProviderError,
                            annotate_collection, generate_corpus, generate_synthetic_tags, perturb_layout_annotations)

GOLDEN = Path(__file__).parent / "data" / "rule_tags_receipt.json"


def _tagged(provider):
    (doc,) = generate_corpus(CorpusSpec(1, "receipt", seed=1))
    synth = perturb_layout_annotations(doc, LayoutNoiseConfig(1.0, 0.0, 0.0))
    return doc, generate_synthetic_tags(synth, provider)


def test_rule_tags_match_golden_file():
    golden = json.loads(GOLDEN.read_text())["tags"]
    _, out = _tagged(RuleBasedProvider(0))
    got = [[t.text, SYNTHETIC_LABEL_SPACE.categories[t.synthetic_label]] for t in out.tokens]
    assert got == golden


def test_prices_in_menu_rows_are_amounts():
    doc, out = _tagged(RuleBasedProvider(0))
    menu = {e.id for e in doc.entities if e.category == "menu"}
    prices = [t for t in out.tokens if t.parent_entity in menu and re.fullmatch(r"\d+\.\d\d", t.text)]
    assert prices
    assert {SYNTHETIC_LABEL_SPACE.categories[t.synthetic_label] for t in prices} == {"amount"}


def test_rule_provider_reproducible(form_docs):
    p = RuleBasedProvider(3)
    assert [p.inquire(d, 10) for d in form_docs] == [RuleBasedProvider(3).inquire(d, 10) for d in form_docs]


class _FakeChat(BaseHTTPRequestHandler):
    fail = False
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.headers.get("Authorization"), body))
        if type(self).fail:
            self.send_response(500)
            self.end_headers()
            return
        prompt = body["messages"][0]["content"]
        if "label of every token" in prompt:
            words = prompt.split("Context: ", 1)[1].split(" \n", 1)[0].split()
            content = "\n".join(f"{w}\tvalue" for w in words)
        else:
            content = "Question: company Value: Acme Ltd\nQuestion: nothing Value: zzz qqq"
        payload = json.dumps({"choices": [{"message": {"content": content}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def fake_server():
    _FakeChat.fail = False
    _FakeChat.seen = []
    server = HTTPServer(("127.0.0.1", 0), _FakeChat)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_remote_provider_tags_and_inquiries(fake_server, tmp_path, monkeypatch):
    monkeypatch.setenv("DAVID_LLM_URL", fake_server)
    monkeypatch.setenv("DAVID_LLM_KEY", "secret")
    audit = tmp_path / "audit.jsonl"
    provider = RemoteChatProvider(audit_path=audit)
    (doc,) = generate_corpus(CorpusSpec(1, "form", seed=2))
    synth = perturb_layout_annotations(doc, LayoutNoiseConfig(1.0, 0.0, 0.0))
    tagged = generate_synthetic_tags(synth, provider)
    assert {t.synthetic_label for t in tagged.tokens} == {SYNTHETIC_LABEL_SPACE.index("value")}
    pairs = provider.inquire(tagged, 5)
    assert pairs == [("company", "Acme Ltd"), ("nothing", "zzz qqq")]
    assert _FakeChat.seen[0][0] == "Bearer secret"
    assert len(audit.read_text().splitlines()) == 2


def test_remote_failure_skips_document(fake_server, form_docs):
    _FakeChat.fail = True
    provider = RemoteChatProvider(base_url=fake_server, max_retries=1, sleep=lambda s: None)
    with pytest.raises(ProviderError):
        provider.complete("hi")
    split, report = annotate_collection(form_docs[:6], (3, 2, 1), 0, LayoutNoiseConfig(0.3), provider)
    assert len(split.d_n) == 0 and len(report.skipped) == 3


def test_remote_requires_url(monkeypatch):
    monkeypatch.delenv("DAVID_LLM_URL", raising=False)
    with pytest.raises(ProviderError):
        RemoteChatProvider()


def test_make_provider():
    assert isinstance(make_provider("rule"), RuleBasedProvider)
    with pytest.raises(ValueError):
        make_provider("oracle")
