import pytest
import torch

from david.providers import RuleBasedProvider
from david.synthgen import CorpusSpec, LayoutNoiseConfig, annotate_collection, generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def form_docs():
    return generate_corpus(CorpusSpec(24, "form", seed=3))


@pytest.fixture(scope="session")
def receipt_docs():
    return generate_corpus(CorpusSpec(24, "receipt", seed=4))


@pytest.fixture(scope="session")
def tiny_split(form_docs):
    split, _ = annotate_collection(form_docs, (12, 6, 6), 0, LayoutNoiseConfig(0.3, seed=0), RuleBasedProvider(0))
    return split


@pytest.fixture(scope="session")
def toy_run():
    """Default-size encoder adapted on 120 synthetic form documents; about a minute on one CPU."""
    from david.synthgen import gold_label_space
    from david.workflow import AdaptationPlan, RunLog, initial_checkpoint, run_adaptation

    docs = generate_corpus(CorpusSpec(230, "form", seed=5))
    split, _ = annotate_collection(docs, (150, 40, 40), 5, LayoutNoiseConfig(0.3, seed=5), RuleBasedProvider(5))
    plan = AdaptationPlan(sds_epochs=6, sst_epochs=2, sit_epochs=5, finetune_epochs=5, finetune_min_steps=100)
    init = initial_checkpoint(docs, gold_label_space("form"), seed=0)
    log = RunLog()
    adapted = run_adaptation(split.d_n[:120], plan, init, log)
    return {"split": split, "train": split.d_n[:120], "held_out": split.d_n[120:], "plan": plan, "init": init,
            "adapted": adapted, "log": log}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
