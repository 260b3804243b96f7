import random

import pytest
import torch

from mtb.corpus import Document, Mention
from mtb.tokens import build_vocab


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_document(rng: random.Random, n_tokens: int = 60, n_mentions: int = 8, n_entities: int = 5, doc_id: str = "d0") -> Document:
    tokens = [f"w{rng.randrange(20)}" for _ in range(n_tokens)]
    mentions = []
    for _ in range(n_mentions):
        start = rng.randrange(n_tokens)
        end = min(n_tokens, start + rng.randint(1, 3))
        mentions.append(Mention(start, end, f"E{rng.randrange(n_entities)}"))
    return Document(doc_id, tokens, mentions)


@pytest.fixture
def small_vocab():
    return build_vocab([f"w{i}" for i in range(20)] + ["t0", "t1", "t2", "t3", "t4"], 1)


class SynthData:
    """A small templated corpus with statements, pairs and labels."""

    def __init__(self, relations=6, templates=2, entities=30, docs=300, seed=0, pairs=2000):
        from mtb import corpus, pairgen, synth

        self.world = synth.make_world(relations, templates, entities, seed)
        self.docs, self.gold = synth.sample_documents(self.world, docs, seed, sentences_per_doc=1)
        self.vocab = build_vocab([t for d in self.docs for t in d.tokens], 1)
        self.statements = corpus.extract_corpus(self.docs, self.vocab, 40)
        self.labeled = synth.label_statements(self.statements, self.gold)
        self.pairs = list(pairgen.generate_pairs(self.statements, pairgen.PairGenConfig(seed=seed, max_pairs=pairs)))
        self.relations = sorted({r.relation for r in self.labeled})

    def encoder(self, **kw):
        from mtb.encoder import EncoderConfig, EncoderModel

        args = {"vocab_size": len(self.vocab), "layers": 1, "hidden": 16, "heads": 2, "max_len": 48, **kw}
        return EncoderModel(EncoderConfig(**args))


@pytest.fixture(scope="session")
def synth_data():
    return SynthData()


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """``report(n, name, ok, detail)`` records one pass/fail line and asserts ``ok``."""
    lines = request.config.stash[ACCEPTANCE]

    def report(n, name, ok, detail):
        line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
