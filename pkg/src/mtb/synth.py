"""Templated synthetic stand-in for an entity-linked corpus.

A *world* fixes the entity names and, for every relation type, a set of
sentence templates ``prefix E1 middle E2 suffix .`` built from a shared
pool of filler words. Templates of one relation share no systematic words,
so two templates can only be recognised as the same relation through the
entity pairs they co-occur with. Documents are sequences of template
instances over *facts* ``(relation, subject, object)``; every fact is
instantiated at least twice so matching-pair positives exist.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import Document, Mention, RelationStatement
from .evaluation import LabeledStatement

NIL = "no_relation"

_ONSETS = "b c d f g h j k l m n p r s t v w z br dr fl gr kl pl st tr".split()
_VOWELS = "a e i o u ai ou".split()


def _words(rng: random.Random, n: int, syllables: tuple[int, int], exclude: set[str] = frozenset()) -> list[str]:
    seen = set(exclude)
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.randint(*syllables)))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class Template:
    template_id: str
    relation: str
    prefix: tuple[str, ...]
    middle: tuple[str, ...]
    suffix: tuple[str, ...]


@dataclass
class World:
    relations: list[str]
    templates: dict[str, list[Template]]
    entity_names: dict[str, tuple[str, ...]]
    seed: int

    @property
    def entity_ids(self) -> list[str]:
        return list(self.entity_names)


def make_world(num_relations: int, templates_per_relation: int, entities: int, seed: int, filler_words: int = 400) -> World:
    if num_relations < 2:
        raise ValueError("num_relations must be >= 2")
    rng = random.Random(f"world:{seed}")
    fillers = _words(rng, filler_words, (1, 2))
    name_parts = _words(rng, max(40, entities), (2, 3), exclude=set(fillers))
    relations = [f"rel{r:02d}" for r in range(num_relations)]
    templates: dict[str, list[Template]] = {}
    used = set()
    for rel in relations:
        templates[rel] = []
        while len(templates[rel]) < templates_per_relation:
            body = (
                tuple(rng.sample(fillers, rng.randint(0, 2))),
                tuple(rng.sample(fillers, rng.randint(2, 4))),
                tuple(rng.sample(fillers, rng.randint(0, 2))),
            )
            if body in used:
                continue
            used.add(body)
            templates[rel].append(Template(f"{rel}/t{len(templates[rel])}", rel, *body))
    names: dict[str, tuple[str, ...]] = {}
    taken = set()
    while len(names) < entities:
        name = tuple(p.capitalize() for p in rng.sample(name_parts, rng.choice((1, 2))))
        if name in taken:
            continue
        taken.add(name)
        names[f"Q{len(names):04d}"] = name
    return World(relations, templates, names, seed)


@dataclass(frozen=True)
class Fact:
    relation: str
    subject: str
    obj: str


def sample_documents(
    world: World,
    docs: int,
    seed: int,
    sentences_per_doc: int = 2,
    repeats: tuple[int, int] = (2, 3),
    relations: Sequence[str] | None = None,
    doc_prefix: str = "d",
) -> tuple[list[Document], list[dict]]:
    """Documents plus gold records ``{doc_id, span1, span2, relation, template, e1, e2}``."""
    rng = random.Random(f"docs:{world.seed}:{seed}")
    rels = list(relations) if relations is not None else world.relations
    ents = world.entity_ids
    slots = docs * sentences_per_doc
    instances: list[Fact] = []
    while len(instances) < slots:
        s, o = rng.sample(ents, 2)
        fact = Fact(rng.choice(rels), s, o)
        instances.extend([fact] * rng.randint(*repeats))
    # Facts are contiguous runs; trimming must not leave a singleton.
    del instances[slots:]
    if repeats[0] >= 2 and len(instances) >= 2 and instances.count(instances[-1]) == 1:
        instances[-1] = instances[-2]
    rng.shuffle(instances)
    _spread(instances, sentences_per_doc, rng)

    documents, gold = [], []
    for d in range(docs):
        doc_id = f"{doc_prefix}{d:06d}"
        tokens: list[str] = []
        mentions: list[Mention] = []
        for fact in instances[d * sentences_per_doc : (d + 1) * sentences_per_doc]:
            tpl = rng.choice(world.templates[fact.relation])
            tokens.extend(tpl.prefix)
            a = (len(tokens), len(tokens) + len(world.entity_names[fact.subject]))
            tokens.extend(n.lower() for n in world.entity_names[fact.subject])
            tokens.extend(tpl.middle)
            b = (len(tokens), len(tokens) + len(world.entity_names[fact.obj]))
            tokens.extend(n.lower() for n in world.entity_names[fact.obj])
            tokens.extend(tpl.suffix)
            tokens.append(".")
            mentions += [Mention(*a, fact.subject), Mention(*b, fact.obj)]
            gold.append(
                {
                    "doc_id": doc_id,
                    "span1": list(a),
                    "span2": list(b),
                    "relation": fact.relation,
                    "template": tpl.template_id,
                    "e1": fact.subject,
                    "e2": fact.obj,
                }
            )
        documents.append(Document(doc_id, tokens, mentions))
    return documents, gold


def _spread(instances: list[Fact], per_doc: int, rng: random.Random) -> None:
    """Swap instances so no document repeats a fact or an entity."""

    def clash(doc: int, pos: int) -> bool:
        f = instances[pos]
        ents = {f.subject, f.obj}
        for q in range(doc * per_doc, min((doc + 1) * per_doc, len(instances))):
            if q != pos and ({instances[q].subject, instances[q].obj} & ents):
                return True
        return False

    n = len(instances)
    for pos in range(n):
        doc = pos // per_doc
        tries = 0
        while clash(doc, pos) and tries < 1000:
            other = rng.randrange(n)
            instances[pos], instances[other] = instances[other], instances[pos]
            if clash(other // per_doc, other):
                instances[pos], instances[other] = instances[other], instances[pos]
            tries += 1


def synth_corpus(
    num_relations: int = 12,
    templates_per_relation: int = 4,
    entities: int = 200,
    docs: int = 2000,
    seed: int = 0,
    sentences_per_doc: int = 2,
) -> tuple[World, list[Document], list[dict]]:
    world = make_world(num_relations, templates_per_relation, entities, seed)
    documents, gold = sample_documents(world, docs, seed, sentences_per_doc)
    return world, documents, gold


def gold_lookup(gold: Iterable[dict]) -> dict[tuple[str, int, int], dict]:
    return {(g["doc_id"], g["span1"][0], g["span2"][0]): g for g in gold}


def label_statements(statements: Sequence[RelationStatement], gold: Iterable[dict]) -> list[LabeledStatement]:
    """Attach gold relation names; pairs not produced by one template get ``no_relation``."""
    table = gold_lookup(gold)
    out = []
    for st in statements:
        g = table.get((st.source[0], *st.mention_starts))
        meta = {"e1": st.e1, "e2": st.e2, "doc_id": st.source[0]}
        if g is not None:
            meta["template"] = g["template"]
        out.append(LabeledStatement(st.x, st.s1, st.s2, g["relation"] if g else NIL, meta))
    return out


def split_types(relations: Sequence[str], n_heldout: int) -> tuple[list[str], list[str]]:
    """The last ``n_heldout`` relation types (sorted by name) are held out."""
    rels = sorted(relations)
    return rels[: len(rels) - n_heldout], rels[len(rels) - n_heldout :]
