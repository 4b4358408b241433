"""Rule-based weak labels and a synthetic rewrite task with an exact oracle.

Two rules turn a fully specified query into an in-context one:

* R1 (pronoun): a span of content words repeated from the history, either
  two or more words long, capitalized, or sitting in an entity slot right
  after a preposition, is replaced by a pronoun. Possessives keep their head
  noun ("beyoncé's voice" -> "her voice").
* R2 (ellipsis): a query that differs from an earlier query only in one
  middle span collapses to "what about <span> ?".

The synthetic world is a regular grammar over (template, attribute, entity)
slots, so every reduced query resolves to exactly one full query.
"""
from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .core import DataPool, LabeledExample, Session, Turn, normalize_text

# tag -> (object pronoun, possessive pronoun)
PRONOUNS = {
    "person-f": ("her", "her"),
    "person-m": ("him", "his"),
    "plural": ("them", "their"),
    "other": ("it", "its"),
}

DEFAULT_LEXICON = {
    "beyoncé": "person-f",
    "beyonce": "person-f",
    "marie curie": "person-f",
    "ada lovelace": "person-f",
    "isaac newton": "person-m",
    "albert einstein": "person-m",
    "the beatles": "plural",
}

STOPWORDS = frozenset("""
a an the this that these those some other any each every all of in on at to for from
with about by as into over under after before between during without within what which
who whom whose when where why how is are was were be been being do does did done can
could will would shall should may might must have has had having i you he she it we they
me him her us them my your his its our their tell know facts more else also and or but
not no so than too very just there here
""".split())

PREPOSITIONS = frozenset("of in on at to for from with about by into over under after before between".split())
DETERMINERS = frozenset({"the", "a", "an", "this", "that", "these", "those"})

_TOKEN = re.compile(r"[\w'’]+|[^\w\s]")


def rule_tokens(text: str) -> list[str]:
    """Case-preserving tokens; punctuation split off, apostrophes kept in words."""
    return _TOKEN.findall(normalize_text(text))


def _stem_match(a: str, b: str) -> bool:
    a, b = a.lower(), b.lower()
    if a == b:
        return True
    short, long_ = sorted((a, b), key=len)
    return len(short) >= 5 and long_.startswith(short)


def _is_content(tok: str) -> bool:
    return tok[0].isalnum() and tok.lower() not in STOPWORDS


def _possessor(tok: str) -> Optional[str]:
    low = tok.lower()
    for suffix in ("'s", "’s"):
        if low.endswith(suffix) and len(low) > 2:
            return low[: -len(suffix)]
    return None


def _entity_tag(words: Sequence[str], lexicon: dict) -> str:
    phrase = " ".join(w.lower() for w in words)
    for cand in (phrase, phrase.removeprefix("the ")):
        if cand in lexicon:
            return lexicon[cand]
    return "other"


@dataclass(frozen=True)
class SimplifyRule:
    name: str
    applies: Callable[[Sequence[str], str], bool]
    apply: Callable[[Sequence[str], str], str]


def _r1_candidate(history: Sequence[str], query: str, lexicon: dict):
    toks = rule_tokens(query)
    hist = [t for h in history for t in rule_tokens(h)]
    hist_words = [t for t in hist if t[0].isalnum()]

    def seen(tok):
        own = _possessor(tok) or tok
        return any(_stem_match(own, h) or _stem_match(tok, h) for h in hist_words)

    best = None
    i = 0
    while i < len(toks):
        if not (_is_content(toks[i]) and seen(toks[i])):
            i += 1
            continue
        j = i
        while j + 1 < len(toks) and _is_content(toks[j + 1]) and seen(toks[j + 1]):
            j += 1
        span = toks[i:j + 1]
        k = i - 1
        if k >= 0 and toks[k].lower() in DETERMINERS:
            k -= 1
        entity_slot = k >= 0 and toks[k].lower() in PREPOSITIONS and (
            j + 1 == len(toks) or not toks[j + 1][0].isalnum()
        )
        if len(span) >= 2 or span[0][0].isupper() or entity_slot or _possessor(span[0]):
            best = (i, j)
        i = j + 1
    if best is None:
        return None
    i, j = best
    span = toks[i:j + 1]
    poss = next((p for p, t in enumerate(span) if _possessor(t)), None)
    if poss is not None:
        owner = span[:poss] + [_possessor(span[poss])]
        pron = PRONOUNS[_entity_tag(owner, lexicon)][1]
        out = toks[:i] + [pron] + toks[i + poss + 1:]
    else:
        start = i - 1 if i > 0 and toks[i - 1].lower() in DETERMINERS else i
        pron = PRONOUNS[_entity_tag(toks[start:j + 1], lexicon)][0]
        out = toks[:start] + [pron] + toks[j + 1:]
    return " ".join(out)


def _r2_candidate(history: Sequence[str], query: str):
    q = rule_tokens(query)
    for h_text in reversed(history):
        h = rule_tokens(h_text)
        p = 0
        while p < min(len(q), len(h)) and q[p].lower() == h[p].lower():
            p += 1
        if p < 3:
            continue
        s = 0
        while s < min(len(q), len(h)) - p and q[-1 - s].lower() == h[-1 - s].lower():
            s += 1
        middle = q[p:len(q) - s]
        if s == 0 or not middle or len(h) - s - p <= 0:
            continue
        lead = [q[p - 1]] if q[p - 1].lower() in DETERMINERS else []
        return " ".join(["what", "about", *lead, *middle, "?"])
    return None


def pronoun_rule(lexicon: Optional[dict] = None) -> SimplifyRule:
    lex = DEFAULT_LEXICON if lexicon is None else lexicon
    return SimplifyRule(
        "R1-pronoun",
        lambda h, q: _r1_candidate(h, q, lex) is not None,
        lambda h, q: _r1_candidate(h, q, lex),
    )


ELLIPSIS_RULE = SimplifyRule(
    "R2-ellipsis",
    lambda h, q: _r2_candidate(h, q) is not None,
    lambda h, q: _r2_candidate(h, q),
)


def default_rules(lexicon: Optional[dict] = None) -> list[SimplifyRule]:
    return [pronoun_rule(lexicon), ELLIPSIS_RULE]


def rule_simplify(session: Session, lexicon: Optional[dict] = None,
                  rules: Optional[Sequence[SimplifyRule]] = None) -> list[LabeledExample]:
    """Weakly labeled (history, simplified, original) triples for one session."""
    rules = default_rules(lexicon) if rules is None else rules
    queries = session.queries
    out = []
    for m in range(1, len(queries)):
        history, query = queries[:m], queries[m]
        for rule in rules:
            if not rule.applies(history, query):
                continue
            simplified = rule.apply(history, query)
            if simplified.lower() != " ".join(rule_tokens(query)).lower():
                out.append(LabeledExample(history, simplified, query, provenance="weak"))
                break
    return out


# ------------------------------------------------------------ synthetic world

TEMPLATES = (
    "what is the {attr} of {ent} ?",
    "tell me the {attr} of {ent} ?",
    "do you know the {attr} of {ent} ?",
)
ELLIPSIS = "what about the {attr} ?"

_TEMPLATE_RES = [
    re.compile("^" + re.escape(t).replace(r"\{attr\}", r"(?P<attr>\S+)").replace(r"\{ent\}", r"(?P<ent>.+)") + "$")
    for t in TEMPLATES
]
_ELLIPSIS_RE = re.compile(r"^what about the (?P<attr>\S+) \?$")

_ENTITIES = [
    ("the moon", "other"), ("the sun", "other"), ("the nile river", "other"),
    ("the roman empire", "other"), ("mount everest", "other"), ("the eiffel tower", "other"),
    ("the amazon forest", "other"), ("lake victoria", "other"), ("the sahara desert", "other"),
    ("the great wall", "other"), ("marie curie", "person-f"), ("ada lovelace", "person-f"),
    ("frida kahlo", "person-f"), ("jane austen", "person-f"), ("isaac newton", "person-m"),
    ("albert einstein", "person-m"), ("charles darwin", "person-m"), ("leonardo da vinci", "person-m"),
    ("the beatles", "plural"), ("the vikings", "plural"), ("the pyramids", "plural"),
    ("the alps", "plural"), ("tokyo", "other"), ("brazil", "other"),
]
_ATTRIBUTES = [
    "history", "origin", "size", "age", "location", "importance",
    "legacy", "color", "shape", "reputation",
]


@dataclass(frozen=True)
class Entity:
    name: str
    tag: str
    attributes: tuple[tuple[str, str], ...]

    @property
    def pronoun(self) -> str:
        return PRONOUNS[self.tag][0]


@dataclass(frozen=True)
class SyntheticWorld:
    entities: tuple[Entity, ...]
    templates: tuple[str, ...] = TEMPLATES
    ellipsis: str = ELLIPSIS

    @classmethod
    def default(cls, n_entities: int = len(_ENTITIES), n_attributes: int = len(_ATTRIBUTES)) -> "SyntheticWorld":
        if n_entities > len(_ENTITIES) or n_attributes > len(_ATTRIBUTES):
            raise ValueError("default world is limited to "
                             f"{len(_ENTITIES)} entities and {len(_ATTRIBUTES)} attributes")
        ents = tuple(
            Entity(name, tag, tuple((a, f"{a} of {name}") for a in _ATTRIBUTES[:n_attributes]))
            for name, tag in _ENTITIES[:n_entities]
        )
        return cls(ents)

    def lexicon(self) -> dict[str, str]:
        return {e.name: e.tag for e in self.entities}

    def full(self, template: int, attr: str, entity: Entity) -> str:
        return self.templates[template].format(attr=attr, ent=entity.name)

    def pronoun_form(self, template: int, attr: str, entity: Entity) -> str:
        return self.templates[template].format(attr=attr, ent=entity.pronoun)

    def ellipsis_form(self, attr: str) -> str:
        return self.ellipsis.format(attr=attr)


def count_distinct_sessions(world: SyntheticWorld, turns: int) -> int:
    """Number of single-entity full-form sessions with no repeated query."""
    return sum(
        math.perm(len(e.attributes), turns) * len(world.templates) ** turns
        for e in world.entities
    )


def _session_plan(world: SyntheticWorld, turns: int, rng: random.Random):
    ent = rng.choice(world.entities)
    attrs = rng.sample([a for a, _ in ent.attributes], turns)
    plan = []
    template = rng.randrange(len(world.templates))
    for m, attr in enumerate(attrs):
        kind = "full"
        if m > 0:
            kind = "ellipsis" if rng.random() < 0.35 else "pronoun"
            if kind == "pronoun":
                template = rng.randrange(len(world.templates))
        plan.append((kind, template, attr))
    return ent, plan


def _render(world: SyntheticWorld, ent: Entity, plan) -> list[tuple[str, str, str]]:
    """(reduced, full, answer) per turn."""
    rows = []
    for kind, template, attr in plan:
        full = world.full(template, attr, ent)
        if kind == "full":
            reduced = full
        elif kind == "pronoun":
            reduced = world.pronoun_form(template, attr, ent)
        else:
            reduced = world.ellipsis_form(attr)
        rows.append((reduced, full, dict(ent.attributes)[attr]))
    return rows


@dataclass
class SynthSplit:
    d_sessions: list[Session]
    us: DataPool
    ur: DataPool
    test_sessions: list[Session]
    n_labeled: int

    @property
    def D(self) -> list[LabeledExample]:
        from .dataio import to_labeled
        return to_labeled(self.d_sessions)[: self.n_labeled]

    @property
    def test(self) -> list[LabeledExample]:
        from .dataio import to_labeled
        return to_labeled(self.test_sessions)

    def __iter__(self):
        return iter((self.D, self.us, self.ur, self.test))


def synth_generate(n_sessions: int, turns_per_session: int, seed: int, *,
                   n_labeled: int = 32, n_test_sessions: int = 150,
                   world: Optional[SyntheticWorld] = None) -> SynthSplit:
    """Deterministic synthetic D / U_S / U_R / test split.

    U_S holds full-form sessions, U_R reduced-form sessions without rewrites;
    labeled and test sessions carry the full form as each turn's rewrite.
    """
    if n_sessions < 1 or turns_per_session < 1:
        raise ValueError("n_sessions and turns_per_session must be >= 1")
    world = world or SyntheticWorld.default()
    rng = random.Random(seed)

    def make(prefix, count, with_rewrite, reduced):
        out = []
        for i in range(count):
            ent, plan = _session_plan(world, turns_per_session, rng)
            turns = []
            for red, full, ans in _render(world, ent, plan):
                if reduced:
                    turns.append(Turn(red, full if with_rewrite else None, ans))
                else:
                    turns.append(Turn(full, None, ans))
            out.append(Session(f"{prefix}-{i:05d}", turns))
        return out

    n_d = -(-n_labeled // turns_per_session)
    d_sessions = make("d", n_d, True, True)
    us = make("us", n_sessions, False, False)
    ur = make("ur", n_sessions, False, True)
    test = make("t", n_test_sessions, True, True)
    return SynthSplit(d_sessions, DataPool(us), DataPool(ur), test, n_labeled)


def synth_triples(n: int, turns_per_session: int, seed: int,
                  world: Optional[SyntheticWorld] = None) -> Iterable[tuple[list[str], str, str]]:
    """Yield n (history, reduced, full) triples with reduced histories."""
    world = world or SyntheticWorld.default()
    rng = random.Random(seed)
    produced = 0
    while produced < n:
        ent, plan = _session_plan(world, turns_per_session, rng)
        rows = _render(world, ent, plan)
        for m, (red, full, _) in enumerate(rows):
            yield [r for r, _, _ in rows[:m]], red, full
            produced += 1
            if produced == n:
                return


class UnresolvableQuery(ValueError):
    pass


def _parse_full(text: str):
    for t, rx in enumerate(_TEMPLATE_RES):
        m = rx.match(text)
        if m:
            return t, m.group("attr"), m.group("ent")
    return None


def oracle_rewrite(history: Sequence[str], reduced: str,
                   world: Optional[SyntheticWorld] = None) -> str:
    """Resolve a synthetic reduced query to its unique full form."""
    world = world or SyntheticWorld.default()
    pronouns = {e.pronoun for e in world.entities}
    entity = template = None

    def resolve(text):
        nonlocal entity, template
        text = normalize_text(text)
        m = _ELLIPSIS_RE.match(text)
        if m:
            if entity is None or template is None:
                raise UnresolvableQuery(f"no antecedent for {text!r}")
            return world.templates[template].format(attr=m.group("attr"), ent=entity)
        parsed = _parse_full(text)
        if parsed is None:
            raise UnresolvableQuery(f"not a synthetic query: {text!r}")
        template, attr, ent = parsed
        if ent in pronouns:
            if entity is None:
                raise UnresolvableQuery(f"no antecedent for {text!r}")
        else:
            entity = ent
        return world.templates[template].format(attr=attr, ent=entity)

    for h in history:
        resolve(h)
    return resolve(reduced)
