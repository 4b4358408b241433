"""Canonical session JSONL, dataset adapters and session-level k-fold splits.

Canonical file: one session per line::

    {"session_id": "...", "turns": [{"query": "...", "rewrite": null, "answer": null}]}

Adapter field mappings (one per source format; anything else fails loudly):

CANARD
    JSON list (or JSONL) of ``{"QuAC_dialog_id", "Question_no", "History",
    "Question", "Rewrite"}``. ``History`` starts with the article title and
    section title, then alternates question / answer. Each record becomes
    one session whose final turn carries the rewrite.
TREC_CAST
    JSON list of topics ``{"number", "turn": [{"number", "raw_utterance",
    "manual_rewritten_utterance"?}]}``.
QUAC
    QuAC release JSON ``{"data": [{"paragraphs": [{"id", "qas": [{"question",
    "orig_answer": {"text"}}]}]}]}``. No rewrites.
MARCO_SESSIONS
    JSONL of ``{"session_id", "queries": [...]}``. No rewrites.
"""
from __future__ import annotations

import enum
import json
import random
from pathlib import Path
from typing import Iterable, Sequence

from .core import ContractViolation, LabeledExample, Session, Turn


class DataFormatError(ValueError):
    pass


class SourceFormat(str, enum.Enum):
    CANARD = "canard"
    TREC_CAST = "trec_cast"
    QUAC = "quac"
    MARCO_SESSIONS = "marco_sessions"


def session_to_dict(s: Session) -> dict:
    return {
        "session_id": s.id,
        "turns": [{"query": t.query, "rewrite": t.rewrite, "answer": t.answer} for t in s.turns],
    }


def session_from_dict(d: dict) -> Session:
    turns = []
    for t in d["turns"]:
        turns.append(Turn(t["query"], t.get("rewrite"), t.get("answer")))
    return Session(str(d["session_id"]), turns)


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
    return rows


def write_jsonl(rows: Iterable[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_sessions(path) -> list[Session]:
    sessions, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                s = session_from_dict(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            except (KeyError, TypeError, ContractViolation) as e:
                raise DataFormatError(f"{path}:{lineno}: invalid session record ({e})") from None
            if s.id in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate session_id {s.id!r}")
            seen.add(s.id)
            sessions.append(s)
    return sessions


def save_sessions(sessions: Iterable[Session], path) -> None:
    write_jsonl((session_to_dict(s) for s in sessions), path)


def to_labeled(sessions: Iterable[Session]) -> list[LabeledExample]:
    out = []
    for s in sessions:
        queries = s.queries
        for m, t in enumerate(s.turns):
            if t.rewrite is not None:
                out.append(LabeledExample(tuple(queries[:m]), t.query, t.rewrite))
    return out


def kfold_split(sessions: Sequence[Session], k: int, seed: int) -> list[tuple[list[Session], list[Session]]]:
    """Session-level folds; test fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(sessions) < k:
        raise ValueError(f"need at least k={k} sessions, got {len(sessions)}")
    order = list(range(len(sessions)))
    random.Random(seed).shuffle(order)
    fold_of = {idx: pos % k for pos, idx in enumerate(order)}
    folds = []
    for f in range(k):
        train = [s for i, s in enumerate(sessions) if fold_of[i] != f]
        test = [s for i, s in enumerate(sessions) if fold_of[i] == f]
        folds.append((train, test))
    return folds


# ------------------------------------------------------------------ adapters

def _require(rec: dict, key: str, where: str):
    if key not in rec or rec[key] is None:
        raise DataFormatError(f"{where}: missing required field {key!r}")
    return rec[key]


def _load_json_or_jsonl(path):
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        return json.loads(text)
    if stripped.startswith("{") and "\n" not in stripped.rstrip():
        return [json.loads(text)]
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _adapt_canard(path) -> list[Session]:
    out = []
    for i, rec in enumerate(_load_json_or_jsonl(path)):
        where = f"CANARD record {i}"
        dialog = _require(rec, "QuAC_dialog_id", where)
        qno = _require(rec, "Question_no", where)
        history = _require(rec, "History", where)
        question = _require(rec, "Question", where)
        rewrite = _require(rec, "Rewrite", where)
        past = history[2:]
        turns = [Turn(past[j], None, past[j + 1] if j + 1 < len(past) else None)
                 for j in range(0, len(past), 2)]
        turns.append(Turn(question, rewrite))
        out.append(Session(f"{dialog}_q{qno}", turns))
    return out


def _adapt_trec(path) -> list[Session]:
    out = []
    for i, topic in enumerate(_load_json_or_jsonl(path)):
        where = f"TREC CAsT topic {i}"
        number = _require(topic, "number", where)
        turns = []
        for t in _require(topic, "turn", where):
            raw = _require(t, "raw_utterance", f"{where} turn {t.get('number', '?')}")
            turns.append(Turn(raw, t.get("manual_rewritten_utterance")))
        out.append(Session(str(number), turns))
    return out


def _adapt_quac(path) -> list[Session]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for a, article in enumerate(_require(doc, "data", "QuAC file")):
        for p, para in enumerate(_require(article, "paragraphs", f"QuAC article {a}")):
            where = f"QuAC article {a} paragraph {p}"
            turns = []
            for qa in _require(para, "qas", where):
                answer = (qa.get("orig_answer") or {}).get("text")
                turns.append(Turn(_require(qa, "question", where), None, answer))
            out.append(Session(str(_require(para, "id", where)), turns))
    return out


def _adapt_marco(path) -> list[Session]:
    out = []
    for i, rec in enumerate(_load_json_or_jsonl(path)):
        where = f"MARCO session {i}"
        sid = _require(rec, "session_id", where)
        out.append(Session(str(sid), [Turn(q) for q in _require(rec, "queries", where)]))
    return out


_ADAPTERS = {
    SourceFormat.CANARD: _adapt_canard,
    SourceFormat.TREC_CAST: _adapt_trec,
    SourceFormat.QUAC: _adapt_quac,
    SourceFormat.MARCO_SESSIONS: _adapt_marco,
}


def adapt(source_format, path, out_path=None) -> list[Session]:
    """Convert a source dataset to canonical sessions; optionally write them."""
    fmt = SourceFormat(source_format.lower() if isinstance(source_format, str) else source_format)
    try:
        sessions = _ADAPTERS[fmt](path)
    except (KeyError, TypeError, AttributeError) as e:
        raise DataFormatError(f"{fmt.value}: unexpected record structure ({e})") from None
    except ContractViolation as e:
        raise DataFormatError(f"{fmt.value}: {e}") from None
    ids = [s.id for s in sessions]
    if len(ids) != len(set(ids)):
        raise DataFormatError(f"{fmt.value}: duplicate session ids after conversion")
    if out_path is not None:
        save_sessions(sessions, out_path)
    return sessions
