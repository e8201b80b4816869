"""Okapi BM25 over training conversations encoded as entity-token documents.

Each training conversation is one document whose tokens are the entity ids it
mentions, repetitions included. Retrieval returns whole conversations; their
mentioned entities feed the preference model as extra user-taste evidence.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Conversation, Split
from .errors import LeakageError, MissingArtifactError, ParseError, ValidationError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_MAGIC = b"CVRI"
_VERSION = 1


@dataclass
class Bm25Index:
    """Forward and inverted statistics for BM25 scoring.

    ``doc_entities`` keeps each document's distinct entities in first-mention
    order; retrieval unions these to build the retrieved-entity list.
    """

    k1: float
    b: float
    doc_ids: list[str]
    doc_terms: list[Counter]
    doc_lens: list[int]
    doc_entities: list[tuple[int, ...]]
    df: dict[int, int]
    avgdl: float
    index_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index_of:
            self.index_of = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: int) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked conversations plus the entities they mention.

    ``entities`` preserves rank order, then first-mention order within a
    document, deduplicated. ``empty_query`` marks the undefined-score case.
    """

    ranked: tuple[tuple[str, float], ...]
    entities: tuple[int, ...]
    empty_query: bool = False


def conversation_tokens(conv: Conversation) -> list[int]:
    return [m.entity for utt in conv.utterances for m in utt.mentions]


def build_index(train_conversations: Iterable[Conversation], *,
                k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    """Index training conversations; anything from another split is leakage."""
    ordered = sorted(train_conversations, key=lambda c: c.conversation_id)
    if not ordered:
        raise ValidationError("cannot build a retrieval index over an empty corpus")
    doc_ids: list[str] = []
    doc_terms: list[Counter] = []
    doc_lens: list[int] = []
    doc_entities: list[tuple[int, ...]] = []
    df: dict[int, int] = {}
    for conv in ordered:
        if conv.split != Split.TRAIN:
            raise LeakageError(
                f"conversation {conv.conversation_id!r} is {conv.split.value}, not train"
            )
        tokens = conversation_tokens(conv)
        counts = Counter(tokens)
        doc_ids.append(conv.conversation_id)
        doc_terms.append(counts)
        doc_lens.append(len(tokens))
        doc_entities.append(tuple(dict.fromkeys(tokens)))
        for term in counts:
            df[term] = df.get(term, 0) + 1
    avgdl = sum(doc_lens) / len(doc_lens)
    return Bm25Index(k1=k1, b=b, doc_ids=doc_ids, doc_terms=doc_terms,
                     doc_lens=doc_lens, doc_entities=doc_entities, df=df, avgdl=avgdl)


def bm25_score(index: Bm25Index, query: Sequence[int], doc_id: str) -> float:
    """Okapi score of one document for a query multiset of entity ids."""
    if index.n_docs == 0:
        raise ValidationError("empty index")
    doc_idx = index.index_of.get(doc_id)
    if doc_idx is None:
        raise ValueError(f"unknown document {doc_id!r}")
    counts = index.doc_terms[doc_idx]
    length_norm = index.k1 * (1.0 - index.b + index.b * index.doc_lens[doc_idx] / index.avgdl)
    score = 0.0
    for term in query:
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        score += index.idf(term) * tf * (index.k1 + 1.0) / (tf + length_norm)
    return score


def retrieve(index: Bm25Index, query: Sequence[int], n: int,
             exclude_id: str | None = None) -> RetrievalResult:
    """Top-n conversations by BM25 with deterministic tie-breaking.

    Only documents with positive score (i.e. sharing at least one query
    entity) are returned; the excluded conversation never is.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not query:
        return RetrievalResult(ranked=(), entities=(), empty_query=True)
    scored: list[tuple[float, str, int]] = []
    for doc_idx, doc_id in enumerate(index.doc_ids):
        if doc_id == exclude_id:
            continue
        s = bm25_score(index, query, doc_id)
        if s > 0.0:
            scored.append((s, doc_id, doc_idx))
    scored.sort(key=lambda t: (-t[0], t[1]))
    top = scored[:n]
    entities: list[int] = []
    seen: set[int] = set()
    for _, _, doc_idx in top:
        for ent in index.doc_entities[doc_idx]:
            if ent not in seen:
                seen.add(ent)
                entities.append(ent)
    return RetrievalResult(
        ranked=tuple((doc_id, s) for s, doc_id, _ in top),
        entities=tuple(entities),
    )


# ---------------------------------------------------------------------------
# index persistence
#
# Layout (little-endian):
#   4s "CVRI", u32 version, f64 k1, f64 b, u32 doc count
#   per document: u16 id length + utf-8 id, u32 token count,
#                 u32 distinct-entity count + u32 per entity (mention order)
#   u32 term count; per term: u32 entity id, u32 df, u32 posting count,
#                              then (u32 doc index, u32 tf) per posting


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"index truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def save_index(index: Bm25Index, path: str | Path) -> None:
    postings: dict[int, list[tuple[int, int]]] = {}
    for doc_idx, counts in enumerate(index.doc_terms):
        for term, tf in sorted(counts.items()):
            postings.setdefault(term, []).append((doc_idx, tf))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Idd", _VERSION, index.k1, index.b))
        fh.write(struct.pack("<I", index.n_docs))
        for doc_idx, doc_id in enumerate(index.doc_ids):
            encoded = doc_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", index.doc_lens[doc_idx]))
            ents = index.doc_entities[doc_idx]
            fh.write(struct.pack("<I", len(ents)))
            for ent in ents:
                fh.write(struct.pack("<I", ent))
        fh.write(struct.pack("<I", len(postings)))
        for term in sorted(postings):
            plist = postings[term]
            fh.write(struct.pack("<III", term, index.df[term], len(plist)))
            for doc_idx, tf in plist:
                fh.write(struct.pack("<II", doc_idx, tf))


def load_index(path: str | Path) -> Bm25Index:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"retrieval index not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise ParseError(f"not a retrieval index: {path}")
        version, k1, b = struct.unpack("<Idd", _read_exact(fh, 20))
        if version != _VERSION:
            raise ParseError(f"unsupported index version {version}")
        (n_docs,) = struct.unpack("<I", _read_exact(fh, 4))
        doc_ids: list[str] = []
        doc_lens: list[int] = []
        doc_entities: list[tuple[int, ...]] = []
        for _ in range(n_docs):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2))
            doc_ids.append(_read_exact(fh, id_len).decode("utf-8"))
            (length,) = struct.unpack("<I", _read_exact(fh, 4))
            doc_lens.append(length)
            (n_ents,) = struct.unpack("<I", _read_exact(fh, 4))
            ents = struct.unpack(f"<{n_ents}I", _read_exact(fh, 4 * n_ents))
            doc_entities.append(tuple(int(e) for e in ents))
        doc_terms: list[Counter] = [Counter() for _ in range(n_docs)]
        df: dict[int, int] = {}
        (n_terms,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(n_terms):
            term, term_df, n_postings = struct.unpack("<III", _read_exact(fh, 12))
            df[term] = term_df
            for _ in range(n_postings):
                doc_idx, tf = struct.unpack("<II", _read_exact(fh, 8))
                if doc_idx >= n_docs:
                    raise ParseError(f"posting references document {doc_idx} of {n_docs}")
                doc_terms[doc_idx][term] = tf
        if n_docs == 0:
            raise ParseError("index contains no documents")
        avgdl = sum(doc_lens) / n_docs
        return Bm25Index(k1=k1, b=b, doc_ids=doc_ids, doc_terms=doc_terms,
                         doc_lens=doc_lens, doc_entities=doc_entities, df=df, avgdl=avgdl)
