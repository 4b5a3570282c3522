"""Document store, tokenizer, and BM25 inverted index.

The index is immutable once built; ``search`` is a pure function of the
index and the query string, so concurrent read-only use is safe.
"""

from __future__ import annotations

import json
import math
import re
import struct
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

K1 = 1.2
B = 0.75

INDEX_MAGIC = b"RAFEIDX1"
INDEX_FORMAT_VERSION = 1


class EmptyQueryWarning(UserWarning):
    """Query text produced no tokens."""


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0xF900 <= cp <= 0xFAFF
        or 0x3040 <= cp <= 0x30FF  # kana
        or 0xAC00 <= cp <= 0xD7AF  # hangul syllables
    )


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def tokenize_text(text: str) -> list[str]:
    """NFKC-normalize, lowercase, strip punctuation and split on whitespace.

    CJK characters are emitted one token per character, so ``"中原塔 height"``
    becomes ``["中", "原", "塔", "height"]``.
    """
    if not text:
        return []
    norm = _strip_punct(unicodedata.normalize("NFKC", text).lower())
    tokens: list[str] = []
    for chunk in norm.split():
        buf: list[str] = []
        for ch in chunk:
            if _is_cjk(ch):
                if buf:
                    tokens.append("".join(buf))
                    buf = []
                tokens.append(ch)
            else:
                buf.append(ch)
        if buf:
            tokens.append("".join(buf))
    return tokens


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be nonempty")
        if not (self.title or self.body):
            raise ValueError(f"document {self.doc_id!r} has empty title and body")

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}"


@dataclass(frozen=True)
class RetrievedEntry:
    doc_id: str
    score: float
    rank: int


@dataclass
class RetrievedList:
    query_text: str
    entries: list[RetrievedEntry] = field(default_factory=list)

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SearchIndex:
    """BM25 inverted index over a fixed document set.

    Documents are held in doc_id order; postings reference documents by their
    position in that order, so each postings list is sorted by doc_id.
    """

    vocabulary: dict[str, int]
    postings: list[list[tuple[int, int]]]
    doc_ids: list[str]
    doc_lengths: list[int]
    documents: dict[str, Document]

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def doc_freq(self, term: str) -> int:
        tid = self.vocabulary.get(term)
        return 0 if tid is None else len(self.postings[tid])

    def idf(self, term: str) -> float:
        n = self.doc_freq(term)
        return math.log((self.doc_count - n + 0.5) / (n + 0.5) + 1.0)

    def get(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def iter_documents(self) -> Iterable[Document]:
        for d in self.doc_ids:
            yield self.documents[d]


def build_index(documents: list[Document]) -> SearchIndex:
    seen: set[str] = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc_id: {doc.doc_id!r}")
        seen.add(doc.doc_id)

    ordered = sorted(documents, key=lambda d: d.doc_id)
    term_docs: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for pos, doc in enumerate(ordered):
        toks = tokenize_text(doc.text)
        lengths.append(len(toks))
        for term, tf in sorted(Counter(toks).items()):
            term_docs.setdefault(term, []).append((pos, tf))

    terms = sorted(term_docs)
    vocabulary = {t: i for i, t in enumerate(terms)}
    postings = [term_docs[t] for t in terms]
    return SearchIndex(
        vocabulary=vocabulary,
        postings=postings,
        doc_ids=[d.doc_id for d in ordered],
        doc_lengths=lengths,
        documents={d.doc_id: d for d in ordered},
    )


def bm25_scores(index: SearchIndex, query_text: str) -> dict[int, float]:
    """Raw BM25 score per document position, for documents matching any query term."""
    terms = sorted(set(tokenize_text(query_text)))
    avgdl = index.avg_doc_length
    scores: dict[int, float] = {}
    for term in terms:
        tid = index.vocabulary.get(term)
        if tid is None:
            continue
        idf = index.idf(term)
        for pos, tf in index.postings[tid]:
            dl = index.doc_lengths[pos]
            denom = tf + K1 * (1.0 - B + B * dl / avgdl)
            scores[pos] = scores.get(pos, 0.0) + idf * tf * (K1 + 1.0) / denom
    return scores


def search(index: SearchIndex, query_text: str, k: int = 10) -> RetrievedList:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not tokenize_text(query_text):
        warnings.warn(f"query {query_text!r} has no tokens", EmptyQueryWarning, stacklevel=2)
        return RetrievedList(query_text)
    scores = bm25_scores(index, query_text)
    # positions are in doc_id order, so sorting by position breaks ties by doc_id
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    entries = [
        RetrievedEntry(index.doc_ids[pos], score, rank)
        for rank, (pos, score) in enumerate(ranked, start=1)
    ]
    return RetrievedList(query_text, entries)


def retrieve_documents(index: SearchIndex, query_text: str, k: int = 10) -> list[Document]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyQueryWarning)
        hits = search(index, query_text, k)
    return [index.get(e.doc_id) for e in hits.entries]


# -- persistence -------------------------------------------------------------


def load_documents(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            docs.append(Document(obj["doc_id"], obj.get("title", ""), obj.get("text", "")))
    return docs


def save_documents(documents: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in documents:
            fh.write(json.dumps({"doc_id": d.doc_id, "title": d.title, "text": d.body}, ensure_ascii=False))
            fh.write("\n")


def serialize_index(index: SearchIndex) -> bytes:
    terms = sorted(index.vocabulary, key=index.vocabulary.__getitem__)
    header = {
        "version": INDEX_FORMAT_VERSION,
        "vocabulary": terms,
        "posting_counts": [len(p) for p in index.postings],
        "docs": [
            {"doc_id": d, "title": index.documents[d].title, "text": index.documents[d].body,
             "length": index.doc_lengths[i]}
            for i, d in enumerate(index.doc_ids)
        ],
    }
    hbytes = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    flat = [x for plist in index.postings for pair in plist for x in pair]
    return INDEX_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + struct.pack(f"<{len(flat)}i", *flat)


def deserialize_index(blob: bytes) -> SearchIndex:
    if blob[:8] != INDEX_MAGIC:
        raise ValueError("not an index file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    if header.get("version") != INDEX_FORMAT_VERSION:
        raise ValueError(f"unsupported index version {header.get('version')}")
    body = blob[12 + hlen :]
    flat = struct.unpack(f"<{len(body) // 4}i", body)
    postings, off = [], 0
    for n in header["posting_counts"]:
        postings.append([(flat[off + 2 * j], flat[off + 2 * j + 1]) for j in range(n)])
        off += 2 * n
    docs = [Document(d["doc_id"], d["title"], d["text"]) for d in header["docs"]]
    return SearchIndex(
        vocabulary={t: i for i, t in enumerate(header["vocabulary"])},
        postings=postings,
        doc_ids=[d.doc_id for d in docs],
        doc_lengths=[d["length"] for d in header["docs"]],
        documents={d.doc_id: d for d in docs},
    )


def save_index(index: SearchIndex, path: str | Path) -> None:
    Path(path).write_bytes(serialize_index(index))


def load_index(path: str | Path) -> SearchIndex:
    return deserialize_index(Path(path).read_bytes())
