"""Mine partially aligned sentence pairs from monolingual text and a phrase table."""

from __future__ import annotations

import json
import unicodedata
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Tokens = tuple[str, ...]
Span = tuple[int, int]


class PhraseTableError(ValueError):
    """Raised for a malformed phrase-table line or an out-of-range probability."""


@dataclass(frozen=True)
class PhrasePair:
    source_tokens: Tokens
    target_tokens: Tokens
    prob: float

    def __post_init__(self):
        if not self.source_tokens or not self.target_tokens:
            raise ValueError("phrase sides must be non-empty")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"probability {self.prob} outside [0, 1]")

    @property
    def is_special(self) -> bool:
        return len(self.source_tokens) == 1 and len(self.target_tokens) == 1


@dataclass(frozen=True)
class SpanPair:
    k: int
    src_span: Span
    tgt_span: Span


@dataclass
class PartiallyAlignedPair:
    source: list[str]
    target: list[str]
    aligned: list[SpanPair]
    src_id: int = -1
    tgt_id: int = -1

    def to_json(self) -> dict:
        return {
            "src": list(self.source),
            "tgt": list(self.target),
            "aligned": [{"src": list(s.src_span), "tgt": list(s.tgt_span)} for s in self.aligned],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "PartiallyAlignedPair":
        aligned = [
            SpanPair(k, (a["src"][0], a["src"][1]), (a["tgt"][0], a["tgt"][1]))
            for k, a in enumerate(rec.get("aligned", []))
        ]
        return cls(list(rec["src"]), list(rec["tgt"]), aligned)

    def validate(self) -> None:
        tx, ty = len(self.source), len(self.target)
        for sp in self.aligned:
            (sb, se), (tb, te) = sp.src_span, sp.tgt_span
            if not (0 <= sb < se <= tx and 0 <= tb < te <= ty):
                raise ValueError(f"span pair {sp} outside sentence bounds ({tx}, {ty})")
        for key in ("src_span", "tgt_span"):
            spans = sorted(getattr(sp, key) for sp in self.aligned)
            for (_, e1), (b2, _) in zip(spans, spans[1:]):
                if b2 < e1:
                    raise ValueError(f"overlapping {key}s in aligned pair")


@dataclass
class ExtractionConfig:
    n_cap: int = 7
    min_aligned: int = 2
    min_phrase_len: int = 3
    min_prob: float = 0.5

    def __post_init__(self):
        if self.n_cap < 1 or self.min_aligned < 1:
            raise ValueError("n_cap and min_aligned must be >= 1")


# ---------------------------------------------------------------------------
# phrase table


def parse_phrase_line(line: str, lineno: int = 0) -> PhrasePair:
    fields = [f.strip() for f in line.split("|||")]
    if len(fields) < 3:
        raise PhraseTableError(f"line {lineno}: expected 'src ||| tgt ||| prob'")
    src, tgt = tuple(fields[0].split()), tuple(fields[1].split())
    if not src or not tgt:
        raise PhraseTableError(f"line {lineno}: empty phrase")
    try:
        # Moses tables may carry several scores; the first one is used
        prob = float(fields[2].split()[0])
    except (ValueError, IndexError):
        raise PhraseTableError(f"line {lineno}: bad probability field {fields[2]!r}") from None
    if not 0.0 <= prob <= 1.0:
        raise PhraseTableError(f"line {lineno}: probability {prob} outside [0, 1]")
    return PhrasePair(src, tgt, prob)


def load_phrase_table(path) -> list[PhrasePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                pairs.append(parse_phrase_line(line, lineno))
    return pairs


def is_punctuation(token: str) -> bool:
    return bool(token) and all(unicodedata.category(ch).startswith("P") for ch in token)


def filter_phrase_pairs(pairs: Iterable[PhrasePair], cfg: ExtractionConfig | None = None):
    """Split into (retained, specials).

    Both lists drop punctuation tokens and pairs with ``prob <= min_prob``.
    Single-word pairs go only to ``specials``; everything else must be
    longer than ``min_phrase_len`` on both sides.
    """
    cfg = cfg or ExtractionConfig()
    retained, specials = [], []
    for p in pairs:
        if p.prob <= cfg.min_prob:
            continue
        if any(is_punctuation(t) for t in p.source_tokens + p.target_tokens):
            continue
        if p.is_special:
            specials.append(p)
        elif len(p.source_tokens) > cfg.min_phrase_len and len(p.target_tokens) > cfg.min_phrase_len:
            retained.append(p)
    return retained, specials


def special_map(specials: Iterable[PhrasePair]) -> dict[str, list[str]]:
    out: dict[str, set[str]] = defaultdict(set)
    for p in specials:
        out[p.source_tokens[0]].add(p.target_tokens[0])
    return {k: sorted(v) for k, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# index and search


@dataclass
class PhraseIndex:
    shard_count: int
    postings: list[dict[str, list[int]]] = field(default_factory=list)

    def candidates(self, tokens: Sequence[str]) -> list[int]:
        """Sentence ids containing every token of ``tokens``, ascending."""
        out: list[int] = []
        for shard in self.postings:
            lists = [shard.get(t) for t in set(tokens)]
            if any(lst is None for lst in lists):
                continue
            lists.sort(key=len)
            ids = set(lists[0])
            for lst in lists[1:]:
                ids.intersection_update(lst)
            out.extend(ids)
        out.sort()
        return out


def _index_shard(corpus: Sequence[Sequence[str]], shard: int, shard_count: int) -> dict[str, list[int]]:
    postings: dict[str, list[int]] = defaultdict(list)
    for sid in range(shard, len(corpus), shard_count):
        for tok in dict.fromkeys(corpus[sid]):
            postings[tok].append(sid)
    return dict(postings)


def build_phrase_index(corpus: Sequence[Sequence[str]], shard_count: int = 1, workers: int = 1) -> PhraseIndex:
    """Inverted index with sentence ``i`` stored in shard ``i % shard_count``."""
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    shards = range(shard_count)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            postings = list(ex.map(lambda s: _index_shard(corpus, s, shard_count), shards))
    else:
        postings = [_index_shard(corpus, s, shard_count) for s in shards]
    return PhraseIndex(shard_count, postings)


def leftmost_match(sentence: Sequence[str], phrase: Sequence[str]) -> int:
    n, m = len(sentence), len(phrase)
    first = phrase[0]
    for i in range(n - m + 1):
        if sentence[i] == first and tuple(sentence[i : i + m]) == tuple(phrase):
            return i
    return -1


def find_occurrences(index: PhraseIndex, corpus: Sequence[Sequence[str]], phrase: Sequence[str],
                     limit: int | None = None) -> list[tuple[int, Span]]:
    """Leftmost exact match in every sentence containing ``phrase``.

    With ``limit`` the search stops after that many hits (ids ascending).
    """
    if not phrase:
        raise ValueError("phrase must be non-empty")
    hits = []
    for sid in index.candidates(phrase):
        pos = leftmost_match(corpus[sid], phrase)
        if pos >= 0:
            hits.append((sid, (pos, pos + len(phrase))))
            if limit is not None and len(hits) >= limit:
                break
    return hits


# ---------------------------------------------------------------------------
# extraction


def _assign_spans(matches: list[tuple[PhrasePair, int, int]]) -> list[tuple[PhrasePair, Span, Span]]:
    """Greedy disjoint assignment: longer phrases first, then leftmost source
    span, then phrase text.  A pair whose span collides on either side is
    dropped."""

    def key(m):
        p, s, t = m
        return (-len(p.source_tokens), -len(p.target_tokens), s, t, p.source_tokens, p.target_tokens)

    taken_s: list[Span] = []
    taken_t: list[Span] = []
    chosen = []
    for p, s, t in sorted(matches, key=key):
        ss = (s, s + len(p.source_tokens))
        ts = (t, t + len(p.target_tokens))
        if any(ss[0] < e and b < ss[1] for b, e in taken_s):
            continue
        if any(ts[0] < e and b < ts[1] for b, e in taken_t):
            continue
        taken_s.append(ss)
        taken_t.append(ts)
        chosen.append((p, ss, ts))
    chosen.sort(key=lambda c: (c[1], c[2]))
    return chosen


def extract_partially_aligned(
    src_corpus: Sequence[Sequence[str]],
    tgt_corpus: Sequence[Sequence[str]],
    retained: Sequence[PhrasePair],
    cfg: ExtractionConfig | None = None,
    shard_count: int = 1,
    workers: int = 1,
) -> list[PartiallyAlignedPair]:
    """Pair up sentences that share at least ``cfg.min_aligned`` phrase pairs.

    Each phrase pair sees only its first ``n_cap`` matching sentences on each
    side; a phrase pair counts toward (X, Y) only when both sentences are
    within its caps.  Output is sorted by (source id, target id).
    """
    cfg = cfg or ExtractionConfig()
    if not src_corpus or not tgt_corpus:
        raise ValueError("corpora must be non-empty")
    src_index = build_phrase_index(src_corpus, shard_count, workers)
    tgt_index = build_phrase_index(tgt_corpus, shard_count, workers)

    def lookup(p: PhrasePair):
        s = find_occurrences(src_index, src_corpus, p.source_tokens, cfg.n_cap)
        if not s:
            return p, s, []
        return p, s, find_occurrences(tgt_index, tgt_corpus, p.target_tokens, cfg.n_cap)

    # dedup the table itself: identical (src, tgt) entries share one match list
    unique = list(dict.fromkeys((p.source_tokens, p.target_tokens) for p in retained))
    best = {}
    for p in retained:
        k = (p.source_tokens, p.target_tokens)
        if k not in best or p.prob > best[k].prob:
            best[k] = p
    phrases = [best[k] for k in unique]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lookup, phrases))
    else:
        results = [lookup(p) for p in phrases]

    candidates: dict[tuple[int, int], list[tuple[PhrasePair, int, int]]] = defaultdict(list)
    for p, s_hits, t_hits in results:
        for sid, (sb, _) in s_hits:
            for tid, (tb, _) in t_hits:
                candidates[(sid, tid)].append((p, sb, tb))

    out = []
    for (sid, tid) in sorted(candidates):
        matches = candidates[(sid, tid)]
        if len(matches) < cfg.min_aligned:
            continue
        chosen = _assign_spans(matches)
        if len(chosen) < cfg.min_aligned:
            continue
        aligned = [SpanPair(k, s, t) for k, (_, s, t) in enumerate(chosen)]
        out.append(PartiallyAlignedPair(list(src_corpus[sid]), list(tgt_corpus[tid]), aligned, sid, tid))
    return out


def supervision_matrix(pair: PartiallyAlignedPair) -> np.ndarray:
    """0/1 (Ty, Tx) matrix, ones only inside each span pair's own block."""
    a = np.zeros((len(pair.target), len(pair.source)))
    for sp in pair.aligned:
        a[sp.tgt_span[0] : sp.tgt_span[1], sp.src_span[0] : sp.src_span[1]] = 1.0
    return a


def aligned_ratio(pairs: Sequence[PartiallyAlignedPair]) -> tuple[float, float]:
    """Mean fraction of source / target tokens covered by aligned spans."""
    if not pairs:
        return 0.0, 0.0
    rs = [sum(e - b for b, e in (sp.src_span for sp in p.aligned)) / len(p.source) for p in pairs]
    rt = [sum(e - b for b, e in (sp.tgt_span for sp in p.aligned)) / len(p.target) for p in pairs]
    return float(np.mean(rs)), float(np.mean(rt))


# ---------------------------------------------------------------------------
# file formats


def read_corpus(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def write_corpus(path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")


def write_pairs(path, pairs: Iterable[PartiallyAlignedPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_pairs(path) -> list[PartiallyAlignedPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pair = PartiallyAlignedPair.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad pair record ({exc})") from exc
            pair.validate()
            out.append(pair)
    return out


def write_phrase_table(path, pairs: Iterable[PhrasePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{' '.join(p.source_tokens)} ||| {' '.join(p.target_tokens)} ||| {p.prob:g}\n")
