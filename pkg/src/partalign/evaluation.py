"""Corpus BLEU with multi-bleu semantics and a source-length breakdown."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

Sentence = Sequence[str]

DEFAULT_BUCKETS = (20, 40, 60, 80)


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]  # percentages, n = 1..4
    bp: float
    ratio: float
    hyp_len: int
    ref_len: int
    matches: list[int]
    totals: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        """The summary line multi-bleu.perl prints."""
        p = "/".join(f"{x:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {p} (BP={self.bp:.3f}, ratio={self.ratio:.3f}, "
            f"hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def ngram_counts(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, ref_lens: Sequence[int]) -> int:
    # ties go to the shorter reference, as in multi-bleu.perl
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def corpus_stats(hyps: Sequence[Sentence], refs: Sequence[Sequence[Sentence]], max_n: int = 4,
                 lowercase: bool = True):
    """(matches[n], totals[n], hyp_len, ref_len) accumulated over the corpus."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, rset in zip(hyps, refs):
        if lowercase:
            hyp = [w.lower() for w in hyp]
            rset = [[w.lower() for w in r] for r in rset]
        if not rset:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), [len(r) for r in rset])
        for n in range(1, max_n + 1):
            h = ngram_counts(hyp, n)
            max_ref: Counter = Counter()
            for r in rset:
                for g, c in ngram_counts(r, n).items():
                    if c > max_ref[g]:
                        max_ref[g] = c
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu_from_stats(matches, totals, hyp_len, ref_len, smooth: bool = False) -> BleuReport:
    max_n = len(matches)
    precisions = []
    logs = []
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        p = m / t if t > 0 else 0.0
        precisions.append(100.0 * p)
        logs.append(math.log(p) if p > 0 else -math.inf)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if bp == 0.0 or any(lg == -math.inf for lg in logs):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(logs) / max_n)
    ratio = hyp_len / ref_len if ref_len else 0.0
    return BleuReport(score, precisions, bp, ratio, hyp_len, ref_len, list(matches), list(totals))


def bleu(hyps: Sequence[Sentence], refs: Sequence[Sequence[Sentence]], smooth: bool = False,
         lowercase: bool = True) -> BleuReport:
    """Case-insensitive corpus BLEU-4.

    ``refs[i]`` is the list of references for ``hyps[i]``.  Without
    ``smooth`` any zero n-gram precision gives 0; with it, orders 2-4 use
    add-one counts.
    """
    if not hyps:
        raise ValueError("empty corpus")
    return bleu_from_stats(*corpus_stats(hyps, refs, lowercase=lowercase), smooth=smooth)


def bucket_label(lo: int, hi: float) -> str:
    return f"[{lo},{hi})" if hi != math.inf else f"[{lo},inf)"


def length_bucket_report(hyps, refs, sources, buckets: Sequence[int] = DEFAULT_BUCKETS,
                         smooth: bool = False) -> dict[str, BleuReport]:
    """Corpus BLEU per source-length range; empty ranges are left out."""
    if not (len(hyps) == len(refs) == len(sources)):
        raise ValueError("hyps, refs and sources must be aligned")
    edges = [0, *sorted(buckets), math.inf]
    out = {}
    for lo, hi in zip(edges, edges[1:]):
        idx = [i for i, s in enumerate(sources) if lo <= len(s) < hi]
        if idx:
            out[bucket_label(lo, hi)] = bleu([hyps[i] for i in idx], [refs[i] for i in idx], smooth)
    return out
