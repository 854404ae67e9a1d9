"""Beam search with an optional per-sentence vocabulary restriction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import model as M


@dataclass
class Hypothesis:
    tokens: list[int]
    logp: float
    finished: bool = False

    @property
    def score(self) -> float:
        # length counts the end symbol, so an immediately finished hypothesis has length 1
        return self.logp / max(len(self.tokens), 1)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def beam_search(
    source: Sequence[int],
    params: M.ModelParams,
    vocab: M.Vocabulary,
    beam: int = 12,
    max_len: int | None = None,
    use_limited_vocab: bool = False,
    specials: Mapping[int, set[int]] | None = None,
    return_all: bool = False,
):
    """Translate one sentence of source ids; returns target ids without the end symbol.

    The beam narrows as hypotheses finish.  Finished hypotheses compete on
    log-probability divided by length.  Attention gates are open at every step.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    src = np.asarray(source, dtype=np.int64)
    max_len = default_max_len(len(src)) if max_len is None else max_len
    cfg = params.config
    vmask = None
    if use_limited_vocab:
        vmask = M.vocab_mask(M.limited_vocab(src, vocab, specials), cfg.tgt_vocab)

    enc1 = M.encode(src, params)
    enc_cache = {1: enc1}
    state = M.init_decoder_state(cfg.layers, cfg.hidden, 1)
    alive = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    V = cfg.tgt_vocab
    for _ in range(max_len):
        k = len(alive)
        if k not in enc_cache:
            enc_cache[k] = enc1.repeat(k)
        prev = [h.tokens[-1] if h.tokens else M.BOS_ID for h in alive]
        logp, _, state = M.decoder_step(prev, state, enc_cache[k], 1.0, params, vocab_mask=vmask)
        cand = np.array([h.logp for h in alive])[:, None] + logp
        width = beam - len(finished)
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")[:width]
        rows = []
        new_alive = []
        for idx in order:
            score = flat[idx]
            if not np.isfinite(score):
                break
            r, w = divmod(int(idx), V)
            hyp = Hypothesis(alive[r].tokens + [w], float(score))
            if w == M.EOS_ID:
                hyp.finished = True
                finished.append(hyp)
            else:
                new_alive.append(hyp)
                rows.append(r)
        if not new_alive or len(finished) >= beam:
            alive = new_alive
            break
        alive = new_alive
        state = state.select(np.array(rows))
    else:
        finished.extend(alive)
    if not finished:
        finished.extend(alive)
    finished.sort(key=lambda h: -h.score)
    if return_all:
        return finished
    best = finished[0].tokens
    return best[:-1] if best and best[-1] == M.EOS_ID else best


def greedy_decode(source, params: M.ModelParams, max_len: int | None = None, vocab_mask=None) -> list[int]:
    src = np.asarray(source, dtype=np.int64)
    max_len = default_max_len(len(src)) if max_len is None else max_len
    cfg = params.config
    enc = M.encode(src, params)
    state = M.init_decoder_state(cfg.layers, cfg.hidden, 1)
    out: list[int] = []
    prev = M.BOS_ID
    for _ in range(max_len):
        logp, _, state = M.decoder_step([prev], state, enc, 1.0, params, vocab_mask=vocab_mask)
        prev = int(np.argmax(logp[0]))
        if prev == M.EOS_ID:
            break
        out.append(prev)
    return out


def translate_corpus(
    sources: Sequence[Sequence[str]],
    params: M.ModelParams,
    vocab: M.Vocabulary,
    beam: int = 12,
    use_limited_vocab: bool = False,
    specials: Mapping[int, set[int]] | None = None,
) -> list[list[str]]:
    """Token-level translation of every sentence, in input order."""
    out = []
    for sent in sources:
        if not sent:
            out.append([])
            continue
        ids = beam_search(vocab.encode_src(sent), params, vocab, beam,
                          use_limited_vocab=use_limited_vocab, specials=specials)
        out.append(vocab.decode_tgt(ids))
    return out
