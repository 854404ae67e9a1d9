"""End-to-end helpers shared by the command line and the experiment runner."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from . import model as M
from .corpus_builder import PartiallyAlignedPair
from .decoding import translate_corpus
from .evaluation import BleuReport, bleu
from .training import (
    TrainingConfig,
    TrainResult,
    example_from_pair,
    fine_tune,
    parallel_example,
    train,
)

ParallelPairs = Sequence[tuple[Sequence[str], Sequence[str]]]


@dataclass
class TrainedModel:
    params: M.ModelParams
    vocab: M.Vocabulary
    result: TrainResult


def new_model(vocab: M.Vocabulary, cfg: TrainingConfig) -> M.ModelParams:
    mc = M.ModelConfig(vocab.src_size, vocab.tgt_size, hidden=cfg.hidden, layers=cfg.layers, dropout=cfg.dropout)
    return M.ModelParams.init(mc, seed=cfg.seed)


def train_partially_aligned(pairs: Sequence[PartiallyAlignedPair], dev: ParallelPairs,
                            specials: Mapping[str, Sequence[str]], cfg: TrainingConfig,
                            **kwargs) -> TrainedModel:
    """Gated training with the agreement term on mined pairs."""
    vocab = M.Vocabulary.build(((p.source, p.target) for p in pairs), cfg.max_vocab, cfg.v1_size, specials)
    data = [example_from_pair(p, vocab, cfg.end_gate) for p in pairs]
    dev_ex = [parallel_example(s, t, vocab) for s, t in dev]
    res = train(data, dev_ex, new_model(vocab, cfg), cfg, **kwargs)
    return TrainedModel(res.params, vocab, res)


def train_parallel(parallel: ParallelPairs, dev: ParallelPairs, specials: Mapping[str, Sequence[str]],
                   cfg: TrainingConfig, **kwargs) -> TrainedModel:
    """Conventional training (all gates open, no agreement) on sentence or phrase pairs."""
    vocab = M.Vocabulary.build(parallel, cfg.max_vocab, cfg.v1_size, specials)
    data = [parallel_example(s, t, vocab) for s, t in parallel]
    dev_ex = [parallel_example(s, t, vocab) for s, t in dev]
    res = train(data, dev_ex, new_model(vocab, cfg), cfg, **kwargs)
    return TrainedModel(res.params, vocab, res)


def continue_on_parallel(base: TrainedModel, parallel: ParallelPairs, dev: ParallelPairs,
                         cfg: TrainingConfig, allow_oov: bool = True, **kwargs) -> TrainedModel:
    res = fine_tune(base.params.copy(), base.vocab, parallel, cfg, dev, allow_oov=allow_oov, **kwargs)
    return TrainedModel(res.params, base.vocab, res)


def evaluate_model(tm: TrainedModel, test: ParallelPairs, beam: int = 12, limited_vocab: bool = False,
                   v1_size: int | None = None) -> tuple[BleuReport, list[list[str]]]:
    vocab = tm.vocab
    if v1_size is not None and v1_size != vocab.v1_size:
        vocab = M.Vocabulary.from_dict({**vocab.to_dict(), "v1_size": v1_size})
    hyps = translate_corpus([s for s, _ in test], tm.params, vocab, beam, use_limited_vocab=limited_vocab)
    return bleu(hyps, [[t] for _, t in test]), hyps
