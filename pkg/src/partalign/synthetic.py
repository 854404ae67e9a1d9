"""A small artificial language pair with a known word lexicon.

Source word ``s<i>`` translates to target word ``t<perm[i]>``.  A fixed
subset of source words are modifiers: a modifier followed by a non-modifier
swaps places with it in the translation, so attention is not the identity.

Sentences are built from recurring multi-word chunks grouped by topic, plus
filler words, and carry no final punctuation, so two independently written monolingual sentences often
share several phrases.  The phrase table lists true translations of chunks
and chunk sub-phrases, single-word entries, and variants ending in a
period that the punctuation rule must remove.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus_builder import PhrasePair, write_corpus, write_phrase_table

END = "."


@dataclass
class Lexicon:
    perm: np.ndarray
    modifiers: frozenset

    def word(self, i: int) -> str:
        return f"t{int(self.perm[i])}"

    def translate(self, unit: list[int]) -> list[str]:
        """Translate a run of source word ids with the modifier swap."""
        out = []
        k = 0
        while k < len(unit):
            w = unit[k]
            if w in self.modifiers and k + 1 < len(unit) and unit[k + 1] not in self.modifiers:
                out += [self.word(unit[k + 1]), self.word(w)]
                k += 2
            else:
                out.append(self.word(w))
                k += 1
        return out


@dataclass
class ToyTask:
    vocab_size: int
    lexicon: Lexicon
    chunks: list[list[int]]
    src_mono: list[list[str]]
    tgt_mono: list[list[str]]
    phrase_table: list[PhrasePair]
    dev: list[tuple[list[str], list[str]]]
    test: list[tuple[list[str], list[str]]]
    parallel: list[tuple[list[str], list[str]]]
    files: dict[str, str] = field(default_factory=dict)


class _Generator:
    def __init__(self, vocab_size, n_topics, chunks_per_topic, rng: np.random.Generator):
        self.rng = rng
        self.V = vocab_size
        perm = rng.permutation(vocab_size)
        n_mod = max(1, int(round(0.3 * vocab_size)))
        mods = frozenset(int(i) for i in rng.choice(vocab_size, n_mod, replace=False))
        self.lexicon = Lexicon(perm, mods)
        self.topics = []
        self.chunks = []
        seen = set()
        for _ in range(n_topics):
            topic = []
            while len(topic) < chunks_per_topic:
                ch = tuple(int(w) for w in rng.integers(0, vocab_size, rng.integers(4, 6)))
                if ch in seen:
                    continue
                seen.add(ch)
                topic.append(len(self.chunks))
                self.chunks.append(list(ch))
            self.topics.append(topic)

    def sentence(self, rng: np.random.Generator):
        """One sentence as a list of units (each a list of source ids)."""
        topic = self.topics[rng.integers(len(self.topics))]
        k = int(rng.integers(2, 4))
        picked = rng.choice(len(topic), size=min(k, len(topic)), replace=False)
        units = []
        for j, c in enumerate(picked):
            if rng.random() < 0.5:
                units.append([int(rng.integers(self.V))])
            units.append(self.chunks[topic[c]])
        if rng.random() < 0.5:
            units.append([int(rng.integers(self.V))])
        return units

    def render(self, units):
        src = [f"s{w}" for u in units for w in u]
        tgt = [t for u in units for t in self.lexicon.translate(u)]
        return src, tgt


def _sub_phrases(lex: Lexicon, chunk: list[int]):
    """Every contiguous sub-span whose translation is contiguous (never splits a swap)."""
    n = len(chunk)
    # token positions in the translation, mirroring Lexicon.translate
    where = [0] * n
    k = pos = 0
    while k < n:
        if chunk[k] in lex.modifiers and k + 1 < n and chunk[k + 1] not in lex.modifiers:
            where[k], where[k + 1] = pos + 1, pos
            k += 2
            pos += 2
        else:
            where[k] = pos
            k += 1
            pos += 1
    tgt = lex.translate(chunk)
    for i in range(n):
        for j in range(i + 1, n + 1):
            ps = sorted(where[i:j])
            if ps[-1] - ps[0] + 1 == j - i:
                yield [f"s{w}" for w in chunk[i:j]], tgt[ps[0] : ps[-1] + 1]


def gen_toy_task(
    vocab_size: int = 50,
    sentence_count: int = 2000,
    seed: int = 0,
    out_dir=None,
    n_topics: int | None = None,
    chunks_per_topic: int = 5,
    n_dev: int = 100,
    n_test: int = 200,
    n_parallel: int = 1000,
    decoys: bool = False,
) -> ToyTask:
    """Generate monolingual corpora, a phrase table and parallel dev/test/tuning sets.

    All randomness comes from ``seed``; files are written when ``out_dir`` is
    given (``src.txt``, ``tgt.txt``, ``phrases.txt``, ``{dev,test,parallel}.{src,tgt}``).
    With ``decoys`` the table also holds wrong translations at probability
    0.3 and 0.2, which the probability filter has to remove.
    """
    if vocab_size < 10:
        raise ValueError("vocab_size must be >= 10")
    n_topics = n_topics or vocab_size
    root = np.random.default_rng(seed)
    gen = _Generator(vocab_size, n_topics, chunks_per_topic, root)
    streams = [np.random.default_rng([seed, k]) for k in range(1, 6)]

    src_mono = [gen.render(gen.sentence(streams[0]))[0] for _ in range(sentence_count)]
    tgt_mono = [gen.render(gen.sentence(streams[1]))[1] for _ in range(sentence_count)]
    dev = [gen.render(gen.sentence(streams[2])) for _ in range(n_dev)]
    test = [gen.render(gen.sentence(streams[3])) for _ in range(n_test)]
    parallel = [gen.render(gen.sentence(streams[4])) for _ in range(n_parallel)]

    lex = gen.lexicon
    table: dict[tuple, float] = {}
    for ch in gen.chunks:
        for s, t in _sub_phrases(lex, ch):
            table[(tuple(s), tuple(t))] = 1.0
        # punctuated variant: a true translation the punctuation rule must drop
        table[(tuple(f"s{w}" for w in ch) + (END,), tuple(lex.translate(ch)) + (END,))] = 1.0
        if decoys:
            wrong = tuple(lex.word(int(w)) for w in root.integers(0, vocab_size, len(ch)))
            table.setdefault((tuple(f"s{w}" for w in ch), wrong), 0.3)
    for i in range(vocab_size):
        table[((f"s{i}",), (lex.word(i),))] = 1.0
        if decoys:
            j = int(root.integers(vocab_size))
            if j != i:
                table.setdefault(((f"s{i}",), (lex.word(j),)), 0.2)
    phrases = [PhrasePair(s, t, p) for (s, t), p in sorted(table.items())]

    task = ToyTask(vocab_size, lex, gen.chunks, src_mono, tgt_mono, phrases, dev, test, parallel)
    if out_dir is not None:
        task.files = write_toy_task(task, out_dir)
    return task


def write_toy_task(task: ToyTask, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"src": out / "src.txt", "tgt": out / "tgt.txt", "phrase_table": out / "phrases.txt"}
    write_corpus(files["src"], task.src_mono)
    write_corpus(files["tgt"], task.tgt_mono)
    write_phrase_table(files["phrase_table"], task.phrase_table)
    for name in ("dev", "test", "parallel"):
        pairs = getattr(task, name)
        files[f"{name}_src"] = out / f"{name}.src"
        files[f"{name}_tgt"] = out / f"{name}.tgt"
        write_corpus(files[f"{name}_src"], [s for s, _ in pairs])
        write_corpus(files[f"{name}_tgt"], [t for _, t in pairs])
    with open(out / "lexicon.tsv", "w", encoding="utf-8") as fh:
        for i in range(task.vocab_size):
            mod = "modifier" if i in task.lexicon.modifiers else ""
            fh.write(f"s{i}\t{task.lexicon.word(i)}\t{mod}\n")
    files["lexicon"] = out / "lexicon.tsv"
    return {k: str(v) for k, v in files.items()}
