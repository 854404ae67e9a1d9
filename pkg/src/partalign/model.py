"""Attention encoder-decoder with gated context and zero decoder init.

Forward and backward passes are written out by hand on top of
:mod:`partalign.tensor_core`.  Everything is batched over sentences with
padding masks; a batch of one is the single-sentence case.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor_core as tc

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
RESERVED = (UNK, BOS, EOS)
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2

MANIFEST = "manifest.json"
PAYLOAD = "params.bin"


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    src_itos: list[str]
    tgt_itos: list[str]
    tgt_ranked: list[str] = field(default_factory=list)
    v1_size: int = 2000
    specials: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for itos in (self.src_itos, self.tgt_itos):
            if tuple(itos[:3]) != RESERVED:
                raise ValueError(f"vocabulary must start with {RESERVED}")
        self.src_stoi = {w: i for i, w in enumerate(self.src_itos)}
        self.tgt_stoi = {w: i for i, w in enumerate(self.tgt_itos)}
        if not self.tgt_ranked:
            self.tgt_ranked = list(self.tgt_itos[3:])

    @classmethod
    def build(
        cls,
        pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
        max_size: int | None = None,
        v1_size: int = 2000,
        specials: Mapping[str, Iterable[str]] | None = None,
    ) -> "Vocabulary":
        """Frequency-ranked vocabularies; ties broken alphabetically."""
        sc: Counter = Counter()
        tcount: Counter = Counter()
        for src, tgt in pairs:
            sc.update(src)
            tcount.update(tgt)

        def ranked(counter):
            words = [w for w in counter if w not in RESERVED]
            words.sort(key=lambda w: (-counter[w], w))
            return words[:max_size] if max_size else words

        tgt_ranked = ranked(tcount)
        return cls(
            src_itos=list(RESERVED) + ranked(sc),
            tgt_itos=list(RESERVED) + tgt_ranked,
            tgt_ranked=tgt_ranked,
            v1_size=v1_size,
            specials={k: sorted(set(v)) for k, v in sorted((specials or {}).items())},
        )

    @property
    def src_size(self) -> int:
        return len(self.src_itos)

    @property
    def tgt_size(self) -> int:
        return len(self.tgt_itos)

    def encode_src(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.src_stoi.get(w, UNK_ID) for w in tokens], dtype=np.int64)

    def encode_tgt(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.tgt_stoi.get(w, UNK_ID) for w in tokens], dtype=np.int64)

    def decode_tgt(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            out.append(self.tgt_itos[i])
        return out

    def v1_ids(self) -> set[int]:
        ids = {UNK_ID, BOS_ID, EOS_ID}
        ids.update(self.tgt_stoi[w] for w in self.tgt_ranked[: self.v1_size])
        return ids

    def special_ids(self) -> dict[int, set[int]]:
        """Special pairs in id space; words outside either vocabulary are dropped."""
        out: dict[int, set[int]] = {}
        for s, targets in self.specials.items():
            sid = self.src_stoi.get(s)
            if sid is None:
                continue
            tids = {self.tgt_stoi[t] for t in targets if t in self.tgt_stoi}
            if tids:
                out.setdefault(sid, set()).update(tids)
        return out

    def to_dict(self) -> dict:
        return {
            "src_itos": self.src_itos,
            "tgt_itos": self.tgt_itos,
            "tgt_ranked": self.tgt_ranked,
            "v1_size": self.v1_size,
            "specials": self.specials,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(
            src_itos=list(d["src_itos"]),
            tgt_itos=list(d["tgt_itos"]),
            tgt_ranked=list(d["tgt_ranked"]),
            v1_size=int(d["v1_size"]),
            specials={k: list(v) for k, v in d["specials"].items()},
        )


def limited_vocab(source: Sequence[int], vocab: Vocabulary, specials=None) -> set[int]:
    """Target ids allowed when decoding ``source``: frequent words plus the
    special-pair translations of the source words.

    ``specials`` maps source id -> target ids and defaults to the map stored
    in ``vocab``.
    """
    if specials is None:
        specials = vocab.special_ids()
    allowed = vocab.v1_ids()
    for s in source:
        allowed.update(specials.get(int(s), ()))
    return allowed


def vocab_mask(allowed: Iterable[int], size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    mask[list(allowed)] = True
    return mask


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    hidden: int = 64
    emb: int | None = None
    layers: int = 2
    attn: int | None = None
    dropout: float = 0.2

    def __post_init__(self):
        if self.emb is None:
            self.emb = self.hidden
        if self.attn is None:
            self.attn = self.hidden
        if min(self.hidden, self.emb, self.attn, self.layers) < 1:
            raise ValueError("model dimensions must be positive")


class ModelParams:
    """Named float64 tensors; names are stable and define checkpoint order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.validate()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, scale: float = tc.INIT_SCALE) -> "ModelParams":
        rng = np.random.default_rng(seed)
        c = config
        t: dict[str, np.ndarray] = {}
        t["src_emb"] = rng.uniform(-scale, scale, (c.src_vocab, c.emb))
        t["tgt_emb"] = rng.uniform(-scale, scale, (c.tgt_vocab, c.emb))
        for side in ("enc", "dec"):
            for k in range(c.layers):
                p = tc.LstmCellParams.init(c.emb if k == 0 else c.hidden, c.hidden, rng, scale)
                t[f"{side}{k}.W"], t[f"{side}{k}.U"], t[f"{side}{k}.b"] = p.W, p.U, p.b
        t["att.W1"] = rng.uniform(-scale, scale, (c.hidden, c.attn))
        t["att.W2"] = rng.uniform(-scale, scale, (c.hidden, c.attn))
        t["att.v"] = rng.uniform(-scale, scale, c.attn)
        t["out.W"] = rng.uniform(-scale, scale, (2 * c.hidden, c.tgt_vocab))
        t["out.b"] = np.zeros(c.tgt_vocab)
        return cls(config, t)

    def validate(self) -> None:
        c = self.config
        expect = {
            "src_emb": (c.src_vocab, c.emb),
            "tgt_emb": (c.tgt_vocab, c.emb),
            "att.W1": (c.hidden, c.attn),
            "att.W2": (c.hidden, c.attn),
            "att.v": (c.attn,),
            "out.W": (2 * c.hidden, c.tgt_vocab),
            "out.b": (c.tgt_vocab,),
        }
        for side in ("enc", "dec"):
            for k in range(c.layers):
                din = c.emb if k == 0 else c.hidden
                expect[f"{side}{k}.W"] = (din, 4 * c.hidden)
                expect[f"{side}{k}.U"] = (c.hidden, 4 * c.hidden)
                expect[f"{side}{k}.b"] = (4 * c.hidden,)
        if set(expect) != set(self.tensors):
            raise tc.ShapeError(f"parameter names differ: {sorted(set(expect) ^ set(self.tensors))}")
        for name, shape in expect.items():
            if self.tensors[name].shape != shape:
                raise tc.ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    def lstm(self, side: str, k: int) -> tc.LstmCellParams:
        t = self.tensors
        return tc.LstmCellParams(t[f"{side}{k}.W"], t[f"{side}{k}.U"], t[f"{side}{k}.b"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    src: np.ndarray  # (B, Tx) int
    src_mask: np.ndarray  # (B, Tx) bool
    tgt_in: np.ndarray  # (B, T) int, starts with BOS
    tgt_out: np.ndarray  # (B, T) int, ends with EOS
    tgt_mask: np.ndarray  # (B, T) bool
    gates: np.ndarray  # (B, T) float 0/1

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(
    srcs: Sequence[np.ndarray],
    tgts: Sequence[np.ndarray],
    gates: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Pad id sequences into a batch.

    ``gates[n]`` holds one 0/1 flag per decoder step (target words, then the
    end symbol); a flag array one short leaves the end step closed.  Without
    ``gates`` every step is open.
    """
    B = len(srcs)
    Tx = max(len(s) for s in srcs)
    T = max(len(t) for t in tgts) + 1
    src = np.zeros((B, Tx), dtype=np.int64)
    src_mask = np.zeros((B, Tx), dtype=bool)
    tgt_in = np.zeros((B, T), dtype=np.int64)
    tgt_out = np.zeros((B, T), dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=bool)
    g = np.zeros((B, T))
    for n, (s, t) in enumerate(zip(srcs, tgts)):
        if len(s) == 0:
            raise ValueError("empty source sentence")
        src[n, : len(s)] = s
        src_mask[n, : len(s)] = True
        L = len(t)
        tgt_in[n, 0] = BOS_ID
        tgt_in[n, 1 : L + 1] = t
        tgt_out[n, :L] = t
        tgt_out[n, L] = EOS_ID
        tgt_mask[n, : L + 1] = True
        if gates is None:
            g[n, : L + 1] = 1.0
        else:
            gn = np.asarray(gates[n], dtype=float)
            g[n, : len(gn)] = gn
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask, g)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderStates:
    h_top: np.ndarray  # (B, Tx, d)
    mask: np.ndarray  # (B, Tx)
    proj: np.ndarray  # (B, Tx, A), h_top @ att.W2, cached for scoring
    final: list[tuple[np.ndarray, np.ndarray]]  # per layer; unused by the decoder

    def repeat(self, n: int) -> "EncoderStates":
        """Tile a single-sentence encoding across ``n`` rows (beam search)."""
        return EncoderStates(
            np.repeat(self.h_top, n, axis=0),
            np.repeat(self.mask, n, axis=0),
            np.repeat(self.proj, n, axis=0),
            [(np.repeat(h, n, axis=0), np.repeat(c, n, axis=0)) for h, c in self.final],
        )


def _encode(params: ModelParams, src, mask, training, rng):
    cfg = params.config
    if np.any(src < 0) or np.any(src >= cfg.src_vocab):
        raise IndexError("source id outside vocabulary; map OOV words to UNK first")
    x = params["src_emb"][src]
    drop_masks = []
    caches = []
    final = []
    for k in range(cfg.layers):
        x, m = tc.dropout(x, cfg.dropout, training, rng)
        drop_masks.append(m)
        x, last, cache = tc.lstm_layer(x, params.lstm("enc", k))
        caches.append(cache)
        final.append(last)
    enc = EncoderStates(x, mask, x @ params["att.W2"], final)
    return enc, (drop_masks, caches)


def encode(source, params: ModelParams, training: bool = False, rng=None) -> EncoderStates:
    """Run the stacked encoder over one sentence (1-D ids) or a padded batch."""
    src = np.asarray(source, dtype=np.int64)
    if src.ndim == 1:
        if src.size == 0:
            raise ValueError("empty source sentence")
        src = src[None, :]
    mask = np.ones(src.shape, dtype=bool)
    enc, _ = _encode(params, src, mask, training, rng)
    return enc


def encode_batch(params: ModelParams, batch: Batch, training=False, rng=None) -> EncoderStates:
    return _encode(params, batch.src, batch.src_mask, training, rng)[0]


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def top(self) -> np.ndarray:
        return self.layers[-1][0]

    def select(self, rows) -> "DecoderState":
        return DecoderState([(h[rows], c[rows]) for h, c in self.layers])


def init_decoder_state(m: int, d: int, batch: int = 1) -> DecoderState:
    """All-zero (h, c) for every decoder layer, whatever the source."""
    if m < 1 or d < 1:
        raise ValueError("layer count and hidden size must be positive")
    return DecoderState([(np.zeros((batch, d)), np.zeros((batch, d))) for _ in range(m)])


@dataclass
class AttentionResult:
    scores: np.ndarray  # (B, Tx)
    weights: np.ndarray  # (B, Tx)
    context: np.ndarray  # (B, d)


def attention(z_top, enc: EncoderStates, gate, params: ModelParams, _cache: list | None = None):
    """Additive scoring v . tanh(W1 z + W2 h_j), masked softmax over source
    positions, context zeroed where ``gate`` is closed.

    ``gate`` is a bool/0-1 scalar or a per-row array.
    """
    z = np.atleast_2d(z_top)
    g = np.broadcast_to(np.asarray(gate, dtype=float), (z.shape[0],))
    q = z @ params["att.W1"]
    pre = np.tanh(q[:, None, :] + enc.proj)
    scores = pre @ params["att.v"]
    weights, _ = tc.softmax(scores, enc.mask)
    ctx = np.einsum("bj,bjd->bd", weights, enc.h_top)
    context = ctx * g[:, None]
    if _cache is not None:
        _cache.extend([z, pre, weights, g])
    return AttentionResult(scores, weights, context)


def _decoder_step(prev, state, enc, gate, params, training, rng, vmask=None, want_cache=False):
    cfg = params.config
    prev = np.atleast_1d(np.asarray(prev, dtype=np.int64))
    x = params["tgt_emb"][prev]
    drop_masks = []
    lstm_caches = []
    new_layers = []
    for k in range(cfg.layers):
        x, m = tc.dropout(x, cfg.dropout, training, rng)
        drop_masks.append(m)
        h0, c0 = state.layers[k]
        h, c, cache = tc.lstm_cell(x, h0, c0, params.lstm("dec", k))
        lstm_caches.append(cache)
        new_layers.append((h, c))
        x = h
    z = x
    att_cache: list | None = [] if want_cache else None
    att = attention(z, enc, gate, params, att_cache)
    zd, zmask = tc.dropout(z, cfg.dropout, training, rng)
    o_in = np.concatenate([zd, att.context], axis=1)
    logits = o_in @ params["out.W"] + params["out.b"]
    logp, prob = tc.log_softmax(logits, vmask)
    cache = (drop_masks, lstm_caches, att_cache, zmask, o_in, prob) if want_cache else None
    return logp, att, DecoderState(new_layers), cache


def decoder_step(prev_word, state: DecoderState, enc: EncoderStates, gate, params: ModelParams,
                 training: bool = False, rng=None, vocab_mask=None):
    """Feed the previous target word, return (log-probs, attention, new state).

    ``vocab_mask`` restricts the softmax to admissible target ids.
    """
    logp, att, new_state, _ = _decoder_step(prev_word, state, enc, gate, params, training, rng, vocab_mask)
    return logp, att, new_state


# ---------------------------------------------------------------------------
# full forward / backward over a batch


@dataclass
class ForwardResult:
    logp_target: np.ndarray  # (B, T) log p(y_i), zero on padding
    attn: np.ndarray  # (B, T, Tx)
    contexts: np.ndarray  # (B, T, d)
    cache: tuple | None = None


def forward(params: ModelParams, batch: Batch, training: bool = False, rng=None,
            keep_cache: bool = True) -> ForwardResult:
    """Teacher-forced pass over a whole batch.

    The decoder LSTM reads only target embeddings, so each layer runs as one
    sequence kernel and attention is evaluated for all steps at once.
    """
    cfg = params.config
    enc, enc_cache = _encode(params, batch.src, batch.src_mask, training, rng)
    x = params["tgt_emb"][batch.tgt_in]
    drop_masks = []
    caches = []
    for k in range(cfg.layers):
        x, m = tc.dropout(x, cfg.dropout, training, rng)
        drop_masks.append(m)
        x, _, cache = tc.lstm_layer(x, params.lstm("dec", k))
        caches.append(cache)
    z = x  # (B, T, d)

    q = z @ params["att.W1"]  # (B, T, A)
    pre = np.tanh(q[:, :, None, :] + enc.proj[:, None, :, :])  # (B, T, Tx, A)
    scores = pre @ params["att.v"]
    a, _ = tc.softmax(scores, enc.mask[:, None, :])
    ctx = np.einsum("btj,bjd->btd", a, enc.h_top)
    g = batch.gates[:, :, None]
    context = ctx * g

    zd, zmask = tc.dropout(z, cfg.dropout, training, rng)
    o_in = np.concatenate([zd, context], axis=-1)
    logits = o_in @ params["out.W"] + params["out.b"]
    logp, prob = tc.log_softmax(logits)
    logp_t = np.take_along_axis(logp, batch.tgt_out[:, :, None], axis=-1)[:, :, 0] * batch.tgt_mask
    cache = None
    if keep_cache:
        cache = (enc, enc_cache, drop_masks, caches, z, pre, a, zmask, o_in, prob)
    return ForwardResult(logp_t, a, context, cache)


def backward(params: ModelParams, batch: Batch, fwd: ForwardResult,
             d_logp: np.ndarray, d_attn: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar given its partials wrt ``fwd.logp_target`` (B, T)
    and wrt the attention weights ``fwd.attn`` (B, T, Tx)."""
    cfg = params.config
    d = cfg.hidden
    enc, (enc_drop, enc_caches), drop_masks, caches, z, pre, a, zmask, o_in, prob = fwd.cache
    grads = {}

    coef = d_logp * batch.tgt_mask  # (B, T)
    dlogits = -prob * coef[:, :, None]
    np.put_along_axis(
        dlogits, batch.tgt_out[:, :, None],
        np.take_along_axis(dlogits, batch.tgt_out[:, :, None], axis=-1) + coef[:, :, None], axis=-1,
    )
    V = dlogits.shape[-1]
    grads["out.W"] = o_in.reshape(-1, 2 * d).T @ dlogits.reshape(-1, V)
    grads["out.b"] = dlogits.sum(axis=(0, 1))
    do_in = dlogits @ params["out.W"].T
    dz = tc.dropout_backward(do_in[..., :d], zmask)
    dctx = do_in[..., d:] * batch.gates[:, :, None]

    da = np.einsum("btd,bjd->btj", dctx, enc.h_top)
    if d_attn is not None:
        da = da + d_attn
    d_htop = np.einsum("btj,btd->bjd", a, dctx)
    ds = tc.softmax_backward(da, a)
    grads["att.v"] = np.einsum("btj,btja->a", ds, pre)
    dpre = ds[..., None] * params["att.v"] * (1.0 - pre * pre)  # (B, T, Tx, A)
    d_proj = dpre.sum(axis=1)
    dq = dpre.sum(axis=2)
    grads["att.W1"] = z.reshape(-1, d).T @ dq.reshape(-1, cfg.attn)
    dz = dz + dq @ params["att.W1"].T
    grads["att.W2"] = enc.h_top.reshape(-1, d).T @ d_proj.reshape(-1, cfg.attn)
    d_htop += d_proj @ params["att.W2"].T

    dx = dz
    for k in reversed(range(cfg.layers)):
        dx, _, _, dW, dU, db = tc.lstm_layer_backward(dx, caches[k], params.lstm("dec", k))
        grads[f"dec{k}.W"], grads[f"dec{k}.U"], grads[f"dec{k}.b"] = dW, dU, db
        dx = tc.dropout_backward(dx, drop_masks[k])
    grads["tgt_emb"] = np.zeros_like(params["tgt_emb"])
    np.add.at(grads["tgt_emb"], batch.tgt_in, dx)

    dx = d_htop
    for k in reversed(range(cfg.layers)):
        dx, _, _, dW, dU, db = tc.lstm_layer_backward(dx, enc_caches[k], params.lstm("enc", k))
        grads[f"enc{k}.W"], grads[f"enc{k}.U"], grads[f"enc{k}.b"] = dW, dU, db
        dx = tc.dropout_backward(dx, enc_drop[k])
    grads["src_emb"] = np.zeros_like(params["src_emb"])
    np.add.at(grads["src_emb"], batch.src, dx)
    return {name: grads[name] for name in params.tensors}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, meta: Mapping | None = None) -> Path:
    """Write ``manifest.json`` plus a raw little-endian float64 sidecar."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / PAYLOAD, "wb") as fh:
        for name, arr in params.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(data)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {
        "format": "partalign-checkpoint/1",
        "dtype": "float64-le",
        "payload": PAYLOAD,
        "tensors": entries,
        "model": asdict(params.config),
        "vocab": vocab.to_dict(),
        "meta": dict(meta or {}),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                encoding="utf-8")
    return out


def load_checkpoint(path) -> tuple[ModelParams, Vocabulary, dict]:
    src = Path(path)
    try:
        manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
        raw = (src / manifest["payload"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {src}: {exc}") from exc
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    params = ModelParams(ModelConfig(**manifest["model"]), tensors)
    return params, Vocabulary.from_dict(manifest["vocab"]), manifest.get("meta", {})
