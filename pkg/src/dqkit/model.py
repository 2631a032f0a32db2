"""A small encoder-decoder transformer that exposes per-layer hidden states.

Pre-norm blocks, sinusoidal positions, GELU feed-forward, no biases on the
projection matrices (layer norms keep gain/bias). Weight matrices are stored
as (in, out) so activations compose as x @ W.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_enc_layers: int
    n_dec_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_len: int
    activation: str = "gelu"  # or "relu"

    def __post_init__(self):
        for name in ("n_enc_layers", "n_dec_layers", "d_model", "n_heads",
                     "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.activation not in ("gelu", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Reference configuration at the scale of the full-size teacher
# (12/12 layers, width 768, 12 heads, 3072 feed-forward).
FULL_SCALE_CONFIG = dict(n_enc_layers=12, n_dec_layers=12, d_model=768,
                          n_heads=12, d_ff=3072, max_len=448)

# Desk-scale defaults: teacher deeper and wider than the student so the
# matcher must handle M < N and differing hidden widths.
def desk_teacher_config(vocab_size: int, max_len: int = 64) -> ModelConfig:
    return ModelConfig(n_enc_layers=4, n_dec_layers=4, d_model=64, n_heads=4,
                       d_ff=128, vocab_size=vocab_size, max_len=max_len)


def desk_student_config(vocab_size: int, max_len: int = 64) -> ModelConfig:
    return ModelConfig(n_enc_layers=2, n_dec_layers=2, d_model=32, n_heads=4,
                       d_ff=64, vocab_size=vocab_size, max_len=max_len)


@dataclass
class LayerActivations:
    encoder_hiddens: list  # one Tensor (src_len x d_model) per encoder layer
    decoder_hiddens: list  # one Tensor (tgt_len x d_model) per decoder layer
    logits: Tensor  # tgt_len x vocab


@dataclass
class BatchActivations:
    """Activations for a packed batch: items are concatenated row-wise and
    kept independent by block-structured attention masks."""
    encoder_hiddens: list  # packed (sum src_len) x d_model per layer
    decoder_hiddens: list  # packed (sum tgt_len) x d_model per layer
    logits: Tensor  # packed (sum tgt_len) x vocab
    src_offsets: list  # row offsets of each item, len n_items + 1
    tgt_offsets: list


def param_count(config: ModelConfig) -> int:
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    enc = 4 * d * d + 2 * d * dff + 4 * d  # attn + ff + two layer norms
    dec = 8 * d * d + 2 * d * dff + 6 * d  # self + cross attn + ff + three norms
    return (v * d  # shared embedding
            + config.n_enc_layers * enc + config.n_dec_layers * dec
            + 4 * d  # final encoder/decoder norms
            + d * v)  # output projection


def _sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class SeqModel:
    """Parameter container plus forward pass. `role` is "teacher" or "student"."""

    def __init__(self, config: ModelConfig, role: str = "student", seed: int = 0):
        self.config = config
        self.role = role
        self.params: dict[str, Tensor] = {}
        self._pos = _sinusoidal_positions(config.max_len, config.d_model)
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    def _mat(self, rng, rows, cols) -> Tensor:
        bound = 1.0 / np.sqrt(rows)
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                      requires_grad=True)

    def _norm(self, name, d):
        self.params[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)

    def _init_params(self, rng):
        c = self.config
        d, dff = c.d_model, c.d_ff
        self.params["emb"] = self._mat(rng, c.vocab_size, d)
        for i in range(c.n_enc_layers):
            p = f"enc.{i}"
            self._norm(f"{p}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                self.params[f"{p}.attn.{w}"] = self._mat(rng, d, d)
            self._norm(f"{p}.ln2", d)
            self.params[f"{p}.ff.w1"] = self._mat(rng, d, dff)
            self.params[f"{p}.ff.w2"] = self._mat(rng, dff, d)
        self._norm("enc.final", d)
        for i in range(c.n_dec_layers):
            p = f"dec.{i}"
            self._norm(f"{p}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                self.params[f"{p}.self.{w}"] = self._mat(rng, d, d)
            self._norm(f"{p}.ln2", d)
            for w in ("wq", "wk", "wv", "wo"):
                self.params[f"{p}.cross.{w}"] = self._mat(rng, d, d)
            self._norm(f"{p}.ln3", d)
            self.params[f"{p}.ff.w1"] = self._mat(rng, d, dff)
            self.params[f"{p}.ff.w2"] = self._mat(rng, dff, d)
        self._norm("dec.final", d)
        self.params["out.w"] = self._mat(rng, d, c.vocab_size)

    # -- parameter bookkeeping ------------------------------------------------

    def trainable(self, freeze_encoder: bool = False) -> dict:
        out = {}
        for name, p in self.params.items():
            if freeze_encoder and name.startswith("enc."):
                continue
            out[name] = p
        return out

    def set_trainable(self, freeze_encoder: bool = False) -> None:
        trainable = self.trainable(freeze_encoder)
        for name, p in self.params.items():
            p.requires_grad = name in trainable

    def freeze_all(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def projection_names(self, scope: str = "all") -> list:
        """Names of the linear projection matrices (the quantization targets)."""
        names = []
        for name in self.params:
            if name == "out.w" or ".ln" in name or name.endswith((".g", ".b")) \
                    or name == "emb":
                continue
            if scope == "decoder" and not name.startswith("dec."):
                continue
            if scope == "encoder" and not name.startswith("enc."):
                continue
            names.append(name)
        return names

    def representative_weights(self, part: str = "dec") -> list:
        """One weight matrix per transformer block (the feed-forward first
        projection), used by quantization-guided matching."""
        n = self.config.n_dec_layers if part == "dec" else self.config.n_enc_layers
        return [self.params[f"{part}.{i}.ff.w1"] for i in range(n)]

    # -- forward --------------------------------------------------------------

    def _activation(self, x):
        return T.gelu(x) if self.config.activation == "gelu" else T.relu(x)

    def _attention(self, q_in, kv_in, prefix, mask):
        c = self.config
        d_h = c.d_model // c.n_heads
        q = T.matmul(q_in, self.params[f"{prefix}.wq"])
        k = T.matmul(kv_in, self.params[f"{prefix}.wk"])
        v = T.matmul(kv_in, self.params[f"{prefix}.wv"])
        heads = []
        for h in range(c.n_heads):
            lo, hi = h * d_h, (h + 1) * d_h
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(d_h))
            if mask is not None:
                scores = T.add(scores, mask)
            heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
        return T.matmul(T.concat(heads, axis=1), self.params[f"{prefix}.wo"])

    def _embed(self, tokens):
        tokens = list(tokens)
        if len(tokens) > self.config.max_len:
            raise ConfigurationError(
                f"sequence length {len(tokens)} exceeds max_len {self.config.max_len}"
            )
        x = T.embedding_lookup(self.params["emb"], tokens)
        return T.add(x, Tensor(self._pos[: len(tokens)]))

    def _ff(self, x, prefix):
        h = T.matmul(x, self.params[f"{prefix}.w1"])
        return T.matmul(self._activation(h), self.params[f"{prefix}.w2"])

    def _forward_core(self, h, y, enc_mask, dec_self_mask, cross_mask):
        c = self.config
        enc_hiddens = []
        for i in range(c.n_enc_layers):
            p = f"enc.{i}"
            normed = T.layer_norm(h, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            h = T.add(h, self._attention(normed, normed, f"{p}.attn", enc_mask))
            f = self._ff(T.layer_norm(h, self.params[f"{p}.ln2.g"],
                                      self.params[f"{p}.ln2.b"]), f"{p}.ff")
            h = T.add(h, f)
            enc_hiddens.append(h)
        memory = T.layer_norm(h, self.params["enc.final.g"], self.params["enc.final.b"])

        dec_hiddens = []
        for i in range(c.n_dec_layers):
            p = f"dec.{i}"
            normed = T.layer_norm(y, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            y = T.add(y, self._attention(normed, normed, f"{p}.self", dec_self_mask))
            normed = T.layer_norm(y, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            y = T.add(y, self._attention(normed, memory, f"{p}.cross", cross_mask))
            normed = T.layer_norm(y, self.params[f"{p}.ln3.g"], self.params[f"{p}.ln3.b"])
            y = T.add(y, self._ff(normed, f"{p}.ff"))
            dec_hiddens.append(y)
        y = T.layer_norm(y, self.params["dec.final.g"], self.params["dec.final.b"])
        logits = T.matmul(y, self.params["out.w"])
        return enc_hiddens, dec_hiddens, logits

    def forward_with_hiddens(self, src_tokens, tgt_tokens) -> LayerActivations:
        h = self._embed(src_tokens)
        y = self._embed(tgt_tokens)
        tgt_len = len(tgt_tokens)
        causal = Tensor(np.triu(np.full((tgt_len, tgt_len), -1e9), k=1))
        enc, dec, logits = self._forward_core(h, y, None, causal, None)
        return LayerActivations(enc, dec, logits)

    def _embed_packed(self, seqs):
        """Embed a list of sequences concatenated row-wise, with per-item
        positional encodings; returns (Tensor, offsets)."""
        offsets = [0]
        pos_idx = []
        tokens = []
        for seq in seqs:
            seq = list(seq)
            if len(seq) > self.config.max_len:
                raise ConfigurationError(
                    f"sequence length {len(seq)} exceeds max_len {self.config.max_len}"
                )
            tokens.extend(seq)
            pos_idx.extend(range(len(seq)))
            offsets.append(offsets[-1] + len(seq))
        x = T.embedding_lookup(self.params["emb"], tokens)
        return T.add(x, Tensor(self._pos[pos_idx])), offsets

    @staticmethod
    def _block_mask(q_offsets, k_offsets, causal=False) -> np.ndarray:
        """Additive attention mask: -1e9 outside each item's own block (and,
        when causal, above the diagonal within blocks)."""
        mask = np.full((q_offsets[-1], k_offsets[-1]), -1e9)
        for (qa, qb), (ka, kb) in zip(zip(q_offsets, q_offsets[1:]),
                                      zip(k_offsets, k_offsets[1:])):
            block = np.triu(np.full((qb - qa, kb - ka), -1e9), k=1) if causal \
                else np.zeros((qb - qa, kb - ka))
            mask[qa:qb, ka:kb] = block
        return mask

    def forward_batch_with_hiddens(self, src_seqs, tgt_seqs) -> BatchActivations:
        """Forward over a packed batch. Per-item results agree with
        forward_with_hiddens on each item up to floating-point round-off."""
        if len(src_seqs) != len(tgt_seqs):
            raise ConfigurationError(
                f"batch mismatch: {len(src_seqs)} sources, {len(tgt_seqs)} targets"
            )
        h, src_off = self._embed_packed(src_seqs)
        y, tgt_off = self._embed_packed(tgt_seqs)
        enc_mask = Tensor(self._block_mask(src_off, src_off))
        dec_mask = Tensor(self._block_mask(tgt_off, tgt_off, causal=True))
        cross_mask = Tensor(self._block_mask(tgt_off, src_off))
        enc, dec, logits = self._forward_core(h, y, enc_mask, dec_mask, cross_mask)
        return BatchActivations(enc, dec, logits, src_off, tgt_off)

    def greedy_decode(self, src_tokens, max_steps: int, bos_id: int, eos_id: int):
        """Argmax decoding; ties break to the lowest token id (first argmax)."""
        ys = [bos_id]
        out = []
        for _ in range(max_steps):
            logits = self.forward_with_hiddens(src_tokens, ys).logits
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ys.append(nxt)
            if len(ys) >= self.config.max_len:
                break
        return out

    def greedy_decode_batch(self, src_seqs, max_steps: int, bos_id: int,
                            eos_id: int) -> list:
        """Batched greedy decoding; agrees with greedy_decode per item."""
        n = len(src_seqs)
        ys = [[bos_id] for _ in range(n)]
        outs = [[] for _ in range(n)]
        active = list(range(n))
        for _ in range(max_steps):
            if not active:
                break
            acts = self.forward_batch_with_hiddens(
                [src_seqs[i] for i in active], [ys[i] for i in active])
            logits = acts.logits.data
            still = []
            for pos, i in enumerate(active):
                last_row = logits[acts.tgt_offsets[pos + 1] - 1]
                nxt = int(np.argmax(last_row))
                if nxt == eos_id:
                    continue
                outs[i].append(nxt)
                ys[i].append(nxt)
                if len(ys[i]) < self.config.max_len:
                    still.append(i)
            active = still
        return outs


def clone_params(model: SeqModel) -> dict:
    return {k: v.data.copy() for k, v in model.params.items()}
