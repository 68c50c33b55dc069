"""A small trainable transformer encoder with exact gradients.

Post-norm residual blocks with erf-GeLU feed-forwards, learned positional
embeddings, and a final layer norm. No segment embeddings: separator tokens
carry sentence boundaries. All arrays are float64 so finite-difference
gradient checks are meaningful.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)

INIT_STD = 0.02
LN_EPS = 1e-12

CHECKPOINT_MAGIC = b"HOPQACKP"
CHECKPOINT_VERSION = 1


class Vocab:
    """Dense token -> id map with reserved special tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(SPECIALS)}
        for tok in tokens:
            if tok not in self._ids:
                self._ids[tok] = len(self._ids)
        self.pad_id = self._ids[PAD]
        self.unk_id = self._ids[UNK]
        self.cls_id = self._ids[CLS]
        self.sep_id = self._ids[SEP]

    @classmethod
    def build(cls, token_seqs: Iterable[Sequence[str]]) -> "Vocab":
        """Deterministic vocabulary: the sorted union of all tokens."""
        seen: set[str] = set()
        for seq in token_seqs:
            seen.update(seq)
        return cls(sorted(seen - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(tok, self.unk_id) for tok in tokens]

    def tokens(self) -> list[str]:
        """All tokens in id order (specials first)."""
        return sorted(self._ids, key=self._ids.get)


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 256
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if self.vocab_size < len(SPECIALS):
            raise ValueError("vocab_size must cover the special tokens")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("d_model", "n_heads", "n_layers", "d_ff", "max_len", "vocab_size", "seed")}


@dataclass
class EncoderParams:
    """All trainable arrays (encoder plus any attached head) keyed by name."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class EncodeOutput:
    hidden: np.ndarray  # (len, d_model)
    cls: np.ndarray     # (d_model,)


def encoder_array_names(config: EncoderConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        names += [p + n for n in (
            "attn.Wq", "attn.bq", "attn.Wk", "attn.bk", "attn.Wv", "attn.bv",
            "attn.Wo", "attn.bo", "ln1.g", "ln1.b",
            "ff.W1", "ff.b1", "ff.W2", "ff.b2", "ln2.g", "ln2.b")]
    names += ["final_ln.g", "final_ln.b"]
    return names


def init_params(config: EncoderConfig) -> EncoderParams:
    """Scaled-normal weights (std 0.02), unit layer-norm gains, zero biases.

    Deterministic for a fixed config seed; arrays are created in a fixed
    order so two inits with the same seed are bit-identical.
    """
    rng = np.random.default_rng(config.seed)
    d, dff = config.d_model, config.d_ff
    arrays: dict[str, np.ndarray] = {}

    def normal(shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    arrays["tok_emb"] = normal((config.vocab_size, d))
    arrays["pos_emb"] = normal((config.max_len, d))
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        for name in ("attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"):
            arrays[p + name] = normal((d, d))
        for name in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
            arrays[p + name] = np.zeros(d)
        arrays[p + "ff.W1"] = normal((d, dff))
        arrays[p + "ff.b1"] = np.zeros(dff)
        arrays[p + "ff.W2"] = normal((dff, d))
        arrays[p + "ff.b2"] = np.zeros(d)
        for name in ("ln1.g", "ln2.g"):
            arrays[p + name] = np.ones(d)
        for name in ("ln1.b", "ln2.b"):
            arrays[p + name] = np.zeros(d)
    arrays["final_ln.g"] = np.ones(d)
    arrays["final_ln.b"] = np.zeros(d)
    return EncoderParams(config=config, arrays=arrays)


def param_tensors(params: EncoderParams) -> dict[str, Tensor]:
    """Wrap every named array as a gradient-tracking leaf tensor."""
    return {name: ad.tensor(arr, requires_grad=True) for name, arr in params.arrays.items()}


def encode_graph(tensors: Mapping[str, Tensor], config: EncoderConfig,
                 token_ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
    """Forward pass over a (batch, len) id matrix; returns (batch, len, d)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(attention_mask, dtype=bool)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise ValueError("token_ids and attention_mask must be matching 2-d arrays")
    batch, length = ids.shape
    if length > config.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {config.max_len}")
    if ids.max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of range for the vocabulary")

    d, heads = config.d_model, config.n_heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    key_mask = mask.reshape(batch, 1, 1, length)

    x = ad.add(ad.gather(tensors["tok_emb"], ids),
               ad.gather(tensors["pos_emb"], np.arange(length)))
    for layer in range(config.n_layers):
        p = f"layers.{layer}."

        def proj(name, src):
            return ad.add(ad.matmul(src, tensors[p + "attn.W" + name]),
                          tensors[p + "attn.b" + name])

        def split_heads(t):
            return ad.transpose(ad.reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

        q = split_heads(proj("q", x))
        k = split_heads(proj("k", x))
        v = split_heads(proj("v", x))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
        weights = ad.masked_softmax(scores, key_mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (batch, length, d))
        attn_out = ad.add(ad.matmul(ctx, tensors[p + "attn.Wo"]), tensors[p + "attn.bo"])
        x = ad.layer_norm(ad.add(x, attn_out), tensors[p + "ln1.g"], tensors[p + "ln1.b"], LN_EPS)
        ff = ad.gelu(ad.add(ad.matmul(x, tensors[p + "ff.W1"]), tensors[p + "ff.b1"]))
        ff = ad.add(ad.matmul(ff, tensors[p + "ff.W2"]), tensors[p + "ff.b2"])
        x = ad.layer_norm(ad.add(x, ff), tensors[p + "ln2.g"], tensors[p + "ln2.b"], LN_EPS)
    return ad.layer_norm(x, tensors["final_ln.g"], tensors["final_ln.b"], LN_EPS)


def encode(params: EncoderParams, token_ids: Sequence[int],
           attention_mask: Sequence[int] | None = None) -> EncodeOutput:
    """Encode one sequence; masked positions never influence unmasked ones."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("encode expects a single 1-d id sequence")
    mask = np.ones_like(ids) if attention_mask is None else np.asarray(attention_mask)
    tensors = {name: ad.tensor(arr) for name, arr in params.arrays.items()}
    hidden = encode_graph(tensors, params.config, ids[None, :], mask[None, :]).data[0]
    return EncodeOutput(hidden=hidden, cls=hidden[0])


def save_checkpoint(path: str | Path, model_type: str, config: EncoderConfig,
                    vocab: Vocab, arrays: Mapping[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, little-endian f8 arrays.

    Arrays are written in sorted-name order with shapes declared in the
    header, so files are byte-for-byte reproducible across platforms.
    """
    names = sorted(arrays)
    header = {
        "model_type": model_type,
        "config": config.to_dict(),
        "vocab": vocab.tokens()[len(SPECIALS):],
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[str, EncoderConfig, Vocab, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    config = EncoderConfig(**header["config"])
    vocab = Vocab(header["vocab"])
    return header["model_type"], config, vocab, arrays, header.get("extra", {})
