"""The multimodal core: audio encoder, modality adapter, and causal decoder LM.

Audio frames are projected into the embedding space, contextualized by a small
pre-norm transformer encoder, mean-pooled by the adapter into audio tokens,
and spliced into the decoder input at the audio placeholder positions. The
decoder is strictly causal and emits per-position vocabulary logits.

Everything is float64 and deterministically seeded; checkpoints serialize the
config plus named tensors (row-major float64, little-endian).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import MelSpectrogram, N_MELS
from .autodiff import Tensor
from .promptkit import AUDIO_ID, TokenSequence, VOCAB_SIZE

CHECKPOINT_MAGIC = b"AQMM"
CHECKPOINT_VERSION = 1

# positional code amplitude relative to unit-scale content vectors
_POS_SCALE = 0.3


class ConfigError(ValueError):
    """Raised for invalid model configurations."""


class NumericError(ValueError):
    """Raised when non-finite values enter or leave the network."""


class AlignmentError(ValueError):
    """Raised when audio tokens and placeholder positions disagree."""


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    adapter_stride: int = 4
    max_seq: int = 1024
    vocab: int = VOCAB_SIZE
    n_mels: int = N_MELS

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be positive and divisible by n_heads")
        if min(self.n_enc_layers, self.n_dec_layers, self.n_heads, self.d_ff, self.n_mels) < 1:
            raise ConfigError("layer, head, and width counts must be at least 1")
        if self.adapter_stride < 1:
            raise ConfigError("adapter_stride must be at least 1")
        if self.max_seq < 8:
            raise ConfigError("max_seq too small")
        if self.vocab != VOCAB_SIZE:
            raise ConfigError(f"vocab must be {VOCAB_SIZE} for the byte tokenizer")


@dataclass(frozen=True)
class AudioTokens:
    """Adapter output: one embedding vector per audio token."""

    vectors: np.ndarray  # [n_audio_tokens, d_model]

    def __post_init__(self):
        if not np.all(np.isfinite(self.vectors)):
            raise NumericError("audio token vectors contain non-finite values")

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]


from functools import lru_cache


@lru_cache(maxsize=32)
def _sinusoidal(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    dim = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * dim / d)
    pe = np.zeros((n_pos, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


@lru_cache(maxsize=32)
def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


class MultimodalModel:
    """Parameter container plus the forward graph builders.

    ``lora`` is populated by the lora module; when present, query/value
    projections add the low-rank update on the fly.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.lora = None  # set by lora.attach_lora

    # ----- parameter bookkeeping -----

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # ----- building blocks -----

    def _linear(self, x: Tensor, w_name: str, b_name: str, training: bool, rng) -> Tensor:
        out = ad.add(ad.matmul(x, self.params[w_name]), self.params[b_name])
        lora = self.lora
        if lora is not None and lora.enabled and w_name in lora.pairs:
            a_mat, b_mat = lora.pairs[w_name]
            inp = x
            if training and lora.config.dropout_p > 0.0:
                if rng is None:
                    raise ValueError("training-mode forward needs an rng for adapter dropout")
                inp = ad.dropout(x, lora.config.dropout_p, rng)
            delta = ad.mul(ad.matmul(ad.matmul(inp, a_mat), b_mat), lora.scale)
            out = ad.add(out, delta)
        return out

    def _attention(self, x: Tensor, prefix: str, causal: bool, training: bool, rng) -> Tensor:
        cfg = self.cfg
        batch, seq_len, d = x.data.shape
        heads, dk = cfg.n_heads, d // cfg.n_heads

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (batch, seq_len, heads, dk)), (0, 2, 1, 3))

        q = split(self._linear(x, f"{prefix}.attn.wq", f"{prefix}.attn.bq", training, rng))
        k = split(self._linear(x, f"{prefix}.attn.wk", f"{prefix}.attn.bk", training, rng))
        v = split(self._linear(x, f"{prefix}.attn.wv", f"{prefix}.attn.bv", training, rng))

        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.softmax(
            scores,
            axis=-1,
            scale=1.0 / np.sqrt(dk),
            shift=_causal_mask(seq_len) if causal else None,
        )
        mixed = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (batch, seq_len, d))
        return self._linear(merged, f"{prefix}.attn.wo", f"{prefix}.attn.bo", training, rng)

    def _ffn(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        hidden = ad.gelu(self._linear(x, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1", training, rng))
        return self._linear(hidden, f"{prefix}.ffn.w2", f"{prefix}.ffn.b2", training, rng)

    def _block(self, x: Tensor, prefix: str, causal: bool, training: bool, rng) -> Tensor:
        normed = ad.layer_norm(x, self.params[f"{prefix}.ln1.g"], self.params[f"{prefix}.ln1.b"])
        x = ad.add(x, self._attention(normed, prefix, causal, training, rng))
        normed = ad.layer_norm(x, self.params[f"{prefix}.ln2.g"], self.params[f"{prefix}.ln2.b"])
        return ad.add(x, self._ffn(normed, prefix, training, rng))

    def _pool(self, x: Tensor) -> Tensor:
        stride = self.cfg.adapter_stride
        batch, n_frames, d = x.data.shape
        n_full, tail = divmod(n_frames, stride)
        parts = []
        if n_full:
            head = ad.narrow(x, 1, 0, n_full * stride)
            parts.append(ad.mean(ad.reshape(head, (batch, n_full, stride, d)), axis=2))
        if tail:
            parts.append(ad.mean(ad.narrow(x, 1, n_full * stride, tail), axis=1, keepdims=True))
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    # ----- graph builders -----

    def encode_frames(self, mel: Tensor, training: bool = False, rng=None) -> Tensor:
        """Mel frames [B, F, n_mels] -> audio tokens [B, ceil(F/stride), d]."""
        x = ad.add(
            ad.matmul(mel, self.params["enc.frame_proj.w"]),
            self.params["enc.frame_proj.b"],
        )
        x = ad.add(x, Tensor(_sinusoidal(mel.data.shape[1], self.cfg.d_model)))
        for i in range(self.cfg.n_enc_layers):
            x = self._block(x, f"enc.layers.{i}", causal=False, training=training, rng=rng)
        x = ad.layer_norm(x, self.params["enc.ln_f.g"], self.params["enc.ln_f.b"])
        pooled = self._pool(x)
        return ad.add(
            ad.matmul(pooled, self.params["adapter.proj.w"]),
            self.params["adapter.proj.b"],
        )

    def decode_hidden(self, audio: Tensor, tokens: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Audio tokens [B, n_a, d] plus token ids [B, T] -> final hidden [B, T, d]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        batch, seq_len = tokens.shape
        if seq_len > self.cfg.max_seq:
            raise ConfigError(f"sequence length {seq_len} exceeds max_seq {self.cfg.max_seq}")
        n_audio = audio.data.shape[1]
        expected = np.zeros(seq_len, dtype=bool)
        expected[1 : 1 + n_audio] = True
        if not np.all((tokens == AUDIO_ID) == expected[None, :]):
            raise AlignmentError(
                "audio placeholders must occupy positions 1..n_audio and match the token count"
            )

        # sqrt(d) embedding gain keeps byte identity visible next to the
        # positional code; audio tokens come in at their natural scale
        emb = ad.mul(ad.embedding(self.params["dec.tok_emb"], tokens), np.sqrt(self.cfg.d_model))
        pieces = [ad.narrow(emb, 1, 0, 1), audio]
        if seq_len > 1 + n_audio:
            pieces.append(ad.narrow(emb, 1, 1 + n_audio, seq_len - 1 - n_audio))
        x = ad.add(
            ad.concat(pieces, axis=1),
            Tensor(_POS_SCALE * _sinusoidal(seq_len, self.cfg.d_model)),
        )
        for i in range(self.cfg.n_dec_layers):
            x = self._block(x, f"dec.layers.{i}", causal=True, training=training, rng=rng)
        return ad.layer_norm(x, self.params["dec.ln_f.g"], self.params["dec.ln_f.b"])

    def head_logits(self, hidden: Tensor) -> Tensor:
        return ad.add(ad.matmul(hidden, self.params["head.w"]), self.params["head.b"])

    def decode_tokens(self, audio: Tensor, tokens: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Audio tokens [B, n_a, d] plus token ids [B, T] -> logits [B, T, vocab]."""
        return self.head_logits(self.decode_hidden(audio, tokens, training=training, rng=rng))


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def xavier(name: str, fan_in: int, fan_out: int):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)

    def bias(name: str, n: int):
        params[name] = Tensor(np.zeros(n), requires_grad=True)

    def block(prefix: str):
        d, ff = cfg.d_model, cfg.d_ff
        params[f"{prefix}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        bias(f"{prefix}.ln1.b", d)
        for proj in ("wq", "wk", "wv", "wo"):
            xavier(f"{prefix}.attn.{proj}", d, d)
            bias(f"{prefix}.attn.{proj.replace('w', 'b')}", d)
        params[f"{prefix}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        bias(f"{prefix}.ln2.b", d)
        xavier(f"{prefix}.ffn.w1", d, ff)
        bias(f"{prefix}.ffn.b1", ff)
        xavier(f"{prefix}.ffn.w2", ff, d)
        bias(f"{prefix}.ffn.b2", d)

    xavier("enc.frame_proj.w", cfg.n_mels, cfg.d_model)
    bias("enc.frame_proj.b", cfg.d_model)
    for i in range(cfg.n_enc_layers):
        block(f"enc.layers.{i}")
    params["enc.ln_f.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
    bias("enc.ln_f.b", cfg.d_model)
    xavier("adapter.proj.w", cfg.d_model, cfg.d_model)
    bias("adapter.proj.b", cfg.d_model)

    params["dec.tok_emb"] = Tensor(rng.normal(0.0, 0.02, (cfg.vocab, cfg.d_model)), requires_grad=True)
    for i in range(cfg.n_dec_layers):
        block(f"dec.layers.{i}")
    params["dec.ln_f.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
    bias("dec.ln_f.b", cfg.d_model)
    xavier("head.w", cfg.d_model, cfg.vocab)
    bias("head.b", cfg.vocab)
    return params


def init_model(cfg: ModelConfig, seed: int) -> MultimodalModel:
    """Deterministic initialization: Xavier-uniform linears, zero biases,
    normal(0, 0.02) embeddings."""
    return MultimodalModel(cfg, _init_params(cfg, seed))


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    d, ff, v, mels = cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_mels
    per_block = 4 * d + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d)
    total = mels * d + d  # frame projection
    total += cfg.n_enc_layers * per_block + 2 * d  # encoder blocks + final norm
    total += d * d + d  # adapter projection
    total += v * d  # token embedding
    total += cfg.n_dec_layers * per_block + 2 * d
    total += d * v + v  # output head
    return total


def encode_audio(m: MultimodalModel, mel: MelSpectrogram) -> AudioTokens:
    """Run the audio encoder + adapter on one utterance (inference mode)."""
    if mel.frames.size == 0:
        raise ValueError("empty mel spectrogram")
    if not np.all(np.isfinite(mel.frames)):
        raise NumericError("mel spectrogram contains non-finite values")
    with ad.no_grad():
        out = m.encode_frames(Tensor(mel.frames[None]))
    return AudioTokens(vectors=out.data[0])


def forward(m: MultimodalModel, audio: AudioTokens, seq: TokenSequence) -> np.ndarray:
    """Per-position logits [len(seq), vocab] for one assembled sequence."""
    n_placeholders = int(np.sum(seq.tokens == AUDIO_ID))
    if n_placeholders != audio.n_tokens:
        raise AlignmentError(
            f"sequence has {n_placeholders} audio placeholders, got {audio.n_tokens} audio tokens"
        )
    with ad.no_grad():
        logits = m.decode_tokens(Tensor(audio.vectors[None]), seq.tokens[None])
    return logits.data[0]


# ----- checkpoint container -----


def write_tensor_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensor_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    return meta, tensors


def save_checkpoint(m: MultimodalModel, path) -> None:
    """Serialize config plus all tensors; adapter tensors (when attached)
    are stored under the lora.* namespace alongside the base weights."""
    meta = {"model_cfg": asdict(m.cfg), "lora_cfg": None}
    tensors = {name: t.data for name, t in m.params.items()}
    if m.lora is not None:
        meta["lora_cfg"] = m.lora.config_dict()
        for target, (a_mat, b_mat) in m.lora.pairs.items():
            tensors[f"lora.{target}.A"] = a_mat.data
            tensors[f"lora.{target}.B"] = b_mat.data
    write_tensor_container(path, meta, tensors)


def load_checkpoint(path) -> MultimodalModel:
    meta, tensors = read_tensor_container(path)
    if "model_cfg" not in meta:
        raise CheckpointError(f"{path}: missing model config")
    cfg = ModelConfig(**meta["model_cfg"])
    model = init_model(cfg, seed=0)
    for name, tensor in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"{tensors[name].shape} vs {tensor.data.shape}"
            )
        tensor.data = tensors[name].copy()
    if meta.get("lora_cfg"):
        from .lora import restore_adapters

        restore_adapters(model, meta["lora_cfg"], tensors)
    return model
