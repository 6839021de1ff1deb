"""Supervised fine-tuning: answer-masked loss, Adam, and the epoch loop.

The loss is mean cross-entropy over the positions that predict answer bytes
and the terminal EOS; prompt and audio positions contribute nothing. Gradients
come from the autodiff tape and can be audited here against central finite
differences. The whole pipeline is replayable: every random draw derives from
(config seed, epoch/batch indices).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, lora
from .audio import MelSpectrogram
from .autodiff import Tensor
from .corpus import Manifest, seed_words
from .model import MultimodalModel, NumericError, save_checkpoint
from .promptkit import (
    PAD_ID,
    TAG_ANSWER,
    TAG_SPECIAL,
    TEMPLATES,
    TokenSequence,
    assemble_sequence,
)
from . import autodiff as ad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PROMPT_MODES = ("P1", "P3", "MULTI")


class LossSpecError(ValueError):
    """Raised when a sequence has no answer region to supervise."""


class TrainDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 8
    prompt_mode: str = "MULTI"
    seed: int = 0
    grad_clip: float | None = None
    full_finetune: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    dev_accuracy: float
    dev_macro_f1: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochStats]

    def metrics_tuple(self) -> tuple:
        """The deterministic part (everything but wall-clock seconds)."""
        return tuple((r.epoch, r.loss, r.dev_accuracy, r.dev_macro_f1) for r in self.records)

    def to_csv(self, path) -> None:
        lines = ["epoch,loss,dev_acc,dev_mf1,seconds"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss:.10f},{r.dev_accuracy:.6f},{r.dev_macro_f1:.6f},{r.seconds:.3f}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class TrainBatch:
    mel: np.ndarray  # [B, F, n_mels], uniform frame count
    tokens: np.ndarray  # [B, T]
    tags: np.ndarray  # [B, T]
    audio: np.ndarray | None = None  # precomputed audio tokens [B, n_a, d]


def make_batch(mels: list[np.ndarray], seqs: list[TokenSequence],
               audio: list[np.ndarray] | None = None) -> TrainBatch:
    """Stack equal-length mel features and right-pad token sequences.

    ``audio`` carries precomputed encoder outputs for the frozen-encoder fast
    path (decoder-only adapters); gradients then stop at the decoder input.
    """
    frames = {m.shape[0] for m in mels}
    if len(frames) != 1:
        raise ValueError("make_batch requires a uniform mel frame count")
    max_len = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), max_len), PAD_ID, dtype=np.int64)
    tags = np.full((len(seqs), max_len), TAG_SPECIAL, dtype=np.int8)
    for i, seq in enumerate(seqs):
        tokens[i, : len(seq)] = seq.tokens
        tags[i, : len(seq)] = seq.segment_tags
    return TrainBatch(
        mel=np.stack(mels),
        tokens=tokens,
        tags=tags,
        audio=np.stack(audio) if audio is not None else None,
    )


def answer_loss_graph(logits: Tensor, tokens: np.ndarray, tags: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions predicting answer-tagged tokens."""
    batch, seq_len, vocab = logits.data.shape
    rows_b, rows_p = np.nonzero(tags == TAG_ANSWER)
    if rows_b.size == 0:
        raise LossSpecError("sequence has no answer region")
    flat = ad.reshape(logits, (batch * seq_len, vocab))
    picked = ad.take_rows(flat, rows_b * seq_len + (rows_p - 1))
    return ad.cross_entropy_mean(picked, tokens[rows_b, rows_p])


def answer_loss(logits: np.ndarray, seq: TokenSequence) -> float:
    """Loss for a single sequence given raw [T, vocab] logits."""
    value = answer_loss_graph(
        Tensor(np.asarray(logits)[None]), seq.tokens[None], seq.segment_tags[None]
    )
    return value.item()


def loss_graph(model: MultimodalModel, batch: TrainBatch, training: bool = False, rng=None) -> Tensor:
    """Training loss; the output head only runs on answer-predicting rows."""
    rows_b, rows_p = np.nonzero(batch.tags == TAG_ANSWER)
    if rows_b.size == 0:
        raise LossSpecError("batch has no answer region")
    if batch.audio is not None:
        audio = Tensor(batch.audio)
    else:
        audio = model.encode_frames(Tensor(batch.mel), training=training, rng=rng)
    hidden = model.decode_hidden(audio, batch.tokens, training=training, rng=rng)
    batch_size, seq_len, d = hidden.data.shape
    flat = ad.reshape(hidden, (batch_size * seq_len, d))
    picked = ad.take_rows(flat, rows_b * seq_len + (rows_p - 1))
    logits = model.head_logits(picked)
    return ad.cross_entropy_mean(logits, batch.tokens[rows_b, rows_p])


def backward(model: MultimodalModel, batch: TrainBatch, training: bool = True, rng=None):
    """Loss plus exact reverse-mode gradients for every trainable parameter."""
    trainable = lora.trainable_parameters(model)
    for tensor in trainable.values():
        tensor.grad = None
    loss = loss_graph(model, batch, training=training, rng=rng)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {loss.data}")
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in trainable.items()
    }
    return loss.item(), grads


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[name] / (1.0 - ADAM_BETA1**t)
        v_hat = state.v[name] / (1.0 - ADAM_BETA2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def save_adam_state(state: AdamState, path) -> None:
    from .model import write_tensor_container

    tensors = {f"m.{k}": v for k, v in state.m.items()}
    tensors.update({f"v.{k}": v for k, v in state.v.items()})
    write_tensor_container(path, {"step": state.step}, tensors)


def load_adam_state(path) -> AdamState:
    from .model import read_tensor_container

    meta, tensors = read_tensor_container(path)
    m = {k[2:]: v.copy() for k, v in tensors.items() if k.startswith("m.")}
    v = {k[2:]: v2.copy() for k, v2 in tensors.items() if k.startswith("v.")}
    return AdamState(step=int(meta["step"]), m=m, v=v)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def training_prompts(prompt_mode: str) -> list[tuple[str, str]]:
    if prompt_mode == "MULTI":
        return [("P1", TEMPLATES["P1"].texts[0]), ("P3", TEMPLATES["P3"].texts[0])]
    return [(prompt_mode, TEMPLATES[prompt_mode].texts[0])]


def build_examples(manifest: Manifest, prompt_mode: str) -> list[dict]:
    """(utterance x training prompt) pairs; MULTI doubles the dataset."""
    prompts = training_prompts(prompt_mode)
    examples = []
    for entry in sorted(manifest.entries, key=lambda e: e.utt_id):
        for prompt_id, text in prompts:
            examples.append(
                {
                    "utt_id": entry.utt_id,
                    "path": entry.path,
                    "answer": entry.label,
                    "prompt_id": prompt_id,
                    "prompt": text,
                }
            )
    return examples


def _grouped_subbatches(indices, mel_lengths):
    """Split a batch into runs with a uniform mel frame count, keeping order."""
    groups: dict[int, list[int]] = {}
    for idx in indices:
        groups.setdefault(mel_lengths[idx], []).append(idx)
    return [groups[k] for k in sorted(groups)]


def finetune(model: MultimodalModel, train_manifest: Manifest, dev_manifest: Manifest,
             cfg: TrainConfig, out_dir) -> tuple[MultimodalModel, TrainHistory]:
    """The supervised fine-tuning loop.

    Expects LoRA adapters attached unless cfg.full_finetune is set. Shuffles
    with a seeded generator each epoch, writes a checkpoint per epoch, and
    records dev accuracy / macro-F1 (constrained decoding) after each epoch.
    """
    from .backend import LocalBackend

    if len(train_manifest) == 0 or len(dev_manifest) == 0:
        raise ValueError("train and dev manifests must be non-empty")
    if model.lora is None and not cfg.full_finetune:
        raise ValueError("attach LoRA adapters first (or set full_finetune)")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples = build_examples(train_manifest, cfg.prompt_mode)
    mel_cache: dict[str, MelSpectrogram] = {}
    for ex in examples:
        if ex["path"] not in mel_cache:
            mel_cache[ex["path"]] = evaluation.load_features(ex["path"])
    stride = model.cfg.adapter_stride
    mel_lengths = [mel_cache[ex["path"]].n_frames for ex in examples]

    # decoder-only adapters leave the encoder frozen: encode each clip once
    encoder_frozen = model.lora is not None and not model.lora.config.include_encoder
    audio_cache: dict[str, np.ndarray] = {}
    if encoder_frozen:
        from .model import encode_audio

        for path, mel in mel_cache.items():
            audio_cache[path] = encode_audio(model, mel).vectors

    trainable = lora.trainable_parameters(model)
    state = init_adam(trainable)
    dev_prompt = "P3" if cfg.prompt_mode == "P3" else "P1"
    dev_backend = LocalBackend.from_model(model, name="in-training")

    history: list[EpochStats] = []
    last_checkpoint: str | None = None
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng(seed_words(cfg.seed, f"shuffle:{epoch}")).permutation(len(examples))
        loss_weighted = 0.0
        n_answer_total = 0
        for batch_idx in range(0, len(order), cfg.batch_size):
            chunk = order[batch_idx : batch_idx + cfg.batch_size]
            rng = np.random.default_rng(seed_words(cfg.seed, f"dropout:{epoch}:{batch_idx}"))
            merged: dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in trainable.items()}
            chunk_answers = 0
            chunk_loss = 0.0
            for group in _grouped_subbatches(chunk, mel_lengths):
                mels, seqs, audio = [], [], []
                for idx in group:
                    ex = examples[idx]
                    mel = mel_cache[ex["path"]]
                    n_audio = -(-mel.n_frames // stride)
                    mels.append(mel.frames)
                    seqs.append(assemble_sequence(n_audio, ex["prompt"], ex["answer"]))
                    if encoder_frozen:
                        audio.append(audio_cache[ex["path"]])
                batch = make_batch(mels, seqs, audio=audio if encoder_frozen else None)
                try:
                    loss, grads = backward(model, batch, training=True, rng=rng)
                except NumericError as exc:
                    raise TrainDivergedError(str(exc), last_checkpoint) from exc
                grads = lora.lora_grad_filter(model, grads)
                n_answers = int(np.sum(batch.tags == TAG_ANSWER))
                for name, g in grads.items():
                    merged[name] += g * n_answers
                chunk_loss += loss * n_answers
                chunk_answers += n_answers
            grads = {name: g / chunk_answers for name, g in merged.items()}
            if cfg.grad_clip is not None:
                grads = clip_gradients(grads, cfg.grad_clip)
            adam_step(trainable, grads, state, cfg.lr)
            loss_weighted += chunk_loss
            n_answer_total += chunk_answers

        checkpoint_path = out / f"checkpoint_epoch{epoch:02d}.ckpt"
        save_checkpoint(model, checkpoint_path)
        last_checkpoint = str(checkpoint_path)

        dev_run = evaluation.evaluate(dev_backend, dev_manifest, dev_prompt, constrained=True)
        report = dev_run.reports[dev_prompt]
        history.append(
            EpochStats(
                epoch=epoch,
                loss=loss_weighted / n_answer_total,
                dev_accuracy=report.accuracy,
                dev_macro_f1=report.macro_f1,
                seconds=time.perf_counter() - started,
            )
        )

    result = TrainHistory(records=history)
    result.to_csv(out / "history.csv")
    save_checkpoint(model, out / "model.ckpt")
    return model, result


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

PARAMETER_CLASSES = {
    "embedding": lambda n: n == "dec.tok_emb",
    "attention": lambda n: ".attn.w" in n,
    "ffn": lambda n: ".ffn.w" in n,
    "adapter": lambda n: n.startswith(("adapter.", "lora.")),
    "head": lambda n: n.startswith("head."),
    "norm_and_bias": lambda n: True,  # fallback bucket
}


def classify_parameter(name: str) -> str:
    for cls, match in PARAMETER_CLASSES.items():
        if match(name):
            return cls
    return "norm_and_bias"


def finite_difference_check(model: MultimodalModel, batch: TrainBatch, n_coords: int = 200,
                            eps: float = 1e-5, seed: int = 0) -> dict:
    """Compare analytic gradients with central finite differences.

    Coordinates are sampled round-robin across parameter classes. The relative
    error uses a small denominator floor so that coordinates with a genuinely
    zero gradient are judged by absolute agreement instead of noise ratios.
    """
    loss0, grads = backward(model, batch, training=False)
    trainable = lora.trainable_parameters(model)
    by_class: dict[str, list[str]] = {}
    for name in trainable:
        by_class.setdefault(classify_parameter(name), []).append(name)
    rng = np.random.default_rng(seed)

    def loss_only() -> float:
        with ad.no_grad():
            return loss_graph(model, batch, training=False).item()

    coords = []
    classes = sorted(by_class)
    i = 0
    while len(coords) < n_coords:
        cls = classes[i % len(classes)]
        name = by_class[cls][int(rng.integers(len(by_class[cls])))]
        flat_index = int(rng.integers(trainable[name].data.size))
        coords.append((cls, name, flat_index))
        i += 1

    worst = 0.0
    per_class: dict[str, float] = {cls: 0.0 for cls in classes}
    for cls, name, flat_index in coords:
        data = trainable[name].data.reshape(-1)
        original = data[flat_index]
        data[flat_index] = original + eps
        hi = loss_only()
        data[flat_index] = original - eps
        lo = loss_only()
        data[flat_index] = original
        numeric = (hi - lo) / (2.0 * eps)
        analytic = grads[name].reshape(-1)[flat_index]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        per_class[cls] = max(per_class[cls], rel)
        worst = max(worst, rel)
    return {"loss": loss0, "max_rel_error": worst, "per_class": per_class, "n_coords": len(coords)}
