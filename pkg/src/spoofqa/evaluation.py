"""Generation, metrics, and evaluation runs.

Free-form decoding is greedy with an EOS stop; constrained decoding scores
each template answer string by its length-normalized token log-probability
and returns the argmax. Metrics follow the anti-spoofing convention: spoof is
the positive class, generations outside the answer set are excluded from the
denominator and surfaced as ``n_excluded``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import MODEL_SAMPLE_RATE, MelSpectrogram, log_mel, read_wav, resample
from .autodiff import Tensor
from .corpus import Manifest
from .model import AudioTokens, MultimodalModel, encode_audio
from .promptkit import (
    AUDIO_ID,
    BOS_ID,
    EOS_ID,
    TEMPLATES,
    UNKNOWN,
    ParsedAnswer,
    PromptTemplate,
    assemble_sequence,
    detokenize,
    parse_answer,
    token_ids,
)

MAX_NEW_TOKENS = 16
DEGRADED_ERROR_FRACTION = 0.10


class UndefinedMetricError(ValueError):
    """Raised when every prediction was excluded (or there were none)."""


@dataclass(frozen=True)
class Prediction:
    utt_id: str
    prompt_id: str
    raw_text: str
    parsed: ParsedAnswer
    truth: str


@dataclass(frozen=True)
class EvalReport:
    n_total: int
    n_excluded: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    macro_f1: float
    per_class: dict

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalRun:
    model_name: str
    template_id: str
    constrained: bool
    predictions: list[Prediction]
    reports: dict[str, EvalReport]
    errors: list[tuple[str, str, str]] = field(default_factory=list)  # (utt, prompt, message)
    degraded: bool = False


def load_features(wav_path) -> MelSpectrogram:
    """Read a WAV, resample to the model rate, and extract log-mel features."""
    wave = read_wav(wav_path)
    if wave.sample_rate != MODEL_SAMPLE_RATE:
        wave = resample(wave, MODEL_SAMPLE_RATE)
    return log_mel(wave)


def greedy_decode(model: MultimodalModel, mel: MelSpectrogram, prompt: str,
                  max_new_tokens: int = MAX_NEW_TOKENS) -> str:
    """Greedy generation after the prompt, stopping at EOS."""
    audio = encode_audio(model, mel)
    prefix = np.concatenate([
        [BOS_ID],
        np.full(audio.n_tokens, AUDIO_ID, dtype=np.int64),
        token_ids(prompt),
    ]).astype(np.int64)
    generated: list[int] = []
    audio_t = Tensor(audio.vectors[None])
    for _ in range(max_new_tokens):
        tokens = np.concatenate([prefix, generated]).astype(np.int64)
        with ad.no_grad():
            logits = model.decode_tokens(audio_t, tokens[None]).data[0]
        next_id = int(np.argmax(logits[-1]))
        if next_id == EOS_ID:
            break
        generated.append(next_id)
    return detokenize(np.asarray(generated, dtype=np.int64))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def answer_scores(model: MultimodalModel, audio: AudioTokens, prompt: str,
                  answer_set) -> dict[str, float]:
    """Length-normalized log-probability of each candidate answer string."""
    scores = {}
    audio_t = Tensor(audio.vectors[None])
    for answer in answer_set:
        seq = assemble_sequence(audio.n_tokens, prompt, answer)
        with ad.no_grad():
            logits = model.decode_tokens(audio_t, seq.tokens[None]).data[0]
        ids = token_ids(answer)
        start = len(seq) - ids.size - 1  # index of the first answer byte
        logp = _log_softmax(logits[start - 1 : start - 1 + ids.size])
        scores[answer] = float(np.mean(logp[np.arange(ids.size), ids]))
    return scores


def constrained_decode(model: MultimodalModel, mel: MelSpectrogram, prompt: str,
                       answer_set) -> str:
    """Return the answer string with the highest length-normalized score."""
    audio = encode_audio(model, mel)
    scores = answer_scores(model, audio, prompt, answer_set)
    return max(answer_set, key=lambda s: scores[s])


def accuracy(preds: list[Prediction]) -> float:
    kept = [p for p in preds if p.parsed.value != UNKNOWN]
    if not kept:
        raise UndefinedMetricError("no usable predictions: all excluded or empty input")
    correct = sum(1 for p in kept if p.parsed.value == p.truth)
    return correct / len(kept)


def _confusion(preds: list[Prediction]) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with spoof as the positive class."""
    tp = fp = tn = fn = 0
    for p in preds:
        if p.parsed.value == UNKNOWN:
            continue
        if p.truth == "spoof":
            if p.parsed.value == "spoof":
                tp += 1
            else:
                fn += 1
        else:
            if p.parsed.value == "spoof":
                fp += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def macro_f1(preds: list[Prediction]) -> float:
    kept = [p for p in preds if p.parsed.value != UNKNOWN]
    if not kept:
        raise UndefinedMetricError("no usable predictions: all excluded or empty input")
    tp, fp, tn, fn = _confusion(kept)
    _, _, f1_spoof = _prf(tp, fp, fn)
    _, _, f1_bona = _prf(tn, fn, fp)  # bonafide as positive: swap roles
    return 0.5 * (f1_spoof + f1_bona)


def build_report(preds: list[Prediction]) -> EvalReport:
    tp, fp, tn, fn = _confusion(preds)
    n_total = len(preds)
    n_excluded = sum(1 for p in preds if p.parsed.value == UNKNOWN)
    prec_s, rec_s, f1_s = _prf(tp, fp, fn)
    prec_b, rec_b, f1_b = _prf(tn, fn, fp)
    return EvalReport(
        n_total=n_total,
        n_excluded=n_excluded,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=accuracy(preds),
        macro_f1=macro_f1(preds),
        per_class={
            "spoof": {"precision": prec_s, "recall": rec_s, "f1": f1_s},
            "bonafide": {"precision": prec_b, "recall": rec_b, "f1": f1_b},
        },
    )


def _inference_prompts(template_id: str) -> list[tuple[str, str, PromptTemplate]]:
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    template = TEMPLATES[template_id]
    if template_id == "MULTI":
        return [("P1", TEMPLATES["P1"].texts[0], TEMPLATES["P1"]),
                ("P3", TEMPLATES["P3"].texts[0], TEMPLATES["P3"])]
    return [(template_id, template.texts[0], template)]


def evaluate(backend, manifest: Manifest, template_id: str, constrained: bool = False) -> EvalRun:
    """One prediction per (utterance, inference prompt), aggregated per prompt.

    Backend failures on single utterances are recorded and excluded; the run
    is marked degraded when more than 10% of attempts fail.
    """
    from .backend import BackendError

    if len(manifest) == 0:
        raise UndefinedMetricError("empty manifest")
    prompts = _inference_prompts(template_id)
    predictions: list[Prediction] = []
    errors: list[tuple[str, str, str]] = []
    attempts = 0
    for entry in sorted(manifest.entries, key=lambda e: e.utt_id):
        for prompt_id, prompt_text, template in prompts:
            attempts += 1
            try:
                raw = backend.classify(entry.path, prompt_text, constrained)
            except BackendError as exc:
                errors.append((entry.utt_id, prompt_id, str(exc)))
                continue
            predictions.append(
                Prediction(
                    utt_id=entry.utt_id,
                    prompt_id=prompt_id,
                    raw_text=raw,
                    parsed=parse_answer(raw, template),
                    truth=entry.label,
                )
            )
    reports = {}
    for prompt_id, _, _ in prompts:
        subset = [p for p in predictions if p.prompt_id == prompt_id]
        reports[prompt_id] = build_report(subset)
    return EvalRun(
        model_name=getattr(backend, "model_name", "unknown"),
        template_id=template_id,
        constrained=constrained,
        predictions=predictions,
        reports=reports,
        errors=errors,
        degraded=bool(attempts and len(errors) / attempts > DEGRADED_ERROR_FRACTION),
    )


# ----- emission -----


def write_predictions_csv(path, predictions: list[Prediction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["utt_id", "prompt_id", "raw_text", "parsed", "truth"])
        for p in predictions:
            writer.writerow([p.utt_id, p.prompt_id, p.raw_text, p.parsed.value, p.truth])


def write_summary_json(path, run: EvalRun) -> None:
    doc = {
        "model": run.model_name,
        "template": run.template_id,
        "constrained": run.constrained,
        "degraded": run.degraded,
        "n_errors": len(run.errors),
        "reports": {pid: report.as_dict() for pid, report in run.reports.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def summary_rows(summary_paths) -> list[dict]:
    """Flatten stored summary JSONs into renderer rows."""
    rows = []
    for path in summary_paths:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        for prompt_id in sorted(doc["reports"]):
            report = doc["reports"][prompt_id]
            rows.append(
                {
                    "model": doc["model"],
                    "prompt": prompt_id,
                    "acc": report["accuracy"],
                    "mf1": report["macro_f1"],
                }
            )
    return rows


def render_table_text(rows: list[dict]) -> str:
    """Plain-text table: one row per model x inference prompt."""
    header = f"{'prompt':<8} {'model':<28} {'ACC':>7} {'mF1':>7}"
    lines = [header, "-" * len(header)]
    for row in sorted(rows, key=lambda r: (r["prompt"], r["model"])):
        lines.append(
            f"{row['prompt']:<8} {row['model']:<28} {row['acc']:>7.4f} {row['mf1']:>7.4f}"
        )
    return "\n".join(lines) + "\n"


def render_table_csv(rows: list[dict]) -> str:
    lines = ["prompt,model,acc,mf1"]
    for row in sorted(rows, key=lambda r: (r["prompt"], r["model"])):
        lines.append(f"{row['prompt']},{row['model']},{row['acc']:.4f},{row['mf1']:.4f}")
    return "\n".join(lines) + "\n"
