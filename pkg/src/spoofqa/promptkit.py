"""Prompt templates, a byte-level tokenizer, sequence assembly, and answer parsing.

The tokenizer is byte level: token id = byte value + 4, with ids 0-3 reserved
for PAD/BOS/EOS/AUDIO. Assembled sequences follow a fixed prefix layout:
BOS, audio placeholders, prompt bytes, then (for training) answer bytes + EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
AUDIO_ID = 3
BYTE_OFFSET = 4
VOCAB_SIZE = 260

# segment tags
TAG_SPECIAL = 0
TAG_AUDIO = 1
TAG_PROMPT = 2
TAG_ANSWER = 3

BONAFIDE = "bonafide"
SPOOF = "spoof"
UNKNOWN = "unknown"

P1_TEXT = (
    "Listen to this audio and determine if it is a bonafide or a spoof. "
    "Respond with only one word: 'bonafide' or 'spoof'."
)
P2_TEXT = "Is this audio a spoof? Respond with 'yes' or 'no' only without any explanation."
P3_TEXT = (
    "Real or bonafide human speech typically has natural prosody, emotional consistency, "
    "and no robotic or glitchy artefacts. In contrast, fake or spoofed speech may exhibit "
    "issues like monotonic tone, unnatural pacing, robotic texture, or audio glitches such "
    "as clicks or distortions. Now, listen to the given audio and determine if it is "
    "bonafide or spoof based on these characteristics. Respond with only one word: "
    "'spoof' or 'bonafide'"
)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    texts: tuple[str, ...]
    answer_set: tuple[str, ...]
    label_map: dict[str, str]


TEMPLATES: dict[str, PromptTemplate] = {
    "P1": PromptTemplate(
        id="P1",
        texts=(P1_TEXT,),
        answer_set=(BONAFIDE, SPOOF),
        label_map={BONAFIDE: BONAFIDE, SPOOF: SPOOF},
    ),
    "P2": PromptTemplate(
        id="P2",
        texts=(P2_TEXT,),
        answer_set=("yes", "no"),
        label_map={"yes": SPOOF, "no": BONAFIDE},
    ),
    "P3": PromptTemplate(
        id="P3",
        texts=(P3_TEXT,),
        answer_set=(BONAFIDE, SPOOF),
        label_map={BONAFIDE: BONAFIDE, SPOOF: SPOOF},
    ),
    "MULTI": PromptTemplate(
        id="MULTI",
        texts=(P1_TEXT, P3_TEXT),
        answer_set=(BONAFIDE, SPOOF),
        label_map={BONAFIDE: BONAFIDE, SPOOF: SPOOF},
    ),
}


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # int64
    segment_tags: np.ndarray  # int8, TAG_* values

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        tags = np.asarray(self.segment_tags, dtype=np.int8)
        if tokens.shape != tags.shape:
            raise ValueError("tokens and segment_tags must have identical length")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
            raise ValueError("token id out of range")
        answer_pos = np.flatnonzero(tags == TAG_ANSWER)
        prompt_pos = np.flatnonzero(tags == TAG_PROMPT)
        if answer_pos.size and prompt_pos.size and answer_pos.min() < prompt_pos.max():
            raise ValueError("answer tokens must follow all prompt tokens")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "segment_tags", tags)

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class ParsedAnswer:
    value: str  # bonafide | spoof | unknown
    raw: str


def render_prompt(template_id: str) -> list[str]:
    """The verbatim prompt strings for a template; MULTI yields both."""
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    return list(TEMPLATES[template_id].texts)


def tokenize(text: str) -> TokenSequence:
    data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
    return TokenSequence(tokens=data, segment_tags=np.full(data.size, TAG_PROMPT, dtype=np.int8))


def token_ids(text: str) -> np.ndarray:
    return tokenize(text).tokens


def detokenize(ids) -> str:
    arr = np.asarray(ids, dtype=np.int64)
    byte_ids = arr[arr >= BYTE_OFFSET] - BYTE_OFFSET
    return bytes(byte_ids.astype(np.uint8).tolist()).decode("utf-8", errors="replace")


def assemble_sequence(n_audio_tokens: int, prompt: str, answer: str | None = None) -> TokenSequence:
    """BOS + audio placeholders + prompt bytes (+ answer bytes + EOS when training)."""
    if n_audio_tokens < 1:
        raise ValueError(f"need at least one audio token, got {n_audio_tokens}")
    prompt_ids = token_ids(prompt)
    tokens = [np.array([BOS_ID]), np.full(n_audio_tokens, AUDIO_ID), prompt_ids]
    tags = [
        np.array([TAG_SPECIAL]),
        np.full(n_audio_tokens, TAG_AUDIO),
        np.full(prompt_ids.size, TAG_PROMPT),
    ]
    if answer is not None:
        answer_ids = token_ids(answer)
        tokens.append(np.concatenate([answer_ids, [EOS_ID]]))
        tags.append(np.full(answer_ids.size + 1, TAG_ANSWER))
    return TokenSequence(
        tokens=np.concatenate(tokens).astype(np.int64),
        segment_tags=np.concatenate(tags).astype(np.int8),
    )


def normalize_answer(raw: str) -> str:
    """Lowercase, strip whitespace, drop terminal punctuation (.,!'")."""
    return raw.strip().lower().rstrip(".,!'\"").strip()


def parse_answer(raw: str, template: PromptTemplate) -> ParsedAnswer:
    """Map generated text to a label, or unknown when outside the answer set."""
    normalized = normalize_answer(raw)
    if normalized in template.answer_set:
        return ParsedAnswer(value=template.label_map[normalized], raw=raw)
    return ParsedAnswer(value=UNKNOWN, raw=raw)


def export_catalog(path) -> None:
    """Write the prompt catalog as JSON for external services to consume."""
    doc = {
        "templates": [
            {
                "id": t.id,
                "texts": list(t.texts),
                "answer_set": list(t.answer_set),
                "label_map": t.label_map,
            }
            for t in TEMPLATES.values()
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
