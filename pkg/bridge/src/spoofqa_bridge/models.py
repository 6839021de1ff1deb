"""Wrappers around full-scale audio chat models.

Each wrapper exposes generate(wav_path, prompt, max_new_tokens) -> str and a
``model_id`` string. Heavy dependencies (torch, transformers) are imported at
load time only; a load failure is reported to the service, which then serves
in degraded mode (pings answered, classifies refused) instead of dying.

The response text is returned exactly as decoded; label parsing stays on the
client side.
"""

from __future__ import annotations


class ModelLoadError(RuntimeError):
    """The wrapped checkpoint could not be loaded on this host."""


class Qwen2AudioWrapper:
    """Qwen2-Audio-7B-Instruct behind its chat template."""

    model_id = "qwen2-audio"
    default_checkpoint = "Qwen/Qwen2-Audio-7B-Instruct"

    def __init__(self, checkpoint: str | None = None, device: str | None = None,
                 sample_rate: int = 16000):
        checkpoint = checkpoint or self.default_checkpoint
        try:
            import torch
            from transformers import AutoProcessor, Qwen2AudioForConditionalGeneration
        except ImportError as exc:
            raise ModelLoadError(f"qwen2-audio dependencies unavailable: {exc}") from exc
        try:
            self.processor = AutoProcessor.from_pretrained(checkpoint)
            self.model = Qwen2AudioForConditionalGeneration.from_pretrained(
                checkpoint, torch_dtype="auto", device_map=device or "auto"
            )
        except Exception as exc:  # asset resolution, OOM, ...
            raise ModelLoadError(f"cannot load {checkpoint}: {exc}") from exc
        self.sample_rate = sample_rate
        self.torch = torch

    def _load_audio(self, wav_path: str):
        import soundfile as sf

        audio, rate = sf.read(wav_path, dtype="float32", always_2d=False)
        if audio.ndim > 1:
            audio = audio.mean(axis=1)
        if rate != self.sample_rate:
            import numpy as np

            n_out = int(round(audio.size * self.sample_rate / rate))
            audio = np.interp(
                np.linspace(0.0, audio.size - 1.0, n_out),
                np.arange(audio.size),
                audio,
            ).astype("float32")
        return audio

    def generate(self, wav_path: str, prompt: str, max_new_tokens: int) -> str:
        audio = self._load_audio(wav_path)
        conversation = [
            {
                "role": "user",
                "content": [
                    {"type": "audio", "audio_url": wav_path},
                    {"type": "text", "text": prompt},
                ],
            }
        ]
        text = self.processor.apply_chat_template(
            conversation, add_generation_prompt=True, tokenize=False
        )
        inputs = self.processor(
            text=text, audios=[audio], sampling_rate=self.sample_rate, return_tensors="pt"
        ).to(self.model.device)
        with self.torch.no_grad():
            generated = self.model.generate(
                **inputs, max_new_tokens=max_new_tokens, do_sample=False
            )
        new_tokens = generated[:, inputs["input_ids"].shape[1]:]
        return self.processor.batch_decode(
            new_tokens, skip_special_tokens=True, clean_up_tokenization_spaces=False
        )[0]


class SalmonnWrapper:
    """SALMONN-13B via its released inference stack.

    The upstream repo is not packaged on PyPI; point ``checkpoint`` at a local
    clone that provides load_model()/generate() entry points.
    """

    model_id = "salmonn"

    def __init__(self, checkpoint: str | None = None, device: str | None = None):
        if not checkpoint:
            raise ModelLoadError(
                "salmonn needs --checkpoint pointing at a local SALMONN inference setup"
            )
        import importlib.util
        import pathlib

        runner = pathlib.Path(checkpoint) / "bridge_runner.py"
        if not runner.exists():
            raise ModelLoadError(
                f"{checkpoint}: expected bridge_runner.py exposing load() and generate()"
            )
        spec = importlib.util.spec_from_file_location("salmonn_bridge_runner", runner)
        module = importlib.util.module_from_spec(spec)
        try:
            spec.loader.exec_module(module)
            self.runner = module.load(device=device)
        except Exception as exc:
            raise ModelLoadError(f"cannot initialize SALMONN runner: {exc}") from exc

    def generate(self, wav_path: str, prompt: str, max_new_tokens: int) -> str:
        return self.runner.generate(wav_path, prompt, max_new_tokens=max_new_tokens)


WRAPPERS = {
    "qwen2-audio": Qwen2AudioWrapper,
    "salmonn": SalmonnWrapper,
}


def load_wrapper(name: str, checkpoint: str | None, device: str | None):
    if name not in WRAPPERS:
        raise ModelLoadError(f"unknown model {name!r}; choose from {sorted(WRAPPERS)}")
    return WRAPPERS[name](checkpoint=checkpoint, device=device)
