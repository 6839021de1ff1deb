"""Dataset manifests, class-balanced subset building, and a synthetic corpus.

Manifests are plain TSV (utt_id, path, label, attack_id, split). The subset
builder keeps every bonafide utterance of a split and samples an equal number
of spoofed ones, spread as evenly as possible across the attack types present
in that split. The synthetic generator writes bonafide-proxy audio plus spoof
families carrying controlled artifacts (constant pitch, waveform glitches,
bit-crushed robotic texture) so that the detection task is provably solvable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import MODEL_SAMPLE_RATE, Waveform, write_wav

LABELS = ("bonafide", "spoof")
SPLITS = ("train", "dev", "eval")
ARTIFACT_FAMILIES = ("glitch", "monotone", "robotic")
NO_ATTACK = "-"


class ManifestParseError(ValueError):
    """Raised for malformed manifest lines; the message names the line."""


class DuplicateUtteranceError(ManifestParseError):
    """Raised when two manifest entries share an utt_id."""


class InsufficientSpoofError(ValueError):
    """Raised when the spoof pool cannot cover the bonafide count."""

    def __init__(self, message: str, deficit: int):
        super().__init__(message)
        self.deficit = deficit


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    path: str
    label: str
    attack_id: str
    split: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.label == "spoof" and (not self.attack_id or self.attack_id == NO_ATTACK):
            raise ValueError(f"spoof entry {self.utt_id} needs an attack_id")
        if self.label == "bonafide" and self.attack_id != NO_ATTACK:
            raise ValueError(f"bonafide entry {self.utt_id} must carry attack_id '-'")


@dataclass
class Manifest:
    entries: list[UtteranceRecord]
    name: str = "manifest"
    source_path: str | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise DuplicateUtteranceError(f"duplicate utt_id {e.utt_id!r}")
            seen.add(e.utt_id)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {e.utt_id: e for e in self.entries}

    def for_split(self, split: str) -> list[UtteranceRecord]:
        return [e for e in self.entries if e.split == split]


@dataclass(frozen=True)
class SubsetManifest:
    base_name: str
    base_path: str | None
    selected: tuple[str, ...]
    seed: int

    def to_manifest(self, base: Manifest) -> Manifest:
        lookup = base.by_id()
        missing = [u for u in self.selected if u not in lookup]
        if missing:
            raise KeyError(f"subset references unknown utt_ids, e.g. {missing[0]!r}")
        return Manifest(
            entries=[lookup[u] for u in self.selected],
            name=f"{self.base_name}-subset-{self.seed}",
        )


@dataclass(frozen=True)
class SynthConfig:
    n_bonafide: int
    n_spoof: int
    duration_s: float = 2.0
    artifact_families: tuple[str, ...] = ARTIFACT_FAMILIES
    seed: int = 0

    def __post_init__(self):
        if self.n_bonafide < 0 or self.n_spoof < 0:
            raise ValueError("counts must be non-negative")
        if self.duration_s < 0.5:
            raise ValueError("duration_s must be at least 0.5")
        unknown = set(self.artifact_families) - set(ARTIFACT_FAMILIES)
        if unknown:
            raise ValueError(f"unknown artifact families: {sorted(unknown)}")
        if self.n_spoof > 0 and not self.artifact_families:
            raise ValueError("need at least one artifact family for spoof generation")
        object.__setattr__(self, "artifact_families", tuple(self.artifact_families))


def load_manifest(path) -> Manifest:
    """Parse a TSV manifest (utt_id, path, label, attack_id, split)."""
    entries = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ManifestParseError(f"{path}: line {lineno}: expected 5 columns, got {len(cols)}")
        utt_id, wav_path, label, attack_id, split = cols
        if label not in LABELS:
            raise ManifestParseError(f"{path}: line {lineno}: unknown label {label!r}")
        if split not in SPLITS:
            raise ManifestParseError(f"{path}: line {lineno}: unknown split {split!r}")
        try:
            entries.append(UtteranceRecord(utt_id, wav_path, label, attack_id, split))
        except ValueError as exc:
            raise ManifestParseError(f"{path}: line {lineno}: {exc}") from exc
    try:
        return Manifest(entries=entries, name=Path(path).stem, source_path=str(path))
    except DuplicateUtteranceError as exc:
        raise DuplicateUtteranceError(f"{path}: {exc}") from exc


def save_manifest(m: Manifest, path) -> None:
    lines = [f"{e.utt_id}\t{e.path}\t{e.label}\t{e.attack_id}\t{e.split}" for e in m.entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def seed_words(*parts) -> list[int]:
    """Stable RNG seed material from a base seed plus string parts."""
    words = []
    for p in parts:
        if isinstance(p, int):
            words.append(p & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(p).encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return words


def build_balanced_subset(m: Manifest, split: str, seed: int) -> SubsetManifest:
    """All bonafide of the split plus an equal, attack-stratified spoof draw.

    The spoof quota is divided evenly over the attack ids present in the
    split; any remainder goes to the lexicographically smallest attack ids.
    Selection is deterministic given the seed.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    pool = m.for_split(split)
    bonafide = sorted((e for e in pool if e.label == "bonafide"), key=lambda e: e.utt_id)
    spoof = [e for e in pool if e.label == "spoof"]
    if not bonafide or not spoof:
        raise ValueError(f"split {split!r} needs at least one bonafide and one spoof entry")

    need = len(bonafide)
    if len(spoof) < need:
        raise InsufficientSpoofError(
            f"split {split!r}: spoof pool has {len(spoof)} entries, need {need} "
            f"(deficit {need - len(spoof)})",
            deficit=need - len(spoof),
        )

    by_attack: dict[str, list[str]] = {}
    for e in spoof:
        by_attack.setdefault(e.attack_id, []).append(e.utt_id)
    attacks = sorted(by_attack)
    base_quota, remainder = divmod(need, len(attacks))
    chosen: list[str] = []
    for i, attack in enumerate(attacks):
        quota = base_quota + (1 if i < remainder else 0)
        ids = sorted(by_attack[attack])
        if len(ids) < quota:
            raise InsufficientSpoofError(
                f"split {split!r}: attack {attack!r} has {len(ids)} spoof entries, "
                f"even stratification needs {quota} (deficit {quota - len(ids)})",
                deficit=quota - len(ids),
            )
        rng = np.random.default_rng(seed_words(seed, f"attack:{attack}"))
        picks = rng.choice(len(ids), size=quota, replace=False)
        chosen.extend(ids[j] for j in picks)

    selected = tuple(e.utt_id for e in bonafide) + tuple(sorted(chosen))
    return SubsetManifest(base_name=m.name, base_path=m.source_path, selected=selected, seed=seed)


def save_subset(s: SubsetManifest, path) -> None:
    """Serialize as: base manifest path, seed, then one utt_id per line."""
    lines = [s.base_path or s.base_name, str(s.seed), *s.selected]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_subset(path) -> SubsetManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ManifestParseError(f"{path}: subset file needs a base path and seed line")
    try:
        seed = int(lines[1])
    except ValueError as exc:
        raise ManifestParseError(f"{path}: line 2: seed must be an integer") from exc
    return SubsetManifest(
        base_name=Path(lines[0]).stem,
        base_path=lines[0],
        selected=tuple(u for u in lines[2:] if u),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_F0_MIN, _F0_MAX = 80.0, 300.0
_HARMONICS = 6
_FORMANTS = (500.0, 1500.0, 2500.0)
_SNR_DB = 30.0
_BONA_PEAK = 0.75
_GLITCH_BASE_PEAK = 0.3
_GLITCH_JUMP = 0.65


def _harmonic_source(rng: np.random.Generator, n: int, f0: np.ndarray) -> np.ndarray:
    phase = 2.0 * np.pi * np.cumsum(f0) / MODEL_SAMPLE_RATE
    sig = np.zeros(n)
    for h in range(1, _HARMONICS + 1):
        sig += (1.0 / h**1.5) * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))
    return sig


def _formant_filter(rng: np.random.Generator, sig: np.ndarray) -> np.ndarray:
    out = sig
    for f in _FORMANTS:
        center = f * rng.uniform(0.9, 1.1)
        r = 0.97
        omega = 2.0 * np.pi * center / MODEL_SAMPLE_RATE
        out = lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(omega), r * r], out)
    return out


def _add_noise(rng: np.random.Generator, sig: np.ndarray) -> np.ndarray:
    power = float(np.mean(sig**2))
    noise_std = np.sqrt(power / (10.0 ** (_SNR_DB / 10.0)))
    return sig + rng.normal(0.0, noise_std, sig.size)


def _normalize(sig: np.ndarray, peak: float) -> np.ndarray:
    top = float(np.max(np.abs(sig)))
    return sig * (peak / top) if top > 0 else sig


def _drifting_f0(rng: np.random.Generator, n: int) -> np.ndarray:
    # drift strong enough to be audible within half a second
    start = rng.uniform(110.0, 240.0)
    drift = rng.choice([-1.0, 1.0]) * rng.uniform(25.0, 60.0)  # Hz per second
    walk = np.cumsum(rng.normal(0.0, 0.04, n))
    t = np.arange(n) / MODEL_SAMPLE_RATE
    return np.clip(start + drift * t + walk, _F0_MIN, _F0_MAX)


def _synth_bonafide(rng: np.random.Generator, n: int) -> np.ndarray:
    sig = _formant_filter(rng, _harmonic_source(rng, n, _drifting_f0(rng, n)))
    t = np.arange(n) / MODEL_SAMPLE_RATE
    am = 1.0 + 0.45 * np.sin(2.0 * np.pi * rng.uniform(3.0, 8.0) * t + rng.uniform(0, 2 * np.pi))
    return _normalize(_add_noise(rng, sig * am), _BONA_PEAK)


def _synth_monotone(rng: np.random.Generator, n: int) -> np.ndarray:
    f0 = np.full(n, rng.uniform(90.0, 280.0))
    sig = _formant_filter(rng, _harmonic_source(rng, n, f0))
    return _normalize(_add_noise(rng, sig), _BONA_PEAK)


def _synth_glitch(rng: np.random.Generator, n: int) -> np.ndarray:
    base = _normalize(_synth_bonafide(rng, n), _GLITCH_BASE_PEAK)
    n_glitches = int(rng.integers(5, 16))
    # non-adjacent positions so neighboring spikes cannot merge into one jump
    positions = rng.choice(np.arange(1, n - 1, 3), size=n_glitches, replace=False)
    signs = rng.choice([-1.0, 1.0], size=n_glitches)
    out = base.copy()
    out[positions] = base[positions] + signs * _GLITCH_JUMP
    return out


def _synth_robotic(rng: np.random.Generator, n: int) -> np.ndarray:
    base = _synth_bonafide(rng, n)
    quantized = np.round(base * 4.0) / 4.0  # 3-bit amplitude grid
    t = np.arange(n) / MODEL_SAMPLE_RATE
    am = 0.55 + 0.45 * np.sin(2.0 * np.pi * 50.0 * t)
    return quantized * am


_SYNTH = {"monotone": _synth_monotone, "glitch": _synth_glitch, "robotic": _synth_robotic}


def gen_synthetic_corpus(cfg: SynthConfig, out_dir, split: str = "train") -> Manifest:
    """Write WAVs (16 kHz PCM16 mono) plus a manifest.tsv under out_dir.

    Each file's RNG stream is derived from (cfg.seed, utt_id), so identical
    configs reproduce bit-identical audio regardless of generation order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = int(round(cfg.duration_s * MODEL_SAMPLE_RATE))
    families = sorted(cfg.artifact_families)

    entries = []
    jobs = [(f"bona_{i:04d}", "bonafide", NO_ATTACK) for i in range(cfg.n_bonafide)]
    jobs += [
        (f"{families[i % len(families)]}_{i:04d}", "spoof", families[i % len(families)])
        for i in range(cfg.n_spoof)
    ]
    for utt_id, label, attack in jobs:
        rng = np.random.default_rng(seed_words(cfg.seed, f"utt:{utt_id}"))
        samples = _synth_bonafide(rng, n) if label == "bonafide" else _SYNTH[attack](rng, n)
        wav_path = out / f"{utt_id}.wav"
        write_wav(wav_path, Waveform(samples, MODEL_SAMPLE_RATE))
        entries.append(UtteranceRecord(utt_id, str(wav_path), label, attack, split))

    manifest = Manifest(entries=entries, name=out.name, source_path=str(out / "manifest.tsv"))
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


def make_asv19_like_manifest(path_prefix: str = "clips") -> Manifest:
    """An ASVspoof-2019-LA-shaped manifest: same split sizes and attack ids.

    Paths are placeholders; this exists for exercising subset construction
    at the real dataset's scale without shipping any audio.
    """
    spec = [
        ("train", 2580, [f"A{i:02d}" for i in range(1, 7)], 3800),
        ("dev", 2548, [f"A{i:02d}" for i in range(1, 7)], 3716),
        ("eval", 7355, [f"A{i:02d}" for i in range(7, 20)], 4914),
    ]
    entries = []
    for split, n_bona, attacks, per_attack in spec:
        for i in range(n_bona):
            uid = f"{split}_bona_{i:05d}"
            entries.append(UtteranceRecord(uid, f"{path_prefix}/{uid}.wav", "bonafide", NO_ATTACK, split))
        for attack in attacks:
            for i in range(per_attack):
                uid = f"{split}_{attack}_{i:05d}"
                entries.append(UtteranceRecord(uid, f"{path_prefix}/{uid}.wav", "spoof", attack, split))
    return Manifest(entries=entries, name="asv19-shaped")
