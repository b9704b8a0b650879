"""Corpus ingestion, log-mel featurization and batch assembly.

Also hosts the synthetic tone corpus used for desk-scale experiments: every
character is rendered as a short two-tone chord, so a recognizer can learn the
mapping in a few epochs on a CPU.
"""
from __future__ import annotations

import csv
import logging
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.io import wavfile

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DEFAULT_SYMBOLS = tuple("abcdefghijklmnopqrstuvwxyz '")


class DataError(ValueError):
    """Raised for malformed corpora, manifests or batches."""


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...] = DEFAULT_SYMBOLS
    blank_index: int = len(DEFAULT_SYMBOLS)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("alphabet symbols must be unique")
        if 0 <= self.blank_index < len(self.symbols):
            raise DataError("blank_index collides with a character index")

    @property
    def n_classes(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> list[int]:
        lookup = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [lookup[ch] for ch in text]
        except KeyError as err:
            raise DataError(f"character {err.args[0]!r} is not in the alphabet") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in indices if i != self.blank_index)

    def to_dict(self) -> dict:
        return {"symbols": "".join(self.symbols), "blank_index": self.blank_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Alphabet":
        return cls(tuple(d["symbols"]), int(d["blank_index"]))


def normalize_transcript(text: str, alphabet: Alphabet | None = None) -> str:
    """Lowercase, fold accents, drop unsupported characters, squeeze spaces.

    >>> normalize_transcript("Hello, World!")
    'hello world'
    """
    alphabet = alphabet or Alphabet()
    allowed = set(alphabet.symbols)
    folded = unicodedata.normalize("NFKD", text.lower())
    folded = folded.replace("’", "'").replace("\t", " ").replace("\n", " ")
    kept = "".join(ch for ch in folded if ch in allowed)
    return " ".join(kept.split())


@dataclass
class AudioExample:
    id: str
    transcript: str
    waveform: np.ndarray | None = None
    features: np.ndarray | None = None
    duration_frames: int = 0

    def __post_init__(self):
        if not self.transcript:
            raise DataError(f"example {self.id}: empty transcript")
        if self.duration_frames <= 0:
            if self.features is not None:
                self.duration_frames = int(self.features.shape[1])
            elif self.waveform is not None:
                self.duration_frames = max((len(self.waveform) - 400) // 160 + 1, 1)
            else:
                raise DataError(f"example {self.id}: needs a waveform or features")


@dataclass(frozen=True)
class MelConfig:
    mel_bins: int = 128
    win_length: int = 400
    hop_length: int = 160
    log_floor: float = 1e-6
    sample_rate: int = SAMPLE_RATE
    normalize: bool = True


@dataclass
class FeatureBatch:
    features: torch.Tensor          # [batch, mel_bins, time]
    feature_lengths: torch.Tensor   # [batch]
    label_indices: torch.Tensor     # [batch, max_label]
    label_lengths: torch.Tensor     # [batch]
    ids: list[str] = field(default_factory=list)
    transcripts: list[str] = field(default_factory=list)

    def __len__(self):
        return self.features.shape[0]

    def time_mask(self) -> torch.Tensor:
        """Boolean [batch, time] mask of valid frames."""
        t = torch.arange(self.features.shape[-1])
        return t[None, :] < self.feature_lengths[:, None]

    def with_features(self, features: torch.Tensor) -> "FeatureBatch":
        return replace(self, features=features)

    def to(self, dtype: torch.dtype) -> "FeatureBatch":
        return replace(self, features=self.features.to(dtype))


def read_wav(path: str | Path) -> np.ndarray:
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: expected {SAMPLE_RATE} Hz audio, got {rate}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    return np.asarray(data, dtype=np.float64)


def write_wav(path: str | Path, waveform: np.ndarray) -> None:
    pcm = np.clip(waveform, -1.0, 1.0) * 32767
    wavfile.write(path, SAMPLE_RATE, pcm.astype(np.int16))


def load_manifest(path: str | Path, alphabet: Alphabet | None = None):
    """Read a CSV manifest (``id,audio_path,transcript``).

    Relative audio paths resolve against the manifest's directory. Rows whose
    audio cannot be read are skipped with a warning.

    Returns:
        ``(examples, rejects)`` where ``rejects`` lists the skipped row ids.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    alphabet = alphabet or Alphabet()
    examples, rejects = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "audio_path", "transcript"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            audio = Path(row["audio_path"])
            if not audio.is_absolute():
                audio = path.parent / audio
            try:
                waveform = read_wav(audio)
                text = normalize_transcript(row["transcript"], alphabet)
                examples.append(AudioExample(row["id"], text, waveform=waveform))
            except (OSError, ValueError) as err:
                logger.warning("skipping manifest row %s: %s", row["id"], err)
                rejects.append(row["id"])
    return examples, rejects


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(mel_bins: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-style filters, shape [mel_bins, n_fft // 2 + 1]."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), mel_bins + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((mel_bins, len(fft_freqs)))
    for m in range(mel_bins):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def n_frames(n_samples: int, cfg: MelConfig) -> int:
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def featurize(example: AudioExample, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel spectrogram ``[mel_bins, frames]`` of one waveform.

    Frames are taken without centering, so there are
    ``(samples - win_length) // hop_length + 1`` of them. With
    ``cfg.normalize`` the matrix is shifted and scaled to zero mean and unit
    variance per utterance.
    """
    wav = example.waveform
    if wav is None or len(wav) == 0:
        raise DataError(f"example {example.id}: no waveform to featurize")
    if len(wav) < cfg.win_length:
        raise DataError(
            f"example {example.id}: {len(wav)} samples is shorter than one "
            f"{cfg.win_length}-sample window"
        )
    wav = np.asarray(wav, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(wav, cfg.win_length)[:: cfg.hop_length]
    window = np.hanning(cfg.win_length + 1)[:-1]
    power = np.abs(np.fft.rfft(frames * window, axis=-1)) ** 2
    fb = mel_filterbank(cfg.mel_bins, cfg.win_length, cfg.sample_rate)
    logmel = np.log(power @ fb.T + cfg.log_floor).T
    if cfg.normalize:
        logmel = (logmel - logmel.mean()) / (logmel.std() + 1e-5)
    return logmel.astype(np.float32)


def featurize_corpus(examples: Sequence[AudioExample], cfg: MelConfig = MelConfig()):
    """Attach features to every example that lacks them."""
    out = []
    for ex in examples:
        if ex.features is None:
            feats = featurize(ex, cfg)
            ex = replace(ex, features=feats, duration_frames=feats.shape[1])
        out.append(ex)
    return out


def make_batch(
    examples: Sequence[AudioExample],
    alphabet: Alphabet | None = None,
    mel_config: MelConfig = MelConfig(),
) -> FeatureBatch:
    """Pad features and labels of ``examples`` into one batch.

    Feature and label padding is exactly zero; the length vectors say which
    part of each row is real.
    """
    if not examples:
        raise DataError("cannot build a batch from an empty list")
    alphabet = alphabet or Alphabet()
    feats = [ex.features if ex.features is not None else featurize(ex, mel_config) for ex in examples]
    n_mels = {f.shape[0] for f in feats}
    if len(n_mels) != 1:
        raise DataError(f"inconsistent mel bins within batch: {sorted(n_mels)}")
    labels = [alphabet.encode(ex.transcript) for ex in examples]
    t_max = max(f.shape[1] for f in feats)
    l_max = max(len(lab) for lab in labels)
    x = torch.zeros(len(feats), n_mels.pop(), t_max)
    y = torch.zeros(len(labels), l_max, dtype=torch.long)
    for i, (f, lab) in enumerate(zip(feats, labels)):
        x[i, :, : f.shape[1]] = torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32))
        y[i, : len(lab)] = torch.tensor(lab, dtype=torch.long)
    return FeatureBatch(
        features=x,
        feature_lengths=torch.tensor([f.shape[1] for f in feats], dtype=torch.long),
        label_indices=y,
        label_lengths=torch.tensor([len(lab) for lab in labels], dtype=torch.long),
        ids=[ex.id for ex in examples],
        transcripts=[ex.transcript for ex in examples],
    )


def ctc_min_frames(labels: Sequence[int]) -> int:
    """Fewest output frames that can carry ``labels`` under CTC (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def infeasible_examples(batch: FeatureBatch, out_lengths: torch.Tensor) -> list[str]:
    """Ids whose transcript cannot fit in the model's output frames."""
    bad = []
    for i in range(len(batch)):
        lab = batch.label_indices[i, : batch.label_lengths[i]].tolist()
        if ctc_min_frames(lab) > int(out_lengths[i]):
            bad.append(batch.ids[i] if batch.ids else str(i))
    return bad


def iter_batches(examples: Sequence[AudioExample], batch_size: int, alphabet=None,
                 order: Sequence[int] | None = None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield make_batch([examples[i] for i in order[start:start + batch_size]], alphabet)


# ---------------------------------------------------------------------------
# Synthetic tone corpus
# ---------------------------------------------------------------------------

TOY_WORDS = (
    "cat", "dog", "sun", "red", "blue", "tree", "fish", "bird",
    "moon", "star", "jump", "quick", "zero", "wave", "hot", "ice",
)
_LOW_TONES = (300.0, 450.0, 650.0, 900.0, 1200.0, 1600.0, 2100.0)
_HIGH_TONES = (2800.0, 3600.0, 4700.0, 6000.0)


def char_chord(index: int) -> tuple[float, float]:
    return _LOW_TONES[index % 7], _HIGH_TONES[index // 7]


def synth_toy_corpus(seed: int, n: int, alphabet: Alphabet | None = None,
                     words_per_utt=(2, 3), noise: float = 0.01) -> list[AudioExample]:
    """Deterministic pseudo-speech: one two-tone chord per character.

    Each character lasts 5-9 hops and is followed by a 2-3 hop silence so that
    doubled letters stay separable.
    """
    if n < 1:
        raise DataError("toy corpus size must be at least 1")
    alphabet = alphabet or Alphabet()
    rng = np.random.default_rng(seed)
    hop = 160
    examples = []
    for k in range(n):
        n_words = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
        text = " ".join(TOY_WORDS[i] for i in rng.integers(0, len(TOY_WORDS), n_words))
        pieces = [np.zeros(3 * hop)]
        for ch in text:
            f1, f2 = char_chord(alphabet.symbols.index(ch))
            dur = int(rng.integers(5, 10)) * hop
            t = np.arange(dur) / SAMPLE_RATE
            phase = rng.uniform(0, 2 * np.pi, 2)
            tone = 0.3 * np.sin(2 * np.pi * f1 * t + phase[0]) + 0.2 * np.sin(2 * np.pi * f2 * t + phase[1])
            pieces.append(tone * np.hanning(dur))
            pieces.append(np.zeros(int(rng.integers(2, 4)) * hop))
        pieces.append(np.zeros(3 * hop))
        wav = np.concatenate(pieces)
        wav = wav + noise * rng.standard_normal(len(wav))
        examples.append(AudioExample(f"toy-{seed}-{k:04d}", text, waveform=wav.astype(np.float32)))
    return examples
