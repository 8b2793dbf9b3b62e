"""Frozen synthetic encoders and feature-file I/O.

Symbolic tracks stand in for raw audio and video. Each encoder maps the
symbol active at a sample time to a fixed random codebook vector, so the
frame geometry matches a real speech encoder (one vector per tick) and a real
image encoder (several vectors per frame) while nothing here is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import TensorFormatError, read_tensor, write_tensor

AUDIO_RATE_HZ = 50.0
VISUAL_FPS = 2.0
VISUAL_VECTORS_PER_FRAME = 4
_MODALITY_TAG = {"audio": 1, "visual": 2}


class FeatureFileError(ValueError):
    """A feature file is malformed or disagrees with what the caller declared."""


def frame_count(duration_s: float, rate_hz: float) -> int:
    """``ceil(duration * rate)``, robust to float noise like 5 * 0.2 = 1.0000000000000002."""
    return max(0, math.ceil(round(duration_s * rate_hz, 9)))


@dataclass(frozen=True)
class SymbolicTrack:
    """Ordered (onset_s, duration_s, symbol_id) events over a fixed timeline."""

    events: tuple[tuple[float, float, int], ...]
    vocabulary_size: int
    duration_s: float | None = None

    def __post_init__(self):
        events = tuple((float(o), float(d), int(s)) for o, d, s in self.events)
        object.__setattr__(self, "events", events)
        onsets = [e[0] for e in events]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("track onsets must be non-decreasing")
        for onset, dur, sym in events:
            if onset < 0 or dur <= 0:
                raise ValueError(f"bad event timing ({onset}, {dur})")
            if not 0 <= sym < self.vocabulary_size:
                raise ValueError(f"symbol {sym} outside vocabulary of size {self.vocabulary_size}")
        if self.duration_s is None:
            end = max((o + d for o, d, _ in events), default=0.0)
            object.__setattr__(self, "duration_s", end)
        if self.duration_s <= 0:
            raise ValueError("track duration must be positive")

    @classmethod
    def from_sequence(cls, symbols, period_s: float, vocabulary_size: int, duration_s: float | None = None):
        """Back-to-back events of equal length."""
        events = tuple((i * period_s, period_s, int(s)) for i, s in enumerate(symbols))
        return cls(events, vocabulary_size, duration_s)

    def symbol_at(self, t: float) -> int | None:
        """Symbol whose event covers time ``t`` (latest onset wins), or None if silent."""
        active = None
        for onset, dur, sym in self.events:
            if onset > t:
                break
            if t < onset + dur:
                active = sym
        return active

    def symbols(self) -> list[int]:
        return [s for _, _, s in self.events]

    def reversed(self) -> "SymbolicTrack":
        """Mirror the timeline: an event at [a, b) moves to [T-b, T-a)."""
        total = self.duration_s
        events = sorted((total - o - d, d, s) for o, d, s in self.events)
        return SymbolicTrack(tuple(events), self.vocabulary_size, total)

    def to_dict(self) -> dict:
        return {
            "events": [list(e) for e in self.events],
            "vocabulary_size": self.vocabulary_size,
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicTrack":
        return cls(tuple(tuple(e) for e in d["events"]), d["vocabulary_size"], d.get("duration_s"))


@dataclass
class ModalityFrameSequence:
    modality: str
    frame_rate_hz: float
    vectors_per_frame: int
    features: np.ndarray = field(repr=False)
    duration_s: float

    def __post_init__(self):
        if self.modality not in _MODALITY_TAG:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("features must be frames x vectors_per_frame x dim")
        frames, vpf, _ = self.features.shape
        if vpf != self.vectors_per_frame:
            raise ValueError(f"features carry {vpf} vectors per frame, declared {self.vectors_per_frame}")
        expected = frame_count(self.duration_s, self.frame_rate_hz)
        if frames != expected:
            raise ValueError(
                f"{frames} frames but ceil({self.duration_s} s x {self.frame_rate_hz} Hz) = {expected}"
            )
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def _codebook(modality: str, vocab: int, vectors: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _MODALITY_TAG[modality], vocab, vectors, dim])
    return rng.standard_normal((vocab, vectors, dim)) / np.sqrt(dim)


def encode_audio_synthetic(
    track: SymbolicTrack, d_audio: int = 32, seed: int = 0, rate_hz: float = AUDIO_RATE_HZ
) -> ModalityFrameSequence:
    """One codebook vector per tick for the symbol sounding at the tick centre."""
    if d_audio < 4:
        raise ValueError("audio feature dim must be at least 4")
    if track.vocabulary_size < 1:
        raise ValueError("empty vocabulary")
    book = _codebook("audio", track.vocabulary_size, 1, d_audio, seed)[:, 0]
    ticks = frame_count(track.duration_s, rate_hz)
    feats = np.zeros((ticks, 1, d_audio))
    for i in range(ticks):
        sym = track.symbol_at((i + 0.5) / rate_hz)
        if sym is not None:
            feats[i, 0] = book[sym]
    return ModalityFrameSequence("audio", rate_hz, 1, feats, track.duration_s)


def encode_visual_synthetic(
    track: SymbolicTrack,
    d_visual: int = 32,
    fps: float = VISUAL_FPS,
    vectors_per_frame: int = VISUAL_VECTORS_PER_FRAME,
    seed: int = 0,
) -> ModalityFrameSequence:
    """Per frame, the ``vectors_per_frame`` codebook vectors of the scene at the frame midpoint."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    if track.vocabulary_size < 1:
        raise ValueError("empty vocabulary")
    book = _codebook("visual", track.vocabulary_size, vectors_per_frame, d_visual, seed)
    frames = frame_count(track.duration_s, fps)
    feats = np.zeros((frames, vectors_per_frame, d_visual))
    for f in range(frames):
        sym = track.symbol_at((f + 0.5) / fps)
        if sym is not None:
            feats[f] = book[sym]
    return ModalityFrameSequence("visual", fps, vectors_per_frame, feats, track.duration_s)


def duplicate_image_to_video(image: ModalityFrameSequence, audio_duration_s: float) -> ModalityFrameSequence:
    """Repeat a single image frame so it spans the paired audio."""
    if image.frames != 1:
        raise ValueError(f"expected a single image frame, got {image.frames}")
    n = frame_count(audio_duration_s, image.frame_rate_hz)
    feats = np.repeat(image.features, n, axis=0)
    return ModalityFrameSequence(image.modality, image.frame_rate_hz, image.vectors_per_frame, feats, audio_duration_s)


# Feature files: one text header line, then a rank-3 tensor dump.
#   modality=<audio|visual> rate=<hz> vpf=<n> duration=<s>


def save_features(seq: ModalityFrameSequence, path) -> None:
    header = (
        f"modality={seq.modality} rate={seq.frame_rate_hz!r} vpf={seq.vectors_per_frame} "
        f"duration={seq.duration_s!r}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        write_tensor(fh, seq.features)


def load_features(path, modality: str, rate_hz: float | None = None) -> ModalityFrameSequence:
    """Read a feature file, checking it against the declared modality (and rate, if given)."""
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline(4096)
        if not line.endswith(b"\n"):
            raise FeatureFileError(f"{path}: missing header line")
        try:
            fields = dict(tok.split("=", 1) for tok in line.decode("ascii").split())
            file_modality = fields["modality"]
            rate = float(fields["rate"])
            vpf = int(fields["vpf"])
        except (KeyError, ValueError, UnicodeDecodeError) as exc:
            raise FeatureFileError(f"{path}: malformed header {line!r}") from exc
        try:
            feats = read_tensor(fh)
        except TensorFormatError as exc:
            raise FeatureFileError(f"{path}: {exc}") from exc
        if fh.read(1):
            raise FeatureFileError(f"{path}: trailing bytes after tensor payload")
    if file_modality != modality:
        raise FeatureFileError(f"{path}: holds {file_modality} features, expected {modality}")
    if rate_hz is not None and abs(rate - rate_hz) > 1e-9:
        raise FeatureFileError(f"{path}: rate {rate} Hz does not match declared {rate_hz} Hz")
    if feats.ndim != 3:
        raise FeatureFileError(f"{path}: expected a rank-3 tensor, got rank {feats.ndim}")
    if feats.shape[1] != vpf:
        raise FeatureFileError(f"{path}: header vpf={vpf} but tensor has {feats.shape[1]}")
    duration = float(fields.get("duration", feats.shape[0] / rate))
    try:
        return ModalityFrameSequence(modality, rate, vpf, feats, duration)
    except ValueError as exc:
        raise FeatureFileError(f"{path}: {exc}") from exc
