"""Temporal synchronisation of audio and visual streams, and window partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import ModalityFrameSequence, frame_count

DEFAULT_SLOT_S = 0.5


@dataclass
class SyncedSequence:
    """T slots of paired audio/visual rows, each row ``d_audio + d_visual`` wide.

    ``slots[t, :, :d_audio]`` is the audio half and ``slots[t, :, d_audio:]`` the
    visual half; a missing modality's half is all zeros.
    """

    slots: np.ndarray
    slot_duration_s: float
    audio_present: bool
    visual_present: bool
    d_audio: int
    d_visual: int

    def __post_init__(self):
        if self.slots.ndim != 3 or self.slots.shape[0] < 1:
            raise ValueError("synced slots must be T x vectors_per_slot x dim with T >= 1")
        if self.slots.shape[2] != self.d_audio + self.d_visual:
            raise ValueError("combined feature dim must equal d_audio + d_visual")

    @property
    def num_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def vectors_per_slot(self) -> int:
        return self.slots.shape[1]

    @property
    def dim(self) -> int:
        return self.slots.shape[2]

    def audio_half(self) -> np.ndarray:
        return self.slots[:, :, : self.d_audio]

    def visual_half(self) -> np.ndarray:
        return self.slots[:, :, self.d_audio :]


@dataclass(frozen=True)
class WindowingConfig:
    k: int = 10
    n_queries: int = 8

    def __post_init__(self):
        if self.k < 1 or self.n_queries < 1:
            raise ValueError("k and n_queries must both be >= 1")

    def num_windows(self, num_slots: int) -> int:
        return math.ceil(num_slots / self.k)


def _audio_slot_index(audio: ModalityFrameSequence, slot_s: float) -> np.ndarray:
    # tick i starts at i / rate; it belongs to the slot containing its start
    starts = np.arange(audio.frames) / audio.frame_rate_hz
    return np.floor(starts / slot_s + 1e-9).astype(int)


def synchronize(
    audio: ModalityFrameSequence | None,
    visual: ModalityFrameSequence | None,
    *,
    d_audio: int | None = None,
    d_visual: int | None = None,
    slot_duration_s: float = DEFAULT_SLOT_S,
) -> SyncedSequence:
    """Pair each visual frame with the audio ticks that fall inside its period.

    Within a slot, audio ticks and visual vectors are matched row by row and
    the shorter list is zero-padded up to ``max(ticks per slot, vectors per
    frame)``. When one stream is missing its half is zeros; ``d_audio`` /
    ``d_visual`` then give the width of that half. Audio-only input uses
    ``slot_duration_s`` as the slot period.
    """
    if audio is None and visual is None:
        raise ValueError("synchronize needs at least one modality")
    if audio is not None and audio.modality != "audio":
        raise ValueError("first argument must carry audio features")
    if visual is not None and visual.modality != "visual":
        raise ValueError("second argument must carry visual features")
    da = audio.dim if audio is not None else d_audio
    dv = visual.dim if visual is not None else d_visual
    if da is None or dv is None:
        raise ValueError("the absent modality's feature dim must be given")

    if visual is not None:
        slot_s = 1.0 / visual.frame_rate_hz
        num_slots = visual.frames
        if audio is not None and abs(audio.duration_s - visual.duration_s) > slot_s + 1e-9:
            raise ValueError(
                f"audio ({audio.duration_s} s) and visual ({visual.duration_s} s) differ by more than one slot"
            )
    else:
        slot_s = slot_duration_s
        num_slots = frame_count(audio.duration_s, 1.0 / slot_s)

    audio_rows = None
    per_slot = 0
    if audio is not None:
        idx = _audio_slot_index(audio, slot_s)
        keep = idx < num_slots  # ticks past the last visual frame are dropped
        idx = idx[keep]
        counts = np.bincount(idx, minlength=num_slots)
        per_slot = int(counts.max()) if counts.size else 0
        audio_rows = (idx, audio.features[keep, 0])
    vpf = visual.vectors_per_frame if visual is not None else 0
    vps = max(per_slot, vpf, 1)

    slots = np.zeros((num_slots, vps, da + dv))
    if audio_rows is not None:
        idx, feats = audio_rows
        # position of each tick within its slot
        first = np.searchsorted(idx, np.arange(num_slots))
        row = np.arange(idx.size) - first[idx]
        slots[idx, row, :da] = feats
    if visual is not None:
        slots[:, :vpf, da:] = visual.features
    return SyncedSequence(slots, slot_s, audio is not None, visual is not None, da, dv)


def window_partition(synced: SyncedSequence | np.ndarray, cfg: WindowingConfig) -> list[np.ndarray]:
    """Split slots into ``ceil(T/k)`` consecutive windows; the last may be shorter."""
    slots = synced.slots if isinstance(synced, SyncedSequence) else synced
    total = slots.shape[0]
    if total < 1:
        raise ValueError("cannot window an empty sequence")
    return [slots[start : start + cfg.k] for start in range(0, total, cfg.k)]
