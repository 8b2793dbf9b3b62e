"""Synthetic audio-visual tasks with ground truth fixed by construction.

``toy_asr``      transcribe a spoken symbol sequence (audio only)
``temporal_qa``  which scene comes right after a named scene (video only, multiple choice)
``avm``          does the spoken sequence match the scene sequence in time (yes/no)
``isqa``         a spoken question about whichever object is on screen while it is asked

Every generator is a pure function of its seed. :func:`make_split` draws
train and test sets from disjoint seed streams and additionally drops any
train sample whose content hash collides with a test sample.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import SymbolicTrack
from .vocab import COLORS, SHAPES, NUM_SYMBOLS, symbol_token

KINDS = ("toy_asr", "temporal_qa", "avm", "isqa")
ISQA_PROMPT = ("answer", "the", "question", "in", "the", "audio", "about", "the", "image")
AVM_PROMPT = ("does", "the", "audio", "match", "the", "video")
ASR_PROMPT = ("transcribe",)
ISQA_QUESTIONS = ("color", "shape")


@dataclass
class SyntheticTask:
    task_id: str
    kind: str
    audio_track: SymbolicTrack | None
    visual_track: SymbolicTrack | None
    prompt: list[str]
    reference: list[str]
    choices: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("id")
        d.pop("meta", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "id": self.task_id,
            "kind": self.kind,
            "audio": None if self.audio_track is None else self.audio_track.to_dict(),
            "visual": None if self.visual_track is None else self.visual_track.to_dict(),
            "prompt": list(self.prompt),
            "reference": list(self.reference),
            "choices": None if self.choices is None else list(self.choices),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        return cls(
            task_id=d["id"],
            kind=d["kind"],
            audio_track=None if d.get("audio") is None else SymbolicTrack.from_dict(d["audio"]),
            visual_track=None if d.get("visual") is None else SymbolicTrack.from_dict(d["visual"]),
            prompt=list(d["prompt"]),
            reference=list(d["reference"]),
            choices=None if d.get("choices") is None else list(d["choices"]),
            meta=d.get("meta", {}),
        )


def gen_toy_asr(
    seed: int,
    count: int,
    duration_range: tuple[float, float] = (2.0, 4.0),
    symbol_period_s: float = 0.25,
    num_symbols: int = NUM_SYMBOLS,
    audio: bool = True,
) -> list[SyntheticTask]:
    """Back-to-back spoken symbols; the reference is the symbol sequence.

    Durations are drawn from multiples of ``symbol_period_s`` inside
    ``duration_range``. Adjacent symbols always differ, otherwise two equal
    neighbours would sound like one long symbol.
    """
    if not audio:
        raise ValueError("toy_asr needs an audio track")
    lo, hi = duration_range
    if lo <= 0 or hi < lo or symbol_period_s <= 0:
        raise ValueError("durations and symbol period must be positive")
    lengths = np.arange(int(np.ceil(lo / symbol_period_s - 1e-9)), int(np.floor(hi / symbol_period_s + 1e-9)) + 1)
    if lengths.size == 0:
        raise ValueError("duration range holds no whole number of symbols")
    rng = np.random.default_rng([seed, 1])
    tasks = []
    for i in range(count):
        n = int(rng.choice(lengths))
        seq = [int(rng.integers(num_symbols))]
        while len(seq) < n:
            s = int(rng.integers(num_symbols - 1))
            seq.append(s if s < seq[-1] else s + 1)
        track = SymbolicTrack.from_sequence(seq, symbol_period_s, num_symbols)
        tasks.append(
            SyntheticTask(f"toy_asr-{seed}-{i}", "toy_asr", track, None, list(ASR_PROMPT), [symbol_token(s) for s in seq])
        )
    return tasks


def _compose(rng, total: int, parts: int, lo: int, hi: int) -> list[int]:
    """Random composition of ``total`` into ``parts`` integers within [lo, hi]."""
    while True:
        sizes = rng.integers(lo, hi + 1, size=parts)
        if sizes.sum() == total:
            return [int(s) for s in sizes]


def scene_track(scenes, frame_lengths, fps: float, vocabulary_size: int) -> SymbolicTrack:
    events, t = [], 0
    for sym, n in zip(scenes, frame_lengths):
        events.append((t / fps, n / fps, int(sym)))
        t += n
    return SymbolicTrack(tuple(events), vocabulary_size, t / fps)


def temporal_qa_task(
    task_id: str, scenes, frame_lengths, asked: int, choices, fps: float = 2.0, num_symbols: int = NUM_SYMBOLS
) -> SyntheticTask:
    track = scene_track(scenes, frame_lengths, fps, num_symbols)
    ref = symbol_token(scenes[asked + 1])
    prompt = ["what", "after", symbol_token(scenes[asked]), "options", *choices]
    return SyntheticTask(task_id, "temporal_qa", None, track, prompt, [ref], list(choices))


def gen_temporal_qa(
    seed: int,
    count: int,
    num_scenes: int = 5,
    total_frames: int = 10,
    max_scene_frames: int = 3,
    num_choices: int = 4,
    fps: float = 2.0,
    num_symbols: int = NUM_SYMBOLS,
) -> list[SyntheticTask]:
    """Scenes of random length; ask which scene directly follows a named one."""
    if num_scenes < 2 or num_choices < 2:
        raise ValueError("need at least two scenes and two choices")
    if not num_scenes <= num_symbols <= NUM_SYMBOLS or num_choices > num_symbols:
        raise ValueError("num_symbols must cover the scenes and choices and fit the vocabulary")
    rng = np.random.default_rng([seed, 2])
    tasks = []
    for i in range(count):
        scenes = [int(s) for s in rng.choice(num_symbols, size=num_scenes, replace=False)]
        lengths = _compose(rng, total_frames, num_scenes, 1, max_scene_frames)
        asked = int(rng.integers(num_scenes - 1))
        answer = scenes[asked + 1]
        pool = [s for s in scenes if s != answer]
        rng.shuffle(pool)
        distractors = pool[: num_choices - 1]
        while len(distractors) < num_choices - 1:
            s = int(rng.integers(num_symbols))
            if s != answer and s not in distractors:
                distractors.append(s)
        options = [answer, *distractors]
        rng.shuffle(options)
        task = temporal_qa_task(
            f"temporal_qa-{seed}-{i}", scenes, lengths, asked, [symbol_token(s) for s in options], fps, num_symbols
        )
        task.meta = {"scenes": scenes, "frames": lengths, "asked": asked}
        tasks.append(task)
    return tasks


def gen_avm(
    seed: int, count: int, num_scenes: int = 4, scene_s: float = 1.0, num_symbols: int = 8
) -> list[SyntheticTask]:
    """Scenes with a spoken symbol during each; "no" samples speak them in a shuffled order.

    Exactly ``count // 2`` samples are matched; the order of yes/no is shuffled.
    """
    if num_scenes < 2:
        raise ValueError("need at least two scenes to shuffle")
    rng = np.random.default_rng([seed, 3])
    labels = np.array([True] * (count // 2) + [False] * (count - count // 2))
    rng.shuffle(labels)
    tasks = []
    for i, match in enumerate(labels):
        scenes = [int(s) for s in rng.choice(num_symbols, size=num_scenes, replace=False)]
        spoken = list(scenes)
        if not match:
            while spoken == scenes:
                spoken = [int(s) for s in rng.permutation(scenes)]
        visual = SymbolicTrack.from_sequence(scenes, scene_s, num_symbols)
        audio = SymbolicTrack.from_sequence(spoken, scene_s, num_symbols)
        tasks.append(
            SyntheticTask(
                f"avm-{seed}-{i}", "avm", audio, visual, list(AVM_PROMPT), ["yes" if match else "no"], ["yes", "no"]
            )
        )
    return tasks


def gen_isqa(seed: int, count: int, num_objects: int = 4, object_s: float = 1.0, question_s: float = 0.5) -> list[SyntheticTask]:
    """Objects shown one after another; a colour or shape question is spoken during one of them.

    Colours are distinct across the objects of a sample, and so are shapes,
    so the answer is fixed only once the question is tied to the object on
    screen at that moment.
    """
    if num_objects > min(len(COLORS), len(SHAPES)):
        raise ValueError("too many objects for distinct attributes")
    rng = np.random.default_rng([seed, 4])
    n_obj_symbols = len(COLORS) * len(SHAPES)
    tasks = []
    for i in range(count):
        colors = rng.choice(len(COLORS), size=num_objects, replace=False)
        shapes = rng.choice(len(SHAPES), size=num_objects, replace=False)
        objects = [int(c) * len(SHAPES) + int(s) for c, s in zip(colors, shapes)]
        visual = SymbolicTrack.from_sequence(objects, object_s, n_obj_symbols)
        target = int(rng.integers(num_objects))
        qtype = int(rng.integers(len(ISQA_QUESTIONS)))
        offset = float(rng.choice(np.arange(0.0, object_s - question_s + 1e-9, 0.5)))
        audio = SymbolicTrack(
            ((target * object_s + offset, question_s, qtype),), len(ISQA_QUESTIONS), visual.duration_s
        )
        answer = COLORS[colors[target]] if qtype == 0 else SHAPES[shapes[target]]
        tasks.append(
            SyntheticTask(
                f"isqa-{seed}-{i}", "isqa", audio, visual, list(ISQA_PROMPT), [answer],
                meta={"target": target, "question": ISQA_QUESTIONS[qtype]},
            )
        )
    return tasks


GENERATORS = {"toy_asr": gen_toy_asr, "temporal_qa": gen_temporal_qa, "avm": gen_avm, "isqa": gen_isqa}


def generate(kind: str, seed: int, count: int, **kwargs) -> list[SyntheticTask]:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {KINDS}") from None
    return gen(seed, count, **kwargs)


def make_split(kind: str, seed: int, n_train: int, n_test: int, **kwargs):
    """Train/test sets from disjoint seed streams, with hash-level de-duplication."""
    test = generate(kind, 2 * seed + 1, n_test, **kwargs)
    held = {t.content_hash() for t in test}
    train: list[SyntheticTask] = []
    chunk = stale = 0
    while len(train) < n_train:
        batch = generate(kind, 2 * seed + 2 * 1_000_003 * (chunk + 1), n_train, **kwargs)
        before = len(train)
        for t in batch:
            h = t.content_hash()
            if h not in held:
                held.add(h)
                train.append(t)
                if len(train) == n_train:
                    break
        chunk += 1
        # a whole chunk with nothing new means the task space is nearly exhausted
        stale = stale + 1 if len(train) == before else 0
        if stale == 3:
            raise ValueError(f"only {len(train)} distinct {kind} training samples are available, {n_train} requested")
    for j, t in enumerate(train):
        t.task_id = f"{kind}-train-{seed}-{j}"
    for j, t in enumerate(test):
        t.task_id = f"{kind}-test-{seed}-{j}"
    return train, test


def save_tasks(tasks, path) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict()) + "\n")


def load_tasks(path) -> list[SyntheticTask]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(SyntheticTask.from_dict(json.loads(line)))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{n}: bad task record ({exc})") from exc
    return out
