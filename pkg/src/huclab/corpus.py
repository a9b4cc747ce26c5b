"""Synthetic speech-like corpus with known speaker and phoneme factors.

Every utterance is a sequence of phone slots.  Each slot lasts
``frames_per_phone`` frames and each frame spans ``samples_per_frame`` raw
samples.  The samples of a frame carrying phone ``p`` spoken by speaker
``s`` are

    phone_template[p] + speaker_strength * speaker_template[s] + noise

with both templates drawn once from a seeded standard normal and the noise
i.i.d. ``N(0, noise_std**2)``.  Speaker identity therefore enters as an
additive, utterance-constant component whose strength is the
``speaker_strength`` knob, which is what makes utterance-level means of
learned representations speaker-revealing downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InsufficientMaterialError(ValueError):
    """No triplet satisfies the requested mode on this corpus."""


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 4
    num_phonemes: int = 4
    utterances_per_speaker: int = 10
    phones_per_utterance: int = 6
    frames_per_phone: int = 6
    samples_per_frame: int = 24
    speaker_strength: float = 3.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "num_speakers": self.num_speakers,
            "num_phonemes": self.num_phonemes,
            "utterances_per_speaker": self.utterances_per_speaker,
            "phones_per_utterance": self.phones_per_utterance,
            "frames_per_phone": self.frames_per_phone,
            "samples_per_frame": self.samples_per_frame,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a count >= 1, got {value!r}")
        if self.num_phonemes < 3:
            raise ValueError("num_phonemes must be >= 3 (triplet tests need distinct center phones)")
        if self.speaker_strength < 0:
            raise ValueError("speaker_strength must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class SignalSequence:
    """One utterance: raw samples plus frame-aligned ground-truth factors."""

    utterance_id: str
    speaker_id: int
    samples: np.ndarray        # shape (num_frames * samples_per_frame,)
    frame_phones: np.ndarray   # shape (num_frames,), int

    @property
    def num_frames(self) -> int:
        return len(self.frame_phones)

    @property
    def frame_speakers(self) -> np.ndarray:
        return np.full(self.num_frames, self.speaker_id, dtype=np.int64)


def gen_corpus(config: CorpusConfig) -> list[SignalSequence]:
    """Generate the full corpus. Pure function of the config (incl. seed).

    Draw order (fixed for reproducibility): phone templates, speaker
    templates, then per speaker and per utterance the phone sequence
    followed by the sample noise.
    """
    rng = np.random.default_rng(config.seed)
    r = config.samples_per_frame
    phone_templates = rng.standard_normal((config.num_phonemes, r))
    speaker_templates = rng.standard_normal((config.num_speakers, r))

    corpus = []
    for s in range(config.num_speakers):
        for u in range(config.utterances_per_speaker):
            phones = rng.integers(0, config.num_phonemes, size=config.phones_per_utterance)
            frame_phones = np.repeat(phones, config.frames_per_phone)
            frames = phone_templates[frame_phones] + config.speaker_strength * speaker_templates[s]
            frames = frames + rng.normal(0.0, config.noise_std, size=frames.shape)
            corpus.append(
                SignalSequence(
                    utterance_id=f"s{s:03d}u{u:03d}",
                    speaker_id=s,
                    samples=frames.reshape(-1),
                    frame_phones=frame_phones.astype(np.int64),
                )
            )
    return corpus


# --- ABX triplet material ---------------------------------------------------


@dataclass(frozen=True)
class SegmentRef:
    """A tri-phone segment of an utterance, referenced by frame span."""

    utterance_id: str
    frame_start: int
    frame_len: int
    center_phone: int
    speaker_id: int


@dataclass(frozen=True)
class Triplet:
    a: SegmentRef
    b: SegmentRef
    x: SegmentRef


@dataclass
class TripletSet:
    items: list[Triplet]
    mode: str  # "within" | "across"


@dataclass(frozen=True)
class _Occurrence:
    utterance_id: str
    speaker_id: int
    frame_start: int
    frame_len: int
    triple: tuple[int, int, int]

    def ref(self) -> SegmentRef:
        return SegmentRef(
            utterance_id=self.utterance_id,
            frame_start=self.frame_start,
            frame_len=self.frame_len,
            center_phone=self.triple[1],
            speaker_id=self.speaker_id,
        )


def phone_runs(frame_phones: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of equal frame labels as (phone, start, length)."""
    runs = []
    start = 0
    for i in range(1, len(frame_phones) + 1):
        if i == len(frame_phones) or frame_phones[i] != frame_phones[start]:
            runs.append((int(frame_phones[start]), start, i - start))
            start = i
    return runs


def triphone_occurrences(corpus: list[SignalSequence]) -> list[_Occurrence]:
    """All consecutive run triples, in (utterance, position) order.

    Working on runs (not raw phone slots) guarantees the center phone of
    every occurrence differs from both flanks, so two words of a minimal
    pair can never collapse to the same de-duplicated phone string.
    """
    occs = []
    for sig in corpus:
        runs = phone_runs(sig.frame_phones)
        for j in range(len(runs) - 2):
            (p1, start, n1), (p2, _, n2), (p3, _, n3) = runs[j], runs[j + 1], runs[j + 2]
            occs.append(
                _Occurrence(
                    utterance_id=sig.utterance_id,
                    speaker_id=sig.speaker_id,
                    frame_start=start,
                    frame_len=n1 + n2 + n3,
                    triple=(p1, p2, p3),
                )
            )
    return occs


def make_abx_triplets(
    corpus: list[SignalSequence], mode: str, max_triplets: int, seed: int
) -> TripletSet:
    """Enumerate all valid (A, B, X) triplets, then seeded-subsample to the cap.

    A and B share flanking phones and differ in the center; X is a distinct
    occurrence of A's full triple.  mode="within": all three segments from
    one speaker; mode="across": A and B share a speaker, X comes from a
    different one.
    """
    if mode not in ("within", "across"):
        raise ValueError(f"mode must be 'within' or 'across', got {mode!r}")
    if max_triplets < 1:
        raise ValueError("max_triplets must be >= 1")

    occs = triphone_occurrences(corpus)
    by_triple: dict[tuple[int, int, int], list[_Occurrence]] = {}
    by_flanks: dict[tuple[int, int], list[_Occurrence]] = {}
    for occ in occs:
        by_triple.setdefault(occ.triple, []).append(occ)
        by_flanks.setdefault((occ.triple[0], occ.triple[2]), []).append(occ)

    triplets = []
    for a in occs:
        xs = [
            x
            for x in by_triple[a.triple]
            if x is not a
            and (x.speaker_id == a.speaker_id if mode == "within" else x.speaker_id != a.speaker_id)
        ]
        if not xs:
            continue
        bs = [
            b
            for b in by_flanks[(a.triple[0], a.triple[2])]
            if b.triple[1] != a.triple[1] and b.speaker_id == a.speaker_id
        ]
        if not bs:
            continue
        for x in xs:
            for b in bs:
                triplets.append(Triplet(a=a.ref(), b=b.ref(), x=x.ref()))

    if not triplets:
        raise InsufficientMaterialError(
            f"insufficient material: no valid {mode}-speaker triplet in this corpus"
        )
    if len(triplets) > max_triplets:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(triplets), size=max_triplets, replace=False))
        triplets = [triplets[i] for i in keep]
    return TripletSet(items=triplets, mode=mode)
