"""Corpus pipeline: grid quantization, the odd/even tempo filter, pitch-shift
augmentation, track splitting for conditioning tasks, chord/meter label
codecs, and deterministic dataset splits."""

import random
from collections import defaultdict
from dataclasses import dataclass

from .errors import TaskSetupError, ValidationError
from .score import (
    DRUM_INSTRUMENT,
    DURATION_BINS,
    POLYPHONY_CAP,
    NoteEvent,
    Score,
    TimeStep,
    duration_quantize,
    sort_step,
)

# Odd/even onset-ratio band that marks a track as suspiciously uniform.
FILTER_BAND = (0.35, 0.65)
FILTER_MIN_NOTES = 8

PITCH_SHIFT_RANGE = (-5, 6)

CHORD_INSTRUMENT = 48  # String Ensemble 1
CHORD_BASS_LOW = 36    # bass register 36..47, chord tones 48..71

KICK, SNARE, HIHAT = 35, 38, 42

QUALITY_INTERVALS = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "dom7": (0, 4, 7, 10),
}
NO_CHORD = "none"
TRIAD_FAMILY = {"maj": "maj", "maj7": "maj", "dom7": "maj", "min": "min", "min7": "min"}
SEVENTH_TYPE = {"maj": "none", "min": "none", "maj7": "maj7", "min7": "min7", "dom7": "min7"}


def _round_half_up(x):
    return int(x + 0.5)


def quantize_to_grid(song, cap=POLYPHONY_CAP):
    """Quantize a RawMidiSong onto the 16th-note grid."""
    step_ticks = song.ticks_per_quarter / 4.0
    by_step = defaultdict(list)
    last = 0
    for rec in song.all_notes():
        step = _round_half_up(rec.tick / step_ticks)
        sixteenths = max(1, _round_half_up(rec.duration_ticks / step_ticks))
        instrument = DRUM_INSTRUMENT if rec.is_drum else rec.program
        dur_bin = 0 if rec.is_drum else duration_quantize(sixteenths)
        by_step[step].append(NoteEvent(instrument, rec.pitch, dur_bin))
        last = max(last, step)
    steps = [sort_step(by_step.get(t, ()), cap) for t in range(last + 1)]
    return Score(steps or [TimeStep()])


def odd_even_ratios(score):
    """Per-instrument (odd-step onsets, total onsets)."""
    counts = defaultdict(lambda: [0, 0])
    for t, step in enumerate(score.steps):
        for n in step.notes:
            c = counts[n.instrument]
            c[0] += t % 2
            c[1] += 1
    return {inst: (odd, total) for inst, (odd, total) in counts.items()}


def odd_even_keep(score, band=FILTER_BAND, min_notes=FILTER_MIN_NOTES):
    """True to keep the song. Discard when every track with at least
    ``min_notes`` onsets has an odd-onset fraction inside ``band``."""
    tested = 0
    for odd, total in odd_even_ratios(score).values():
        if total < min_notes:
            continue
        tested += 1
        r = odd / total
        if not band[0] <= r <= band[1]:
            return True
    return tested == 0


def pitch_shift(score, semitones):
    """Transpose pitched notes; drums are untouched; out-of-range pitches fold
    back by octaves."""
    lo, hi = PITCH_SHIFT_RANGE
    if not lo <= semitones <= hi:
        raise ValidationError(f"pitch shift {semitones} outside [{lo}, {hi}]")
    steps = []
    for step in score.steps:
        notes = []
        for n in step.notes:
            if n.is_drum:
                notes.append(n)
                continue
            p = n.pitch + semitones
            while p > 127:
                p -= 12
            while p < 0:
                p += 12
            notes.append(NoteEvent(n.instrument, p, n.duration_bin))
        steps.append(sort_step(notes))
    return Score(steps, score.steps_per_bar)


def melody_instrument(score):
    """The pitched instrument with the highest mean pitch."""
    sums = defaultdict(lambda: [0, 0])
    for step in score.steps:
        for n in step.notes:
            if not n.is_drum:
                s = sums[n.instrument]
                s[0] += n.pitch
                s[1] += 1
    if not sums:
        raise TaskSetupError("score has no pitched notes to pick a melody from")
    return max(sums, key=lambda i: (sums[i][0] / sums[i][1], i))


TASK_PREDICATES = ("drum", "non_drum", "melody", "chord", "annotation")


def split_tracks(score, predicate):
    """Partition into (condition, target); ``predicate`` names the target side.

    drum: drums | non_drum: pitched | melody: highest-mean-pitch track |
    chord: everything except melody | annotation: chord+meter label tracks.
    """
    if predicate not in TASK_PREDICATES:
        raise ValidationError(f"unknown predicate {predicate!r}")
    if predicate == "drum":
        in_target = lambda n: n.is_drum
    elif predicate == "non_drum":
        in_target = lambda n: not n.is_drum
    elif predicate == "melody":
        mel = melody_instrument(score)
        in_target = lambda n: n.instrument == mel
    elif predicate == "chord":
        mel = melody_instrument(score)
        in_target = lambda n: n.instrument != mel
    else:  # annotation
        in_target = lambda n: n.is_drum or n.instrument == CHORD_INSTRUMENT
    cond, target = [], []
    for step in score.steps:
        cond.append(TimeStep(tuple(n for n in step.notes if not in_target(n))))
        target.append(TimeStep(tuple(n for n in step.notes if in_target(n))))
    if not any(len(s) for s in target):
        raise TaskSetupError(f"target side for predicate {predicate!r} is empty")
    return Score(cond, score.steps_per_bar), Score(target, score.steps_per_bar)


@dataclass(frozen=True)
class ChordLabel:
    """A chord span on the 16th grid; ``root``/``bass`` are pitch classes,
    None with quality 'none' for no-chord."""

    root: int
    quality: str
    bass: int
    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise ValidationError(f"empty chord span [{self.start}, {self.end})")
        if self.quality == NO_CHORD:
            if self.root is not None or self.bass is not None:
                raise ValidationError("no-chord must have empty root and bass")
        else:
            if self.quality not in QUALITY_INTERVALS:
                raise ValidationError(f"unknown chord quality {self.quality!r}")
            if not (0 <= self.root < 12 and 0 <= self.bass < 12):
                raise ValidationError("root/bass must be pitch classes 0..11")

    @property
    def is_none(self):
        return self.quality == NO_CHORD

    def pitch_classes(self):
        if self.is_none:
            return frozenset()
        return frozenset((self.root + iv) % 12 for iv in QUALITY_INTERVALS[self.quality])


def no_chord(start, end):
    return ChordLabel(None, NO_CHORD, None, start, end)


def chord_voicing(label):
    """Concrete pitches: bass at 36+pc, chord tones stacked close above it
    within 48..71 ordered by interval from the bass (unison voiced as octave)."""
    pitches = [CHORD_BASS_LOW + label.bass]
    intervals = sorted(((pc - label.bass - 1) % 12) + 1 for pc in label.pitch_classes())
    pitches.extend(CHORD_BASS_LOW + 12 + label.bass + iv for iv in intervals)
    return pitches


def _tile_durations(length):
    """Greedy cover of ``length`` steps by exact duration-bin values."""
    out = []
    offset = 0
    while offset < length:
        remaining = length - offset
        value = max(v for v in DURATION_BINS if v <= remaining)
        out.append((offset, duration_quantize(value)))
        offset += value
    return out


def encode_chord_track(labels, grid_length=None):
    """Render chord labels as block notes on the chord instrument."""
    ordered = sorted(labels, key=lambda l: l.start)
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise ValidationError(f"overlapping chord spans at step {b.start}")
    length = grid_length if grid_length is not None else max((l.end for l in ordered), default=1)
    by_step = defaultdict(list)
    for label in ordered:
        if label.is_none:
            continue
        pitches = chord_voicing(label)
        for offset, dur_bin in _tile_durations(label.end - label.start):
            for p in pitches:
                by_step[label.start + offset].append(NoteEvent(CHORD_INSTRUMENT, p, dur_bin))
    steps = [sort_step(by_step.get(t, ())) for t in range(length)]
    return Score(steps or [TimeStep()])


def encode_meter_track(bars, beats_per_bar=4, steps_per_beat=4):
    """Drum-track meter encoding: kick on downbeats, snare on the midpoint
    beat, closed hi-hat on the eighth-note grid."""
    if bars < 1 or beats_per_bar < 1 or steps_per_beat < 1:
        raise ValidationError("bar counts must be positive")
    steps_per_bar = beats_per_bar * steps_per_beat
    snare_step = (beats_per_bar // 2) * steps_per_beat
    steps = []
    for t in range(bars * steps_per_bar):
        in_bar = t % steps_per_bar
        notes = []
        if in_bar == 0:
            notes.append(NoteEvent(DRUM_INSTRUMENT, KICK, 0))
        if in_bar == snare_step and snare_step != 0:
            notes.append(NoteEvent(DRUM_INSTRUMENT, SNARE, 0))
        if t % 2 == 0:
            notes.append(NoteEvent(DRUM_INSTRUMENT, HIHAT, 0))
        steps.append(sort_step(notes))
    return Score(steps, steps_per_bar)


@dataclass
class SplitManifest:
    seed: int
    train: list
    validation: list
    test: list

    def split_of(self, song_id):
        for name in ("train", "validation", "test"):
            if song_id in getattr(self, name):
                return name
        raise ValidationError(f"unknown song id {song_id!r}")


def split_dataset(song_ids, seed):
    """Deterministic 8:1:1 split with largest-remainder rounding."""
    ids = sorted(song_ids)
    if len(ids) < 10:
        raise ValidationError(f"need at least 10 songs, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n = len(ids)
    ratios = (0.8, 0.1, 0.1)
    sizes = [int(n * r) for r in ratios]
    remainders = [n * r - s for r, s in zip(ratios, sizes)]
    for _ in range(n - sum(sizes)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        sizes[i] += 1
        remainders[i] = -1.0
    train = ids[:sizes[0]]
    val = ids[sizes[0]:sizes[0] + sizes[1]]
    test = ids[sizes[0] + sizes[1]:]
    return SplitManifest(seed, train, val, test)


def save_split(manifest, path):
    with open(path, "w") as fh:
        fh.write(f"# seed={manifest.seed}\n")
        for name in ("train", "validation", "test"):
            for song_id in getattr(manifest, name):
                fh.write(f"{song_id}\t{name}\n")


def load_split(path):
    seed = 0
    buckets = {"train": [], "validation": [], "test": []}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "seed=" in line:
                    seed = int(line.split("seed=", 1)[1])
                continue
            song_id, name = line.split("\t")
            buckets[name].append(song_id)
    return SplitManifest(seed, buckets["train"], buckets["validation"], buckets["test"])


def bar_aligned_window(score, max_steps, rng):
    """Random window of at most ``max_steps`` steps starting on a bar line."""
    if len(score) <= max_steps:
        return score
    bar = score.steps_per_bar
    last_start = len(score) - max_steps
    start = rng.randrange(last_start // bar + 1) * bar
    start = min(start, last_start)
    return Score(score.steps[start:start + max_steps], bar)


def merge_scores(a, b):
    """Per-step union of two grid-aligned scores."""
    length = max(len(a), len(b))
    steps = []
    for t in range(length):
        notes = []
        if t < len(a):
            notes.extend(a.steps[t].notes)
        if t < len(b):
            notes.extend(b.steps[t].notes)
        steps.append(sort_step(notes))
    return Score(steps, a.steps_per_bar)
