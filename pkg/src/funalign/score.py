"""Simu-note score representation on a fixed 16th-note grid.

A score is a list of time steps; each step holds the notes whose onset falls
on that step, sorted by (instrument, flattened pitch-duration token). Steps
serialize to token lists ``[inst, note, inst, note, ..., eos]``.
"""

import hashlib
from bisect import bisect_left
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

DRUM_INSTRUMENT = 128
POLYPHONY_CAP = 16
STEPS_PER_BAR = 16

# 24 duration bins in sixteenth-note units, interleaving 1*2^k and 3*2^k.
DURATION_BINS = (
    1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64,
    96, 128, 192, 256, 384, 512, 768, 1024, 1536, 2048, 3072, 4096,
)
N_DURATION_BINS = len(DURATION_BINS)
N_PITCHES = 128


@dataclass(frozen=True)
class NoteEvent:
    instrument: int  # MIDI program 0..127, 128 for drums
    pitch: int       # MIDI pitch 0..127
    duration_bin: int

    def __post_init__(self):
        if not 0 <= self.instrument <= DRUM_INSTRUMENT:
            raise ValidationError(f"instrument {self.instrument} out of range")
        if not 0 <= self.pitch < N_PITCHES:
            raise ValidationError(f"pitch {self.pitch} out of range")
        if not 0 <= self.duration_bin < N_DURATION_BINS:
            raise ValidationError(f"duration bin {self.duration_bin} out of range")

    @property
    def note_index(self):
        return encode_note(self.pitch, self.duration_bin)

    @property
    def is_drum(self):
        return self.instrument == DRUM_INSTRUMENT


@dataclass(frozen=True)
class TimeStep:
    notes: tuple = ()

    def __len__(self):
        return len(self.notes)


@dataclass
class Score:
    steps: list = field(default_factory=lambda: [TimeStep()])
    steps_per_bar: int = STEPS_PER_BAR

    def __len__(self):
        return len(self.steps)

    def note_count(self):
        return sum(len(s) for s in self.steps)

    def instruments(self):
        return sorted({n.instrument for s in self.steps for n in s.notes})


def duration_quantize(dur_sixteenths, table=DURATION_BINS):
    """Nearest bin index; ties pick the smaller bin; above-table values clamp."""
    if dur_sixteenths < 1:
        raise ValidationError(f"duration must be >= 1 sixteenth, got {dur_sixteenths}")
    if dur_sixteenths >= table[-1]:
        return len(table) - 1
    i = bisect_left(table, dur_sixteenths)
    if table[i] == dur_sixteenths:
        return i
    lo, hi = table[i - 1], table[i]
    return i - 1 if dur_sixteenths - lo <= hi - dur_sixteenths else i


def duration_dequantize(bin_index, table=DURATION_BINS):
    if not 0 <= bin_index < len(table):
        raise ValidationError(f"duration bin {bin_index} out of range")
    return table[bin_index]


def encode_note(pitch, duration_bin):
    """Flatten (pitch, duration_bin) to n = 24*pitch + bin."""
    if not 0 <= pitch < N_PITCHES:
        raise ValidationError(f"pitch {pitch} out of range")
    if not 0 <= duration_bin < N_DURATION_BINS:
        raise ValidationError(f"duration bin {duration_bin} out of range")
    return N_DURATION_BINS * pitch + duration_bin


def decode_note(n):
    if not 0 <= n < N_DURATION_BINS * N_PITCHES:
        raise ValidationError(f"note index {n} out of range")
    return divmod(n, N_DURATION_BINS)


@dataclass(frozen=True)
class TokenVocab:
    """Integer token layout: instruments, flattened notes, then controls."""

    n_instruments: int = DRUM_INSTRUMENT + 1
    note_offset: int = DRUM_INSTRUMENT + 1
    n_note_tokens: int = N_DURATION_BINS * N_PITCHES

    @property
    def eos(self):
        return self.note_offset + self.n_note_tokens

    @property
    def cls(self):
        return self.eos + 1

    @property
    def pad(self):
        return self.eos + 2

    @property
    def size(self):
        return self.eos + 3

    def instrument_token(self, instrument):
        if not 0 <= instrument < self.n_instruments:
            raise ValidationError(f"instrument {instrument} out of range")
        return instrument

    def note_token(self, n):
        if not 0 <= n < self.n_note_tokens:
            raise ValidationError(f"note index {n} out of range")
        return self.note_offset + n

    def is_instrument(self, token):
        return 0 <= token < self.n_instruments

    def is_note(self, token):
        return self.note_offset <= token < self.note_offset + self.n_note_tokens

    def kind(self, token):
        if self.is_instrument(token):
            return "instrument"
        if self.is_note(token):
            return "note"
        if token == self.eos:
            return "eos"
        if token == self.cls:
            return "cls"
        if token == self.pad:
            return "pad"
        raise ValidationError(f"token {token} outside vocabulary of size {self.size}")

    def layout_hash(self):
        key = f"{self.n_instruments}:{self.note_offset}:{self.n_note_tokens}:{self.eos}:{self.cls}:{self.pad}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]


VOCAB = TokenVocab()


def sort_key(note):
    return (note.instrument, note.note_index)


def sort_step(notes, cap=POLYPHONY_CAP):
    """Sort by (instrument, note index), drop exact duplicates, clip to ``cap``."""
    out = []
    seen = set()
    for n in sorted(notes, key=sort_key):
        k = sort_key(n)
        if k in seen:
            continue
        seen.add(k)
        out.append(n)
    return TimeStep(tuple(out[:cap]))


def tokenize_step(step, vocab=VOCAB):
    tokens = []
    for n in step.notes:
        tokens.append(vocab.instrument_token(n.instrument))
        tokens.append(vocab.note_token(n.note_index))
    tokens.append(vocab.eos)
    return tokens


def detokenize_step(tokens, vocab=VOCAB):
    """Inverse of tokenize_step; alternation violations raise with the position."""
    notes = []
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t == vocab.eos:
            if i != len(tokens) - 1:
                raise ParseError("tokens after step terminator", position=i + 1)
            return TimeStep(tuple(notes))
        if not vocab.is_instrument(t):
            raise ParseError(f"expected instrument or terminator, got token {t}", position=i)
        if i + 1 >= len(tokens):
            raise ParseError("instrument token without a note token", position=i)
        nt = tokens[i + 1]
        if not vocab.is_note(nt):
            raise ParseError(f"expected note token, got {nt}", position=i + 1)
        pitch, dur = decode_note(nt - vocab.note_offset)
        notes.append(NoteEvent(t, pitch, dur))
        i += 2
    raise ParseError("step tokens missing terminator", position=len(tokens))


def tokenize_score(score, vocab=VOCAB):
    return [tokenize_step(s, vocab) for s in score.steps]


def detokenize_score(token_lists, steps_per_bar=STEPS_PER_BAR, vocab=VOCAB):
    return Score([detokenize_step(t, vocab) for t in token_lists], steps_per_bar)


def validate_score(score, cap=POLYPHONY_CAP):
    """Raise ValidationError naming the first offending step."""
    if len(score.steps) < 1:
        raise ValidationError("score must have at least one step")
    for t, step in enumerate(score.steps):
        if len(step) > cap:
            raise ValidationError(f"step {t} exceeds polyphony cap ({len(step)} > {cap})")
        keys = [sort_key(n) for n in step.notes]
        if keys != sorted(keys):
            raise ValidationError(f"step {t} violates sort order")
        if len(set(keys)) != len(keys):
            raise ValidationError(f"step {t} contains duplicate notes")
    return score


def score_to_text(score):
    """One line per step: ``t: inst:pitch:durbin ...``."""
    lines = []
    if score.steps_per_bar != STEPS_PER_BAR:
        lines.append(f"# steps_per_bar={score.steps_per_bar}")
    for t, step in enumerate(score.steps):
        cells = " ".join(f"{n.instrument}:{n.pitch}:{n.duration_bin}" for n in step.notes)
        lines.append(f"{t}: {cells}".rstrip())
    return "\n".join(lines) + "\n"


def score_from_text(text):
    steps_per_bar = STEPS_PER_BAR
    steps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("steps_per_bar="):
                steps_per_bar = int(body.split("=", 1)[1])
            continue
        head, _, rest = line.partition(":")
        if not _:
            raise ParseError("missing step index separator", position=lineno)
        try:
            t = int(head)
        except ValueError:
            raise ParseError(f"bad step index {head!r}", position=lineno) from None
        if t != len(steps):
            raise ParseError(f"non-consecutive step index {t}", position=lineno)
        notes = []
        for cell in rest.split():
            parts = cell.split(":")
            if len(parts) != 3:
                raise ParseError(f"bad note cell {cell!r}", position=lineno)
            inst, pitch, dur = (int(p) for p in parts)
            notes.append(NoteEvent(inst, pitch, dur))
        steps.append(TimeStep(tuple(notes)))
    if not steps:
        steps = [TimeStep()]
    return Score(steps, steps_per_bar)
