"""Standard MIDI File reading and writing (formats 0 and 1, PPQ timing only).

The parser matches note-on/note-off pairs FIFO per (channel, pitch), treats
note-on with velocity 0 as note-off, tracks per-channel programs, and flags
channel 10 as drums. Malformed chunks raise ParseError with the byte offset.
"""

from collections import defaultdict, deque
from dataclasses import dataclass, field

from .errors import ParseError
from .score import DRUM_INSTRUMENT, DURATION_BINS

DEFAULT_TEMPO_USPQ = 500000  # 120 BPM
WRITE_PPQ = 480
WRITE_VELOCITY = 96
DRUM_CHANNEL = 9


@dataclass(frozen=True)
class MidiNote:
    tick: int
    channel: int
    program: int
    pitch: int
    duration_ticks: int
    is_drum: bool


@dataclass
class RawMidiSong:
    ticks_per_quarter: int
    tracks: list = field(default_factory=list)      # list of lists of MidiNote
    tempo_map: list = field(default_factory=list)   # (tick, microseconds per quarter)
    dangling_notes: int = 0                         # note-ons closed at track end

    def all_notes(self):
        for track in self.tracks:
            yield from track


def _read_u32(data, off):
    if off + 4 > len(data):
        raise ParseError("truncated file", position=off)
    return int.from_bytes(data[off:off + 4], "big")


def _read_u16(data, off):
    if off + 2 > len(data):
        raise ParseError("truncated file", position=off)
    return int.from_bytes(data[off:off + 2], "big")


def _read_vlq(data, off):
    value = 0
    for i in range(4):
        if off >= len(data):
            raise ParseError("truncated variable-length quantity", position=off)
        byte = data[off]
        off += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, off
    raise ParseError("variable-length quantity longer than 4 bytes", position=off)


def parse_smf(data):
    """Parse SMF bytes into a RawMidiSong."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise ParseError("missing MThd header", position=0)
    if _read_u32(data, 4) != 6:
        raise ParseError("unexpected MThd length", position=4)
    fmt = _read_u16(data, 8)
    n_tracks = _read_u16(data, 10)
    division = _read_u16(data, 12)
    if fmt not in (0, 1):
        raise ParseError(f"unsupported SMF format {fmt}", position=8)
    if division & 0x8000:
        raise ParseError("SMPTE time division is unsupported", position=12)
    if division == 0:
        raise ParseError("zero ticks per quarter", position=12)

    song = RawMidiSong(ticks_per_quarter=division)
    off = 14
    for _ in range(n_tracks):
        if off + 8 > len(data):
            raise ParseError("truncated track header", position=off)
        if data[off:off + 4] != b"MTrk":
            raise ParseError("missing MTrk header", position=off)
        length = _read_u32(data, off + 4)
        body_start = off + 8
        if body_start + length > len(data):
            raise ParseError("track body exceeds file", position=off + 4)
        notes = _parse_track(data, body_start, body_start + length, song)
        song.tracks.append(notes)
        off = body_start + length
    song.tempo_map.sort(key=lambda e: e[0])
    if not song.tempo_map:
        song.tempo_map.append((0, DEFAULT_TEMPO_USPQ))
    return song


def _parse_track(data, off, end, song):
    tick = 0
    running = None
    programs = [0] * 16
    open_notes = defaultdict(deque)  # (channel, pitch) -> deque of (tick, program)
    notes = []

    def close(channel, pitch, end_tick):
        start, program = open_notes[(channel, pitch)].popleft()
        notes.append(MidiNote(start, channel, program, pitch,
                              max(end_tick - start, 0), channel == DRUM_CHANNEL))

    while off < end:
        delta, off = _read_vlq(data, off)
        tick += delta
        if off >= end:
            raise ParseError("event truncated", position=off)
        status = data[off]
        if status >= 0x80:
            off += 1
        else:
            if running is None:
                raise ParseError("data byte without running status", position=off)
            status = running

        if status == 0xFF:  # meta
            if off >= end:
                raise ParseError("truncated meta event", position=off)
            meta_type = data[off]
            length, off = _read_vlq(data, off + 1)
            if off + length > end:
                raise ParseError("meta event exceeds track", position=off)
            payload = data[off:off + length]
            off += length
            running = None
            if meta_type == 0x51 and length == 3:
                song.tempo_map.append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x2F:
                break
            continue
        if status in (0xF0, 0xF7):  # sysex
            length, off = _read_vlq(data, off)
            if off + length > end:
                raise ParseError("sysex exceeds track", position=off)
            off += length
            running = None
            continue
        if status < 0x80:
            raise ParseError(f"bad status byte {status:#x}", position=off)

        running = status
        kind = status & 0xF0
        channel = status & 0x0F
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if off + n_data > end:
            raise ParseError("truncated channel event", position=off)
        d1 = data[off]
        d2 = data[off + 1] if n_data == 2 else 0
        off += n_data

        if kind == 0x90 and d2 > 0:
            open_notes[(channel, d1)].append((tick, programs[channel]))
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            if open_notes[(channel, d1)]:
                close(channel, d1, tick)
        elif kind == 0xC0:
            programs[channel] = d1

    for (channel, pitch), pending in open_notes.items():
        while pending:
            song.dangling_notes += 1
            close(channel, pitch, tick)
    notes.sort(key=lambda n: (n.tick, n.channel, n.pitch))
    return notes


def read_midi_file(path):
    with open(path, "rb") as fh:
        return parse_smf(fh.read())


def _write_vlq(value):
    out = bytearray([value & 0x7F])
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(events):
    """events: list of (tick, prio, seq, prio2, payload); emits delta-encoded MTrk."""
    body = bytearray()
    last = 0
    for tick, _, _, _, payload in sorted(events, key=lambda e: e[:4]):
        body += _write_vlq(tick - last)
        body += payload
        last = tick
    body += _write_vlq(0) + b"\xff\x2f\x00"
    return b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)


def render_smf(score, tempo_uspq=DEFAULT_TEMPO_USPQ):
    """Render a Score to SMF format 1 at PPQ 480 with a fixed tempo event."""
    step_ticks = WRITE_PPQ // 4
    tempo_events = [(0, 0, 0, 0, b"\xff\x51\x03" + tempo_uspq.to_bytes(3, "big"))]

    pitched = sorted({n.instrument for s in score.steps for n in s.notes if not n.is_drum})
    free_channels = [c for c in range(16) if c != DRUM_CHANNEL]
    channel_of = {}
    for i, program in enumerate(pitched):
        channel_of[program] = free_channels[i] if i < len(free_channels) else free_channels[-1]

    # Note-ons at the same tick are ordered by end tick so FIFO matching on
    # re-parse pairs durations correctly; each program change immediately
    # precedes its note-on.
    events = []
    current_program = {}
    seq = 0
    spans = []
    for t, step in enumerate(score.steps):
        for n in step.notes:
            start = t * step_ticks
            dur = DURATION_BINS[n.duration_bin] * step_ticks
            spans.append((start, start + dur, n))
    for start, stop, n in sorted(spans, key=lambda s: (s[0], s[1])):
        if n.is_drum:
            channel = DRUM_CHANNEL
        else:
            channel = channel_of[n.instrument]
            if current_program.get(channel) != n.instrument:
                events.append((start, 1, seq, 0,
                               bytes([0xC0 | channel, n.instrument])))
                current_program[channel] = n.instrument
        events.append((start, 1, seq, 1, bytes([0x90 | channel, n.pitch, WRITE_VELOCITY])))
        events.append((stop, 0, seq, 0, bytes([0x80 | channel, n.pitch, 0])))
        seq += 1

    header = b"MThd" + (6).to_bytes(4, "big") + (1).to_bytes(2, "big") \
        + (2).to_bytes(2, "big") + WRITE_PPQ.to_bytes(2, "big")
    return header + _track_chunk(tempo_events) + _track_chunk(events)


def write_midi_file(score, path, tempo_uspq=DEFAULT_TEMPO_USPQ):
    data = render_smf(score, tempo_uspq)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)
