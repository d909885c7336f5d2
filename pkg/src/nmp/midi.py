"""Standard MIDI file (format 0) writer for tracked note events.

480 ticks per quarter at a fixed 120 bpm tempo, so one second is exactly
960 ticks. Velocity comes from the note amplitude: round(a * 127), floored
at 1 so a note-on is never read as a note-off.
"""

from __future__ import annotations

import struct

TICKS_PER_QUARTER = 480
TEMPO_BPM = 120
_TICKS_PER_SECOND = TICKS_PER_QUARTER * TEMPO_BPM // 60  # 960


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def seconds_to_ticks(seconds: float) -> int:
    return int(round(seconds * _TICKS_PER_SECOND))


def velocity_of(amplitude: float) -> int:
    return max(1, min(127, int(round(amplitude * 127))))


def midi_bytes(events) -> bytes:
    """Serialize NoteEvent-like objects (onset_s, offset_s, pitch_midi,
    amplitude) to a format-0 SMF byte string."""
    # (tick, order, message): note-offs sort before note-ons at equal ticks
    messages = []
    for e in events:
        on = seconds_to_ticks(e.onset_s)
        off = max(seconds_to_ticks(e.offset_s), on + 1)
        vel = velocity_of(e.amplitude)
        pitch = int(e.pitch_midi)
        messages.append((on, 1, bytes((0x90, pitch, vel))))
        messages.append((off, 0, bytes((0x80, pitch, 0))))
    messages.sort(key=lambda m: (m[0], m[1]))

    tempo_us = 60_000_000 // TEMPO_BPM
    track = bytearray()
    track += _varlen(0) + bytes((0xFF, 0x51, 0x03)) + tempo_us.to_bytes(3, "big")
    clock = 0
    for tick, _, message in messages:
        track += _varlen(tick - clock) + message
        clock = tick
    track += _varlen(0) + bytes((0xFF, 0x2F, 0x00))

    header = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, TICKS_PER_QUARTER)
    return header + struct.pack(">4sI", b"MTrk", len(track)) + bytes(track)


def write_midi(events, path) -> None:
    with open(path, "wb") as fh:
        fh.write(midi_bytes(events))
