"""Posteriorgram post-processing: note events and multipitch estimates.

Note creation follows a two-phase procedure. Onset candidates come from
per-bin temporal peak picking of the onset map (floor 0.5); each candidate,
taken in descending onset-time order, is traced forward through the note
map until the likelihood stays below the note threshold for more than the
gap tolerance. Consumed frames are zeroed. A second phase sweeps leftover
note-map cells above the threshold in descending likelihood order, tracing
both directions. Notes shorter than the minimum duration are dropped.

A note ends at the frame after its last above-threshold frame (exclusive
end); sub-threshold dips inside a note are kept. Same-pitch notes can never
overlap because traced frames are zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import Posteriorgrams

MIDI_LOW = 21
PITCH_BASE_HZ = 27.5
BINS_PER_SEMITONE = 3


@dataclass(frozen=True)
class TrackerConfig:
    onset_threshold: float = 0.5
    note_threshold: float = 0.5  # the tunable continuation/peak floor
    gap_tolerance_frames: int = 11
    min_note_duration_s: float = 0.12
    # "descending order" of onset candidates read literally as time; the
    # likelihood reading is available without changing the default
    onset_order: str = "time"

    def __post_init__(self):
        if not (0.0 < self.onset_threshold < 1.0
                and 0.0 < self.note_threshold < 1.0):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.gap_tolerance_frames < 0:
            raise ValueError("gap tolerance must be >= 0")
        if self.onset_order not in ("time", "likelihood"):
            raise ValueError("onset_order must be 'time' or 'likelihood'")


@dataclass(frozen=True)
class NoteEvent:
    onset_s: float
    offset_s: float
    pitch_midi: int
    amplitude: float


@dataclass(frozen=True)
class PitchEstimate:
    time_s: float
    frequency_hz: float
    salience: float


def _onset_peaks(y_onset: np.ndarray, floor: float) -> np.ndarray:
    """Strict temporal local maxima per bin; plateaus take the earliest frame."""
    t = y_onset.shape[0]
    prev = np.full_like(y_onset, -np.inf)
    nxt = np.full_like(y_onset, -np.inf)
    prev[1:] = y_onset[:-1]
    nxt[:-1] = y_onset[1:]
    return (y_onset >= floor) & (y_onset > prev) & (y_onset >= nxt)


def _trace_forward(active: np.ndarray, t0: int, b: int, tol: int) -> int:
    """Exclusive end frame of a run starting at t0, bridging gaps <= tol."""
    t_total = active.shape[0]
    last_active = t0 - 1
    gap = 0
    i = t0
    while i < t_total:
        if active[i, b]:
            last_active = i
            gap = 0
        else:
            gap += 1
            if gap > tol:
                break
        i += 1
    return last_active + 1


def _trace_backward(active: np.ndarray, t0: int, b: int, tol: int) -> int:
    first_active = t0 + 1
    gap = 0
    i = t0
    while i >= 0:
        if active[i, b]:
            first_active = i
            gap = 0
        else:
            gap += 1
            if gap > tol:
                break
        i -= 1
    return first_active


def note_events(p: Posteriorgrams, cfg: TrackerConfig = TrackerConfig()) -> list:
    """Extract note events from the onset and note posteriorgrams."""
    y_o = np.asarray(p.y_onset, dtype=np.float64)
    y_n = np.asarray(p.y_note, dtype=np.float64)
    t_total, n_bins = y_n.shape
    tau = cfg.note_threshold
    tol = cfg.gap_tolerance_frames
    dt = p.frame_period

    working = y_n.copy()
    active = working >= tau
    spans = []

    # phase 1: onset-initiated notes
    peak_t, peak_b = np.nonzero(_onset_peaks(y_o, cfg.onset_threshold))
    candidates = list(zip(peak_t.tolist(), peak_b.tolist()))
    if cfg.onset_order == "time":
        candidates.sort(key=lambda tb: (-tb[0], tb[1]))
    else:
        candidates.sort(key=lambda tb: (-y_o[tb[0], tb[1]], tb[0], tb[1]))
    for t0, b in candidates:
        end = _trace_forward(active, t0, b, tol)
        if end <= t0:
            continue
        spans.append((t0, end, b))
        working[t0:end, b] = 0.0
        active[t0:end, b] = False

    # phase 2: leftover note-map energy, loudest first
    while True:
        flat = np.argmax(working)
        t0, b = divmod(int(flat), n_bins)
        if working[t0, b] <= tau:
            break
        start = _trace_backward(active, t0, b, tol)
        end = _trace_forward(active, t0, b, tol)
        spans.append((start, end, b))
        working[start:end, b] = 0.0
        active[start:end, b] = False

    events = []
    for start, end, b in spans:
        if (end - start) * dt < cfg.min_note_duration_s:
            continue
        events.append(NoteEvent(
            onset_s=start * dt,
            offset_s=end * dt,
            pitch_midi=MIDI_LOW + b,
            amplitude=float(y_n[start:end, b].mean())))
    events.sort(key=lambda e: (e.onset_s, e.pitch_midi))
    return events


def bin_to_hz(bin_index) -> np.ndarray:
    return PITCH_BASE_HZ * 2.0 ** (np.asarray(bin_index, dtype=np.float64)
                                   / (12 * BINS_PER_SEMITONE))


def multipitch(p: Posteriorgrams, cfg: TrackerConfig = TrackerConfig(),
               refine: bool = True) -> list:
    """Per-frame pitch estimates: spectral peaks of the pitch map above the
    note threshold, with optional 3-point parabolic frequency refinement.

    Peak rule along frequency: strictly greater than the lower neighbor,
    at least the upper one (ties resolve toward the lower bin). Salience is
    the unrefined peak value.
    """
    y_p = np.asarray(p.y_pitch, dtype=np.float64)
    t_total, n_bins = y_p.shape
    tau = cfg.note_threshold

    left = np.full_like(y_p, -np.inf)
    right = np.full_like(y_p, -np.inf)
    left[:, 1:] = y_p[:, :-1]
    right[:, :-1] = y_p[:, 1:]
    is_peak = (y_p > tau) & (y_p > left) & (y_p >= right)

    frames = [[] for _ in range(t_total)]
    for t, b in zip(*np.nonzero(is_peak)):
        delta = 0.0
        if refine and 0 < b < n_bins - 1:
            alpha, beta, gamma = y_p[t, b - 1], y_p[t, b], y_p[t, b + 1]
            denom = alpha - 2.0 * beta + gamma
            if denom != 0.0:
                delta = 0.5 * (alpha - gamma) / denom
        frames[t].append(PitchEstimate(
            time_s=t * p.frame_period,
            frequency_hz=float(bin_to_hz(b + delta)),
            salience=float(y_p[t, b])))
    return frames


DEFAULT_THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def tune_note_threshold(validation, grid=DEFAULT_THRESHOLD_GRID,
                        cfg: TrackerConfig = TrackerConfig()) -> float:
    """Grid-search the note threshold maximizing mean no-offset F; ties go
    to the lower threshold.

    validation: iterable of (Posteriorgrams, reference NoteEvent list).
    """
    from .evaluation import note_scores  # local import avoids module cycle

    validation = list(validation)
    if not validation:
        raise ValueError("validation set must be nonempty")
    if not grid:
        raise ValueError("threshold grid must be nonempty")

    best_tau, best_fno = None, -1.0
    for tau in grid:
        fnos = []
        for posteriors, reference in validation:
            est = note_events(posteriors, replace(cfg, note_threshold=tau))
            fnos.append(note_scores(reference, est, use_offsets=False).f)
        mean_fno = sum(fnos) / len(fnos)
        if mean_fno > best_fno + 1e-12:
            best_tau, best_fno = tau, mean_fno
    return best_tau


# -- note CSV ----------------------------------------------------------------

def format_note_csv(events) -> str:
    lines = ["%.6f,%.6f,%d,%.6f" % (e.onset_s, e.offset_s, e.pitch_midi,
                                    e.amplitude)
             for e in events]
    return "\n".join(lines) + ("\n" if lines else "")


def write_note_csv(events, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_note_csv(events))


def parse_note_csv(text: str, source: str = "<string>") -> list:
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if lineno == 1 and not _is_number(parts[0]):
            continue  # header row
        if len(parts) not in (3, 4):
            raise ValueError(
                "%s:%d: expected onset,offset,pitch[,amplitude], got %r"
                % (source, lineno, line))
        try:
            onset, offset = float(parts[0]), float(parts[1])
            pitch = int(round(float(parts[2])))
            amp = float(parts[3]) if len(parts) == 4 else 1.0
        except ValueError as exc:
            raise ValueError("%s:%d: %s" % (source, lineno, exc)) from None
        events.append(NoteEvent(onset, offset, pitch, amp))
    return events


def read_note_csv(path) -> list:
    with open(path) as fh:
        return parse_note_csv(fh.read(), source=str(path))


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False
