"""Note- and frame-level transcription scoring.

Notes match when pitch is within a quarter tone (0.5 semitones), onsets
within 50 ms, and, when offsets count, offsets within max(20% of the
reference duration, 50 ms); all comparisons are inclusive. Matching is
maximum-cardinality and one-to-one. Frame accuracy rasterizes both note
lists onto a 10 ms grid and scores TP/(TP+FP+FN) over pitch multisets.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import maximum_bipartite_matching

from .notes import read_note_csv


@dataclass(frozen=True)
class NoteMatchTolerances:
    onset_tol: float = 0.05
    pitch_tol: float = 0.5
    offset_ratio: float = 0.2
    offset_min_tol: float = 0.05

    def __post_init__(self):
        if min(self.onset_tol, self.pitch_tol, self.offset_ratio,
               self.offset_min_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class NoteScores:
    precision: float
    recall: float
    f: float
    n_matched: int


def _pairs_allowed(ref, est, tol: NoteMatchTolerances, use_offsets: bool):
    for i, r in enumerate(ref):
        for j, e in enumerate(est):
            if abs(r.onset_s - e.onset_s) > tol.onset_tol:
                continue
            if abs(r.pitch_midi - e.pitch_midi) > tol.pitch_tol:
                continue
            if use_offsets:
                allowed = max(tol.offset_ratio * (r.offset_s - r.onset_s),
                              tol.offset_min_tol)
                if abs(r.offset_s - e.offset_s) > allowed:
                    continue
            yield i, j


def match_notes(ref, est, tol: NoteMatchTolerances = NoteMatchTolerances(),
                use_offsets: bool = True) -> list:
    """Maximum-cardinality one-to-one matching of reference/estimate notes.

    Returns (ref_index, est_index) pairs.
    """
    if not ref or not est:
        return []
    rows, cols = [], []
    for i, j in _pairs_allowed(ref, est, tol, use_offsets):
        rows.append(i)
        cols.append(j)
    if not rows:
        return []
    graph = scipy.sparse.csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)),
        shape=(len(ref), len(est)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return [(i, int(j)) for i, j in enumerate(match) if j >= 0]


def note_scores(ref, est, tol: NoteMatchTolerances = NoteMatchTolerances(),
                use_offsets: bool = True) -> NoteScores:
    if not ref and not est:
        return NoteScores(1.0, 1.0, 1.0, 0)  # vacuous agreement
    matched = len(match_notes(ref, est, tol, use_offsets))
    precision = matched / len(est) if est else 0.0
    recall = matched / len(ref) if ref else 0.0
    f = (2 * precision * recall / (precision + recall)
         if precision + recall > 0 else 0.0)
    return NoteScores(precision, recall, f, matched)


def _note_frames(note, hop: float):
    # frame t covers [t*hop, (t+1)*hop); a note occupies frames whose start
    # lies in [onset, offset); the epsilon absorbs division rounding
    start = math.ceil(note.onset_s / hop - 1e-9)
    end = math.ceil(note.offset_s / hop - 1e-9)
    return max(start, 0), max(end, start)


def frame_accuracy(ref, est, hop: float = 0.01) -> float:
    """TP/(TP+FP+FN) over 10 ms frames of rasterized pitch multisets."""
    ref_frames: dict = {}
    est_frames: dict = {}
    for notes, frames in ((ref, ref_frames), (est, est_frames)):
        for note in notes:
            start, end = _note_frames(note, hop)
            for t in range(start, end):
                frames.setdefault(t, Counter())[note.pitch_midi] += 1

    tp = fp = fn = 0
    for t in set(ref_frames) | set(est_frames):
        r = ref_frames.get(t, Counter())
        e = est_frames.get(t, Counter())
        inter = sum((r & e).values())
        tp += inter
        fp += sum(e.values()) - inter
        fn += sum(r.values()) - inter
    total = tp + fp + fn
    if total == 0:
        return 1.0  # nothing annotated, nothing predicted
    return tp / total


@dataclass(frozen=True)
class TrackEval:
    name: str
    f: float
    fno: float
    acc: float


@dataclass(frozen=True)
class EvalReport:
    per_track: tuple
    mean_f: float
    mean_fno: float
    mean_acc: float

    def to_dict(self) -> dict:
        return {
            "per_track": [
                {"name": t.name, "F": t.f, "Fno": t.fno, "Acc": t.acc}
                for t in self.per_track],
            "mean": {"F": self.mean_f, "Fno": self.mean_fno,
                     "Acc": self.mean_acc},
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def evaluate_track(ref, est, tol: NoteMatchTolerances = NoteMatchTolerances(),
                   name: str = "") -> TrackEval:
    return TrackEval(
        name=name,
        f=note_scores(ref, est, tol, use_offsets=True).f,
        fno=note_scores(ref, est, tol, use_offsets=False).f,
        acc=frame_accuracy(ref, est))


def evaluate_corpus(pairs, tol: NoteMatchTolerances = NoteMatchTolerances()) -> EvalReport:
    """Score (ref-file, est-file) CSV pairs; unweighted track means."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus must contain at least one track")
    tracks = []
    for ref_path, est_path in pairs:
        try:
            ref = read_note_csv(ref_path)
        except OSError as exc:
            raise ValueError("cannot read reference %s: %s" % (ref_path, exc))
        try:
            est = read_note_csv(est_path)
        except OSError as exc:
            raise ValueError("cannot read estimate %s: %s" % (est_path, exc))
        name = os.path.splitext(os.path.basename(str(ref_path)))[0]
        tracks.append(evaluate_track(ref, est, tol, name=name))
    n = len(tracks)
    return EvalReport(
        per_track=tuple(tracks),
        mean_f=sum(t.f for t in tracks) / n,
        mean_fno=sum(t.fno for t in tracks) / n,
        mean_acc=sum(t.acc for t in tracks) / n)
