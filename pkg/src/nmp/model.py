"""The three-headed transcription network and windowed inference.

The graph turns an 8-channel harmonic stack into three posteriorgrams:

  pitch  (T x 264, 3 bins/semitone)  -- "closest to the audio"
  note   (T x 88, 1 bin/semitone)    -- musically quantized activity
  onset  (T x 88)                    -- note starts

Contour branch: conv(8 filters, 3x39) -> BN -> ReLU -> conv(1, 5x5) ->
sigmoid. Note branch: BN -> ReLU on the pitch output, conv(32, 7x7,
freq-stride 3) -> ReLU -> conv(1, 7x3) -> sigmoid. Onset branch:
conv(32, 5x5, freq-stride 3) on the stack -> BN -> ReLU, concatenated with
the note output, then conv(1, 3x3) -> sigmoid. 16,798 trainable parameters
in the default configuration.

Long signals are transcribed in 173-frame windows with a 30-frame linear
cross-fade; the CQT is computed once over the whole signal so window
placement does not perturb the spectral input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .audio import WORKING_SAMPLE_RATE, AudioBuffer, resample
from .cqt import DEFAULT_CONFIG, CqtMatrix, HarmonicStack, cqt, harmonic_stack
from .nn import Tensor
from .weights import WeightArchive

N_NOTE_BINS = 88
N_PITCH_BINS = 264


@dataclass(frozen=True)
class ModelConfig:
    use_harmonic_stacking: bool = True
    supervise_contour: bool = True
    window_frames: int = 173
    window_overlap_frames: int = 30

    def __post_init__(self):
        if not 0 <= self.window_overlap_frames < self.window_frames:
            raise ValueError("overlap must be smaller than the window")

    @property
    def in_channels(self) -> int:
        return 8 if self.use_harmonic_stacking else 1


@dataclass(frozen=True)
class Posteriorgrams:
    """Onset/note/pitch likelihoods sharing one frame clock."""

    y_onset: np.ndarray = field(repr=False)
    y_note: np.ndarray = field(repr=False)
    y_pitch: np.ndarray = field(repr=False)
    frame_period: float

    @property
    def n_frames(self) -> int:
        return self.y_onset.shape[0]


class WeightMismatchError(ValueError):
    """Archive does not match the graph; names the first offender."""


def _layer_specs(cfg: ModelConfig):
    """(name, kind, shape-ish) triples in archive order."""
    c_in = cfg.in_channels
    specs = [("input_bn", "bn", c_in),
             ("contour_conv1", "conv", (8, c_in, 3, 39))]
    if cfg.supervise_contour:
        specs.append(("contour_bn", "bn", 8))
    specs += [
        ("contour_conv2", "conv", (1, 8, 5, 5)),
        ("note_bn", "bn", 1),
        ("note_conv1", "conv", (32, 1, 7, 7)),
        ("note_conv2", "conv", (1, 32, 7, 3)),
        ("onset_conv1", "conv", (32, c_in, 5, 5)),
        ("onset_bn", "bn", 32),
        ("onset_conv2", "conv", (1, 33, 3, 3)),
    ]
    return specs


class TranscriptionModel:
    """Parameter store plus forward wiring; one instance per config."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for name, kind, shape in _layer_specs(cfg):
            if kind == "conv":
                fan_in = shape[1] * shape[2] * shape[3]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
                self.params[name + ".w"] = Tensor(w.astype(np.float32), True)
                self.params[name + ".b"] = Tensor(
                    np.zeros(shape[0], np.float32), True)
            else:
                c = shape
                self.params[name + ".gamma"] = Tensor(np.ones(c, np.float32), True)
                self.params[name + ".beta"] = Tensor(np.zeros(c, np.float32), True)
                self.running[name + ".mean"] = np.zeros(c, np.float32)
                self.running[name + ".var"] = np.ones(c, np.float32)

    # -- parameters ---------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def trainable(self) -> dict:
        return self.params

    def astype(self, dtype) -> "TranscriptionModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for k in self.running:
            self.running[k] = self.running[k].astype(dtype)
        return self

    def _bn(self, x, name, training):
        return nn.batchnorm(
            x, self.params[name + ".gamma"], self.params[name + ".beta"],
            self.running[name + ".mean"], self.running[name + ".var"],
            training=training)

    def _conv(self, x, name, stride=(1, 1)):
        return nn.conv2d(x, self.params[name + ".w"],
                         self.params[name + ".b"], stride=stride)

    # -- forward ------------------------------------------------------------

    def forward(self, x, training: bool = False, ablate_onset_audio: bool = False):
        """x: (batch, channels, frames, 264) -> (onset, note, pitch) maps.

        Outputs keep the singleton channel axis: (batch, 1, frames, bins).
        ablate_onset_audio zeroes the audio-derived onset features, leaving
        the note/pitch heads untouched (diagnostic hook).
        """
        h = self._bn(x, "input_bn", training)
        c1 = self._conv(h, "contour_conv1")
        if self.cfg.supervise_contour:
            c2 = nn.relu(self._bn(c1, "contour_bn", training))
            y_pitch = nn.sigmoid(self._conv(c2, "contour_conv2"))
            note_in = y_pitch
        else:
            # unsupervised projection feeds the note branch directly
            proj = self._conv(nn.relu(c1), "contour_conv2")
            y_pitch = nn.sigmoid(proj)
            note_in = proj

        n1 = nn.relu(self._bn(note_in, "note_bn", training))
        n2 = nn.relu(self._conv(n1, "note_conv1", stride=(1, 3)))
        y_note = nn.sigmoid(self._conv(n2, "note_conv2"))

        o1 = nn.relu(self._bn(self._conv(h, "onset_conv1", stride=(1, 3)),
                              "onset_bn", training))
        if ablate_onset_audio:
            o1 = nn._data(o1) * 0.0
        cat = nn.concat_channels(y_note, o1)
        y_onset = nn.sigmoid(self._conv(cat, "onset_conv2"))
        return y_onset, y_note, y_pitch

    # -- archive ------------------------------------------------------------

    def _archive_entries(self):
        for name, kind, _ in _layer_specs(self.cfg):
            if kind == "conv":
                yield name + ".w"
                yield name + ".b"
            else:
                for suffix in (".gamma", ".beta", ".mean", ".var"):
                    yield name + suffix

    def to_archive(self) -> WeightArchive:
        arch = WeightArchive()
        for entry in self._archive_entries():
            source = self.params.get(entry)
            arch[entry] = source.data if source is not None else self.running[entry]
        return arch

    def load_archive(self, arch: WeightArchive) -> "TranscriptionModel":
        expected = list(self._archive_entries())
        for entry in expected:
            holder = self.params.get(entry)
            want = holder.data.shape if holder is not None \
                else self.running[entry].shape
            if entry not in arch:
                raise WeightMismatchError("missing weight entry %r" % entry)
            got = arch[entry]
            if got.shape != want:
                raise WeightMismatchError(
                    "weight entry %r has shape %s, graph expects %s"
                    % (entry, got.shape, want))
        for name in arch.names():
            if name not in expected:
                raise WeightMismatchError("unexpected weight entry %r" % name)
        for entry in expected:
            if entry in self.params:
                self.params[entry].data = arch[entry].copy()
            else:
                self.running[entry] = arch[entry].copy()
        return self


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> TranscriptionModel:
    return TranscriptionModel(cfg, seed=seed)


def stack_for_network(c: CqtMatrix, cfg: ModelConfig) -> np.ndarray:
    """(channels, frames, 264) network input from a CQT block."""
    if cfg.use_harmonic_stacking:
        return harmonic_stack(c).values
    return c.magnitudes[:, :N_PITCH_BINS][None, :, :]


def _window_starts(n_frames: int, window: int, overlap: int):
    stride = window - overlap
    starts = list(range(0, max(n_frames - overlap, 1), stride))
    return starts


def predict(buf: AudioBuffer, weights, cfg: ModelConfig = ModelConfig()) -> Posteriorgrams:
    """Transcribe a buffer into the three posteriorgrams.

    `weights` is a WeightArchive or an already-loaded TranscriptionModel.
    Audio at other sample rates is resampled to 22050 Hz first. The output
    frame count equals the CQT frame count of the whole signal.
    """
    if len(buf) < 1:
        raise ValueError("empty audio buffer")
    if isinstance(weights, TranscriptionModel):
        model = weights
        cfg = model.cfg
    else:
        model = build_model(cfg).load_archive(weights)
    if buf.sample_rate != WORKING_SAMPLE_RATE:
        buf = resample(buf, WORKING_SAMPLE_RATE)

    spec = cqt(buf, DEFAULT_CONFIG)
    t_total = spec.n_frames
    window = cfg.window_frames
    overlap = cfg.window_overlap_frames

    acc_o = np.zeros((t_total, N_NOTE_BINS), np.float64)
    acc_n = np.zeros((t_total, N_NOTE_BINS), np.float64)
    acc_p = np.zeros((t_total, N_PITCH_BINS), np.float64)
    acc_w = np.zeros(t_total, np.float64)

    starts = _window_starts(t_total, window, overlap)
    with nn.no_grad():
        for k, s in enumerate(starts):
            e = min(s + window, t_total)
            block = CqtMatrix(spec.magnitudes[s:e], spec.frame_period)
            x = stack_for_network(block, cfg)[None, ...]
            y_o, y_n, y_p = model.forward(x, training=False)

            w = np.ones(e - s)
            fade = min(overlap, e - s)
            ramp = (np.arange(fade) + 1.0) / (overlap + 1.0)
            if k > 0:
                w[:fade] *= ramp
            if k < len(starts) - 1:
                w[-fade:] *= ramp[::-1]
            acc_o[s:e] += w[:, None] * nn._data(y_o)[0, 0]
            acc_n[s:e] += w[:, None] * nn._data(y_n)[0, 0]
            acc_p[s:e] += w[:, None] * nn._data(y_p)[0, 0]
            acc_w[s:e] += w

    scale = (1.0 / acc_w)[:, None]
    return Posteriorgrams(
        (acc_o * scale).astype(np.float32),
        (acc_n * scale).astype(np.float32),
        (acc_p * scale).astype(np.float32),
        spec.frame_period)


# -- posteriorgram fixtures (NMPW tensor container) --------------------------

def posteriors_to_archive(p: Posteriorgrams) -> WeightArchive:
    arch = WeightArchive()
    arch["onset"] = p.y_onset
    arch["note"] = p.y_note
    arch["pitch"] = p.y_pitch
    arch["frame_period"] = np.array([p.frame_period], np.float32)
    return arch


def posteriors_from_archive(arch: WeightArchive) -> Posteriorgrams:
    for entry in ("onset", "note", "pitch", "frame_period"):
        if entry not in arch:
            raise WeightMismatchError("missing tensor entry %r" % entry)
    return Posteriorgrams(
        arch["onset"], arch["note"], arch["pitch"],
        float(arch["frame_period"][0]))
