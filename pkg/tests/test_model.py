import math

import numpy as np
import pytest

from nmp import nn
from nmp.audio import AudioBuffer
from nmp.cqt import DEFAULT_CONFIG, CqtMatrix, cqt
from nmp.model import (
    ModelConfig,
    Posteriorgrams,
    WeightMismatchError,
    build_model,
    posteriors_from_archive,
    posteriors_to_archive,
    predict,
    stack_for_network,
)


def tone(freq=261.63, seconds=2.0, rate=22050):
    t = np.arange(int(seconds * rate)) / rate
    x = sum(np.sin(2 * np.pi * k * freq * t) / k for k in (1, 2, 3))
    return AudioBuffer(0.5 * x / np.max(np.abs(x)), rate)


class TestBuildModel:
    def test_default_parameter_count(self):
        model = build_model()
        count = model.parameter_count()
        assert count == 16798
        assert abs(count - 16782) / 16782 < 0.001

    def test_no_stacking_strictly_smaller(self):
        small = build_model(ModelConfig(use_harmonic_stacking=False))
        assert small.cfg.in_channels == 1
        assert small.parameter_count() < 16798

    def test_unsupervised_contour_variant(self):
        variant = build_model(ModelConfig(supervise_contour=False))
        assert variant.parameter_count() == 16782
        x = np.zeros((1, 8, 8, 264), np.float32)
        y_o, y_n, y_p = variant.forward(x)
        assert nn._data(y_o).shape == (1, 1, 8, 88)
        assert nn._data(y_p).shape == (1, 1, 8, 264)

    def test_all_zero_weights_give_half(self):
        model = build_model()
        arch = model.to_archive()
        for name in arch.names():
            arch[name] = np.zeros_like(arch[name])
        model.load_archive(arch)
        x = np.random.default_rng(0).uniform(0, 1, (1, 8, 6, 264)).astype(np.float32)
        for out in model.forward(x):
            assert np.allclose(nn._data(out), 0.5, atol=1e-6)

    def test_overlap_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(window_frames=10, window_overlap_frames=10)


class TestArchiveRoundTrip:
    def test_roundtrip(self):
        model = build_model(seed=3)
        arch = model.to_archive()
        other = build_model(seed=99).load_archive(arch)
        for name, p in model.params.items():
            assert np.array_equal(other.params[name].data, p.data)

    def test_missing_entry_named(self):
        model = build_model()
        arch = model.to_archive()
        data = {n: arch[n] for n in arch.names() if n != "onset_conv2.b"}
        broken = type(arch)(data)
        with pytest.raises(WeightMismatchError, match="onset_conv2.b"):
            build_model().load_archive(broken)

    def test_shape_mismatch_named(self):
        arch = build_model().to_archive()
        arch["note_conv1.w"] = np.zeros((32, 1, 5, 5), np.float32)
        with pytest.raises(WeightMismatchError, match="note_conv1.w"):
            build_model().load_archive(arch)

    def test_unexpected_entry_named(self):
        arch = build_model().to_archive()
        arch["extra.w"] = np.zeros(3, np.float32)
        with pytest.raises(WeightMismatchError, match="extra.w"):
            build_model().load_archive(arch)


class TestPredict:
    def test_two_seconds_is_one_window(self):
        p = predict(tone(seconds=2.0), build_model())
        assert p.n_frames == 173
        assert p.y_onset.shape == (173, 88)
        assert p.y_note.shape == (173, 88)
        assert p.y_pitch.shape == (173, 264)

    def test_frame_alignment_matches_hop(self):
        buf = tone(seconds=3.7)
        p = predict(buf, build_model())
        assert p.n_frames == math.ceil(len(buf) / 256)

    def test_outputs_in_unit_interval(self):
        p = predict(tone(seconds=4.0), build_model(seed=7))
        for y in (p.y_onset, p.y_note, p.y_pitch):
            assert y.min() >= 0.0 and y.max() <= 1.0

    def test_deterministic(self):
        buf = tone(seconds=2.5)
        model = build_model(seed=1)
        a = predict(buf, model)
        b = predict(buf, model)
        assert np.array_equal(a.y_onset, b.y_onset)
        assert np.array_equal(a.y_note, b.y_note)
        assert np.array_equal(a.y_pitch, b.y_pitch)

    def test_far_from_joins_matches_single_window(self):
        buf = tone(seconds=10.0)
        model = build_model(seed=2)
        full = predict(buf, model)

        spec = cqt(buf, DEFAULT_CONFIG)
        start = 286  # third window
        block = CqtMatrix(spec.magnitudes[start:start + 173], spec.frame_period)
        x = stack_for_network(block, model.cfg)[None, ...]
        with nn.no_grad():
            y_o, y_n, y_p = model.forward(x)
        # interior frames: clear of both fades and of conv time context
        sl_full = slice(start + 45, start + 128)
        sl_win = slice(45, 128)
        assert np.max(np.abs(full.y_onset[sl_full] - nn._data(y_o)[0, 0][sl_win])) < 1e-5
        assert np.max(np.abs(full.y_note[sl_full] - nn._data(y_n)[0, 0][sl_win])) < 1e-5
        assert np.max(np.abs(full.y_pitch[sl_full] - nn._data(y_p)[0, 0][sl_win])) < 1e-5

    def test_onset_ablation_isolates_heads(self):
        model = build_model(seed=4)
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (1, 8, 20, 264)).astype(np.float32)
        base = [nn._data(v) for v in model.forward(x)]
        ablated = [nn._data(v) for v in model.forward(x, ablate_onset_audio=True)]
        assert not np.array_equal(base[0], ablated[0])
        assert np.array_equal(base[1], ablated[1])
        assert np.array_equal(base[2], ablated[2])

    def test_resamples_foreign_rate(self):
        buf = tone(seconds=1.0, rate=44100)
        p = predict(buf, build_model())
        assert p.n_frames == math.ceil(22050 / 256)

    def test_empty_buffer_rejected(self):
        with pytest.raises(ValueError):
            predict(AudioBuffer(np.zeros(0), 22050), build_model())


class TestPosteriorFixtures:
    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        p = Posteriorgrams(
            rng.uniform(0, 1, (10, 88)).astype(np.float32),
            rng.uniform(0, 1, (10, 88)).astype(np.float32),
            rng.uniform(0, 1, (10, 264)).astype(np.float32),
            256 / 22050)
        again = posteriors_from_archive(posteriors_to_archive(p))
        assert np.array_equal(again.y_onset, p.y_onset)
        assert np.array_equal(again.y_note, p.y_note)
        assert np.array_equal(again.y_pitch, p.y_pitch)
        assert again.frame_period == pytest.approx(p.frame_period)
