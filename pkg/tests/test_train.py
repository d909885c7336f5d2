import math
from dataclasses import replace

import numpy as np
import pytest

from nmp import nn
from nmp.audio import AudioBuffer
from nmp.cqt import cqt
from nmp.model import ModelConfig, build_model
from nmp.notes import NoteEvent
from nmp.train import (
    CLIP_FRAMES,
    FRAME_PERIOD,
    AdamState,
    TrainConfig,
    _biquad,
    _render_tone,
    adam_step,
    augment,
    midi_to_hz,
    rasterize_labels,
    save_checkpoint,
    synth_dataset,
    total_loss,
    train_toy,
    weighted_bce,
)


class TestRasterize:
    def test_note_frames_and_onset(self):
        notes = [NoteEvent(0.0, 0.116, 60, 1.0)]
        t = rasterize_labels(notes, [])
        rows = np.nonzero(t.y_note[:, 39])[0]
        assert rows.tolist() == list(range(0, 10))
        assert t.y_note[:, [b for b in range(88) if b != 39]].sum() == 0
        assert np.nonzero(t.y_onset[:, 39])[0].tolist() == [0]
        assert t.y_onset.sum() == 1.0

    def test_empty_annotations(self):
        t = rasterize_labels([], [])
        assert t.y_onset.sum() == 0
        assert t.y_note.sum() == 0
        assert t.y_pitch.sum() == 0

    def test_pitch_bin_440(self):
        t = rasterize_labels([], [(0.5, 440.0)])
        frame = int(round(0.5 / FRAME_PERIOD))
        assert t.y_pitch[frame, 144] == 1.0
        assert t.y_pitch.sum() == 1.0

    def test_out_of_range_skipped_with_count(self):
        notes = [NoteEvent(0.0, 0.5, 10, 1.0), NoteEvent(0.0, 0.5, 60, 1.0)]
        pitches = [(0.1, 20000.0), (0.1, 220.0)]
        t = rasterize_labels(notes, pitches)
        assert t.n_skipped == 2
        assert t.y_note.sum() > 0
        assert t.y_pitch.sum() == 1.0

    def test_onset_in_final_frame_clamped(self):
        notes = [NoteEvent(1.999, 2.3, 60, 1.0)]
        t = rasterize_labels(notes, [])
        assert t.y_onset[CLIP_FRAMES - 1, 39] == 1.0


class TestLosses:
    def test_total_is_sum_of_parts(self):
        rng = np.random.default_rng(0)
        shape = (2, 1, 6, 8)
        preds = tuple(rng.uniform(0.05, 0.95, shape) for _ in range(3))
        targets = tuple((rng.uniform(size=shape) > 0.6).astype(np.float64)
                        for _ in range(3))
        cfg = TrainConfig()
        total = float(total_loss(preds, targets, cfg))
        parts = (float(weighted_bce(preds[2], targets[2]))
                 + float(weighted_bce(preds[1], targets[1]))
                 + float(weighted_bce(preds[0], targets[0], 0.95, 0.05)))
        assert total == pytest.approx(parts, rel=1e-12)

    def test_onset_term_closed_form(self):
        shape = (1, 1, 4, 4)
        preds = tuple(np.full(shape, 0.5) for _ in range(3))
        targets = tuple(np.zeros(shape) for _ in range(3))
        total = float(total_loss(preds, targets))
        expect = math.log(2) + math.log(2) + 0.05 * math.log(2)
        assert total == pytest.approx(expect, rel=1e-9)

    def test_gradient_of_total_is_sum_of_gradients(self):
        rng = np.random.default_rng(1)
        shape = (1, 1, 3, 5)
        pred_data = rng.uniform(0.1, 0.9, shape)
        targets = tuple((rng.uniform(size=shape) > 0.5).astype(np.float64)
                        for _ in range(3))

        p_all = tuple(nn.Tensor(pred_data.copy(), True) for _ in range(3))
        total_loss(p_all, targets).backward()

        for k, tensor in enumerate(p_all):
            alone = nn.Tensor(pred_data.copy(), True)
            if k == 0:
                weighted_bce(alone, targets[0], 0.95, 0.05).backward()
            else:
                weighted_bce(alone, targets[k]).backward()
            assert np.allclose(tensor.grad, alone.grad, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        good = np.full((1, 1, 2, 2), 0.5)
        bad = np.full((1, 1, 2, 3), 0.5)
        with pytest.raises(ValueError):
            total_loss((good, good, good), (good, good, bad))


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": nn.Tensor(np.zeros(5), True)}
        grads = {"w": np.full(5, 3.7)}
        state = AdamState(params)
        adam_step(params, grads, state, lr=1e-3)
        assert np.allclose(np.abs(params["w"].data), 1e-3, rtol=1e-6)

    def test_sign_follows_gradient(self):
        params = {"w": nn.Tensor(np.array([0.0, 0.0]), True)}
        adam_step(params, {"w": np.array([5.0, -2.0])}, AdamState(params))
        assert params["w"].data[0] < 0 < params["w"].data[1]

    def test_zero_gradient_keeps_params(self):
        params = {"w": nn.Tensor(np.array([1.0, -1.0]), True)}
        state = AdamState(params)
        for _ in range(10):
            adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"].data, [1.0, -1.0])

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(7)
            params = {"w": nn.Tensor(np.ones(4), True)}
            state = AdamState(params)
            for _ in range(25):
                adam_step(params, {"w": rng.standard_normal(4)}, state)
            return params["w"].data.copy()
        assert np.array_equal(run(), run())


class TestAugment:
    def test_toggles_off_identity(self):
        rng = np.random.default_rng(2)
        buf = AudioBuffer(rng.uniform(-0.5, 0.5, 1000), 22050)
        out = augment(buf, np.random.default_rng(0), TrainConfig())
        assert np.array_equal(out.samples, buf.samples)

    def test_noise_snr_within_half_db(self):
        t = np.arange(44100) / 22050
        buf = AudioBuffer(0.6 * np.sin(2 * np.pi * 440 * t), 22050)
        cfg = TrainConfig(augment_noise=True)
        rng = np.random.default_rng(3)
        out = augment(buf, rng, cfg)
        noise = out.samples - buf.samples
        snr = 10 * np.log10(np.mean(buf.samples ** 2) / np.mean(noise ** 2))
        assert 20.0 - 0.5 <= snr <= 50.0 + 0.5

    def test_eq_zero_gain_identity(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.5, 0.5, 2000)
        for kind in ("peak", "lowshelf", "highshelf"):
            b, a = _biquad(kind, 1000.0, 0.0, 0.9, 22050)
            import scipy.signal
            y = scipy.signal.lfilter(b, a, x)
            assert np.max(np.abs(y - x)) < 1e-6

    def test_eq_changes_spectrum(self):
        rng = np.random.default_rng(5)
        buf = AudioBuffer(rng.uniform(-0.5, 0.5, 4000), 22050)
        out = augment(buf, np.random.default_rng(1),
                      TrainConfig(augment_eq=True))
        assert not np.array_equal(out.samples, buf.samples)


class TestSynth:
    def test_monophonic_single_notes(self):
        rng = np.random.default_rng(6)
        data = synth_dataset(3, rng, monophonic=True)
        for ex in data:
            spans = sorted((n.onset_s, n.offset_s) for n in ex.notes)
            for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
                assert a1 <= b0 + 1e-9
            assert len(ex.notes) >= 1

    def test_peak_at_most_one(self):
        rng = np.random.default_rng(7)
        for ex in synth_dataset(4, rng):
            assert np.max(np.abs(ex.audio.samples)) <= 1.0

    def test_labels_match_rasterizer(self):
        rng = np.random.default_rng(8)
        ex = synth_dataset(1, rng)[0]
        again = rasterize_labels(ex.notes, ex.pitches)
        assert np.array_equal(again.y_note, ex.targets.y_note)
        assert np.array_equal(again.y_onset, ex.targets.y_onset)
        assert np.array_equal(again.y_pitch, ex.targets.y_pitch)

    def test_440_tone_lands_on_bin_144(self):
        rng = np.random.default_rng(9)
        wave = _render_tone(69, 0.2, 1.5, 0.8, rng)
        m = cqt(AudioBuffer(wave, 22050)).magnitudes
        interior = m[40:140]
        assert np.all(np.argmax(interior, axis=1) == 144)

    def test_rejects_nonpositive_count(self):
        with pytest.raises(ValueError):
            synth_dataset(0, np.random.default_rng(0))


class TestTrainLoop:
    def test_runs_and_logs(self):
        cfg = TrainConfig(batch_size=4)
        model, log = train_toy(steps=2, seed=11, n_clips=3, cfg=cfg)
        assert len(log) == 2
        assert set(log[0]) == {"step", "total", "onset", "note", "pitch"}
        assert model.parameter_count() == 16798

    def test_seeded_runs_bit_identical(self, tmp_path):
        cfg = TrainConfig(batch_size=4)
        archives = []
        for run in range(2):
            model, _ = train_toy(steps=2, seed=21, n_clips=3, cfg=cfg)
            archives.append(model.to_archive().to_bytes())
        assert archives[0] == archives[1]

    def test_loss_drops_when_overfitting(self):
        cfg = TrainConfig(batch_size=4)
        model, log = train_toy(steps=12, seed=31, n_clips=1, cfg=cfg)
        assert log[-1]["total"] < log[0]["total"]

    def test_checkpoint_sidecar(self, tmp_path):
        model, _ = train_toy(steps=1, seed=41, n_clips=2,
                             cfg=TrainConfig(batch_size=2))
        path = tmp_path / "ck.nmpw"
        save_checkpoint(model, path, {"step": 1, "seed": 41, "lr": 1e-3})
        assert path.exists()
        import json
        meta = json.loads((tmp_path / "ck.nmpw.json").read_text())
        assert meta["seed"] == 41

    def test_weight_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(onset_pos_weight=0.9, onset_neg_weight=0.2)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


def test_midi_to_hz_anchor():
    assert float(midi_to_hz(69)) == pytest.approx(440.0)
    assert float(midi_to_hz(60)) == pytest.approx(261.6255653, rel=1e-9)
