import numpy as np
import pytest

from ssa_nowcast.errors import ArchiveError, ConfigurationError, DataError, DimensionError, IntegrityError
from ssa_nowcast.models import (DatasetSpec, FilterKind, FilterRule, FrameSequence, HorizonSpec, SynthParams,
                                Task)
from ssa_nowcast.services.data_service import (DataService, center_crop, denormalize, filter_windows,
                                               load_archive, make_windows, preprocess, save_archive,
                                               split_sequence, synth_cloud, synth_generate)


def _ramp(n_frames, h=4, w=4, interval=5):
    frames = np.stack([np.full((h, w), float(t), dtype=np.float32) for t in range(n_frames)])
    return FrameSequence(frames=frames, timestamps=np.arange(n_frames, dtype=np.int64) * interval,
                         interval_minutes=interval)


class TestSynthesis:

    def test_shape_and_range(self):
        seq = synth_generate(10, 32, 48, seed=1)
        assert seq.frames.shape == (10, 32, 48)
        assert seq.frames.min() >= 0 and seq.frames.max() <= SynthParams().max_intensity
        assert seq.interval_minutes == 5
        assert seq.timestamps.tolist() == [5 * t for t in range(10)]

    def test_same_seed_same_bits(self):
        a = synth_generate(6, 32, 32, seed=7)
        b = synth_generate(6, 32, 32, seed=7)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.frames.tobytes() != synth_generate(6, 32, 32, seed=8).frames.tobytes()

    def test_no_blobs_is_dry(self):
        assert not synth_generate(4, 32, 32, seed=0, params=SynthParams(n_blobs=0)).frames.any()

    def test_static_blob_does_not_move(self):
        params = SynthParams(n_blobs=1, speed=0.0, speed_jitter=0.0, growth_rate=0.0)
        frames = synth_generate(5, 32, 32, seed=2, params=params).frames
        assert all(np.array_equal(frames[0], f) for f in frames[1:])

    def test_blobs_move(self):
        frames = synth_generate(5, 32, 32, seed=2, params=SynthParams(n_blobs=1, speed=3.0)).frames
        assert np.unravel_index(frames[0].argmax(), frames[0].shape) != np.unravel_index(
            frames[4].argmax(), frames[4].shape)

    def test_minimum_size(self):
        with pytest.raises(ConfigurationError, match="minimum"):
            synth_generate(3, 16, 16, seed=0)

    def test_cloud_masks_are_binary(self):
        seq = synth_cloud(5, 32, 32, seed=4)
        assert set(np.unique(seq.frames).tolist()) <= {0.0, 1.0}
        assert seq.interval_minutes == 15
        assert synth_cloud(3, 32, 32, seed=4, threshold=-1e9).frames.all()


class TestPreprocessing:

    def test_center_crop_offset(self):
        frames = np.arange(420 * 420, dtype=np.float32).reshape(1, 420, 420)
        cropped = center_crop(frames, 288)
        assert cropped.shape == (1, 288, 288)
        assert cropped[0, 0, 0] == frames[0, 66, 66]
        with pytest.raises(DimensionError):
            center_crop(frames, 500)

    def test_normalization_by_train_max(self):
        seq = _ramp(5)
        normed, constant = preprocess(seq)
        assert constant == 4.0
        assert normed.frames.max() == 1.0
        assert normed.normalization == 4.0
        assert np.allclose(denormalize(normed.frames, constant), seq.frames)

    def test_all_dry_training_frames(self):
        with pytest.raises(DataError):
            preprocess(FrameSequence(np.zeros((3, 4, 4), dtype=np.float32), np.arange(3) * 5))

    def test_split_is_chronological(self):
        train, val, test = split_sequence(_ramp(20))
        assert (len(train), len(val), len(test)) == (14, 3, 3)
        assert train.frames[-1, 0, 0] < val.frames[0, 0, 0] < test.frames[0, 0, 0]

    def test_split_fractions_validated(self):
        with pytest.raises(ConfigurationError):
            split_sequence(_ramp(10), (0.5, 0.5, 0.5))
        with pytest.raises(ConfigurationError):
            DatasetSpec(split_fractions=(0.9, 0.2, 0.0))


class TestWindows:

    def test_exact_window_counts(self, six_out):
        assert len(make_windows(_ramp(18), 12, six_out)) == 1
        assert len(make_windows(_ramp(30), 12, six_out)) == 13
        assert len(make_windows(_ramp(17), 12, six_out)) == 0
        assert len(make_windows(_ramp(30), 12, six_out, stride=6)) == 3

    def test_channel_order_and_targets(self, six_out):
        window = make_windows(_ramp(30), 12, six_out)[2]
        assert window.inputs.shape == (1, 12, 4, 4)
        assert window.inputs[0, :, 0, 0].tolist() == list(range(2, 14))
        assert window.targets[0, :, 0, 0].tolist() == list(range(14, 20))

    def test_single_output_is_thirty_minutes_ahead(self):
        horizon = HorizonSpec.for_outputs(1)
        assert horizon.minutes == (30,)
        window = make_windows(_ramp(18), 12, horizon)[0]
        assert window.targets[0, 0, 0, 0] == 11 + 6

    def test_horizons(self):
        assert HorizonSpec.for_outputs(12).minutes[-1] == 60
        assert HorizonSpec.for_outputs(6, Task.CLOUD).minutes == (15, 30, 45, 60, 75, 90)
        with pytest.raises(ConfigurationError):
            HorizonSpec.for_outputs(5)

    def test_windows_never_span_gaps(self, six_out):
        seq = _ramp(40)
        seq.timestamps[20:] += 5
        windows = make_windows(seq, 12, six_out)
        assert len(windows) == 3 + 3
        assert all(w.start_index + 18 <= 20 or w.start_index >= 20 for w in windows)

    def test_rain_filter_boundary(self, six_out):
        frames = np.zeros((18, 4, 4), dtype=np.float32)
        frames[12:, :2] = 1.0
        seq = FrameSequence(frames, np.arange(18) * 5)
        windows = make_windows(seq, 12, six_out)
        assert len(filter_windows(windows, 0.5)) == 1
        assert len(filter_windows(windows, 0.51)) == 0
        assert len(filter_windows(windows, 0.0)) == 1

    def test_rain_filter_rules(self, six_out):
        frames = np.zeros((18, 4, 4), dtype=np.float32)
        frames[12] = 1.0
        windows = make_windows(FrameSequence(frames, np.arange(18) * 5), 12, six_out)
        assert filter_windows(windows, 0.2, rule=FilterRule.ALL) == []
        assert len(filter_windows(windows, 0.2, rule=FilterRule.ANY)) == 1

    def test_prepare_uses_train_max(self, blob_sequence, six_out):
        data = DataService(DatasetSpec(filter_kind=FilterKind.NONE)).prepare(blob_sequence, 12, six_out)
        assert data.normalization == pytest.approx(float(blob_sequence.frames[:28].max()))
        assert len(data.train) == 11
        assert data.train[0].normalization == data.normalization


class TestArchive:

    def test_round_trip(self, tmp_path, blob_sequence):
        loaded = load_archive(save_archive(blob_sequence, tmp_path / "seq.rseq"))
        assert loaded.frames.tobytes() == blob_sequence.frames.tobytes()
        assert np.array_equal(loaded.timestamps, blob_sequence.timestamps)
        assert loaded.interval_minutes == 5

    def test_missing_frames(self, tmp_path):
        path = save_archive(_ramp(3, 32, 32), tmp_path / "a.rseq")
        raw = bytearray(path.read_bytes())
        raw[4:8] = (4).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="declares 4 frames"):
            load_archive(path)

    def test_extra_frames(self, tmp_path):
        path = save_archive(_ramp(3, 32, 32), tmp_path / "a.rseq")
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="more frames"):
            load_archive(path)

    def test_truncated_frame(self, tmp_path):
        path = save_archive(_ramp(3, 32, 32), tmp_path / "a.rseq")
        raw = path.read_bytes()
        path.write_bytes(raw[:20 + 42 + 100])
        with pytest.raises(ArchiveError, match="truncated"):
            load_archive(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="absent.rseq"):
            load_archive(tmp_path / "absent.rseq")

    def test_directory_is_not_an_archive(self, tmp_path):
        with pytest.raises(DataError, match="cannot read archive"):
            load_archive(tmp_path)

    def test_timestamp_gaps_survive(self, tmp_path):
        seq = _ramp(5, 32, 32)
        seq.timestamps[3:] += 60
        assert load_archive(save_archive(seq, tmp_path / "g.rseq")).timestamps.tolist() == [0, 5, 10, 75, 80]
