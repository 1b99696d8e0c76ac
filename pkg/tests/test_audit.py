import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import moving_average_oracle
from roadaudit import audit as au
from roadaudit.audit import (AuditTrack, SeverityRecord, emit_map, run_audit,
                             severity, smooth_track)
from roadaudit.dataset import Frame, GpsFix
from roadaudit.errors import ConfigError, DataError
from roadaudit.tagging import TAGGABLE_CLASSES, uniform_thresholds
from roadaudit.taxonomy import NUM_CLASSES, ClassId


def track_from_series(series: dict[int, list[float]], sequence_id="s") -> AuditTrack:
    n = len(next(iter(series.values())))
    records = [
        SeverityRecord(
            gps=GpsFix(10.0 + 1e-5 * i, 20.0 + 2e-5 * i),
            frame_index=i,
            per_class_severity={c: values[i] for c, values in series.items()},
        )
        for i in range(n)
    ]
    return AuditTrack(sequence_id, records)


class TestSeverity:
    def test_all_void_mask_scores_zero(self):
        scores = severity(np.zeros((8, 8), np.uint8))
        assert all(v == 0.0 for v in scores.values())

    def test_full_frame_single_class_scores_one(self):
        mask = np.full((8, 8), int(ClassId.POTHOLE), dtype=np.uint8)
        assert severity(mask)[int(ClassId.POTHOLE)] == 1.0

    def test_1000_pixels_in_512x1024(self):
        mask = np.zeros(512 * 1024, dtype=np.uint8)
        mask[:1000] = int(ClassId.POTHOLE)
        scores = severity(mask.reshape(512, 1024))
        assert scores[int(ClassId.POTHOLE)] == pytest.approx(1000 / 524288)

    @given(st.integers(0, 63))
    @settings(max_examples=25)
    def test_shares_plus_void_sum_to_one(self, n_defect):
        mask = np.zeros(64, dtype=np.uint8)
        mask[:n_defect] = 5
        scores = severity(mask.reshape(8, 8))
        void_share = float((mask == 0).sum()) / 64
        assert sum(scores.values()) + void_share == pytest.approx(1.0)

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(DataError):
            severity(np.full((2, 2), NUM_CLASSES, dtype=np.uint8))


class TestSmoothing:
    def test_window_one_is_identity(self):
        track = track_from_series({4: [0.1, 0.5, 0.2], 5: [0.0, 0.3, 0.3]})
        out = smooth_track(track, window=1)
        for c in (4, 5):
            assert np.array_equal(out.series(c), track.series(c))

    def test_constant_series_unchanged(self):
        track = track_from_series({7: [0.25] * 9})
        out = smooth_track(track, window=5)
        assert np.allclose(out.series(7), 0.25)

    def test_hand_computed_edge_windows(self):
        track = track_from_series({4: [0.0, 1.0, 0.0]})
        out = smooth_track(track, window=3)
        assert out.series(4) == pytest.approx([0.5, 1 / 3, 0.5])

    @given(
        st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12),
        st.sampled_from([1, 3, 5, 7]),
    )
    @settings(max_examples=50)
    def test_matches_slicing_oracle(self, values, window):
        track = track_from_series({6: values})
        out = smooth_track(track, window=window)
        assert out.series(6) == pytest.approx(moving_average_oracle(values, window))

    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=10))
    @settings(max_examples=40)
    def test_smoothed_values_stay_within_raw_bounds(self, values):
        track = track_from_series({8: values})
        out = smooth_track(track, window=3)
        assert out.series(8).min() >= min(values) - 1e-12
        assert out.series(8).max() <= max(values) + 1e-12

    def test_interior_mean_preserved_for_full_windows(self):
        # away from the edges each raw value is counted exactly `window` times
        values = [0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8]
        track = track_from_series({4: values})
        out = smooth_track(track, window=3)
        interior = out.series(4)[1:-1]
        expected = [sum(values[i - 1:i + 2]) / 3 for i in range(1, len(values) - 1)]
        assert interior == pytest.approx(expected)

    def test_gps_and_indices_pass_through(self):
        track = track_from_series({4: [0.1, 0.2, 0.3]})
        out = smooth_track(track, window=3)
        for raw, smooth in zip(track.records, out.records):
            assert smooth.gps == raw.gps
            assert smooth.frame_index == raw.frame_index

    def test_even_window_rejected(self):
        track = track_from_series({4: [0.1]})
        with pytest.raises(ConfigError, match="odd"):
            smooth_track(track, window=4)
        with pytest.raises(ConfigError):
            smooth_track(track, window=0)

    def test_empty_track_stays_empty(self):
        out = smooth_track(AuditTrack("s", []), window=5)
        assert out.records == []

    def test_unordered_records_rejected(self):
        records = [
            SeverityRecord(GpsFix(0, 0), 1, {4: 0.1}),
            SeverityRecord(GpsFix(0, 0), 0, {4: 0.1}),
        ]
        with pytest.raises(DataError, match="ordered"):
            AuditTrack("s", records)


class TestEmitMap:
    def test_empty_tracks_empty_collection(self):
        doc = emit_map([])
        assert doc == {"type": "FeatureCollection", "features": []}

    def test_single_qualifying_record(self):
        track = track_from_series({4: [0.03]})
        doc = emit_map([track], severity_floor=0.01)
        features = [f for f in doc["features"] if f["properties"]["severity"] > 0]
        assert len(features) == 1
        f = features[0]
        assert f["geometry"]["type"] == "Point"
        assert f["geometry"]["coordinates"] == [20.0, 10.0]  # [lon, lat]
        assert f["properties"]["class"] == "pothole"
        assert f["properties"]["grade"] == "medium"
        assert f["properties"]["frame_index"] == 0

    def test_feature_count_matches_brute_force(self):
        rng = np.random.default_rng(0)
        series = {c: list(rng.random(10) * 0.05) for c in (4, 5)}
        track = track_from_series(series)
        floor = 0.02
        doc = emit_map([track], severity_floor=floor)
        expected = sum(
            1 for c in (4, 5) for v in series[c] if v >= floor
        )  # the other 8 classes sit below any positive floor at severity 0
        assert len(doc["features"]) == expected

    @given(st.floats(0.001, 0.2))
    @settings(max_examples=30)
    def test_feature_count_monotone_in_floor(self, floor):
        rng = np.random.default_rng(1)
        track = track_from_series({c: list(rng.random(8) * 0.1) for c in (4, 9)})
        lower = len(emit_map([track], severity_floor=floor / 2)["features"])
        higher = len(emit_map([track], severity_floor=floor)["features"])
        assert higher <= lower

    def test_grades_follow_cut_points(self):
        track = track_from_series({4: [0.005, 0.03, 0.2]})
        doc = emit_map([track], severity_floor=0.0, grade_cuts=(0.01, 0.05))
        grades = [
            f["properties"]["grade"]
            for f in doc["features"]
            if f["properties"]["class"] == "pothole"
        ]
        assert grades == ["low", "medium", "high"]

    def test_invalid_floor_and_cuts_rejected(self):
        with pytest.raises(ConfigError):
            emit_map([], severity_floor=1.5)
        with pytest.raises(ConfigError):
            emit_map([], grade_cuts=(0.05, 0.01))

    def test_geojson_structure(self):
        track = track_from_series({4: [0.05, 0.08]})
        doc = emit_map([track], severity_floor=0.01)
        assert doc["type"] == "FeatureCollection"
        for f in doc["features"]:
            assert f["type"] == "Feature"
            assert f["geometry"]["type"] == "Point"
            lon, lat = f["geometry"]["coordinates"]
            assert -180 <= lon <= 180 and -90 <= lat <= 90
            assert set(f["properties"]) == {
                "class", "severity", "grade", "sequence_id", "frame_index"
            }


class TestRunAudit:
    def test_oracle_model_recovers_planted_tags(self, toy_sequence):
        result = run_audit(
            toy_sequence.frames,
            model=lambda frame: frame.mask,
            thresholds=uniform_thresholds(1.0),
        )
        from roadaudit.tagging import tags_from_mask

        expected = [tags_from_mask(f.mask) for f in toy_sequence.frames]
        assert result.frame_tags == expected
        assert result.frame_indices == [f.index for f in toy_sequence.frames]
        assert result.skipped_frames == []

    def test_all_void_predictions_empty_map(self, toy_sequence):
        result = run_audit(
            toy_sequence.frames,
            model=lambda frame: np.zeros_like(frame.mask),
            thresholds=uniform_thresholds(1.0),
        )
        assert all(tags == set() for tags in result.frame_tags)
        assert result.geojson["features"] == []

    def test_coordinates_pass_through_in_order(self, toy_sequence):
        result = run_audit(
            toy_sequence.frames,
            model=lambda frame: frame.mask,
            thresholds=uniform_thresholds(1.0),
            severity_floor=0.0,
        )
        fixes = {(f.gps.lon, f.gps.lat) for f in toy_sequence.frames}
        got = {tuple(f["geometry"]["coordinates"])
               for f in result.geojson["features"]}
        assert got <= fixes
        by_index = {
            f["properties"]["frame_index"]: tuple(f["geometry"]["coordinates"])
            for f in result.geojson["features"]
        }
        for frame in toy_sequence.frames:
            if frame.index in by_index:
                assert by_index[frame.index] == (frame.gps.lon, frame.gps.lat)

    def test_streaming_accepts_a_lazy_iterator(self, toy_sequence):
        result = run_audit(
            iter(toy_sequence.frames),
            model=lambda frame: frame.mask,
            thresholds=uniform_thresholds(1.0),
        )
        assert len(result.frame_tags) == len(toy_sequence)

    def test_failing_frame_is_skipped_with_gap(self, toy_sequence):
        def flaky(frame):
            if frame.index == 2:
                raise RuntimeError("camera glitch")
            return frame.mask

        with pytest.warns(RuntimeWarning, match="frame 2 skipped"):
            result = run_audit(
                toy_sequence.frames, model=flaky,
                thresholds=uniform_thresholds(1.0),
            )
        assert result.skipped_frames == [2]
        assert 2 not in result.frame_indices
        assert len(result.frame_tags) == len(toy_sequence) - 1

    def test_network_model_path(self, toy_sequence):
        import torch

        from roadaudit.models import TOY_SPEC, CascadeModel

        torch.manual_seed(0)
        model = CascadeModel(TOY_SPEC).eval()
        result = run_audit(
            toy_sequence.frames[:2], model=model,
            thresholds=uniform_thresholds(1.0),
        )
        assert len(result.frame_tags) == 2
        assert result.raw_track.records[0].per_class_severity.keys() == set(
            TAGGABLE_CLASSES
        )

    def test_rejects_non_callable_model(self, toy_sequence):
        with pytest.raises(ConfigError, match="callable"):
            run_audit(toy_sequence.frames, model=42,
                      thresholds=uniform_thresholds(1.0))


class TestPersistence:
    def test_severity_csv_layout(self, tmp_path):
        raw = track_from_series({4: [0.1, 0.3]})
        smoothed = smooth_track(raw, window=3)
        path = tmp_path / "severity.csv"
        au.write_severity_csv(raw, smoothed, path)
        import csv

        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2  # one class occupied over two frames
        assert rows[0]["class"] == "pothole"
        assert float(rows[0]["raw"]) == 0.1
        assert float(rows[0]["smoothed"]) == pytest.approx(0.2)

    def test_geojson_file_round_trip(self, tmp_path):
        import json

        track = track_from_series({4: [0.05]})
        doc = emit_map([track], severity_floor=0.01)
        path = tmp_path / "map.geojson"
        au.write_geojson(doc, path)
        assert json.loads(path.read_text()) == doc
