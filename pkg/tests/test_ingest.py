import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import savemat

from conftest import write_pamap2_subject, write_wisdm_subject
from iflf.ingest import (
    PAMAP2_ACTIVITIES, UNLABELED, DomainId, IngestError, LabelMap, Perturbation, Recording, SyntheticSpec,
    generate_synthetic, load_pamap2, load_uschad, load_wisdm, read_canonical, read_canonical_dir,
    validate_recording, write_canonical, write_canonical_dir,
)
from iflf.sigproc import magnitude_channels, make_windows
from iflf.similarity import dtw_align


def test_domain_id_requires_a_key():
    with pytest.raises(ValueError):
        DomainId()
    assert DomainId("7").key == "7@"
    assert DomainId.from_key("3@phone") == DomainId("3", "phone")


def test_validator_rejects_broken_recordings():
    good = Recording(np.zeros((3, 2)), [0.0, 0.1, 0.2], [0, 0, 1], ["a.x", "a.y"], 10.0, DomainId("s"), ["x", "y"])
    validate_recording(good)
    with pytest.raises(ValueError, match="strictly increasing"):
        validate_recording(good.replace(timestamps=np.array([0.0, 0.2, 0.1])))
    with pytest.raises(ValueError, match="labels"):
        validate_recording(good.replace(labels=np.array([0, 1])))
    with pytest.raises(ValueError, match="channel names"):
        validate_recording(good.replace(channel_names=["a.x"]))


def test_label_map_masks():
    recs = generate_synthetic(SyntheticSpec.default(3, 4, seed=0, missing={1: (2,)}), seed=0)
    lm = LabelMap.from_recordings(recs)
    assert lm.num_classes == 4
    assert lm.mask(recs[1].domain).tolist() == [True, True, False, True]
    assert LabelMap.from_dict(lm.to_dict()) == lm
    with pytest.raises(ValueError):
        LabelMap(["a", "a"])


# --- synthetic ---------------------------------------------------------------


def test_synthetic_identical_perturbations_give_identical_domains():
    base = SyntheticSpec.default(2, 3, seed=4)
    same = Perturbation(amplitude_scale=1.2, bias=0.3, noise_std=0.0, time_warp=1.1, rotation_deg=15.0)
    spec = SyntheticSpec(2, 3, base.waveforms, [same, same], duration_s=10)
    a, b = generate_synthetic(spec, seed=9)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_shape_and_classes():
    recs = generate_synthetic(SyntheticSpec.default(5, 4, seed=1), seed=1)
    assert len(recs) == 5
    for rec in recs:
        validate_recording(rec)
        assert rec.present_classes() == [0, 1, 2, 3]
        assert rec.num_channels == 6
        assert len(rec.segment_starts) == 4


def test_synthetic_is_pure_function_of_spec_and_seed():
    spec = SyntheticSpec.default(3, 2, seed=2, duration_s=5)
    a = generate_synthetic(spec, seed=5)
    b = generate_synthetic(spec, seed=5)
    c = generate_synthetic(spec, seed=6)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_synthetic_missing_classes():
    recs = generate_synthetic(SyntheticSpec.default(3, 4, seed=0, missing={0: (1, 3)}, duration_s=4), seed=0)
    assert recs[0].present_classes() == [0, 2]
    assert recs[1].present_classes() == [0, 1, 2, 3]


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec.default(1, 4)
    base = SyntheticSpec.default(2, 2)
    with pytest.raises(ValueError):
        SyntheticSpec(2, 2, base.waveforms, [Perturbation(time_warp=0.0), Perturbation()])
    with pytest.raises(ValueError):
        SyntheticSpec(2, 2, base.waveforms, [Perturbation(noise_std=-1.0), Perturbation()])


def test_synthetic_time_warp_is_closer_than_another_class():
    base = SyntheticSpec.default(2, 2, seed=3)
    spec = SyntheticSpec(2, 2, base.waveforms, [Perturbation(), Perturbation(time_warp=2.0)], duration_s=12, sampling_rate_hz=25)
    d1, d2 = [magnitude_channels(r) for r in generate_synthetic(spec, seed=0)]
    n = 150
    c0_d1 = d1.samples[d1.labels == 0, 0][:n]
    c0_d2 = d2.samples[d2.labels == 0, 0][: 2 * n]  # twice as slow, same content
    c1_d1 = d1.samples[d1.labels == 1, 0][:n]
    assert dtw_align(c0_d1, c0_d2).dtw_cost < dtw_align(c0_d1, c1_d1).dtw_cost


def test_spec_dict_round_trip():
    spec = SyntheticSpec.default(3, 2, seed=0, missing={2: (0,)}, shared_classes=(1,), domain_style=0.4)
    again = SyntheticSpec.from_dict(spec.to_dict())
    assert again == spec


def test_domain_style_only_touches_non_shared_classes():
    base = SyntheticSpec.default(3, 3, seed=2, shared_classes=(0,), duration_s=12)
    styled = SyntheticSpec.default(3, 3, seed=2, shared_classes=(0,), duration_s=12, domain_style=0.5)
    with pytest.raises(ValueError):
        SyntheticSpec.default(3, 3, domain_style=1.0)
    for a, b in zip(generate_synthetic(base, seed=1), generate_synthetic(styled, seed=1)):
        assert np.array_equal(a.samples[a.labels == 0], b.samples[b.labels == 0])
        assert not np.allclose(a.samples[a.labels == 1], b.samples[b.labels == 1])


def test_domain_style_keeps_sensor_offsets():
    base = SyntheticSpec.default(3, 3, seed=2, duration_s=120, noise_std=0.0, variability=0.0)
    base.perturbations = [Perturbation() for _ in range(3)]
    styled = dataclasses.replace(base, domain_style=0.5)
    for a, b in zip(generate_synthetic(base, seed=1), generate_synthetic(styled, seed=1)):
        # gravity is ~9.8 per axis group; a blended orientation would move the means by several units
        assert np.abs(a.samples[a.labels == 1].mean(0) - b.samples[b.labels == 1].mean(0)).max() < 1.0


# --- canonical format ----------------------------------------------------------


def _assert_same(a: Recording, b: Recording):
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.timestamps, b.timestamps)
    assert np.array_equal(a.labels, b.labels)
    assert a.channel_names == b.channel_names
    assert a.class_names == b.class_names
    assert a.domain == b.domain
    assert a.sampling_rate_hz == b.sampling_rate_hz
    assert a.segment_starts == b.segment_starts


def test_canonical_round_trip_synthetic(tmp_path):
    recs = generate_synthetic(SyntheticSpec.default(2, 3, seed=0, duration_s=3), seed=0)
    write_canonical_dir(recs, tmp_path)
    back = read_canonical_dir(tmp_path)
    for a, b in zip(sorted(recs, key=lambda r: r.domain.key), sorted(back, key=lambda r: r.domain.key)):
        _assert_same(a, b)


def test_canonical_layout_and_unlabeled(tmp_path):
    rec = Recording(np.array([[1.5, -2.0], [0.1, 1e-17]]), [0.0, 0.5], [UNLABELED, 1], ["acc.x", "acc.y"], 2.0,
                    DomainId("a", "b"), ["walk", "run"])
    path = write_canonical(rec, tmp_path, "r")
    header, first, second = path.read_text(encoding="utf-8").splitlines()
    assert header == "timestamp_s,acc.x,acc.y,label"
    assert first.endswith(",unlabeled") and second.endswith(",run")
    _assert_same(rec, read_canonical(path))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=30))
def test_canonical_round_trip_is_exact(tmp_path_factory, values):
    n = len(values)
    rec = Recording(np.array(values)[:, None], np.arange(n) * 0.1, np.zeros(n, int), ["v"], 10.0, DomainId("x"), ["c"])
    path = write_canonical(rec, tmp_path_factory.mktemp("rt"), "r")
    _assert_same(rec, read_canonical(path))


# --- PAMAP2 --------------------------------------------------------------------


def test_pamap2_full_root(tmp_path):
    proto = tmp_path / "Protocol"
    proto.mkdir()
    for s in range(101, 109):
        write_pamap2_subject(proto / f"subject{s}.dat", [1, 2, 4, 0], seconds_each=1.0, seed=s)
    # like the real subject109, no retained activity at all
    write_pamap2_subject(proto / "subject109.dat", [0, 24], seconds_each=1.0)
    recs = load_pamap2(tmp_path)
    assert len(recs) == 8
    for rec in recs:
        assert rec.sampling_rate_hz == 100
        assert rec.channel_names == ["acc.x", "acc.y", "acc.z", "gyro.x", "gyro.y", "gyro.z"]
        assert rec.provenance["skipped_unknown_activity"] == 100
        assert rec.class_names == list(PAMAP2_ACTIVITIES.values())


def test_pamap2_empty_directory(tmp_path):
    with pytest.raises(IngestError, match="subject"):
        load_pamap2(tmp_path)


def test_pamap2_single_subject_partial_labels(tmp_path):
    raw = write_pamap2_subject(tmp_path / "subject105.dat", [1, 5, 12, 0, 9], seconds_each=0.5, nan_rows=[3])
    # standalone count of retained activity codes in the file
    expected = sorted({int(c) for c in raw[:, 1] if int(c) in PAMAP2_ACTIVITIES})
    (rec,) = load_pamap2(tmp_path)
    got = sorted(list(PAMAP2_ACTIVITIES)[i] for i in rec.present_classes())
    assert got == expected
    assert len(got) < 8
    assert rec.domain == DomainId("105", "ankle")
    assert rec.provenance["dropped_nonfinite"] == 1
    assert np.allclose(rec.samples[0, :3], raw[0, 38:41])
    assert np.allclose(rec.samples[0, 3:], raw[0, 44:47])


# --- USC-HAD -------------------------------------------------------------------


def _uschad_trial(path, n, seed):
    readings = np.random.default_rng(seed).normal(size=(n, 6))
    savemat(path, {"sensor_readings": readings, "activity_number": "1", "trial": "1"})
    return readings


def test_uschad_trials_and_corrupt_file(tmp_path):
    for s in (1, 2):
        d = tmp_path / f"Subject{s}"
        d.mkdir()
        _uschad_trial(d / "a1t1.mat", 300, s)
        _uschad_trial(d / "a1t2.mat", 250, s + 10)
        _uschad_trial(d / "a3t1.mat", 220, s + 20)
        _uschad_trial(d / "a11t1.mat", 100, s)  # elevator, not retained
    (tmp_path / "Subject2" / "a3t2.mat").write_bytes(b"not a mat file")
    recs = load_uschad(tmp_path)
    assert len(recs) == 2
    r1, r2 = recs
    assert len(r1) == 770 and r1.segment_starts == [0, 300, 550]
    assert r2.provenance["skipped_trials"] == ["a3t2.mat"]
    assert r1.present_classes() == [0, 2]


def test_uschad_units_are_si(tmp_path):
    d = tmp_path / "Subject1"
    d.mkdir()
    raw = _uschad_trial(d / "a2t1.mat", 50, 0)
    (rec,) = load_uschad(tmp_path)
    assert np.allclose(rec.samples[:, 0], raw[:, 0] * 9.80665)
    assert np.allclose(rec.samples[:, 3], np.deg2rad(raw[:, 3]))


def test_uschad_single_trial_window_count(tmp_path):
    d = tmp_path / "Subject4"
    d.mkdir()
    _uschad_trial(d / "a5t1.mat", 1000, 0)
    (rec,) = load_uschad(tmp_path)
    ws = make_windows(rec)
    assert len(ws) == (1000 - 200) // 40 + 1


def test_uschad_windows_never_straddle_trials(tmp_path):
    d = tmp_path / "Subject1"
    d.mkdir()
    _uschad_trial(d / "a1t1.mat", 330, 0)
    _uschad_trial(d / "a1t2.mat", 330, 1)
    (rec,) = load_uschad(tmp_path)
    ws = make_windows(rec)
    # per trial floor((330 - 200) / 40) + 1 = 4; one long stream would give 12
    assert len(ws) == 8
    starts = ws.origin[:, 1]
    assert all(s + 200 <= 330 or s >= 330 for s in starts)


# --- WISDM ---------------------------------------------------------------------


def test_wisdm_subjects_and_rate(tmp_path):
    for sid in range(1600, 1603):
        write_wisdm_subject(tmp_path, str(sid), ["A", "B", "F"])
    recs = load_wisdm(tmp_path)
    assert len(recs) == 3
    for rec in recs:
        assert rec.sampling_rate_hz == 20
        assert rec.present_classes() == [0, 1]  # "F" (typing) is not retained
        validate_recording(rec)


def test_wisdm_header_only(tmp_path, caplog):
    accel = tmp_path / "raw" / "phone" / "accel"
    gyro = tmp_path / "raw" / "phone" / "gyro"
    accel.mkdir(parents=True)
    gyro.mkdir(parents=True)
    (accel / "data_1600_accel_phone.txt").write_text("subject,activity,timestamp,x,y,z\n")
    (gyro / "data_1600_gyro_phone.txt").write_text("subject,activity,timestamp,x,y,z\n")
    assert load_wisdm(tmp_path) == []
    assert "no valid rows" in caplog.text


def test_wisdm_malformed_lines_counted(tmp_path):
    write_wisdm_subject(tmp_path, "1600", ["A"], extra_lines=["garbage", "1600,A,notanint,1,2,3;", "1,2"])
    (rec,) = load_wisdm(tmp_path)
    assert rec.provenance["malformed_lines"] == 3


def test_wisdm_three_minutes_per_activity(tmp_path):
    write_wisdm_subject(tmp_path, "1601", ["A", "D"], seconds_each=180)
    (rec,) = load_wisdm(tmp_path)
    counts = np.bincount(rec.labels)
    # gyro starts 1 us after the accelerometer, so the first accel sample is cut
    assert counts[0] == 3 * 60 * 20 - 1
    assert counts[3] == 3 * 60 * 20 - 1


def test_wisdm_canonical_round_trip(tmp_path):
    write_wisdm_subject(tmp_path / "in", "1602", ["A", "E"])
    (rec,) = load_wisdm(tmp_path / "in")
    path = write_canonical(rec, tmp_path / "out")
    _assert_same(rec, read_canonical(path))
