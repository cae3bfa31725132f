import json
import os

import numpy as np
import pytest

from tempered_nilm.data import (
    APPLIANCES, AlignedPair, ApplianceSpec, Archetype, ChannelSeries, Segment, SyntheticSpec,
    align_resample, apply_hold_times, build_datasets, build_synthetic_datasets, load_manifest,
    load_redd_channel, make_windows, on_off_status, redd_manifest, sum_channels, synth_generate,
    window_count, write_redd_channel, write_synthetic_dataset,
)
from tempered_nilm.errors import DataError

T0 = 1303132929


def series(values, start=T0, step=1):
    v = np.asarray(values, dtype=float)
    return ChannelSeries(start + step * np.arange(v.size, dtype=float), v)


def pair_of(mains, app, house=0):
    t = np.arange(len(mains), dtype=float)
    return AlignedPair([Segment(t, np.asarray(mains, float), np.asarray(app, float))], house)


class TestChannelFiles:
    def test_two_points(self, tmp_path):
        p = tmp_path / "c.dat"
        p.write_text("1303132929 6.0\n1303132932 6.5")
        s = load_redd_channel(p)
        assert len(s) == 2 and s.watts[1] == 6.5

    def test_empty(self, tmp_path):
        p = tmp_path / "c.dat"
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_redd_channel(p)

    def test_bad_line_reports_number(self, tmp_path):
        p = tmp_path / "c.dat"
        p.write_text("1 2.0\n2 abc\n")
        with pytest.raises(DataError, match=":2:"):
            load_redd_channel(p)

    def test_non_monotone(self, tmp_path):
        p = tmp_path / "c.dat"
        p.write_text("5 1.0\n4 1.0\n")
        with pytest.raises(DataError):
            load_redd_channel(p)

    def test_round_trip(self, tmp_path):
        rs = np.random.default_rng(0)
        s = ChannelSeries(T0 + np.cumsum(rs.integers(1, 5, 50)).astype(float), rs.random(50) * 1e3)
        write_redd_channel(tmp_path / "c.dat", s)
        back = load_redd_channel(tmp_path / "c.dat")
        np.testing.assert_array_equal(back.timestamps, s.timestamps)
        np.testing.assert_array_equal(back.watts, s.watts)


class TestAlign:
    def test_identity(self):
        m, a = series([5, 6, 7, 8]), series([1, 0, 1, 0])
        pair = align_resample(m, a)
        assert len(pair.segments) == 1
        np.testing.assert_array_equal(pair.segments[0].mains, m.watts)
        np.testing.assert_array_equal(pair.segments[0].appliance, a.watts)

    def test_short_gap_forward_fills(self):
        m = ChannelSeries(np.array([0.0, 10.0, 11.0]), np.array([3.0, 4.0, 5.0]))
        a = series(np.ones(12), start=0)
        seg = align_resample(m, a).segments
        assert len(seg) == 1
        np.testing.assert_array_equal(seg[0].mains[:10], 3.0)
        assert seg[0].mains[10] == 4.0

    def test_long_gap_splits(self):
        m = ChannelSeries(np.array([0.0, 1.0, 301.0, 302.0]), np.array([1.0, 1, 2, 2]))
        a = series(np.ones(303), start=0)
        seg = align_resample(m, a).segments
        assert len(seg) == 2
        assert seg[0].timestamps[-1] == 1.0 and seg[1].timestamps[0] == 301.0

    def test_sum_channels(self):
        s = sum_channels([series([1, 2, 3]), series([10, 20, 30])])
        np.testing.assert_array_equal(s.watts, [11, 22, 33])

    def test_no_overlap(self):
        with pytest.raises(DataError):
            align_resample(series([1, 2], start=0), series([1, 2], start=100))


class TestStatus:
    def test_blip_suppressed(self):
        power = np.zeros(40)
        power[5:7] = 500  # 2 s blip
        power[20:35] = 500
        spec = ApplianceSpec("x", 1000, 100, min_on_sec=10, min_off_sec=0)
        status = on_off_status(power, spec)
        assert not status[5:7].any()
        assert status[20:35].all() and status.sum() == 15

    def test_short_off_gap_merged(self):
        on = np.array([1, 1, 1, 0, 1, 1, 1, 0, 0, 0, 0, 1], dtype=bool)
        out = apply_hold_times(on, min_on=2, min_off=2)
        np.testing.assert_array_equal(out, [1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0])

    def test_zero_power_is_off(self):
        assert not on_off_status(np.zeros(100), APPLIANCES["fridge"]).any()


class TestWindows:
    def test_count(self):
        ds = make_windows(pair_of(np.full(64, 100.0), np.zeros(64)), APPLIANCES["fridge"], 32, stride=16)
        assert len(ds) == 3 == window_count(64, 32, 16)
        assert not ds.status.any()

    def test_normalisation(self):
        rs = np.random.default_rng(1)
        m = rs.random(500) * 1000
        a = rs.random(500) * 600
        ds = make_windows(pair_of(m, a), APPLIANCES["fridge"], 50, stride=50)
        np.testing.assert_allclose(ds.aggregate.mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.aggregate.std(), 1.0, atol=1e-12)
        assert ds.target.max() == 1.0  # clipped at the 400 W cutoff
        assert ds.stats.cutoff == 400

    def test_eval_needs_stats(self):
        with pytest.raises(DataError):
            make_windows(pair_of(np.ones(64), np.ones(64)), APPLIANCES["fridge"], 32, split="eval")

    def test_default_strides(self):
        p = pair_of(np.arange(128.0), np.zeros(128))
        tr = make_windows(p, APPLIANCES["fridge"], 32)
        te = make_windows(p, APPLIANCES["fridge"], 32, norm_stats=tr.stats, split="eval")
        assert (len(tr), len(te)) == (7, 4)

    def test_too_short(self):
        with pytest.raises(DataError):
            make_windows(pair_of(np.ones(10), np.ones(10)), APPLIANCES["fridge"], 32)

    def test_data_hash(self):
        p = pair_of(np.arange(128.0), np.zeros(128))
        a = make_windows(p, APPLIANCES["fridge"], 32)
        b = make_windows(p, APPLIANCES["fridge"], 32)
        assert a.data_hash() == b.data_hash()
        assert a.subset([0, 1]).data_hash() != a.data_hash()


class TestSynthetic:
    def test_constant_baseline(self):
        mains, ch = synth_generate(SyntheticSpec(duration_sec=100, archetypes=(), baseline_watts=50,
                                                 noise_std=0))
        assert ch == {} and np.all(mains.watts == 50)

    def test_additivity(self):
        mains, ch = synth_generate(SyntheticSpec(duration_sec=5000, noise_std=0))
        for s in ch.values():
            assert np.all(mains.watts >= s.watts)

    def test_duty_cycle(self):
        spec = SyntheticSpec(duration_sec=100_000, noise_std=0,
                             archetypes=(Archetype("x", 100.0, 300.0, 0.5),))
        _, ch = synth_generate(spec)
        assert abs(np.mean(ch["x"].watts > 0) - 0.5) < 0.02

    def test_seeded(self):
        a = synth_generate(SyntheticSpec(duration_sec=3000, seed=4))[0].watts
        b = synth_generate(SyntheticSpec(duration_sec=3000, seed=4))[0].watts
        c = synth_generate(SyntheticSpec(duration_sec=3000, seed=5))[0].watts
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_write_and_reload(self, tmp_path):
        spec = SyntheticSpec(duration_sec=4000, seed=2)
        path = write_synthetic_dataset(spec, tmp_path)
        mains, ch = synth_generate(spec)
        np.testing.assert_array_equal(load_redd_channel(tmp_path / "house_1/channel_1.dat").watts, mains.watts)
        np.testing.assert_array_equal(load_redd_channel(tmp_path / "house_1/channel_3.dat").watts,
                                      ch["pump"].watts)
        train, test = build_datasets(path, "pump", 32)
        mem_train, mem_test = build_synthetic_datasets(spec, "pump", 32)
        assert train.data_hash() == mem_train.data_hash()
        assert test.data_hash() == mem_test.data_hash()
        assert test.stats == train.stats

    def test_unknown_appliance(self, tmp_path):
        path = write_synthetic_dataset(SyntheticSpec(duration_sec=2000), tmp_path)
        with pytest.raises(DataError):
            build_datasets(path, "microwave", 32)
        with pytest.raises(DataError):
            build_synthetic_datasets(SyntheticSpec(duration_sec=2000), "microwave", 32)


class TestManifest:
    def test_redd_layout(self, tmp_path):
        for house in (1, 2):
            d = tmp_path / f"house_{house}"
            d.mkdir()
            (d / "labels.dat").write_text("1 mains\n2 mains\n3 refrigerator\n4 dishwaser\n")
            for ch, vals in ((1, [100] * 80), (2, [50] * 80), (3, [0] * 40 + [200] * 40), (4, [0] * 80)):
                write_redd_channel(d / f"channel_{ch}.dat", series(vals))
        manifest = redd_manifest(tmp_path)
        with open(tmp_path / "manifest.json", "w") as fh:
            json.dump(manifest, fh)
        h1 = manifest["houses"][0]
        assert h1["split"] == "test" and h1["channels"]["dishwasher"] == ["house_1/channel_4.dat"]
        train, test = build_datasets(load_manifest(tmp_path / "manifest.json"), "fridge", 32)
        assert set(train.houses) == {2} and set(test.houses) == {1}
        assert train.aggregate.shape[1] == 32

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(os.path.join(tmp_path, "nope.json"))
