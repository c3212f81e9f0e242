import numpy as np
import pytest

from qdcascade import (DetectionChain, EmitterModel, FitResult, Histogram, PeakSeries, PulseTrain,
                       RabiParams, TagStream, TimeTag, ValidationError)
from qdcascade.core import first_unsorted_index


class TestTagStream:
    def test_sorted_stream_is_accepted(self):
        s = TagStream([0, 5, 5, 9], [1, 0, 1, 0], 10)
        assert len(s) == 4
        assert s[1] == TimeTag(0, 5)
        assert list(s.times(1)) == [0, 5]
        assert list(s.counts()) == [2, 2]

    def test_unsorted_time_names_first_offending_index(self):
        with pytest.raises(ValidationError, match="index 2"):
            TagStream([0, 5, 4], [0, 0, 0], 10)

    def test_equal_times_must_be_channel_ordered(self):
        assert first_unsorted_index(np.array([3, 3]), np.array([1, 0])) == 1
        with pytest.raises(ValidationError):
            TagStream([3, 3], [1, 0], 10)

    def test_tag_after_duration_rejected(self):
        with pytest.raises(ValidationError):
            TagStream([0, 11], [0, 0], 10)

    def test_unknown_channel_rejected(self):
        with pytest.raises(ValidationError):
            TagStream([0], [2], 10, channel_count=2)

    def test_arrays_are_read_only(self):
        s = TagStream([0, 1], [0, 1], 10)
        with pytest.raises(ValueError):
            s.t[0] = 3
        with pytest.raises(AttributeError):
            s.duration = 3

    def test_from_tags_sorts_on_request(self):
        s = TagStream.from_tags([TimeTag(1, 7), TimeTag(0, 2)], duration=10, sort=True)
        assert list(s.t) == [2, 7]
        assert list(s.channel) == [0, 1]

    def test_equality(self):
        a = TagStream([0, 1], [0, 1], 10)
        assert a == TagStream([0, 1], [0, 1], 10)
        assert a != TagStream([0, 1], [0, 1], 11)


class TestHistogram:
    def test_geometry(self):
        h = Histogram(10, -30, np.arange(6.0))
        assert h.n_bins == 6
        assert h.tau_max == 30
        assert list(h.edges) == [-30, -20, -10, 0, 10, 20, 30]
        assert list(h.centers) == [-25, -15, -5, 5, 15, 25]

    def test_zero_delay_must_lie_on_a_bin_edge(self):
        with pytest.raises(ValidationError, match="tau_min"):
            Histogram(10, -25, np.zeros(5))

    def test_negative_counts_rejected(self):
        with pytest.raises(ValidationError):
            Histogram(10, 0, [1.0, -1.0])

    def test_with_counts_merges_metadata(self):
        h = Histogram(10, 0, [1.0, 2.0], metadata={"a": "1"})
        g = h.with_counts([2.0, 4.0], norm=0.5, b=2)
        assert g.norm == 0.5
        assert dict(g.metadata) == {"a": "1", "b": "2"}
        assert list(h.counts) == [1.0, 2.0]

    def test_window_mask_uses_centers(self):
        h = Histogram(10, -20, np.ones(4))
        assert list(h.window_mask(-10, 10)) == [False, True, True, False]


class TestModels:
    def test_pulse_train(self):
        assert PulseTrain(12_500, 4).duration == 50_000
        with pytest.raises(ValidationError):
            PulseTrain(0, 1)
        with pytest.raises(ValidationError):
            PulseTrain(10, -1)

    def test_emitter_drive_is_exclusive(self):
        rabi = RabiParams(0.1, 1.0)
        with pytest.raises(ValidationError):
            EmitterModel(1210, 340, prep_fidelity=0.8, rabi=rabi)
        with pytest.raises(ValidationError):
            EmitterModel(1210, 340)

    @pytest.mark.parametrize("kw", [dict(t1_x=0), dict(t1_xx=-1), dict(prep_fidelity=1.2),
                                    dict(dop=1.5), dict(tau_on=10.0), dict(tau_on=-1, tau_off=1)])
    def test_emitter_validation(self, kw):
        base = dict(t1_x=1210, t1_xx=340, prep_fidelity=0.8)
        base.update(kw)
        with pytest.raises(ValidationError):
            EmitterModel(**base)

    def test_on_probability(self):
        assert EmitterModel(1, 1, prep_fidelity=1).on_probability == 1.0
        e = EmitterModel(1, 1, prep_fidelity=1, tau_on=1.0, tau_off=3.0)
        assert e.on_probability == 0.25

    def test_at_power_sets_pulse_area(self):
        e = EmitterModel(1210, 340, rabi=RabiParams(0.1, 2.0))
        assert e.at_power(1.5).pulse_area == 3.0

    def test_rabi_xi_domain(self):
        with pytest.raises(ValidationError):
            RabiParams(2.0, 1.0)

    def test_detection_per_channel(self):
        d = DetectionChain(efficiency=(0.5, 0.7), jitter_fwhm=50.0)
        assert d.efficiency == (0.5, 0.7)
        assert d.dead_time == (50_000.0, 50_000.0)
        assert d.jitter_sigma == pytest.approx(50.0 / (2 * np.sqrt(2 * np.log(2))))
        with pytest.raises(ValidationError):
            DetectionChain(efficiency=1.1)
        with pytest.raises(ValidationError):
            DetectionChain(dead_time=(1.0, 2.0, 3.0))


class TestPeakSeries:
    def test_sorted_and_indexed(self):
        p = PeakSeries([1, -1, 0], [3.0, 1.0, 2.0], [0.1, 0.1, 0.1], 100)
        assert list(p.n) == [-1, 0, 1]
        assert p[1].area == 3.0
        assert 0 in p and 5 not in p
        assert list(p.side) == [True, False, True]

    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValidationError):
            PeakSeries([0, 0], [1.0, 1.0], [0.0, 0.0], 100)


def test_fit_result_access():
    r = FitResult({"a": 1.0, "b": 2.0}, {"a": 0.1}, 0.0, True, 3)
    assert r["a"] == 1.0
    assert r.err("a") == 0.1
    assert np.isnan(r.err("b"))
    assert "converged = True" in r.summary()
    with pytest.raises(ValidationError):
        FitResult({"a": 1.0}, {"b": 0.1}, 0.0, True, 1)
