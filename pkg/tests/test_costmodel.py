"""Analytic FLOP/memory accounting against reference values and the MAC counter."""

import numpy as np
import pytest

from spygr.core.costmodel import GIGA, MEGA, CostReport, count_macs, flops_graph_reason, flops_pyramid, memory_estimate
from spygr.core.layer import AttentionMode, SpyGRParams, graph_reason
from spygr.core.pyramid import PyramidConfig, spygr_pyramid
from spygr.core.tensor import Tensor


class TestReferenceConfiguration:
    """[1, 512, 97, 97] with M = 64, the configuration the overhead table reports."""

    def test_single_scale_flops(self):
        report = flops_graph_reason(97, 97, 512, 64)
        assert report.flops == 3_398_144_768
        assert report.gflops == pytest.approx(3.11, rel=0.10)

    def test_pyramid_flops(self):
        report = flops_pyramid(97, 97, 512, 64, levels=4)
        assert report.gflops == pytest.approx(4.12, rel=0.10)

    def test_single_scale_memory(self):
        report = memory_estimate(97, 97, 512, 64)
        assert 120 / 1.5 <= report.memory_mb <= 120 * 1.5

    def test_pyramid_memory(self):
        report = memory_estimate(97, 97, 512, 64, levels=4)
        assert 164 / 1.5 <= report.memory_mb <= 164 * 1.5

    def test_units_are_binary(self):
        report = flops_graph_reason(97, 97, 512, 64)
        assert report.gflops == report.flops / GIGA
        assert MEGA == 2 ** 20
        assert GIGA == 2 ** 30
        memory = memory_estimate(97, 97, 512, 64)
        assert memory.memory_mb == memory.peak_activation_bytes / MEGA

    def test_pyramid_overhead_over_single_scale(self):
        ratio = flops_pyramid(97, 97, 512, 64, levels=4).flops / flops_graph_reason(97, 97, 512, 64).flops
        assert 1.25 <= ratio <= 1.40


class TestClosedForm:
    def test_single_pixel_by_hand(self):
        # embed 8, attention 8, degrees 2*2+2, apply 2+2*2*4+2*4, identity 4, theta 4*3
        report = flops_graph_reason(1, 1, 4, 2, out_channels=3)
        assert report.flops == 64
        assert report.breakdown["laplacian_apply"] == 26

    def test_single_pixel_memory_by_hand(self):
        report = memory_estimate(1, 1, 4, 2, out_channels=3)
        assert report.peak_activation_bytes == 51 * 4

    def test_breakdown_sums_to_total(self):
        report = flops_pyramid(33, 20, 16, 8, levels=3)
        assert sum(report.breakdown.values()) == report.flops

    @pytest.mark.parametrize("size", [32, 33, 48, 64, 65, 97, 129])
    @pytest.mark.parametrize("channels, embed", [(512, 64), (64, 8), (8, 2)])
    def test_four_level_overhead_is_bounded(self, size, channels, embed):
        single = flops_graph_reason(size, size, channels, embed).flops
        pyramid = flops_pyramid(size, size, channels, embed, levels=4).flops
        assert 1.25 <= pyramid / single <= 1.40

    def test_resampling_reported_apart(self):
        report = flops_pyramid(33, 20, 16, 8, levels=3)
        assert set(report.resample) == {"pool", "upsample", "aggregate"}
        assert not set(report.resample) & set(report.breakdown)
        assert report.total_macs == report.flops + report.resample_flops
        assert report.to_dict()["total_macs"] == report.total_macs
        assert "total+resample" in report.to_table()

    def test_single_scale_has_no_resampling(self):
        report = flops_graph_reason(16, 16, 8, 4)
        assert report.resample_flops == 0
        assert report.total_macs == report.flops

    def test_flops_grow_with_levels(self):
        counts = [flops_pyramid(64, 64, 32, 8, levels=s).flops for s in range(1, 6)]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_memory_report_keeps_resampling(self):
        report = memory_estimate(33, 20, 16, 8, levels=3)
        assert report.resample == flops_pyramid(33, 20, 16, 8, levels=3).resample

    def test_inconsistent_report_rejected(self):
        with pytest.raises(ValueError):
            CostReport(flops=10, breakdown={"a": 3})

    def test_single_level_pyramid_matches_layer(self):
        assert flops_pyramid(40, 30, 16, 4, levels=1).flops == flops_graph_reason(40, 30, 16, 4).flops

    def test_area_scaling_of_theta(self):
        small = flops_graph_reason(12, 10, 16, 4)
        large = flops_graph_reason(24, 20, 16, 4)
        assert large.breakdown["theta"] == 4 * small.breakdown["theta"]

    def test_monotone_in_extents(self):
        base = flops_graph_reason(10, 10, 8, 4).flops
        assert flops_graph_reason(11, 10, 8, 4).flops > base
        assert flops_graph_reason(10, 10, 9, 4).flops > base
        assert flops_graph_reason(10, 10, 8, 5).flops > base

    def test_non_positive_extent_rejected(self):
        with pytest.raises(ValueError):
            flops_graph_reason(0, 4, 4, 2)

    def test_table_lists_total(self):
        table = flops_graph_reason(8, 8, 4, 2).to_table()
        assert "total" in table
        assert "theta" in table


class TestInstrumentedCounter:
    @pytest.mark.parametrize("mode", list(AttentionMode))
    @pytest.mark.parametrize("include_identity", [True, False])
    def test_layer_matches_counter(self, rng, mode, include_identity):
        for _ in range(3):
            h, w = (int(v) for v in rng.integers(3, 12, size=2))
            c, m, c_out = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
            params = SpyGRParams.init(c, m, c_out, mode, include_identity, rng=rng)
            x = Tensor(rng.standard_normal((2, c, h, w)))
            measured = count_macs(lambda: graph_reason(x, params))
            expected = flops_graph_reason(h, w, c, m, c_out, include_identity, mode, batch=2).flops
            assert measured == expected

    def test_pyramid_matches_counter(self, rng):
        config = PyramidConfig.build(6, 3, levels=3, out_channels=5, seed=4)
        x = Tensor(rng.standard_normal((1, 6, 13, 10)))
        measured = count_macs(lambda: spygr_pyramid(x, config))
        assert measured == flops_pyramid(13, 10, 6, 3, out_channels=5, levels=3).total_macs
