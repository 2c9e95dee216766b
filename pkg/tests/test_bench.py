import json
import math

import numpy as np
import pytest

from specml import bench, data, net, pca
from specml.errors import EmptySet, IncomparableArchitectures, InvalidConfig


def small_net(input_dim, seed=0):
    return net.build_classifier(input_dim, 4, encoder_hidden=(8,),
                                head_hidden=(8, 6), seed=seed)


def raster_stack(n=100, bands=5, h=2, w=2, seed=0):
    return np.random.default_rng(seed).standard_normal((n, bands, h, w))


class TestMeasureInference:
    def test_timed_batch_count(self):
        rasters = raster_stack(n=100)
        network = small_net(5 * 2 * 2)
        stats = bench.measure_inference(network, rasters, batch_size=16, repeats=3)
        assert stats.n_timed_batches == 3 * math.ceil(100 / 16)
        assert stats.min_ms <= stats.avg_ms <= stats.max_ms
        assert stats.sample_count == 100
        assert not stats.pca_in_timed_region

    def test_single_batch_single_repeat(self):
        rasters = raster_stack(n=8)
        network = small_net(5 * 2 * 2)
        stats = bench.measure_inference(network, rasters, batch_size=16, repeats=1)
        assert stats.n_timed_batches == 1
        assert stats.min_ms == stats.avg_ms == stats.max_ms

    def test_pca_inside_timed_region(self):
        sample_set = data.synthesize(data.SynthConfig(
            n_samples=40, bands=5, height=2, width=2, latent_rank=2,
            noise_sigma=0.05, seed=1))
        model = pca.select_components(pca.fit_pca(sample_set, 1.0, seed=0), k=2)
        network = small_net(2 * 2 * 2)
        stats = bench.measure_inference(network,
                                        sample_set.rasters.astype(np.float64),
                                        batch_size=16, repeats=2,
                                        pca_model=model)
        assert stats.pca_in_timed_region
        assert stats.n_timed_batches == 2 * math.ceil(40 / 16)

    def test_empty_set(self):
        with pytest.raises(EmptySet):
            bench.measure_inference(small_net(20), np.zeros((0, 5, 2, 2)))

    def test_validation(self):
        with pytest.raises(InvalidConfig):
            bench.measure_inference(small_net(20), raster_stack(), repeats=0)


class TestCompareSizes:
    def test_first_layer_difference_is_exact(self):
        # 1x1 rasters: the count difference is exactly (B - k) * first_hidden.
        wide = net.build_classifier(13, 9, seed=0)
        narrow = net.build_classifier(3, 9, seed=0)
        sizes = bench.compare_sizes(narrow, wide)
        assert sizes.params_without_pca - sizes.params_with_pca == (13 - 3) * 256
        assert sizes.bytes_with_pca < sizes.bytes_without_pca
        assert not sizes.degenerate

    def test_identical_nets_flagged_degenerate(self):
        a = small_net(20, seed=0)
        b = small_net(20, seed=1)
        sizes = bench.compare_sizes(a, b)
        assert sizes.degenerate
        assert sizes.params_with_pca == sizes.params_without_pca

    def test_counts_are_run_invariant(self):
        a1 = bench.compare_sizes(small_net(8, seed=0), small_net(20, seed=1))
        a2 = bench.compare_sizes(small_net(8, seed=5), small_net(20, seed=9))
        assert a1.params_with_pca == a2.params_with_pca
        assert a1.bytes_without_pca == a2.bytes_without_pca

    def test_hidden_shape_mismatch_rejected(self):
        a = small_net(8)
        b = net.build_classifier(20, 4, encoder_hidden=(16,),
                                 head_hidden=(8, 6), seed=0)
        with pytest.raises(IncomparableArchitectures):
            bench.compare_sizes(a, b)

    def test_swapped_arguments_rejected(self):
        with pytest.raises(IncomparableArchitectures):
            bench.compare_sizes(small_net(20), small_net(8))


class TestBenchReport:
    def test_text_and_json_forms(self):
        rasters = raster_stack(n=32)
        network = small_net(5 * 2 * 2)
        stats = bench.measure_inference(network, rasters, batch_size=16, repeats=2)
        sizes = bench.compare_sizes(small_net(8), small_net(20))
        report = bench.BenchReport([stats], sizes)
        text = report.to_text()
        assert "min_ms" in text and "params_with_pca" in text
        payload = json.loads(report.to_json())
        assert payload["latencies"][0]["n_timed_batches"] == stats.n_timed_batches
        assert payload["sizes"]["params_with_pca"] == sizes.params_with_pca
