import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatmap1d.codec import (Heatmap1D, Heatmap2D, HeatmapSpec, decode_argmax, decode_batch, dump_heatmap,
                             encode1d, encode2d, encode_targets, load_heatmap, marginalize, output_size,
                             quantization_error, quantization_error_batch, quantize, recover)

PAPER_POINT = (142.84, 188.72)


def scan_argmax_2d(values):
    """Exhaustive scan; returns (x, y) of the first maximum in row-major order."""
    best, arg = -np.inf, None
    L = values.shape[0]
    for y in range(L):
        for x in range(L):
            if values[y, x] > best:
                best, arg = values[y, x], (x, y)
    return arg


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(F=0, L=4), dict(F=10, L=1), dict(F=10, L=4, sigma=0.0), dict(F=10, L=2.5)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            HeatmapSpec(**kw)


class TestEncode2D:
    def test_grid_point_center_is_max(self):
        spec = HeatmapSpec(64, 32, 2.0)
        h = encode2d((20.0, 10.0), spec)  # grid (10, 5)
        assert h.values[5, 10] == 1.0
        assert h.values.max() == 1.0

    def test_midpoint_symmetric(self):
        spec = HeatmapSpec(64, 31, 3.3)
        h = encode2d((32.0, 32.0), spec)
        np.testing.assert_array_equal(h.values, h.values.T)

    def test_argmax_matches_rounded_center(self):
        rng = np.random.default_rng(0)
        spec = HeatmapSpec(64, 48, 2.5)
        for _ in range(30):
            p, q = rng.uniform(0, 64, size=2)
            h = encode2d((p, q), spec)
            # nearest grid point, clamped to the last index near the far edge
            assert scan_argmax_2d(h.values) == (min(round(p * 48 / 64), 47), min(round(q * 48 / 64), 47))

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            encode2d((64.0, 3.0), HeatmapSpec(64, 16))


class TestMarginalize:
    def test_one_hot(self):
        spec = HeatmapSpec(10, 6)
        v = np.zeros((6, 6))
        v[4, 1] = 1.0  # (x=1, y=4)
        hx, hy = marginalize(Heatmap2D(spec, v))
        np.testing.assert_array_equal(hx.values, np.eye(6)[1])
        np.testing.assert_array_equal(hy.values, np.eye(6)[4])

    def test_unnormalized_masses_agree(self):
        v = np.random.default_rng(1).uniform(size=(7, 7))
        hx, hy = marginalize(Heatmap2D(HeatmapSpec(7, 7), v), normalize=False)
        assert hx.values.sum() == pytest.approx(v.sum(), rel=1e-14)
        assert hy.values.sum() == pytest.approx(v.sum(), rel=1e-14)

    def test_marginal_argmax(self):
        rng = np.random.default_rng(2)
        spec = HeatmapSpec(100, 75, 1.5)
        for _ in range(20):
            p, q = rng.uniform(0, 100, size=2)
            hx, hy = marginalize(encode2d((p, q), spec))
            assert int(np.argmax(hx.values)) == min(round(p * 0.75), 74)
            assert int(np.argmax(hy.values)) == min(round(q * 0.75), 74)


class TestEncode1D:
    @pytest.mark.parametrize("sigma", [1.0, 2.5, 5.0])
    def test_equals_normalized_marginal(self, sigma):
        rng = np.random.default_rng(3)
        spec = HeatmapSpec(64, 64, sigma)
        for _ in range(20):
            p, q = rng.uniform(0, 64, size=2)
            mx, my = marginalize(encode2d((p, q), spec))
            assert np.max(np.abs(encode1d(p, spec).values - mx.values)) <= 1e-9
            assert np.max(np.abs(encode1d(q, spec, "y").values - my.values)) <= 1e-9

    def test_grid_point_value(self):
        spec = HeatmapSpec(30, 90)
        assert encode1d(5.0, spec).values[15] == 1.0

    def test_mirror(self):
        spec = HeatmapSpec(64, 64, 2.0)
        a = encode1d(32 - 7.3, spec).values
        b = encode1d(32 + 7.3, spec).values
        # grid index i <-> position i; mirror about 32 maps i -> 64 - i
        np.testing.assert_allclose(a[1:], b[::-1][:-1], atol=1e-15)

    def test_batch_targets_match_scalar_path(self):
        spec = HeatmapSpec(64, 192, 2.5)
        coords = np.random.default_rng(4).uniform(0, 64, size=(3, 5, 2))
        tx, ty = encode_targets(coords, spec)
        assert tx.shape == (3, 5, 192)
        np.testing.assert_allclose(tx[1, 2], encode1d(coords[1, 2, 0], spec).values, atol=1e-15)
        np.testing.assert_allclose(ty[2, 4], encode1d(coords[2, 4, 1], spec).values, atol=1e-15)


class TestQuantization:
    def test_paper_point_quantize(self):
        assert quantize(*PAPER_POINT, HeatmapSpec(256, 128)) == (71, 94)

    def test_origin(self):
        assert quantize(0.0, 0.0, HeatmapSpec(256, 128)) == (0, 0)
        assert recover(0, 0, HeatmapSpec(256, 128)) == (0.0, 0.0)

    def test_exact_integer_boundary(self):
        assert quantize(10.0, 0.0, HeatmapSpec(256, 128)) == (5, 0)

    def test_recover(self):
        assert recover(71, 94, HeatmapSpec(256, 128)) == (142.0, 188.0)
        with pytest.raises(ValueError):
            recover(128, 0, HeatmapSpec(256, 128))

    @pytest.mark.parametrize("L,expected", [(128, 1.11), (768, 0.18)])
    def test_paper_errors(self, L, expected):
        assert quantization_error(*PAPER_POINT, HeatmapSpec(256, L)) == pytest.approx(expected, abs=0.005)

    def test_grid_aligned_is_zero(self):
        assert quantization_error(12.0, 200.0, HeatmapSpec(256, 64)) == 0.0

    def test_round_trip_deviation(self):
        rng = np.random.default_rng(5)
        for L in (64, 128, 256, 768):
            spec = HeatmapSpec(256, L)
            pts = rng.uniform(0, 256, size=(10_000, 2))
            for p, q in pts[:200]:
                pr, qr = recover(*quantize(p, q, spec), spec)
                assert 0 <= p - pr < 256 / L and 0 <= q - qr < 256 / L
            assert np.all(quantization_error_batch(pts, spec) < math.sqrt(2) * 256 / L)

    def test_batch_matches_scalar(self):
        spec = HeatmapSpec(256, 100)
        pts = np.random.default_rng(6).uniform(0, 256, size=(50, 2))
        np.testing.assert_allclose(quantization_error_batch(pts, spec),
                                   [quantization_error(p, q, spec) for p, q in pts], atol=1e-13)

    def test_mean_error_decreases_with_resolution(self):
        pts = np.random.default_rng(7).uniform(0, 256, size=(100_000, 2))
        means = [quantization_error_batch(pts, HeatmapSpec(256, int(256 * r))).mean()
                 for r in (0.25, 0.5, 1, 2, 3)]
        assert all(a > b for a, b in zip(means, means[1:]))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 255.999), st.floats(0, 255.999), st.sampled_from([16, 64, 100, 256, 768]))
    def test_error_bound_property(self, p, q, L):
        assert quantization_error(p, q, HeatmapSpec(256, L)) < math.sqrt(2) * 256 / L


class TestDecode:
    def test_one_hot(self):
        h = Heatmap1D(HeatmapSpec(4, 12), "x", np.eye(12)[5])
        assert decode_argmax(h) == pytest.approx(5 / 3)

    def test_constant_ties_to_zero(self):
        assert decode_argmax(Heatmap1D(HeatmapSpec(64, 16), "y", np.full(16, 0.3))) == 0.0

    @pytest.mark.parametrize("L", [16, 64, 192])
    def test_round_trip_bound(self, L):
        spec = HeatmapSpec(64, L)
        for c in np.random.default_rng(L).uniform(0, 64, size=2000):
            assert abs(decode_argmax(encode1d(c, spec)) - c) <= 64 / L

    def test_batch_decode(self):
        hx = np.zeros((2, 3, 8))
        hy = np.zeros((2, 3, 8))
        hx[1, 2, 5] = 1
        hy[1, 2, 7] = 1
        out = decode_batch(hx, hy, F=16)
        assert out.shape == (2, 3, 2)
        np.testing.assert_array_equal(out[1, 2], [10.0, 14.0])
        np.testing.assert_array_equal(out[0, 0], [0.0, 0.0])


class TestOutputSize:
    def test_paper_case(self):
        assert output_size(68, 768, "1d") == 104_448
        assert output_size(68, 768, "2d") == 40_108_032
        assert output_size(68, 768, "2d") / output_size(68, 768, "1d") == 384

    def test_crossover(self):
        assert output_size(1, 2, "1d") == output_size(1, 2, "2d") == 4

    @pytest.mark.parametrize("N", [1, 5, 68])
    @pytest.mark.parametrize("L", [2, 64, 255, 768])
    def test_ratio(self, N, L):
        assert output_size(N, L, "2d") * 2 == output_size(N, L, "1d") * L


def test_dump_format(tmp_path):
    h = encode1d(10.3, HeatmapSpec(64, 8, 2.5), "y")
    dump_heatmap(h, tmp_path / "h.txt")
    lines = (tmp_path / "h.txt").read_text().splitlines()
    assert lines[0] == "8 2.5 y"
    assert len(lines) == 9
    back = load_heatmap(tmp_path / "h.txt", F=64)
    assert back.values.tobytes() == h.values.tobytes()
