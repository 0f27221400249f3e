import numpy as np
import pytest

from flipfield import field as F
from flipfield.errors import CheckpointError, FlipFieldError

BETA_MIN_SQ = 0.01


def _integer_grid(rng, resolution=(4, 4, 4)):
    """Grid whose nodes sit at integer coordinates, so node queries are exact."""
    res = np.array(resolution)
    raw = rng.normal(size=(*resolution, 5))
    return F.FieldParams(tuple(resolution), np.zeros(3), (res - 1).astype(float), raw)


class TestActivations:
    def test_values_at_zero(self):
        assert abs(F.softplus(0.0) - np.log(2.0)) < 1e-15
        assert F.sigmoid(0.0) == 0.5

    def test_softplus_stable_at_extremes(self):
        assert np.isfinite(F.softplus(800.0))
        assert abs(F.softplus(800.0) - 800.0) < 1e-9
        assert F.softplus(-800.0) >= 0.0


class TestFieldQuery:
    def test_zero_grid_activations(self):
        params = F.FieldParams.create((4, 4, 4))
        s = F.field_query(params, (0.1, -0.2, 0.3), beta_min_sq=BETA_MIN_SQ)
        np.testing.assert_allclose(s.color, 0.5, atol=1e-15)
        assert abs(s.density - np.log(2.0)) < 1e-15
        assert abs(s.variance - (BETA_MIN_SQ + np.log(2.0))) < 1e-15

    def test_node_query_returns_stored_raws(self):
        rng = np.random.default_rng(0)
        params = _integer_grid(rng)
        for node in [(0, 0, 0), (1, 2, 3), (3, 3, 3), (2, 0, 1)]:
            s = F.field_query(params, np.array(node, float), beta_min_sq=BETA_MIN_SQ)
            raw = params.raw[node]
            assert s.density == F.softplus(raw[0])
            np.testing.assert_array_equal(s.color, F.sigmoid(raw[1:4]))
            assert s.variance == BETA_MIN_SQ + F.softplus(raw[4])

    def test_outside_bounds_is_empty_space(self):
        params = F.FieldParams.create((4, 4, 4), sigma_raw=3.0, color_raw=2.0, beta_raw=1.0)
        for x in [(1.5, 0, 0), (0, -1.01, 0), (0, 0, 999.0)]:
            s = F.field_query(params, np.array(x), beta_min_sq=BETA_MIN_SQ)
            assert s.density == 0.0
            np.testing.assert_array_equal(s.color, np.zeros(3))
            assert s.variance == BETA_MIN_SQ

    def test_direction_is_ignored(self):
        rng = np.random.default_rng(1)
        params = _integer_grid(rng)
        x = np.array([0.7, 1.3, 2.9])
        a = F.field_query(params, x, d=np.array([1.0, 0, 0]), beta_min_sq=BETA_MIN_SQ)
        b = F.field_query(params, x, d=np.array([0.0, 0, -1.0]), beta_min_sq=BETA_MIN_SQ)
        assert a.density == b.density and a.variance == b.variance
        np.testing.assert_array_equal(a.color, b.color)

    def test_trilinear_exact_for_affine_raws(self):
        rng = np.random.default_rng(2)
        res = (6, 5, 7)
        xs = np.linspace(-1, 1, res[0])
        ys = np.linspace(-0.5, 1.5, res[1])
        zs = np.linspace(0.0, 3.0, res[2])
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        coef = rng.uniform(-1, 1, size=(5, 4))
        raw = np.stack([a * gx + b * gy + c * gz + d for a, b, c, d in coef], axis=-1)
        params = F.FieldParams(res, (-1, -0.5, 0.0), (1.0, 1.5, 3.0), raw)
        pts = rng.uniform((-1, -0.5, 0.0), (1.0, 1.5, 3.0), size=(100, 3))
        sigma, color, beta2, _ = F.query_batch(params, pts, BETA_MIN_SQ)
        affine = pts @ coef[:, :3].T + coef[:, 3]
        np.testing.assert_allclose(sigma, F.softplus(affine[:, 0]), atol=1e-9)
        np.testing.assert_allclose(color, F.sigmoid(affine[:, 1:4]), atol=1e-9)
        np.testing.assert_allclose(beta2, BETA_MIN_SQ + F.softplus(affine[:, 4]), atol=1e-9)

    def test_sample_invariants_for_random_grids(self):
        rng = np.random.default_rng(3)
        params = F.FieldParams((4, 4, 4), -np.ones(3), np.ones(3),
                               rng.normal(scale=4.0, size=(4, 4, 4, 5)))
        pts = rng.uniform(-1.2, 1.2, size=(500, 3))
        sigma, color, beta2, _ = F.query_batch(params, pts, BETA_MIN_SQ)
        assert np.all(sigma >= 0.0)
        assert np.all((color >= 0.0) & (color <= 1.0))
        assert np.all(beta2 >= BETA_MIN_SQ)


class TestFieldQueryGrad:
    def test_zero_upstream_empty(self):
        params = _integer_grid(np.random.default_rng(4))
        assert F.field_query_grad(params, (0.5, 0.5, 0.5)) == {}

    def test_corner_single_contribution(self):
        params = _integer_grid(np.random.default_rng(5))
        grads = F.field_query_grad(params, (1.0, 2.0, 3.0), d_density=1.0)
        assert set(grads) == {(1, 2, 3)}
        g = grads[(1, 2, 3)]
        assert g[0] == F.sigmoid(params.raw[1, 2, 3, 0])
        np.testing.assert_array_equal(g[1:], np.zeros(4))

    def test_outside_point_no_contributions(self):
        params = _integer_grid(np.random.default_rng(6))
        assert F.field_query_grad(params, (-5.0, 0, 0), d_density=1.0,
                                  d_color=(1, 1, 1), d_variance=1.0) == {}

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        params = _integer_grid(rng)
        step = 1e-5
        for _ in range(100):
            x = rng.uniform(0, 3, 3)
            up_c = rng.normal(size=3)
            up_d = rng.normal()
            up_v = rng.normal()

            def scalar_loss(p):
                s = F.field_query(p, x, beta_min_sq=BETA_MIN_SQ)
                return up_c @ s.color + up_d * s.density + up_v * s.variance

            grads = F.field_query_grad(params, x, beta_min_sq=BETA_MIN_SQ,
                                       d_color=up_c, d_density=up_d, d_variance=up_v)
            assert grads
            for (i, j, k), g in grads.items():
                for ch in range(5):
                    keep = params.raw[i, j, k, ch]
                    params.raw[i, j, k, ch] = keep + step
                    hi = scalar_loss(params)
                    params.raw[i, j, k, ch] = keep - step
                    lo = scalar_loss(params)
                    params.raw[i, j, k, ch] = keep
                    fd = (hi - lo) / (2 * step)
                    # absolute floor absorbs central-difference roundoff
                    # (~1e-11) on near-zero-weight corners
                    denom = max(abs(fd), abs(g[ch]), 1e-8)
                    assert abs(fd - g[ch]) < 1e-9 or abs(fd - g[ch]) / denom < 1e-6


class TestPositionGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        params = _integer_grid(rng)
        pts = rng.uniform(0.2, 2.8, size=(20, 3))
        up_d = rng.normal(size=20)
        up_c = rng.normal(size=(20, 3))
        up_v = rng.normal(size=20)
        _, _, _, cache = F.query_batch(params, pts, BETA_MIN_SQ)
        _, d_pts = F.query_batch_grad(params, cache, up_d, up_c, up_v,
                                      position_mask=np.ones(20, bool))
        step = 1e-6
        for m in range(20):
            for axis in range(3):
                hi_pt = pts[m].copy()
                hi_pt[axis] += step
                lo_pt = pts[m].copy()
                lo_pt[axis] -= step
                s_hi, c_hi, b_hi, _ = F.query_batch(params, hi_pt[None], BETA_MIN_SQ)
                s_lo, c_lo, b_lo, _ = F.query_batch(params, lo_pt[None], BETA_MIN_SQ)
                fd = (up_d[m] * (s_hi[0] - s_lo[0]) + up_c[m] @ (c_hi[0] - c_lo[0])
                      + up_v[m] * (b_hi[0] - b_lo[0])) / (2 * step)
                denom = max(abs(fd), abs(d_pts[m, axis]), 1e-6)
                assert abs(fd - d_pts[m, axis]) / denom < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        params = F.FieldParams((3, 4, 5), (-1, -2, 0), (1.0, 2.0, 3.0),
                               rng.normal(size=(3, 4, 5, 5)))
        path = tmp_path / "field.ckpt"
        F.save_checkpoint(params, path)
        loaded = F.load_checkpoint(path)
        assert loaded.resolution == params.resolution
        np.testing.assert_array_equal(loaded.raw, params.raw)
        np.testing.assert_array_equal(loaded.bounds_min, params.bounds_min)
        np.testing.assert_array_equal(loaded.bounds_max, params.bounds_max)

    def test_identical_bytes_for_identical_state(self, tmp_path):
        params = F.FieldParams.create((4, 4, 4), sigma_raw=-1.5)
        F.save_checkpoint(params, tmp_path / "a.ckpt")
        F.save_checkpoint(params, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            F.load_checkpoint(tmp_path / "nope.ckpt")

    def test_garbage_header(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"\x89PNG not a checkpoint\n12345")
        with pytest.raises(CheckpointError):
            F.load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        params = F.FieldParams.create((4, 4, 4))
        p = tmp_path / "trunc.ckpt"
        F.save_checkpoint(params, p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            F.load_checkpoint(p)


class TestFieldParamsValidation:
    def test_resolution_too_small(self):
        with pytest.raises(FlipFieldError):
            F.FieldParams.create((1, 4, 4))

    def test_bounds_order(self):
        with pytest.raises(FlipFieldError):
            F.FieldParams((4, 4, 4), np.ones(3), -np.ones(3), np.zeros((4, 4, 4, 5)))

    def test_raw_shape(self):
        with pytest.raises(FlipFieldError):
            F.FieldParams((4, 4, 4), -np.ones(3), np.ones(3), np.zeros((4, 4, 4, 4)))

    def test_non_finite_raws(self):
        raw = np.zeros((4, 4, 4, 5))
        raw[0, 0, 0, 0] = np.nan
        with pytest.raises(FlipFieldError):
            F.FieldParams((4, 4, 4), -np.ones(3), np.ones(3), raw)

    def test_param_count(self):
        assert F.FieldParams.create((4, 5, 6)).n_params == 4 * 5 * 6 * 5
