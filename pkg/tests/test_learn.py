import math

import numpy as np
import pytest

from sartrace.imaging import HitLedger, render
from sartrace.learn import (DEFAULT_LOWER, DEFAULT_UPPER, LossConfig, OptimState,
                            adam_step, backward, grad_check, learn, loss_sim,
                            loss_tv, rmse_normalized, validity_bounds,
                            write_history_csv)
from sartrace.scatter import WaveConfig
from sartrace.scene import Mesh, ParamMap
from sartrace.scenes import merge_meshes, plane_mesh, side_looking_radar

CFG_RAW = LossConfig(lambda_sim=1.0, lambda_mat=0.0, normalize=False)


class TestLossSim:
    def test_identical_images(self):
        img = np.arange(6.0).reshape(2, 3)
        loss, grad = loss_sim(img, img.copy(), CFG_RAW)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(img))

    def test_hand_mse(self):
        loss, grad = loss_sim(np.array([[1.0, 3.0]]), np.array([[0.0, 0.0]]), CFG_RAW)
        assert loss == pytest.approx(5.0)
        np.testing.assert_allclose(grad, [[1.0, 3.0]])

    def test_scaling_homogeneity(self):
        a = np.array([[1.0, 2.0], [0.5, 4.0]])
        b = np.array([[0.2, 1.0], [0.0, 3.0]])
        base, _ = loss_sim(a, b, CFG_RAW)
        scaled, _ = loss_sim(3 * a, 3 * b, CFG_RAW)
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_normalization_divides_by_ref_peak(self):
        cfg = LossConfig(lambda_sim=1.0, lambda_mat=0.0, normalize=True)
        a = np.array([[2.0, 0.0]])
        b = np.array([[4.0, 0.0]])
        loss, grad = loss_sim(a, b, cfg)
        assert loss == pytest.approx(((2.0 - 4.0) / 4.0) ** 2 / 2)
        assert grad[0, 0] == pytest.approx(2 * (2.0 - 4.0) / (2 * 16.0))

    def test_num_views_in_normalization(self):
        a = np.array([[1.0, 3.0]])
        b = np.array([[0.0, 0.0]])
        single, _ = loss_sim(a, b, CFG_RAW, num_views=1)
        multi, _ = loss_sim(a, b, CFG_RAW, num_views=4)
        assert multi == pytest.approx(single / 4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            loss_sim(np.zeros((2, 2)), np.zeros((2, 3)), CFG_RAW)


class TestLossTv:
    def test_constant_map_is_zero(self):
        values = np.tile([0.1, 0.2, 3.0, 0.5], (9, 1))
        loss, grad = loss_tv(values, 1.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(values))

    def test_hand_2x2_grid(self):
        # channel 0 grid [[1,2],[3,4]]: |3-1|+|4-2| + |2-1|+|4-3| = 6
        values = np.zeros((4, 4))
        values[:, 0] = [1.0, 2.0, 3.0, 4.0]
        loss, _ = loss_tv(values, 1.0)
        assert loss == pytest.approx(6.0)

    def test_lambda_scaling(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(0.1, 1.0, (7, 4))
        l1, g1 = loss_tv(values, 1.0)
        l2, g2 = loss_tv(values, 2.0)
        assert l2 == pytest.approx(2 * l1, rel=1e-12)
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)

    def test_zero_weight_short_circuits(self):
        loss, grad = loss_tv(np.ones((5, 4)), 0.0)
        assert loss == 0.0
        assert not grad.any()

    def test_subgradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(0.5, 2.0, (6, 4))    # generic: no ties, no kinks
        lam = 0.7
        _, grad = loss_tv(values, lam)
        step = 1e-6
        for vid, ci in [(0, 0), (3, 2), (5, 1), (2, 3)]:
            up = values.copy()
            up[vid, ci] += step
            dn = values.copy()
            dn[vid, ci] -= step
            fd = (loss_tv(up, lam)[0] - loss_tv(dn, lam)[0]) / (2 * step)
            # abs floor covers central-difference roundoff, ~eps/step
            assert grad[vid, ci] == pytest.approx(fd, rel=1e-6, abs=5e-9)


def manual_ledger(shape, rows, bins, fids, m1, m2, weight, sigma, dsigma):
    z = np.asarray
    return HitLedger(image_shape=shape, row=z(rows, dtype=np.int64),
                     range_bin=z(bins, dtype=np.int64), facet_id=z(fids, dtype=np.int64),
                     m1=z(m1, float), m2=z(m2, float), weight=z(weight, float),
                     sigma=z(sigma, float), dsigma=np.asarray(dsigma, float))


class TestBackward:
    def test_zero_gradient_image(self, two_facet_mesh):
        ledger = manual_ledger((2, 3), [0], [1], [0], [0.2], [0.3], [0.5], [1.0],
                               [[1.0, 2.0, 3.0, 4.0]])
        grad = backward(ledger, np.zeros((2, 3)), two_facet_mesh)
        assert not grad.any()

    def test_single_hit_chain(self, two_facet_mesh):
        ledger = manual_ledger((1, 1), [0], [0], [0], [0.5], [0.25], [2.0], [1.0],
                               [[1.0, 10.0, 100.0, 1000.0]])
        dLdI = np.array([[3.0]])
        grad = backward(ledger, dLdI, two_facet_mesh)
        # dL/dsigma = 3 * 2 = 6; vertex weights (0.5, 0.25, 0.25)
        np.testing.assert_allclose(grad[0], 6 * 0.5 * np.array([1, 10, 100, 1000.0]))
        np.testing.assert_allclose(grad[1], 6 * 0.25 * np.array([1, 10, 100, 1000.0]))
        np.testing.assert_allclose(grad[2], 6 * 0.25 * np.array([1, 10, 100, 1000.0]))
        assert not grad[3:].any()

    def test_shape_mismatch_rejected(self, two_facet_mesh):
        ledger = manual_ledger((2, 3), [0], [1], [0], [0.2], [0.3], [0.5], [1.0],
                               [[1.0, 2.0, 3.0, 4.0]])
        with pytest.raises(ValueError, match="shape"):
            backward(ledger, np.zeros((2, 4)), two_facet_mesh)


class TestAdamStep:
    def make_state(self, n=3, **kw):
        return OptimState.create(n, **kw)

    def test_zero_gradient_leaves_params_bitwise(self):
        params = ParamMap.constant(3, 0.004, 0.02, 9.0, 0.3)
        before = params.values.copy()
        adam_step(self.make_state(lr=0.1), params, np.zeros((3, 4)))
        np.testing.assert_array_equal(params.values, before)

    def test_first_step_magnitude_linear_channel(self):
        params = ParamMap.constant(1, 0.004, 0.02, 9.0, 0.5)
        grads = np.zeros((1, 4))
        grads[0, 3] = 2.5          # tau is the linear channel
        adam_step(self.make_state(n=1, lr=0.05), params, grads)
        assert params.tau[0] == pytest.approx(0.45, rel=1e-6)

    def test_first_step_magnitude_log_channel(self):
        params = ParamMap.constant(1, 0.004, 0.02, 9.0, 0.5)
        grads = np.zeros((1, 4))
        grads[0, 0] = -1.0       # push h up
        adam_step(self.make_state(n=1, lr=0.05), params, grads)
        assert params.h[0] == pytest.approx(0.004 * math.exp(0.05), rel=1e-6)

    def test_projection_keeps_bounds(self):
        params = ParamMap.constant(1, 0.004, 0.02, 9.0, 0.0)
        grads = np.zeros((1, 4))
        grads[0, 3] = 5.0          # push tau below 0
        adam_step(self.make_state(n=1, lr=0.3), params, grads)
        assert params.tau[0] == 0.0

    def test_tied_group_stays_equal(self):
        params = ParamMap.constant(4, 0.004, 0.02, 9.0, 0.5)
        state = self.make_state(n=4, lr=0.05, tie_groups=[[1, 2, 3]])
        grads = np.random.default_rng(0).normal(size=(4, 4))
        for _ in range(5):
            adam_step(state, params, grads)
        assert np.array_equal(params.values[1], params.values[2])
        assert np.array_equal(params.values[2], params.values[3])
        assert not np.array_equal(params.values[0], params.values[1])

    def test_frozen_vertices_and_channels(self):
        params = ParamMap.constant(2, 0.004, 0.02, 9.0, 0.5)
        before = params.values.copy()
        state = self.make_state(n=2, lr=0.1, freeze_channels=("tau",),
                                freeze_vertices=[0])
        grads = np.ones((2, 4))
        adam_step(state, params, grads)
        np.testing.assert_array_equal(params.values[0], before[0])
        assert params.tau[1] == before[1, 3]
        assert params.h[1] != before[1, 0]

    def test_non_finite_gradient_rejected(self):
        params = ParamMap.constant(1, 0.004, 0.02, 9.0, 0.5)
        grads = np.zeros((1, 4))
        grads[0, 1] = np.nan
        with pytest.raises(ValueError, match="l"):
            adam_step(self.make_state(n=1), params, grads)

    def test_eps_adam_zero_moves_on_tiny_gradients(self):
        params = ParamMap.constant(1, 0.004, 0.02, 9.0, 0.5)
        state = self.make_state(n=1, lr=0.05, eps_adam=0.0)
        grads = np.zeros((1, 4))
        grads[0, 0] = -1e-150
        adam_step(state, params, grads)
        assert params.h[0] == pytest.approx(0.004 * math.exp(0.05), rel=1e-6)


def test_validity_bounds_cap_height():
    wave = WaveConfig(9.6e9, "HH")
    lower, upper = validity_bounds(wave)
    assert upper[0] == pytest.approx(0.3 / wave.wavenumber, rel=1e-12)
    np.testing.assert_array_equal(lower, DEFAULT_LOWER)
    assert upper[0] < DEFAULT_UPPER[0]


@pytest.fixture
def learn_setup(two_facet_mesh, small_radar):
    params = ParamMap.constant(two_facet_mesh.num_vertices, 0.004, 0.02, 9.0, 0.3)
    return two_facet_mesh, params, small_radar


class TestLearn:
    def test_self_consistent_refs_keep_loss_tiny(self, learn_setup):
        mesh, params, radar = learn_setup
        ref, _ = render(mesh, params, radar)
        refs = [(radar, ref.intensities)]
        opt = OptimState.create(mesh.num_vertices, lr=0.05)
        cfg = LossConfig(lambda_sim=1.0, lambda_mat=1e-3, normalize=True)
        res = learn(mesh, params.copy(), refs, opt, cfg, iters=5)
        assert res.sim_loss[0] == 0.0
        assert res.total_loss[0] == pytest.approx(res.tv_loss[0])
        assert res.tv_loss[0] == 0.0          # constant map
        assert not res.aborted

    def test_recovers_single_channel_offset(self, learn_setup):
        mesh, truth, radar = learn_setup
        ref, _ = render(mesh, truth, radar)
        start = truth.copy()
        start.values[:, 0] *= 2.0             # h off by 2x everywhere
        opt = OptimState.create(mesh.num_vertices, lr=0.05,
                                freeze_channels=("l", "eps_r", "tau"),
                                tie_groups=[np.arange(mesh.num_vertices)])
        cfg = LossConfig(lambda_sim=1.0, lambda_mat=0.0, normalize=True)
        res = learn(mesh, start, [(radar, ref.intensities)], opt, cfg, iters=120,
                    stop_patience=1000)
        assert res.params.h[0] == pytest.approx(0.004, rel=0.02)

    def test_shape_mismatch_names_view(self, learn_setup):
        mesh, params, radar = learn_setup
        refs = [(radar, np.zeros((1, 1)))]
        opt = OptimState.create(mesh.num_vertices)
        with pytest.raises(ValueError, match="view 0"):
            learn(mesh, params, refs, opt, CFG_RAW, iters=1)

    def test_non_finite_loss_aborts_with_last_good(self, learn_setup):
        mesh, params, radar = learn_setup
        ref, _ = render(mesh, params, radar)
        bad = ref.intensities.copy()
        bad[0, 0] = np.nan
        before = params.values.copy()
        opt = OptimState.create(mesh.num_vertices)
        res = learn(mesh, params, [(radar, bad)], opt, CFG_RAW, iters=3)
        assert res.aborted
        assert res.iterations == 1
        np.testing.assert_array_equal(res.params.values, before)

    def test_eval_refs_scored_not_trained(self, learn_setup):
        mesh, params, radar = learn_setup
        ref, _ = render(mesh, params, radar)
        res = learn(mesh, params.copy(), [(radar, ref.intensities)],
                    OptimState.create(mesh.num_vertices),
                    CFG_RAW, iters=2, eval_refs=[(radar, ref.intensities)])
        assert res.eval_rmse.shape == (2, 1)
        assert res.eval_rmse[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_history_csv(self, learn_setup, tmp_path):
        mesh, params, radar = learn_setup
        ref, _ = render(mesh, params, radar)
        res = learn(mesh, params.copy(), [(radar, ref.intensities)],
                    OptimState.create(mesh.num_vertices), CFG_RAW, iters=3)
        path = tmp_path / "history.csv"
        write_history_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,total_loss,sim_loss,tv_loss,view_rmse_0"
        assert len(lines) == 1 + res.iterations


class TestGradCheck:
    def perturbed(self, params):
        ref = params.copy()
        ref.values[:, 0] *= 1.5
        ref.values[:, 2] += 3.0
        return ref

    def test_two_facet_end_to_end(self, learn_setup):
        mesh, params, radar = learn_setup
        refs = [render(mesh, self.perturbed(params), radar)[0].intensities]
        cfg = LossConfig(lambda_sim=1.0, lambda_mat=1e-4, normalize=True)
        report = grad_check(mesh, params, [radar], refs, cfg, num_probes=20, seed=1)
        assert len(report.probes) == 20
        assert report.max_rel_err < 1e-3

    def test_zero_probes(self, learn_setup):
        mesh, params, radar = learn_setup
        refs = [render(mesh, self.perturbed(params), radar)[0].intensities]
        report = grad_check(mesh, params, [radar], refs, CFG_RAW, num_probes=0)
        assert report.probes == []
        assert report.max_rel_err == 0.0

    def test_quadratic_bsdf_exact(self, learn_setup):
        mesh, params, radar = learn_setup

        def quad_bsdf(theta, values, wave):
            sigma = values[:, 0] ** 2
            grads = np.zeros((len(theta), 4))
            grads[:, 0] = 2.0 * values[:, 0]
            return sigma, grads

        refs = [render(mesh, self.perturbed(params), radar,
                       bsdf_fn=quad_bsdf)[0].intensities]
        report = grad_check(mesh, params, [radar], refs, CFG_RAW, num_probes=12,
                            seed=2, bsdf_fn=quad_bsdf)
        # exact chain: residual is pure finite-difference roundoff
        assert report.max_rel_err < 1e-6

    def test_corrupted_adjoint_detected(self, learn_setup):
        from sartrace.scatter import eval_bsdf_batch
        mesh, params, radar = learn_setup

        def broken(theta, values, wave):
            sigma, grads = eval_bsdf_batch(theta, values, wave)
            return sigma, grads * 1.4

        refs = [render(mesh, self.perturbed(params), radar)[0].intensities]
        report = grad_check(mesh, params, [radar], refs, CFG_RAW, num_probes=10,
                            seed=3, bsdf_fn=broken)
        assert report.max_rel_err > 0.05

    def test_unilluminated_vertices_have_zero_gradient(self, wave_hh):
        # small lower plate fully shadowed by the big raised plate
        top = plane_mesh(4.0, 4.0, z=1.0)
        bottom = plane_mesh(1.0, 1.0, z=0.0)
        mesh = merge_meshes([top, bottom])
        params = ParamMap.constant(mesh.num_vertices, 0.004, 0.02, 9.0, 0.3)
        radar = side_looking_radar(wave_hh, distance=7.0, incidence=math.radians(45),
                                   track_length=3.0, num_azimuth=6,
                                   fan_halfwidth=math.radians(10), num_angles=16,
                                   range_res=0.1, spua=2, seed=5)
        image, ledger = render(mesh, params, radar)
        ref = image.intensities * 0.5
        _, dLdI = loss_sim(image, ref, CFG_RAW)
        grad = backward(ledger, dLdI, mesh)
        assert np.abs(grad[:4]).max() > 0.0       # top plate illuminated
        np.testing.assert_array_equal(grad[4:8], np.zeros((4, 4)))


def test_rmse_normalized():
    a = np.array([[1.0, 2.0]])
    b = np.array([[2.0, 4.0]])
    # normalized by max(ref)=4: diffs (-0.25, -0.5)
    assert rmse_normalized(a, b) == pytest.approx(math.sqrt((0.0625 + 0.25) / 2))
