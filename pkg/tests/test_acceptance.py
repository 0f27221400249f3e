"""Acceptance gate: eight production criteria, one printed verdict line each.

Criteria 1-4 are randomized property/oracle suites and run in seconds.
Criteria 5-8 train at production scale (2,500 iterations, 64^3 grid,
64x64 images) and together need roughly 25 minutes of CPU; deselect them
with `-k "not criterion_5"` style filters during development.
"""
import time

import numpy as np
import pytest

from flipfield.dataio import (config_indices, flip_observation,
                              generate_synthetic_dataset, sphere_asym_scene,
                              sphere_checker_scene, synth_scene_render)
from flipfield.geometry import (Plane, Sphere, estimate_flipped_poses,
                                fit_sphere, look_at_rotation,
                                project_onto_sphere, reflect_across_plane,
                                rotation_angle_between, se3_apply_twist)
from flipfield.metrics import evaluate
from flipfield.renderer import composite_batch, sample_batch
from flipfield.trainer import (TrainConfig, batch_loss, build_roster,
                               init_state, run_schedule)


def _verdict(num: int, label: str, ok: bool, detail: str = ""):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {label}"
    if detail:
        line += f" [{detail}]"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: randomized geometry properties


def test_criterion_1_geometry_suite():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_refl = worst_proj = worst_orth = worst_det = worst_fit = 0.0

    for _ in range(2500):
        normal = rng.normal(size=3)
        while np.linalg.norm(normal) < 1e-3:
            normal = rng.normal(size=3)
        plane = Plane(normal, float(rng.normal()))
        p = rng.normal(scale=2.0, size=3)
        back = reflect_across_plane(reflect_across_plane(p, plane), plane)
        worst_refl = max(worst_refl, float(np.abs(back - p).max()))

    for _ in range(2500):
        center = rng.normal(size=3)
        center *= rng.uniform(0.0, 0.5) / max(np.linalg.norm(center), 1e-9)
        sphere = Sphere(center, float(rng.uniform(1.0, 3.0)))
        p = rng.normal(size=3)
        while np.linalg.norm(p) < 1e-3:
            p = rng.normal(size=3)
        proj = project_onto_sphere(p, sphere)
        residual = abs(np.linalg.norm(proj - sphere.center) - sphere.radius)
        worst_proj = max(worst_proj, residual)

    for _ in range(2500):
        while True:
            camera = rng.normal(scale=2.0, size=3)
            target = rng.normal(scale=0.3, size=3)
            view = camera - target
            norm = np.linalg.norm(view)
            if norm > 1e-3 and abs(view[2] / norm) < 0.99:
                break
        rot = look_at_rotation(camera, target)
        worst_orth = max(worst_orth, float(np.abs(rot.T @ rot - np.eye(3)).max()))
        worst_det = max(worst_det, abs(np.linalg.det(rot) - 1.0))

    for _ in range(2500):
        center = rng.normal(scale=1.5, size=3)
        radius = float(rng.uniform(0.5, 3.0))
        dirs = rng.normal(size=(8, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        fitted = fit_sphere(center + radius * dirs)
        worst_fit = max(worst_fit,
                        float(np.abs(fitted.center - center).max()),
                        abs(fitted.radius - radius))

    elapsed = time.perf_counter() - start
    ok = (worst_refl <= 1e-12 and worst_proj <= 1e-9 and worst_orth <= 1e-12
          and worst_det <= 1e-12 and worst_fit <= 1e-9 and elapsed < 5.0)
    _verdict(1, "geometry suite (10,000 randomized cases)", ok,
             f"involution {worst_refl:.1e}, projection {worst_proj:.1e}, "
             f"orthonormality {worst_orth:.1e}, det {worst_det:.1e}, "
             f"sphere fit {worst_fit:.1e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: renderer vs closed-form homogeneous medium


def test_criterion_2_renderer_analytic():
    start = time.perf_counter()
    t_near, t_far = 2.0, 6.0
    span = t_far - t_near
    tolerances = {128: 5e-3, 1024: 1e-3}
    worst = {128: 0.0, 1024: 0.0}
    for n_samples, tol in tolerances.items():
        _, delta = sample_batch(t_near, t_far, n_samples, stratified=False)
        for sigma_value in (0.5, 1.0, 2.0):
            sigma = np.full((1, n_samples), sigma_value)
            color = np.ones((1, n_samples, 3))
            beta2 = np.full((1, n_samples), 0.01)
            out_color, _, _, _, _ = composite_batch(sigma, color, beta2, delta)
            closed = 1.0 - np.exp(-sigma_value * span)
            worst[n_samples] = max(worst[n_samples],
                                   float(np.abs(out_color - closed).max()))

    rng = np.random.default_rng(202)
    _, delta = sample_batch(t_near, t_far, 64, stratified=True, seed=5,
                            ray_ids=np.arange(1000))
    sigma = rng.gamma(1.0, 1.0, size=(1000, 64))
    color = rng.random((1000, 64, 3))
    beta2 = rng.uniform(0.01, 1.0, size=(1000, 64))
    _, _, t_final, weights, _ = composite_batch(sigma, color, beta2, delta)
    identity_err = float(np.abs(weights.sum(axis=1) + t_final - 1.0).max())

    elapsed = time.perf_counter() - start
    ok = (worst[128] <= tolerances[128] and worst[1024] <= tolerances[1024]
          and identity_err <= 1e-6 and elapsed < 10.0)
    _verdict(2, "renderer matches homogeneous-medium closed form", ok,
             f"err@128 {worst[128]:.2e}, err@1024 {worst[1024]:.2e}, "
             f"weight identity {identity_err:.1e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 3: total-loss gradients vs central differences, both phases


@pytest.fixture(scope="module")
def small_training_state(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_grad")
    scene = sphere_checker_scene()
    dataset = generate_synthetic_dataset(scene, root / "data", image_size=24)
    config = TrainConfig(mode="flip_u", total_iters=10, warmup_iters=5,
                         rays_per_batch=48, n_samples=16,
                         resolution=(12, 12, 12), seed=3)
    roster = build_roster(dataset, 1, "flip_u", plane=scene.mirror_plane)
    state = init_state(roster, config)
    rng = np.random.default_rng(7)
    state.params.raw[:] = rng.normal(size=state.params.raw.shape) * 0.4
    state.params.raw[..., 0] -= 0.5
    # keep ray variances above the floor: below it the loss is flat in the
    # variance and the trainer reports the one-sided clamp rule instead of
    # the (zero) true gradient, which is exercised by its own unit test
    state.params.raw[..., 4] += 2.5
    batch_rng = np.random.default_rng(11)
    n = 48
    batch = (batch_rng.integers(0, state.n_obs, n),
             batch_rng.integers(0, 24, n), batch_rng.integers(0, 24, n))
    return state, config, batch


def _fd_total_field(state, config, batch, iteration, flat_idx, h=1e-6):
    flat = state.params.raw.reshape(-1)
    out = []
    for j in flat_idx:
        orig = flat[j]
        flat[j] = orig + h
        lp = batch_loss(state, config, *batch, iteration)[0].total
        flat[j] = orig - h
        lm = batch_loss(state, config, *batch, iteration)[0].total
        flat[j] = orig
        out.append((lp - lm) / (2.0 * h))
    return np.array(out)


def _fd_total_twist(state, config, batch, iteration, slot, h=1e-6):
    base = state.poses[slot]
    out = []
    for axis in range(6):
        step = np.zeros(6)
        step[axis] = h
        state.poses[slot] = se3_apply_twist(base, step)
        lp = batch_loss(state, config, *batch, iteration)[0].total
        state.poses[slot] = se3_apply_twist(base, -step)
        lm = batch_loss(state, config, *batch, iteration)[0].total
        state.poses[slot] = base
        out.append((lp - lm) / (2.0 * h))
    return np.array(out)


def test_criterion_3_gradient_suite(small_training_state):
    state, config, batch = small_training_state
    start = time.perf_counter()
    worst_rel = 0.0
    checked_params = 0
    # phase 1: photometric everywhere; phase 2: uncertainty on flipped rays
    for iteration in (0, config.warmup_iters):
        _, field_grad, twist_grads = batch_loss(state, config, *batch, iteration)
        flat = np.abs(field_grad.reshape(-1))
        picks = np.argsort(flat)[::-1][:100]
        assert flat[picks[-1]] > 0.0
        fd = _fd_total_field(state, config, batch, iteration, picks)
        analytic = field_grad.reshape(-1)[picks]
        rel = np.abs(analytic - fd) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        worst_rel = max(worst_rel, float(rel.max()))
        checked_params += len(picks)

        slot = int(np.argmax(np.abs(twist_grads).sum(axis=1)))
        assert state.trainable[slot]
        fd_twist = _fd_total_twist(state, config, batch, iteration, slot)
        rel_twist = np.abs(twist_grads[slot] - fd_twist) / np.maximum(
            np.maximum(np.abs(twist_grads[slot]), np.abs(fd_twist)), 1e-6)
        worst_rel = max(worst_rel, float(rel_twist.max()))

    elapsed = time.perf_counter() - start
    ok = worst_rel <= 1e-3 and checked_params >= 200 and elapsed < 60.0
    _verdict(3, "analytic gradients match central differences in both phases",
             ok, f"max rel err {worst_rel:.2e} over {checked_params} grid "
                 f"params + 2x6 twist components, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: mirrored image = image of mirrored camera (oracle scene)


def test_criterion_4_mirror_oracle(tmp_path):
    start = time.perf_counter()
    scene = sphere_checker_scene()
    dataset = generate_synthetic_dataset(scene, tmp_path / "data",
                                         image_size=64)
    train = dataset.split("train")
    views = [train[i - 1] for i in config_indices(1)]
    flipped_poses = estimate_flipped_poses([v.pose for v in views],
                                           plane=scene.mirror_plane)
    worst_mean = 0.0
    for obs, pose in zip(views, flipped_poses):
        mirrored = flip_observation(obs)
        rendered = synth_scene_render(scene, pose, mirrored.intr)
        worst_mean = max(worst_mean,
                         float(np.abs(mirrored.image - rendered).mean()))
    elapsed = time.perf_counter() - start
    ok = worst_mean <= 2.0 / 255.0 and elapsed < 60.0
    _verdict(4, "flipped images match renders from mirrored cameras", ok,
             f"worst mean abs diff {worst_mean * 255.0:.3f}/255 over 8 views, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# production-scale fixtures for criteria 5-8


def _train_and_score(dataset, scene, mode, out_dir, config_overrides=None,
                     **kwargs):
    start = time.perf_counter()
    config = TrainConfig(mode=mode, **(config_overrides or {}))
    state, manifest = run_schedule(dataset, 1, config,
                                   out_dir=out_dir, plane=scene.mirror_plane,
                                   **kwargs)
    wall = time.perf_counter() - start
    report = evaluate(out_dir, dataset, "test")
    return {"state": state, "manifest": manifest, "wall": wall,
            "psnr": report.mean_psnr_db, "out": out_dir}


@pytest.fixture(scope="module")
def symmetric_scene_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_sym")
    scene = sphere_checker_scene()
    dataset = generate_synthetic_dataset(scene, root / "data", image_size=64)
    runs = {"dataset": dataset}
    for mode in ("baseline", "flip", "flip_u", "upper"):
        runs[mode] = _train_and_score(dataset, scene, mode, root / mode)
    return runs


@pytest.fixture(scope="module")
def asymmetric_scene_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_asym")
    scene = sphere_asym_scene()
    dataset = generate_synthetic_dataset(scene, root / "data", image_size=64)
    runs = {}
    for mode in ("flip", "flip_u"):
        runs[mode] = _train_and_score(dataset, scene, mode, root / mode)
    return runs


@pytest.fixture(scope="module")
def pose_recovery_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_ba")
    scene = sphere_checker_scene()
    dataset = generate_synthetic_dataset(scene, root / "data", image_size=64)
    # recovering a 5-degree perturbation needs a pose rate sized for it; the
    # default rate suits the sub-degree error of the geometric estimates
    result = _train_and_score(dataset, scene, "flip", root / "run",
                              config_overrides={"lr_pose": 5e-3},
                              pose_noise_deg=5.0, pose_noise_seed=1)
    train = dataset.split("train")
    clean = estimate_flipped_poses([train[i - 1].pose
                                    for i in config_indices(1)],
                                   plane=scene.mirror_plane)
    state, manifest = result["state"], result["manifest"]
    initial, final = [], []
    for slot, entry in enumerate(manifest["observations"]):
        if not entry["pose_trainable"]:
            continue
        ref = clean[slot - 8].rotation
        init_rot = np.asarray(entry["initial_pose"])[:3, :3]
        initial.append(rotation_angle_between(init_rot, ref))
        final.append(rotation_angle_between(state.poses[slot].rotation, ref))
    result["initial_deg"] = float(np.degrees(np.mean(initial)))
    result["final_deg"] = float(np.degrees(np.mean(final)))
    return result


# ---------------------------------------------------------------------------
# criterion 5: bundle adjustment recovers perturbed mirrored poses


def test_criterion_5_pose_recovery(pose_recovery_run):
    run = pose_recovery_run
    reduction = 1.0 - run["final_deg"] / run["initial_deg"]
    ok = reduction >= 0.5 and run["wall"] < 600.0
    _verdict(5, "joint training halves the 5-degree pose perturbation", ok,
             f"mean rotation error {run['initial_deg']:.2f} -> "
             f"{run['final_deg']:.2f} deg ({reduction * 100.0:.0f}% reduction), "
             f"{run['wall']:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: mirrored supervision lifts unobserved-side test quality


def test_criterion_6_unobserved_view_gain(symmetric_scene_runs):
    runs = symmetric_scene_runs
    gain = runs["flip_u"]["psnr"] - runs["baseline"]["psnr"]
    slowest = max(runs["baseline"]["wall"], runs["flip_u"]["wall"])
    ok = gain >= 2.0 and slowest <= 600.0
    _verdict(6, "uncertainty-weighted flip beats baseline on hidden arc", ok,
             f"flip_u {runs['flip_u']['psnr']:.2f} dB vs baseline "
             f"{runs['baseline']['psnr']:.2f} dB (+{gain:.2f} dB), "
             f"slowest mode {slowest:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: mode ordering on the symmetric scene


def test_criterion_7_mode_ordering(symmetric_scene_runs):
    runs = symmetric_scene_runs
    slack = 0.1
    modes = ("baseline", "flip", "flip_u", "upper")
    p = {mode: runs[mode]["psnr"] for mode in modes}
    total_wall = sum(runs[mode]["wall"] for mode in modes)
    ok = (p["flip_u"] >= p["flip"] - slack
          and p["flip"] >= p["baseline"] - slack
          and p["upper"] >= p["flip_u"]
          and total_wall <= 1800.0)
    _verdict(7, "test PSNR ordering upper >= flip_u >= flip >= baseline", ok,
             f"baseline {p['baseline']:.2f}, flip {p['flip']:.2f}, "
             f"flip_u {p['flip_u']:.2f}, upper {p['upper']:.2f} dB, "
             f"total {total_wall:.0f}s")


# ---------------------------------------------------------------------------
# sanity companion to the mode-ordering run (not a numbered criterion):
# a converged upper-arc run must reconstruct its own training views well


def test_upper_mode_self_reconstruction(symmetric_scene_runs):
    runs = symmetric_scene_runs
    report = evaluate(runs["upper"]["out"], runs["dataset"], "upper",
                      update_manifest=False)
    assert report.mean_psnr_db >= 25.0, (
        f"self-reconstruction {report.mean_psnr_db:.2f} dB below 25")


# ---------------------------------------------------------------------------
# criterion 8: uncertainty never hurts on the asymmetric scene


def test_criterion_8_asymmetric_robustness(asymmetric_scene_runs):
    runs = asymmetric_scene_runs
    margin = runs["flip_u"]["psnr"] - runs["flip"]["psnr"]
    total_wall = runs["flip"]["wall"] + runs["flip_u"]["wall"]
    ok = margin >= -0.1 and total_wall <= 1200.0
    _verdict(8, "uncertainty keeps flip quality on the asymmetric scene", ok,
             f"flip_u {runs['flip_u']['psnr']:.2f} dB vs flip "
             f"{runs['flip']['psnr']:.2f} dB ({margin:+.2f} dB), "
             f"total {total_wall:.0f}s")
