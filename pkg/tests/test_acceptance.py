"""Release acceptance suite: one test per published criterion, in order.

Each test builds its own data, re-derives reference values from first
principles where a tolerance is stated against an oracle, and asserts the
published bound. The two experiment tests (overfit, generalization) train
real models on synthetic takes and check their wall-clock budgets.
"""

import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import planar_transform, random_motion, straight_walk_motion, transform_motion

from egomotion.cli import main as cli_main
from egomotion.container import save_motion
from egomotion.denoiser import (
    TRAJ_DIM,
    ConditioningBundle,
    DenoiserConfig,
    build_denoiser,
)
from egomotion.diffusion import (
    cosine_schedule,
    denoise_loss,
    q_sample,
    repaint_forecast,
    sample,
)
from egomotion.features import CanonicalFrame, decode, encode, frame1_anchor
from egomotion.fitting import (
    FitWeights,
    filter_segments,
    fitting_energy,
    make_camera_rig,
    pack_pose,
    perframe_fit,
    save_keypoints,
    save_rig,
    sequence_fit,
    synthesize_keypoints,
    unpack_pose,
)
from egomotion.metrics import (
    foot_contact,
    foot_slide,
    frechet_distance,
    gaussian_stats,
    head_errors,
    mpjpe,
    mpjpe_h,
    mpjpe_pa,
    train_proxy_encoder,
    embed_set,
    fid,
)
from egomotion.pipeline import (
    HEAD_FROM_DEVICE,
    ClipDataset,
    Normalizer,
    TrainConfig,
    build_clip_dataset,
    forecast,
    reconstruct,
    sample_task_masks,
    train,
)
from egomotion.se3 import (
    SE3,
    PoseParams,
    forward_kinematics,
    joint_positions,
    rotation_z,
    se3_compose,
    sequence_positions,
)
from egomotion.skeletons import chain5, get_skeleton, humanoid22

SKEL = humanoid22()


def _geodesic(ra, rb):
    cos = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def _joint_error(pose_a, pose_b, skel=SKEL):
    pa = joint_positions(forward_kinematics(skel, pose_a))
    pb = joint_positions(forward_kinematics(skel, pose_b))
    return float(np.linalg.norm(pa - pb, axis=1).mean())


# ---------------------------------------------------------------------------
# 1. representation round trip


def test_c01_representation_round_trip_within_tolerance():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst_pos, worst_rot = 0.0, 0.0
    for k in range(100):
        skel = humanoid22() if k % 5 else chain5()
        motion = random_motion(rng, skel, n_frames=int(rng.integers(6, 14)))
        feats = encode(motion, skel)
        decoded, shape = decode(feats, frame1_anchor(motion, skel), skel)
        gt = [forward_kinematics(skel, f) for f in motion.frames]
        for i in range(len(motion.frames)):
            for j in range(skel.num_joints):
                worst_pos = max(
                    worst_pos, np.abs(decoded[i][j].translation - gt[i][j].translation).max()
                )
                worst_rot = max(worst_rot, _geodesic(decoded[i][j].rotation, gt[i][j].rotation))
        assert np.allclose(shape, motion.shape, atol=1e-9)
    elapsed = time.monotonic() - start
    assert worst_pos < 1e-4, worst_pos
    assert worst_rot < 1e-5, worst_rot
    assert elapsed < 30.0, elapsed


# ---------------------------------------------------------------------------
# 2. planar-rigid invariance and anchor equivariance


def test_c02_planar_invariance_and_anchor_equivariance():
    rng = np.random.default_rng(202)
    for _ in range(50):
        skel = humanoid22()
        motion = random_motion(rng, skel, n_frames=6)
        yaw, tx, ty = rng.uniform(-np.pi, np.pi), rng.uniform(-5, 5), rng.uniform(-5, 5)
        g = planar_transform(yaw, tx, ty)

        fa = encode(motion, skel)
        fb = encode(transform_motion(g, motion), skel)
        assert np.abs(fa - fb).max() < 1e-6

        anchor = frame1_anchor(motion, skel)
        moved_anchor = CanonicalFrame(
            anchor.yaw + yaw, (rotation_z(yaw)[:2, :2] @ anchor.xy) + np.array([tx, ty])
        )
        base, _ = decode(fa, anchor, skel)
        moved, _ = decode(fa, moved_anchor, skel)
        for i in (0, len(motion.frames) - 1):
            for j in range(skel.num_joints):
                assert np.abs(moved[i][j].translation - g.apply(base[i][j].translation)).max() < 1e-6
                assert np.abs(moved[i][j].rotation - g.rotation @ base[i][j].rotation).max() < 1e-6


# ---------------------------------------------------------------------------
# 3. forward kinematics vs an independent matrix oracle


def _rodrigues(aa):
    theta = np.linalg.norm(aa)
    if theta < 1e-12:
        return np.eye(3)
    k = np.asarray(aa) / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def _mat4(rot, trans):
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


def _fk_oracle(skel, pose):
    """Root-to-leaf 4x4 matrix product, walked independently per joint."""
    scale = 1.0 + 0.1 * pose.shape[0]
    locals_ = [_mat4(_rodrigues(pose.root_rotation), pose.root_translation)]
    for i in range(1, skel.num_joints):
        locals_.append(_mat4(_rodrigues(pose.joint_angles[i - 1]), scale * skel.bind_offsets[i]))
    out = []
    for j in range(skel.num_joints):
        chain = skel.chain_to_root(j)  # joint up to root
        m = np.eye(4)
        for idx in reversed(chain):
            m = m @ locals_[idx]
        out.append(m)
    return out


@pytest.mark.parametrize("skel_fn,count", [(humanoid22, 700), (chain5, 300)])
def test_c03_forward_kinematics_matches_matrix_oracle(skel_fn, count):
    skel = skel_fn()
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(count):
        pose = PoseParams(
            root_rotation=rng.uniform(-np.pi, np.pi, 3),
            root_translation=rng.uniform(-3, 3, 3),
            joint_angles=rng.uniform(-np.pi, np.pi, (skel.num_joints - 1, 3)),
            shape=rng.uniform(-2, 2, 10),
        )
        got = forward_kinematics(skel, pose)
        want = _fk_oracle(skel, pose)
        for j in range(skel.num_joints):
            worst = max(worst, np.abs(got[j].translation - want[j][:3, 3]).max())
            worst = max(worst, np.abs(got[j].rotation - want[j][:3, :3]).max())
    assert worst < 1e-6, worst


# ---------------------------------------------------------------------------
# 4. noise schedule and forward process


def test_c04_cosine_schedule_and_forward_moments():
    sched = cosine_schedule(1000)
    ab = sched.alpha_bar.numpy()
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0.0)

    # independent re-derivation of the clipped squared-cosine table
    s = 0.008
    steps = np.arange(1001, dtype=np.float64)
    f = np.cos((steps / 1000 + s) / (1.0 + s) * np.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
    want = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    np.testing.assert_allclose(ab, want, rtol=0, atol=1e-12)

    t = 350
    x0_row = torch.tensor([-2.0, -0.5, 0.0, 0.3, 1.0, 2.5], dtype=torch.float64)
    draws = 10_000
    gen = torch.Generator().manual_seed(404)
    noise = torch.randn((draws, 6), generator=gen, dtype=torch.float64)
    xt = q_sample(sched, x0_row.expand(draws, -1), t, noise).numpy()
    ab_t = ab[t]
    mean_want = np.sqrt(ab_t) * x0_row.numpy()
    std_want = np.sqrt(1.0 - ab_t)
    mean_tol = 4.0 * std_want / np.sqrt(draws)  # 4 sigma of the mean estimator
    assert np.abs(xt.mean(axis=0) - mean_want).max() < mean_tol
    assert np.abs(xt.std(axis=0) / std_want - 1.0).max() < 0.05


# ---------------------------------------------------------------------------
# 5. denoiser analytic gradients vs finite differences


def test_c05_denoiser_gradients_match_finite_differences():
    cfg = DenoiserConfig(d_motion=10, d_img=8, layers=1, width=16, heads=4, n_max=6)
    model = build_denoiser(cfg, seed=55).double()
    sched = cosine_schedule(20)
    rng = np.random.default_rng(505)
    n = 4
    x0 = torch.from_numpy(rng.standard_normal((1, n, cfg.d_motion)))
    noise = torch.from_numpy(rng.standard_normal((1, n, cfg.d_motion)))
    img_mask = np.zeros((1, n), bool)
    img_mask[:, 0] = True
    cond = ConditioningBundle(
        traj=torch.from_numpy(rng.standard_normal((1, n, TRAJ_DIM))).double(),
        img=torch.from_numpy(rng.standard_normal((1, n, cfg.d_img))).double(),
        traj_mask=torch.from_numpy(np.ones((1, n), bool)),
        img_mask=torch.from_numpy(img_mask),
    )
    t = 11

    def loss_value():
        with torch.no_grad():
            return float(denoise_loss(model, sched, x0, cond, t, noise))

    model.zero_grad()
    denoise_loss(model, sched, x0, cond, t, noise).backward()
    params = [(name, p) for name, p in model.named_parameters() if p.grad is not None]
    eps = 1e-6
    for _ in range(20):
        name, p = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(p.numel()))
        analytic = float(p.grad.flatten()[idx])
        flat = p.data.flatten()
        orig = float(flat[idx])
        flat[idx] = orig + eps
        up = loss_value()
        flat[idx] = orig - eps
        down = loss_value()
        flat[idx] = orig
        fd = (up - down) / (2 * eps)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
        assert rel < 1e-4, f"{name}[{idx}]: fd={fd:.6g} analytic={analytic:.6g} rel={rel:.3g}"


# ---------------------------------------------------------------------------
# 6. generation-mode conditioning invariance and mask frequency


def test_c06_generation_mode_invariance_and_mask_frequency():
    cfg = DenoiserConfig(d_motion=8, d_img=6, layers=1, width=16, heads=2, n_max=16)
    model = build_denoiser(cfg, seed=66).eval()
    sched = cosine_schedule(30)
    rng = np.random.default_rng(606)
    n = 12
    img_a = rng.standard_normal((1, n, cfg.d_img)).astype(np.float32)
    img_b = img_a.copy()
    img_b[:, 1:] = rng.standard_normal((1, n - 1, cfg.d_img))  # frames 2..N differ
    traj_mask = np.zeros((1, n), bool)
    img_mask = np.zeros((1, n), bool)
    img_mask[:, 0] = True

    outs = []
    for traj, img in (
        (rng.standard_normal((1, n, TRAJ_DIM)).astype(np.float32), img_a),
        (rng.standard_normal((1, n, TRAJ_DIM)).astype(np.float32), img_b),
    ):
        cond = ConditioningBundle(
            traj=torch.from_numpy(traj),
            img=torch.from_numpy(img),
            traj_mask=torch.from_numpy(traj_mask),
            img_mask=torch.from_numpy(img_mask),
        )
        outs.append(sample(model, sched, (1, n, cfg.d_motion), cond, seed=11))
    assert torch.equal(outs[0], outs[1])

    draws = 10_000
    rng = np.random.default_rng(607)
    hits = sum(sample_task_masks(8, rng)[0].all() for _ in range(draws))
    assert abs(hits / draws - 0.5) <= 0.02


# ---------------------------------------------------------------------------
# 7. overfit experiment


def _single_split_dataset(tmp_dir, takes, skel, d_img):
    """All clips in the train split (the overfit experiment trains on everything)."""
    ds0 = build_clip_dataset(takes, str(tmp_dir), skel=skel, d_img=d_img)
    clips = ds0.train_clips + ds0.eval_clips
    return ClipDataset(
        train_clips=clips,
        eval_clips=[],
        normalizer=Normalizer.fit(np.concatenate([c.x0 for c in clips])),
        skeleton=ds0.skeleton,
        fps=ds0.fps,
    )


def test_c07_overfit_eight_clips_within_budget(tmp_path):
    from egomotion.synth import generate_take

    start = time.monotonic()
    skel = get_skeleton("humanoid22")
    takes = [generate_take(s, a, 8.0, seed=20 + s * 7 + a) for s in range(4) for a in (0, 3)]
    ds = _single_split_dataset(tmp_path / "cache", takes, skel, d_img=16)
    mcfg = DenoiserConfig(d_motion=ds.width, d_img=16, layers=2, width=64, heads=4, n_max=80)
    cfg = TrainConfig(
        epochs=2000, batch_size=8, lr=2e-3, lr_final=2e-4, lr_switch_epoch=1500,
        t_max=250, seed=0,
    )
    state = train(ds, cfg, mcfg, max_steps=2000)
    init_loss = float(np.mean(state.step_losses[:50]))
    final_loss = float(np.mean(state.step_losses[-50:]))

    take_map = {t.key: t for t in takes}
    errs = []
    for k, clip in enumerate(ds.train_clips):
        take = take_map[clip.take_key]
        traj = take.trajectory[clip.start : clip.start + 80]
        motion = reconstruct(state, traj, clip.img, seed=1000 + k)
        gt = sequence_positions(take.motion, skel)[clip.start : clip.start + 80]
        errs.append(mpjpe(sequence_positions(motion, skel), gt))
    elapsed = time.monotonic() - start

    assert final_loss < 0.05 * init_loss, (init_loss, final_loss)
    assert float(np.mean(errs)) < 0.05, errs
    assert elapsed < 600.0, elapsed


# ---------------------------------------------------------------------------
# 8. generalization experiment


def test_c08_generalization_forecast_and_semantic_contrast(tmp_path):
    from egomotion.features import canonicalize_frame, features_to_motion
    from egomotion.synth import generate_take
    from egomotion.util import derive_seed

    start = time.monotonic()
    skel = get_skeleton("humanoid22")
    d_img = 16
    takes = [
        generate_take(s, a, 60.0, seed=300 + 11 * s + a) for s in range(6) for a in range(5)
    ]
    take_map = {t.key: t for t in takes}
    ds0 = build_clip_dataset(takes, str(tmp_path / "cache"), skel=skel, d_img=d_img, eval_stride_s=2.0)
    rng = np.random.default_rng(derive_seed("acceptance-subset", 0))
    train_clips = [ds0.train_clips[i] for i in rng.permutation(len(ds0.train_clips))[:512]]
    eval_clips = [ds0.eval_clips[i] for i in rng.permutation(len(ds0.eval_clips))[:64]]
    assert len(train_clips) == 512 and len(eval_clips) == 64
    ds = ClipDataset(
        train_clips=train_clips,
        eval_clips=eval_clips,
        normalizer=Normalizer.fit(np.concatenate([c.x0 for c in train_clips])),
        skeleton=ds0.skeleton,
        fps=ds0.fps,
    )

    mcfg = DenoiserConfig(d_motion=ds.width, d_img=d_img, layers=3, width=128, heads=4, n_max=80)
    cfg = TrainConfig(
        epochs=(1500 * 32) // 512 + 1, batch_size=32, lr=2e-4, lr_final=2e-4,
        t_max=1000, seed=0,
    )
    state = train(ds, cfg, mcfg, max_steps=1500)
    state.model.eval()
    stride = 20

    # --- held-out reconstruction vs the constant-mean-pose baseline
    bsz = len(eval_clips)
    cond = ConditioningBundle(
        traj=torch.from_numpy(np.stack([c.traj for c in eval_clips])),
        img=torch.from_numpy(np.stack([c.img for c in eval_clips])),
        traj_mask=torch.ones((bsz, 80), dtype=torch.bool),
        img_mask=torch.ones((bsz, 80), dtype=torch.bool),
    )
    x = sample(state.model, state.schedule, (bsz, 80, ds.width), cond, seed=77, stride=stride)
    x = x.cpu().numpy().astype(np.float32)
    mean_row = ds.normalizer.mean.reshape(1, -1)
    model_errs, base_errs = [], []
    for k, clip in enumerate(eval_clips):
        take = take_map[clip.take_key]
        lo = clip.start
        anchor = canonicalize_frame(se3_compose(take.trajectory[lo], HEAD_FROM_DEVICE))
        gt = sequence_positions(take.motion, skel)[lo : lo + 80]
        rec = features_to_motion(state.normalizer.denormalize(x[k]), anchor, skel, ds.fps)
        base = features_to_motion(np.tile(mean_row, (80, 1)), anchor, skel, ds.fps)
        model_errs.append(mpjpe(sequence_positions(rec, skel), gt))
        base_errs.append(mpjpe(sequence_positions(base, skel), gt))
    model_err, base_err = float(np.mean(model_errs)), float(np.mean(base_errs))

    # --- forecast prefix (n=20 of N=80) bit-equals reconstruction
    clip = eval_clips[0]
    take = take_map[clip.take_key]
    traj = take.trajectory[clip.start : clip.start + 80]
    fc = forecast(state, traj[:20], clip.img[:20], n_total=80, seed=5)
    rc = reconstruct(state, traj[:20], clip.img[:20], seed=5)
    for i in range(20):
        for field in ("root_rotation", "root_translation", "joint_angles", "shape"):
            assert np.array_equal(
                getattr(fc.frames[i], field), getattr(rc.frames[i], field)
            ), (i, field)

    # --- semantic contrast between generated walk-line and squat-reach sets
    proxy = train_proxy_encoder(np.stack([c.x0 for c in train_clips[:256]]), seed=3, steps=300)
    latents = []
    for act in (0, 2):
        clips_a = [c for c in train_clips if take_map[c.take_key].activity_id == act][:32]
        assert len(clips_a) == 32
        img = np.zeros((32, 80, d_img), dtype=np.float32)
        for i, c in enumerate(clips_a):
            img[i, 0] = c.img[0]
        img_mask = np.zeros((32, 80), dtype=bool)
        img_mask[:, 0] = True
        gen_cond = ConditioningBundle(
            traj=torch.zeros((32, 80, TRAJ_DIM)),
            img=torch.from_numpy(img),
            traj_mask=torch.zeros((32, 80), dtype=torch.bool),
            img_mask=torch.from_numpy(img_mask),
        )
        xg = sample(
            state.model, state.schedule, (32, 80, ds.width), gen_cond, seed=900 + act, stride=stride
        )
        regen = []
        for row in xg.cpu().numpy().astype(np.float32):
            motion = features_to_motion(
                state.normalizer.denormalize(row), CanonicalFrame.identity(), skel, ds.fps
            )
            regen.append(encode(motion, skel).astype(np.float32))
        lat = embed_set(np.stack(regen), proxy)
        latents.append(lat / np.linalg.norm(lat, axis=1, keepdims=True))

    within = []
    for lat in latents:
        sim = lat @ lat.T
        within.append((sim.sum(axis=1) - 1.0) / (len(lat) - 1))
    between = latents[0] @ latents[1].T
    paired = np.concatenate(
        [within[0] - between.mean(axis=1), within[1] - between.mean(axis=0)]
    )
    elapsed = time.monotonic() - start

    assert model_err <= 0.70 * base_err, (model_err, base_err)
    assert paired.mean() > 0.0, (paired.mean(), float(within[0].mean()), float(between.mean()))
    assert elapsed < 1800.0, elapsed


# ---------------------------------------------------------------------------
# 9. repaint pins the known prefix bit-exactly


def test_c09_repaint_prefix_bit_equality():
    cfg = DenoiserConfig(d_motion=6, d_img=4, layers=1, width=16, heads=2, n_max=80)
    model = build_denoiser(cfg, seed=99).eval()
    sched = cosine_schedule(60)
    rng = np.random.default_rng(909)
    n_total = 80
    known = torch.from_numpy(rng.standard_normal((1, n_total, cfg.d_motion)).astype(np.float32))
    cond = ConditioningBundle(
        traj=torch.from_numpy(rng.standard_normal((1, n_total, TRAJ_DIM)).astype(np.float32)),
        img=torch.from_numpy(rng.standard_normal((1, n_total, cfg.d_img)).astype(np.float32)),
        traj_mask=torch.ones((1, n_total), dtype=torch.bool),
        img_mask=torch.ones((1, n_total), dtype=torch.bool),
    )
    for n in (1, 20, 79):
        for seed in (0, 7, 123):
            out = repaint_forecast(model, sched, known, n, cond, seed=seed)
            assert torch.equal(out[:, :n], known[:, :n]), (n, seed)
            assert not torch.equal(out[:, n:], known[:, n:])


# ---------------------------------------------------------------------------
# 10. metrics match independent oracles


def test_c10_metrics_match_independent_oracles():
    rng = np.random.default_rng(1010)

    # mpjpe family on random clips
    for _ in range(5):
        pred = rng.standard_normal((6, 8, 3))
        gt = rng.standard_normal((6, 8, 3))
        oracle = float(np.linalg.norm(pred - gt, axis=2).mean())
        assert abs(mpjpe(pred, gt) - oracle) < 1e-9
        assert mpjpe_pa(pred, gt) <= mpjpe(pred, gt) + 1e-12
        hands = (2, 5)
        oracle_h = float(np.linalg.norm(pred[:, hands] - gt[:, hands], axis=2).mean())
        assert abs(mpjpe_h(pred, gt, hands) - oracle_h) < 1e-9

    # rigidly transformed copy aligns to zero
    base = rng.standard_normal((4, 8, 3))
    rot = rotation_z(0.8)
    moved = base @ rot.T + np.array([1.5, -2.0, 0.3])
    assert mpjpe_pa(moved, base) < 1e-6

    # head rotation error closed form: 180 degree yaw = 2 sqrt(2)
    pred_heads = [SE3(rotation_z(np.pi), np.zeros(3))]
    gt_heads = [SE3(np.eye(3), np.zeros(3))]
    rot_err, trans_err = head_errors(pred_heads, gt_heads)
    assert abs(rot_err - 2.0 * np.sqrt(2.0)) < 1e-9
    assert trans_err == 0.0

    # foot metrics vs hand-computed oracles (height-weighted slide, mm/frame)
    n, j = 5, 4
    positions = rng.standard_normal((n, j, 3)) * 0.1
    feet = (1, 3)
    h_slide = 0.05
    slide_terms = []
    for i in range(1, n):
        for f in feet:
            disp = float(np.linalg.norm(positions[i, f, :2] - positions[i - 1, f, :2]))
            h = 0.5 * (positions[i, f, 2] + positions[i - 1, f, 2])
            w = float(np.clip(2.0 - 2.0 ** (h / h_slide), 0.0, 1.0))
            slide_terms.append(disp * w)
    slide_oracle = float(np.mean(slide_terms)) * 1000.0
    assert abs(foot_slide(positions, feet, height_threshold=h_slide) - slide_oracle) < 1e-9
    contact_oracle = float(np.mean(np.abs(positions[:, feet, 2].min(axis=1))))
    assert abs(foot_contact(positions, feet) - contact_oracle) < 1e-9

    # gaussian stats and Frechet distance
    pts = rng.standard_normal((500, 6))
    mu, cov = gaussian_stats(pts)
    assert np.abs(mu - pts.mean(axis=0)).max() < 1e-9
    assert np.abs(cov - np.cov(pts, rowvar=False)).max() < 1e-9

    mu1, mu2 = np.zeros(4), np.array([1.0, 0.0, -1.0, 0.5])
    d1, d2 = np.array([1.0, 2.0, 0.5, 1.5]), np.array([2.0, 1.0, 1.0, 0.5])
    closed = float(
        np.sum((mu1 - mu2) ** 2) + np.sum(d1 + d2 - 2.0 * np.sqrt(d1 * d2))
    )
    got = frechet_distance(mu1, np.diag(d1), mu2, np.diag(d2))
    assert abs(got - closed) < 1e-6

    # FID(A, A) through a real (tiny) encoder
    clips = rng.standard_normal((64, 12, 20)).astype(np.float32)
    proxy = train_proxy_encoder(clips, seed=4, steps=60, width=32)
    assert fid(clips, clips, proxy) < 1e-3

    # sampled Gaussian case within 5% of the closed form
    g1 = rng.multivariate_normal(mu1, np.diag(d1), size=4000)
    g2 = rng.multivariate_normal(mu2, np.diag(d2), size=4000)
    est = frechet_distance(*gaussian_stats(g1), *gaussian_stats(g2))
    assert abs(est - closed) / closed < 0.05


# ---------------------------------------------------------------------------
# 11. multi-view fitting experiment


def test_c11_fitting_recovery_robustness_and_smoothing():
    rng = np.random.default_rng(1111)
    motion = random_motion(rng, SKEL, n_frames=1, angle_scale=0.2)
    gt = motion.frames[0]
    views = make_camera_rig(4, target=gt.root_translation)
    init = PoseParams(
        root_rotation=gt.root_rotation + rng.normal(scale=0.1, size=3),
        root_translation=gt.root_translation + rng.normal(scale=0.05, size=3),
        joint_angles=gt.joint_angles + rng.normal(scale=0.1, size=gt.joint_angles.shape),
        shape=gt.shape + rng.normal(scale=0.02, size=10),
    )
    noise_px = 2.0
    clean = synthesize_keypoints(motion, SKEL, views, noise_px=noise_px, rng=np.random.default_rng(1))
    dirty = synthesize_keypoints(
        motion, SKEL, views, noise_px=noise_px, outlier_frac=0.1, outlier_px=50.0,
        rng=np.random.default_rng(2),
    )
    res_clean = perframe_fit(views, *clean.frame(0), init, FitWeights(), SKEL)
    res_dirty = perframe_fit(views, *dirty.frame(0), init, FitWeights(), SKEL)
    err_clean = _joint_error(res_clean.pose, gt)
    err_dirty = _joint_error(res_dirty.pose, gt)
    assert err_clean < 0.02, err_clean
    assert err_dirty < 2.0 * err_clean, (err_clean, err_dirty)

    # energy gradient vs central finite differences
    weights = FitWeights()
    pixels, conf = clean.frame(0)
    _, grad = fitting_energy(init, views, pixels, conf, weights, SKEL)
    vec = pack_pose(init)
    coords = rng.choice(vec.size, size=16, replace=False)
    h = 1e-5
    worst = 0.0
    fd = np.zeros_like(grad)
    for c in coords:
        lo, hi = vec.copy(), vec.copy()
        lo[c] -= h
        hi[c] += h
        e_lo, _ = fitting_energy(unpack_pose(lo, SKEL), views, pixels, conf, weights, SKEL)
        e_hi, _ = fitting_energy(unpack_pose(hi, SKEL), views, pixels, conf, weights, SKEL)
        fd[c] = (e_hi - e_lo) / (2.0 * h)
    rel = np.linalg.norm(fd[coords] - grad[coords]) / (np.linalg.norm(fd[coords]) + 1e-12)
    assert rel < 1e-4, rel

    # sequence stage: jitter halves, joint error grows at most 20%
    walk = straight_walk_motion(SKEL, n_frames=8)
    walk_views = make_camera_rig(4, radius=5.0, target=(0.35, 0.0, 0.9))
    kps = synthesize_keypoints(walk, SKEL, walk_views)
    jittered = [
        PoseParams(
            root_rotation=f.root_rotation + rng.normal(scale=0.05, size=3),
            root_translation=f.root_translation + rng.normal(scale=0.02, size=3),
            joint_angles=f.joint_angles + rng.normal(scale=0.05, size=f.joint_angles.shape),
            shape=f.shape + rng.normal(scale=0.02, size=10),
        )
        for f in walk.frames
    ]

    def param_jitter(poses):
        flat = np.stack(
            [
                np.concatenate([p.root_rotation, p.root_translation, p.joint_angles.ravel()])
                for p in poses
            ]
        )
        return float(np.sum((flat[1:] - flat[:-1]) ** 2))

    gt_pos = sequence_positions(walk, SKEL)
    err_before = float(
        np.linalg.norm(
            np.stack([joint_positions(forward_kinematics(SKEL, p)) for p in jittered]) - gt_pos,
            axis=2,
        ).mean()
    )
    out = sequence_fit(jittered, walk_views, kps, FitWeights(), SKEL)
    err_after = float(np.linalg.norm(sequence_positions(out, SKEL) - gt_pos, axis=2).mean())
    assert param_jitter(out.frames) <= 0.5 * param_jitter(jittered)
    assert err_after <= 1.2 * err_before, (err_before, err_after)

    # teleport isolation
    teleported = straight_walk_motion(SKEL, n_frames=30)
    for f in teleported.frames[15:]:
        f.root_translation = f.root_translation + np.array([0.0, 3.0, 0.0])
    assert filter_segments(teleported, SKEL) == [(0, 15), (16, 30)]


# ---------------------------------------------------------------------------
# 12. CLI reruns are byte-identical


def _tree_bytes(root: Path):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


TOY_TRAIN_CONFIG = """\
epochs = 2
batch_size = 2
lr = 1e-3
lr_final = 1e-4
lr_switch_epoch = 1
t_max = 40
seed = 7

[model]
layers = 1
width = 32
heads = 2
n_max = 80
d_img = 16
"""


def test_c12_every_cli_command_reruns_byte_identical(tmp_path):
    def rerun(flags, out: Path):
        assert cli_main(flags) == 0, flags
        first = _tree_bytes(out)
        shutil.rmtree(out)
        assert cli_main(flags) == 0, flags
        assert _tree_bytes(out) == first, f"rerun of {flags[0]} differs"

    data = tmp_path / "data"
    rerun(
        ["synth", "--scenes", "2", "--activities", "2", "--takes", "1",
         "--duration", "8.0", "--seed", "3", "--d-img", "16", "--out", str(data)],
        data,
    )

    config = tmp_path / "train.toml"
    config.write_text(TOY_TRAIN_CONFIG)
    model_dir = tmp_path / "model"
    rerun(
        ["train", "--config", str(config), "--data", str(data), "--out", str(model_dir)],
        model_dir,
    )
    model = str(model_dir / "checkpoint.eem")
    take = str(sorted((data / "takes").glob("*.eem"))[0])

    rerun(
        ["reconstruct", "--model", model, "--input", take, "--frames", "10",
         "--seed", "5", "--out", str(tmp_path / "rec")],
        tmp_path / "rec",
    )
    rerun(
        ["forecast", "--model", model, "--input", take, "--observe", "1.0",
         "--frames", "20", "--seed", "5", "--out", str(tmp_path / "fc")],
        tmp_path / "fc",
    )
    rerun(
        ["generate", "--model", model, "--image-feature", take, "--frames", "12",
         "--seed", "5", "--out", str(tmp_path / "gen")],
        tmp_path / "gen",
    )

    motions = tmp_path / "motions"
    motions.mkdir()
    rng = np.random.default_rng(12)
    for k in range(40):
        save_motion(motions / f"clip_{k:03d}.eem", random_motion(rng, SKEL, n_frames=30))
    enc_dir = tmp_path / "encoder"
    rerun(
        ["train-encoder", "--data", str(motions), "--window-frames", "20",
         "--stride", "10", "--steps", "60", "--width", "32", "--seed", "1",
         "--out", str(enc_dir)],
        enc_dir,
    )

    report_dir = tmp_path / "report"
    report_dir.mkdir()
    report = report_dir / "report.txt"
    rerun(
        ["eval", "--pred", str(motions), "--gt", str(motions),
         "--encoder", str(enc_dir / "encoder.eem"), "--metrics", "semantic",
         "--report", str(report)],
        report_dir,
    )

    walk = straight_walk_motion(SKEL, n_frames=6, fps=10.0)
    views = make_camera_rig(n_views=4)
    save_rig(tmp_path / "rig.eem", views)
    save_motion(tmp_path / "init.eem", walk)
    save_keypoints(tmp_path / "kps.eem", synthesize_keypoints(walk, SKEL, views))
    rerun(
        ["fit", "--rig", str(tmp_path / "rig.eem"), "--keypoints", str(tmp_path / "kps.eem"),
         "--init", str(tmp_path / "init.eem"), "--out", str(tmp_path / "fit")],
        tmp_path / "fit",
    )
