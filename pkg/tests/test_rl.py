import numpy as np
import pytest

from conftest import box_mesh
from licp.core3d import (
    EulerAngles,
    PointCloud,
    RigidTransform,
    euler_to_rotation,
    geodesic_angle_deg,
    merge_meshes,
)
from licp.errors import EmptyRollouts
from licp.icp import normal_error
from licp.nn import GeomNetConfig, init_geom_net
from licp.policy import (
    ActionSpace,
    PolicyConfig,
    init_policy,
    policy_forward,
    sample_action,
    top_joint_actions,
)
from licp.rl import (
    Baseline,
    LicpConfig,
    Rollout,
    RolloutStep,
    build_state,
    compute_reward,
    licp_align,
    make_reference_model,
    reinforce_surrogate,
    reinforce_update,
    render_reference,
    run_episode,
    surface_weights,
    train_licp,
    weights_to_colors,
)

CFG = LicpConfig(render_size=48, grid_dims=(12, 12, 12), hidden=32,
                 episode_length=1, reward_points=300)
GEOM_CFG = GeomNetConfig(grid_dims=(12, 12, 12), conv_channels=(4, 8),
                         embed_channels=16, n_classes=3)


def l_shape_mesh():
    """Asymmetric L-shaped solid (distinguishes yaw orientations)."""
    return merge_meshes([
        box_mesh(center=(0, 0, 0), size=(1.0, 0.4, 0.3)),
        box_mesh(center=(0.35, 0, 0.35), size=(0.3, 0.4, 0.4)),
    ])


def table_mesh():
    """4-fold symmetric table: square top on a square central column."""
    return merge_meshes([
        box_mesh(center=(0, 0, 0.5), size=(1.0, 1.0, 0.1)),
        box_mesh(center=(0, 0, 0.0), size=(0.12, 0.12, 0.9)),
    ])


@pytest.fixture(scope="module")
def ref():
    return make_reference_model("l-shape", l_shape_mesh(), n_points=512, seed=0)


@pytest.fixture(scope="module")
def geom():
    return init_geom_net(GEOM_CFG, seed=0)


@pytest.fixture(scope="module")
def gt_query(ref):
    """Query rendered from the reference at a known in-grid action."""
    action = (5, 16, 16)
    pose = RigidTransform.from_euler(CFG.action_space.action_to_euler(action))
    return action, render_reference(ref, pose, CFG)


def oracle_policy(state_dim, favored_action, hidden=32, bins=32):
    """Hand-built policy that deterministically prefers one action: zero
    trunk, one-hot head biases."""
    params = init_policy(PolicyConfig(state_dim, hidden=hidden,
                                      dropout_rate=0.0, bins_per_axis=bins),
                         seed=0)
    for k in params.arrays:
        params.arrays[k] = np.zeros_like(params.arrays[k])
    for axis, name in enumerate(("yaw", "pitch", "roll")):
        params.arrays[f"{name}_b"][favored_action[axis]] = 10.0
    return params


class TestActionSpace:
    def test_bin_centers_uniform(self):
        space = ActionSpace()
        for axis in range(3):
            c = space.bin_centers(axis)
            assert len(c) == 32
            assert np.allclose(np.diff(c), space.bin_width(axis))
            lo, hi = space.range_for(axis)
            assert lo < c[0] and c[-1] < hi

    def test_yaw_bin_width(self):
        assert np.isclose(ActionSpace().bin_width(0), 11.25)

    def test_round_trip(self):
        space = ActionSpace()
        for action in [(0, 0, 0), (31, 31, 31), (5, 16, 20)]:
            assert space.euler_to_action(space.action_to_euler(action)) == action

    def test_yaw_wraps(self):
        space = ActionSpace()
        a = space.euler_to_action(EulerAngles(185.0, 0.0, 0.0))
        b = space.euler_to_action(EulerAngles(-175.0, 0.0, 0.0))
        assert a == b

    def test_pitch_roll_clamp(self):
        space = ActionSpace()
        assert space.euler_to_action(EulerAngles(0, 0, 9.9))[2] == 31
        assert space.euler_to_action(EulerAngles(0, 0, -9.9))[2] == 0


class TestPolicyForward:
    def test_eval_deterministic(self, rng):
        params = init_policy(PolicyConfig(8, hidden=8), seed=0)
        s = rng.normal(size=8)
        a = policy_forward(s, params, mode="eval")
        b = policy_forward(s, params, mode="eval")
        assert np.array_equal(a.action_logits, b.action_logits)
        assert a.value == b.value

    def test_zero_weights_uniform(self, rng):
        params = init_policy(PolicyConfig(8, hidden=8), seed=0)
        for k in params.arrays:
            params.arrays[k] = np.zeros_like(params.arrays[k])
        out = policy_forward(rng.normal(size=8), params)
        assert np.allclose(out.probs(), 1.0 / 32)
        assert out.value == 0.0

    def test_probs_sum_to_one(self, rng):
        params = init_policy(PolicyConfig(8, hidden=8), seed=1)
        out = policy_forward(rng.normal(size=8), params)
        assert np.abs(out.probs().sum(axis=1) - 1.0).max() < 1e-9

    def test_joint_logprob_factored(self, rng):
        params = init_policy(PolicyConfig(8, hidden=8), seed=1)
        out = policy_forward(rng.normal(size=8), params)
        lp = out.log_probs()
        action = (3, 7, 11)
        joint = np.prod([out.probs()[i][action[i]] for i in range(3)])
        assert np.isclose(sum(lp[i][action[i]] for i in range(3)),
                          np.log(joint))

    def test_train_mode_stochastic(self, rng):
        params = init_policy(PolicyConfig(8, hidden=16, dropout_rate=0.5),
                             seed=2)
        s = rng.normal(size=8)
        a = policy_forward(s, params, mode="train", rng=np.random.default_rng(1))
        b = policy_forward(s, params, mode="train", rng=np.random.default_rng(2))
        assert not np.array_equal(a.action_logits, b.action_logits)

    def test_frozen_masks_reproduce(self, rng):
        params = init_policy(PolicyConfig(8, hidden=16, dropout_rate=0.5),
                             seed=2)
        s = rng.normal(size=8)
        a, cache = policy_forward(s, params, mode="train",
                                  rng=np.random.default_rng(7), want_cache=True)
        b = policy_forward(s, params, mode="train", masks=cache["masks"])
        assert np.array_equal(a.action_logits, b.action_logits)


class TestSampleAction:
    def test_epsilon_one_uniform(self, rng):
        params = init_policy(PolicyConfig(4, hidden=8), seed=0)
        out = policy_forward(rng.normal(size=4), params)
        n = 10000
        counts = np.zeros(32)
        for _ in range(n):
            counts[sample_action(out, 1.0, rng)[0]] += 1
        p = 1.0 / 32
        sigma = np.sqrt(n * p * (1 - p))
        assert np.abs(counts - n * p).max() < 4 * sigma

    def test_epsilon_zero_one_hot(self, rng):
        out = policy_forward(np.zeros(4),
                             oracle_policy(4, (3, 17, 29), hidden=8))
        for _ in range(50):
            assert sample_action(out, 0.0, rng) == (3, 17, 29)

    def test_epsilon_zero_matches_softmax(self, rng):
        params = init_policy(PolicyConfig(4, hidden=8), seed=3)
        out = policy_forward(rng.normal(size=4), params)
        probs = out.probs()[1]
        n = 10000
        counts = np.zeros(32)
        for _ in range(n):
            counts[sample_action(out, 0.0, rng)[1]] += 1
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) < 4 * np.maximum(sigma, 1.0))


class TestBuildState:
    def test_identity_render_matches(self, ref, geom):
        query = render_reference(ref, RigidTransform.identity(), CFG)
        state = build_state(query, ref, RigidTransform.identity(), geom, CFG)
        assert np.array_equal(state.query_embedding, state.reference_embedding)

    def test_deterministic(self, ref, geom, gt_query):
        _, query = gt_query
        a = build_state(query, ref, RigidTransform.identity(), geom, CFG)
        b = build_state(query, ref, RigidTransform.identity(), geom, CFG)
        assert np.array_equal(a.vector, b.vector)

    def test_dimension(self, ref, geom, gt_query):
        _, query = gt_query
        s = build_state(query, ref, RigidTransform.identity(), geom, CFG)
        assert s.vector.shape == (2 * GEOM_CFG.embed_channels,)


class TestReward:
    def test_gt_action_beats_rotated(self, ref, gt_query):
        action, query = gt_query
        r_gt = compute_reward(query, ref, action, CFG)
        for shift in (8, 16, 24):   # 90/180/270 degree yaw offsets
            other = ((action[0] + shift) % 32, action[1], action[2])
            assert r_gt >= compute_reward(query, ref, other, CFG)

    def test_bounded(self, ref, gt_query):
        action, query = gt_query
        for a in [action, (0, 0, 0), (31, 31, 31), (10, 5, 20)]:
            r = compute_reward(query, ref, a, CFG)
            assert 0.0 <= r <= 1.0

    def test_four_fold_symmetry(self):
        import dataclasses
        # yaw-only action space (pitch/roll pinned to 0) so 8-bin shifts are
        # exact 90-degree rotations about the table's symmetry axis
        space = ActionSpace(32, (-180.0, 180.0), (0.0, 0.0), (0.0, 0.0))
        cfg = dataclasses.replace(CFG, action_space=space)
        table = make_reference_model("table", table_mesh(), n_points=512, seed=0)
        action = (4, 0, 0)
        pose = RigidTransform.from_euler(space.action_to_euler(action))
        query = render_reference(table, pose, cfg)
        rewards = [compute_reward(query, table,
                                  ((action[0] + s) % 32, 0, 0), cfg)
                   for s in (0, 8, 16, 24)]
        assert max(rewards) - min(rewards) < 0.05

    def test_invariant_to_reference_resampling(self, gt_query):
        # the reward renders the mesh, so the sampled-cloud seed cannot leak in
        action, query = gt_query
        rewards = [compute_reward(query,
                                  make_reference_model("l", l_shape_mesh(),
                                                       n_points=512, seed=s),
                                  action, CFG)
                   for s in range(20)]
        assert max(rewards) - min(rewards) < 0.05


class TestRollout:
    def test_returns_recursion(self, rng):
        gamma = 0.9
        rewards = rng.random(5)
        steps = [RolloutStep(None, (0, 0, 0), float(r)) for r in rewards]
        rollout = Rollout(steps, gamma)
        R = rollout.compute_returns()
        assert np.isclose(R[-1], rewards[-1])
        for t in range(4):
            assert np.isclose(R[t], rewards[t] + gamma * R[t + 1])

    def test_single_step_return_is_reward(self):
        rollout = Rollout([RolloutStep(None, (0, 0, 0), 0.7)], 0.5)
        assert rollout.compute_returns() == [0.7]


def synthetic_batch(params, n_episodes, n_steps, rng, seed=0):
    """Episodes over random state vectors with arbitrary rewards, with the
    forward caches needed for the update."""
    rollouts, outputs = [], []
    mask_rng = np.random.default_rng(seed)
    for _ in range(n_episodes):
        steps, outs = [], []
        for _ in range(n_steps):
            s = rng.normal(size=params.config.state_dim)
            out, cache = policy_forward(s, params, mode="train", rng=mask_rng,
                                        want_cache=True)
            action = sample_action(out, 0.3, rng)
            steps.append(RolloutStep(s, action, float(rng.random())))
            outs.append((out, cache))
        r = Rollout(steps, 0.9)
        r.compute_returns()
        rollouts.append(r)
        outputs.append(outs)
    return rollouts, outputs


class TestReinforceUpdate:
    def test_empty_rollouts(self):
        params = init_policy(PolicyConfig(4, hidden=4), seed=0)
        with pytest.raises(EmptyRollouts):
            reinforce_update([], [], EulerAngles(0, 0, 0), CFG, params,
                             Baseline())

    def test_zero_advantage_zero_policy_gradient(self, rng):
        import dataclasses
        cfg = dataclasses.replace(CFG, aux_loss_weight=0.0,
                                  value_loss_weight=0.0, episode_length=1)
        params = init_policy(PolicyConfig(6, hidden=8, dropout_rate=0.0),
                             seed=1)
        reward = 0.42
        steps = []
        outs = []
        for _ in range(3):
            s = rng.normal(size=6)
            out, cache = policy_forward(s, params, mode="train",
                                        rng=rng, want_cache=True)
            steps.append(RolloutStep(s, (1, 2, 3), reward))
            outs.append((out, cache))
        rollouts = [Rollout([st], 0.9) for st in steps]
        baseline = Baseline(value=reward, initialized=True)
        grads, _ = reinforce_update(rollouts, [[o] for o in outs],
                                    EulerAngles(0, 0, 0), cfg, params, baseline)
        for k, g in grads.items():
            assert np.abs(g).max() < 1e-12, k

    def test_positive_reward_increases_logprob(self, rng):
        params = init_policy(PolicyConfig(6, hidden=8, dropout_rate=0.0),
                             seed=2)
        s = rng.normal(size=6)
        out, cache = policy_forward(s, params, mode="train", rng=rng,
                                    want_cache=True)
        action = (4, 8, 12)
        rollout = Rollout([RolloutStep(s, action, 1.0)], 0.9)
        rollout.compute_returns()
        grads, _ = reinforce_update([rollout], [[(out, cache)]],
                                    EulerAngles(0, 0, 0), CFG, params,
                                    Baseline())
        from licp.nn import SgdConfig, sgd_step
        new = sgd_step(params.arrays, grads,
                       SgdConfig(learning_rate=0.01, decay_factor=1.0), 0)
        new_params = init_policy(params.config, seed=2)
        new_params.arrays = new
        before = sum(policy_forward(s, params).log_probs()[i][action[i]]
                     for i in range(3))
        after = sum(policy_forward(s, new_params).log_probs()[i][action[i]]
                    for i in range(3))
        assert after > before

    def test_gradient_matches_finite_differences(self, rng):
        params = init_policy(PolicyConfig(5, hidden=6, dropout_rate=0.4),
                             seed=3)
        for k in params.arrays:   # move off exact ReLU kinks (zero biases)
            params.arrays[k] = params.arrays[k] + 0.05 * rng.normal(
                size=params.arrays[k].shape)
        rollouts, outputs = synthetic_batch(params, 2, 2, rng, seed=11)
        gt = EulerAngles(30.0, -20.0, 5.0)
        b0 = 0.1
        grads, _ = reinforce_update(rollouts, outputs, gt, CFG, params,
                                    Baseline(value=b0, initialized=True))

        def surrogate():
            outs = []
            for episode in outputs:
                eouts = []
                for out, cache in episode:
                    o = policy_forward(cache["state"], params, mode="train",
                                       masks=cache["masks"])
                    eouts.append((o, cache))
                outs.append(eouts)
            return reinforce_surrogate(rollouts, outs, gt, CFG, b0)

        eps = 1e-5
        for name in ("fc0_w", "fc2_b", "yaw_w", "value_w", "rot_w", "roll_b"):
            arr = params.arrays[name]
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = surrogate()
                flat[i] = orig - eps
                lo = surrogate()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                got = grads[name].reshape(-1)[i]
                denom = max(abs(fd), abs(got), 1e-8)
                assert abs(got - fd) / denom < 1e-4, name

    def test_baseline_action_independent(self, rng):
        params = init_policy(PolicyConfig(5, hidden=6, dropout_rate=0.0),
                             seed=4)
        rollouts, outputs = synthetic_batch(params, 3, 1, rng, seed=5)
        permuted = [Rollout([RolloutStep(s.state, (31 - s.action[0],
                                                   s.action[1], s.action[2]),
                                         s.reward)
                             for s in r.steps], r.gamma)
                    for r in rollouts]
        gt = EulerAngles(0, 0, 0)
        b1 = Baseline()
        b2 = Baseline()
        reinforce_update(rollouts, outputs, gt, CFG, params, b1)
        reinforce_update(permuted, outputs, gt, CFG, params, b2)
        assert b1.value == b2.value

    def test_baseline_running_mean(self):
        b = Baseline(momentum=0.9)
        assert b.update(1.0) == 1.0           # first observation seeds it
        assert np.isclose(b.update(0.0), 0.9)
        assert np.isclose(b.update(0.5), 0.86)


class TestTraining:
    def test_epsilon_schedule_linear(self):
        cfg = LicpConfig(epsilon_start=0.5, epsilon_end=0.05,
                         epsilon_decay_steps=1000)
        assert np.isclose(cfg.epsilon_at(0), 0.5)
        assert np.isclose(cfg.epsilon_at(500), 0.275)
        assert np.isclose(cfg.epsilon_at(1000), 0.05)
        assert np.isclose(cfg.epsilon_at(5000), 0.05)

    def test_deterministic_and_logged(self, ref, geom, gt_query, tmp_path):
        from licp.rl import training_log_to_csv
        action, query = gt_query
        gt = CFG.action_space.action_to_euler(action)
        data = [{"cloud": query, "model_id": ref.model_id, "rotation": gt}]
        lib = {ref.model_id: ref}
        a, loga = train_licp(data, lib, geom, CFG, steps=3, seed=7, log_every=1)
        b, logb = train_licp(data, lib, geom, CFG, steps=3, seed=7, log_every=1)
        assert loga == logb
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k])
        p = tmp_path / "log.csv"
        training_log_to_csv(loga, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "step,mean_reward,mean_return,epsilon,lr"
        assert len(lines) == len(loga) + 1

    def test_empty_dataset(self, geom):
        from licp.errors import EmptyDataset
        with pytest.raises(EmptyDataset):
            train_licp([], {}, geom, CFG, steps=1)


class TestAlign:
    def test_known_pose_recovered(self, ref, geom, gt_query):
        action, query = gt_query
        gt_R = euler_to_rotation(CFG.action_space.action_to_euler(action))
        policy = oracle_policy(2 * GEOM_CFG.embed_channels, action)
        coarse, _ = licp_align(query, ref, geom, policy, CFG, refine=False)
        assert geodesic_angle_deg(coarse.rotation, gt_R) <= 11.25
        fine, diag = licp_align(query, ref, geom, policy, CFG, refine=True)
        assert geodesic_angle_deg(fine.rotation, gt_R) < 2.0
        assert diag["chosen_action"] == list(action)

    def test_scale_recovered(self, ref, geom, gt_query):
        action, query = gt_query
        doubled = PointCloud(query.points * 2.0)
        policy = oracle_policy(2 * GEOM_CFG.embed_channels, action)
        T1, _ = licp_align(query, ref, geom, policy, CFG, refine=False)
        T2, _ = licp_align(doubled, ref, geom, policy, CFG, refine=False)
        assert abs(T2.scale / T1.scale - 2.0) < 0.05 * 2.0

    def test_identity_case(self, ref, geom):
        query = ref.cloud
        action = CFG.action_space.euler_to_action(EulerAngles(0, 0, 0))
        policy = oracle_policy(2 * GEOM_CFG.embed_channels, action)
        T, _ = licp_align(query, ref, geom, policy, CFG)
        assert geodesic_angle_deg(T.rotation, np.eye(3)) < 5.0
        assert np.linalg.norm(T.translation) < 0.05
        assert abs(T.scale - 1.0) < 0.05
        moved = PointCloud(T.apply_points(ref.cloud.points),
                           ref.cloud.normals @ T.rotation.T)
        _, mean_err = normal_error(moved, ref.cloud)
        assert mean_err < 0.05

    def test_transform_is_rigid(self, ref, geom, gt_query):
        action, query = gt_query
        policy = oracle_policy(2 * GEOM_CFG.embed_channels, action)
        T, _ = licp_align(query, ref, geom, policy, CFG)
        R = T.rotation
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
        assert np.isclose(np.linalg.det(R), 1.0)
        assert T.scale > 0


class TestSurfaceWeights:
    def test_range_and_peak(self, ref, geom, gt_query):
        action, query = gt_query
        policy = init_policy(
            PolicyConfig(2 * GEOM_CFG.embed_channels, hidden=32), seed=0)
        policy.arrays["value_b"][0] = 1.0   # non-degenerate positive values
        w = surface_weights(query, ref, geom, policy, CFG, k=3)
        assert w.min() >= 0.0
        assert w.max() == 1.0
        assert len(w) == len(ref.cloud)

    def test_colors(self):
        c = weights_to_colors(np.array([0.0, 0.5, 1.0]))
        assert c.dtype == np.uint8
        assert tuple(c[0]) == (0, 0, 255)
        assert tuple(c[2]) == (255, 0, 0)


def test_episode_uses_configured_length(ref, geom, gt_query):
    import dataclasses
    _, query = gt_query
    cfg = dataclasses.replace(CFG, episode_length=2)
    policy = init_policy(
        PolicyConfig(2 * GEOM_CFG.embed_channels, hidden=32,
                     dropout_rate=0.1), seed=0)
    rollout, outs = run_episode(query, ref, geom, policy, cfg, 0.5,
                                np.random.default_rng(0))
    assert len(rollout.steps) == 2
    assert len(outs) == 2
    assert len(rollout.returns) == 2
