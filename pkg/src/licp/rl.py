"""Rotation alignment as a reinforcement-learned decision process.

A policy observes a pair of shape embeddings (query scan, reference model at
its current pose), picks discretized rotation bins, and is rewarded by the
ICP matching score between the query and a depth render of the reference
under that rotation. Training is score-function (REINFORCE) gradient ascent
with a running-mean baseline, plus an auxiliary direct rotation regression
on the shared trunk. Inference decodes the policy's preferred bins,
optionally re-scores a handful of top candidates by the actual reward, and
hands the result to point-to-plane ICP for final refinement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core3d import (
    EulerAngles,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    estimate_normals,
    euler_to_rotation,
    sample_surface,
)
from .errors import (
    DegenerateNeighborhood,
    EmptyCloud,
    EmptyDataset,
    EmptyRollouts,
)
from .icp import IcpConfig, icp_refine, icp_score
from .nn import GeomNetParams, SgdConfig, geom_net_forward, sgd_step
from .policy import (
    ActionSpace,
    PolicyConfig,
    PolicyOutput,
    PolicyParams,
    argmax_action,
    init_policy,
    policy_backward,
    policy_forward,
    sample_action,
    top_joint_actions,
    wrap_angle_diff,
)
from .render import backproject, fit_camera_for_object, render_depth, visible_indices

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# reference models and states


@dataclass
class ReferenceModel:
    """A CAD model normalized to a unit-bounding-box-diagonal canonical frame,
    with a sampled surface cloud used for scoring and visualization."""

    model_id: str
    mesh: TriangleMesh
    cloud: PointCloud
    source_diagonal: float
    category: str | None = None


def make_reference_model(model_id: str, mesh: TriangleMesh, n_points: int = 1024,
                         seed: int = 0, category: str | None = None) -> ReferenceModel:
    """Center the mesh on its bbox and scale the bbox diagonal to 1, then
    sample the canonical cloud."""
    lo, hi = mesh.bounds()
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise EmptyCloud(f"model {model_id!r} has a degenerate bounding box")
    center = 0.5 * (lo + hi)
    norm = RigidTransform(np.eye(3), -center / diag, 1.0 / diag)
    mesh_n = mesh.transformed(norm)
    cloud = sample_surface(mesh_n, n_points, seed=seed)
    return ReferenceModel(model_id, mesh_n, cloud, diag, category)


@dataclass(frozen=True)
class State:
    """Concatenated (query, reference) shape embeddings."""

    query_embedding: np.ndarray
    reference_embedding: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.query_embedding, self.reference_embedding])


@dataclass(frozen=True)
class LicpConfig:
    """Knobs for reward computation, rollout, training and inference."""

    action_space: ActionSpace = ActionSpace()
    gamma: float = 0.9
    episode_length: int = 3
    epsilon_start: float = 0.5
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 5000
    baseline_momentum: float = 0.99
    aux_loss_weight: float = 0.1
    value_loss_weight: float = 0.25
    sigma_r: float = 0.02
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(
        learning_rate=0.001, decay_factor=0.95, decay_interval=1000))
    render_size: int = 64
    reward_points: int = 400
    topk: int = 5
    topk_per_axis: int = 5
    grid_dims: tuple = (32, 32, 32)
    hidden: int = 256
    dropout_rate: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        for e in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError("epsilon bounds must be in [0, 1]")

    def epsilon_at(self, step: int) -> float:
        """Linear decay from epsilon_start to epsilon_end."""
        if self.epsilon_decay_steps <= 0:
            return self.epsilon_end
        frac = min(max(step / self.epsilon_decay_steps, 0.0), 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def canonical_camera(cfg: LicpConfig):
    """The fixed camera all reference renders use (unit-diagonal objects)."""
    return fit_camera_for_object(1.0, width=cfg.render_size,
                                 height=cfg.render_size)


def render_reference(ref: ReferenceModel, pose: RigidTransform,
                     cfg: LicpConfig, with_normals: bool = False) -> PointCloud:
    """Depth-render the posed reference from the canonical camera and
    backproject to a partial-view cloud (in the canonical/world frame)."""
    cam = canonical_camera(cfg)
    img = render_depth(ref.mesh.transformed(pose), cam)
    return backproject(img, cam, with_normals=with_normals)


def _embed(cloud: PointCloud, geom: GeomNetParams) -> np.ndarray:
    from .tdf import voxelize_tdf
    vol = voxelize_tdf(cloud, dims=tuple(geom.config.grid_dims))
    _, emb = geom_net_forward(vol.values, geom)
    return emb


def build_state(query: PointCloud, ref: ReferenceModel, ref_pose: RigidTransform,
                geom: GeomNetParams, cfg: LicpConfig = LicpConfig(),
                query_embedding: np.ndarray | None = None) -> State:
    """Embed the query cloud and a render of the reference under ref_pose.

    A precomputed query embedding may be passed to avoid re-voxelizing the
    same query every episode step.
    """
    if len(query) == 0:
        raise EmptyCloud("build_state needs a non-empty query")
    if query_embedding is None:
        query_embedding = _embed(query, geom)
    ref_cloud = render_reference(ref, ref_pose, cfg)
    return State(query_embedding, _embed(ref_cloud, geom))


# ---------------------------------------------------------------------------
# reward


def _downsample(cloud: PointCloud, n: int) -> PointCloud:
    if len(cloud) <= n:
        return cloud
    idx = np.linspace(0, len(cloud) - 1, n).astype(int)
    return cloud.select(idx)


def _unit_normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the bbox diagonal to 1."""
    diag = cloud.bbox_diagonal()
    if diag <= 0:
        raise EmptyCloud("cannot normalize a degenerate cloud")
    return PointCloud((cloud.points - cloud.centroid()) / diag)


def compute_reward(query: PointCloud, ref: ReferenceModel, action,
                   cfg: LicpConfig = LicpConfig()) -> float:
    """ICP matching score between the query and the reference rendered under
    the action's rotation; in [0, 1]. Both clouds are centroid-centered and
    scaled to unit bbox diagonal so the score reflects orientation only.

    The rendered cloud is scored against the query (not the reverse): every
    rendered point should find support in the query, whereas the query may
    legitimately cover surface absent from any single render.
    """
    angles = cfg.action_space.action_to_euler(action)
    pose = RigidTransform.from_euler(angles)
    ref_cloud = render_reference(ref, pose, cfg)
    q = _unit_normalize(_downsample(query, cfg.reward_points))
    r = _unit_normalize(_downsample(ref_cloud, cfg.reward_points))
    icp_cfg = IcpConfig(max_iterations=20, variant="point_to_point",
                        max_correspondence_dist=0.25)
    return float(np.clip(icp_score(r, q, sigma_r=cfg.sigma_r, cfg=icp_cfg),
                         0.0, 1.0))


# ---------------------------------------------------------------------------
# rollouts and the REINFORCE update


@dataclass
class RolloutStep:
    state: State
    action: tuple
    reward: float


@dataclass
class Rollout:
    """One episode: steps plus discounted returns R_t = r_t + gamma*R_{t+1}."""

    steps: list
    gamma: float
    returns: list = field(default_factory=list)

    def compute_returns(self):
        acc = 0.0
        out = []
        for step in reversed(self.steps):
            acc = step.reward + self.gamma * acc
            out.append(acc)
        self.returns = out[::-1]
        return self.returns


@dataclass
class Baseline:
    """Exponential running mean of observed returns (action-independent)."""

    momentum: float = 0.99
    value: float = 0.0
    initialized: bool = False

    def update(self, mean_return: float) -> float:
        if not self.initialized:
            self.value = float(mean_return)
            self.initialized = True
        else:
            self.value = self.momentum * self.value + \
                (1.0 - self.momentum) * float(mean_return)
        return self.value


def reinforce_surrogate(rollouts, outputs, gt_rotation: EulerAngles,
                        cfg: LicpConfig, baseline_value: float) -> float:
    """Scalar surrogate whose gradient is the REINFORCE update.

    Per step t: -log pi(a_t|s_t) * (R_t - b)
                + value_loss_weight * (value_t - R_t)^2
                + aux_loss_weight * ||wrap(rot_t - gt)/180||^2,
    averaged over all steps. Advantages are treated as constants.
    """
    gt = gt_rotation.normalized().as_array()
    total = 0.0
    n = 0
    for rollout, outs in zip(rollouts, outputs):
        if not rollout.returns:
            rollout.compute_returns()
        for step, ret, (out, _cache) in zip(rollout.steps, rollout.returns, outs):
            lp = out.log_probs()
            logp = sum(lp[axis][step.action[axis]] for axis in range(3))
            adv = ret - baseline_value
            total += -logp * adv
            total += cfg.value_loss_weight * (out.value - ret) ** 2
            d = wrap_angle_diff(out.rotation.as_array(), gt) / 180.0
            total += cfg.aux_loss_weight * float(d @ d)
            n += 1
    return total / n


def reinforce_update(rollouts, outputs, gt_rotation: EulerAngles,
                     cfg: LicpConfig, params: PolicyParams,
                     baseline: Baseline):
    """Gradients of the surrogate for one batch of rollouts, plus the updated
    baseline. `outputs` mirrors `rollouts`: per episode, a list of
    (PolicyOutput, forward cache) pairs whose dropout masks are reused so the
    gradient matches finite differences of `reinforce_surrogate` exactly.

    The baseline used for the advantages is the pre-update value; it is then
    advanced with the batch's mean return.
    """
    if not rollouts:
        raise EmptyRollouts("reinforce_update needs at least one rollout")
    gt = gt_rotation.normalized().as_array()
    b = baseline.value if baseline.initialized else 0.0
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    n = sum(len(r.steps) for r in rollouts)
    all_returns = []
    for rollout, outs in zip(rollouts, outputs):
        if not rollout.returns:
            rollout.compute_returns()
        all_returns.extend(rollout.returns)
        for step, ret, (out, cache) in zip(rollout.steps, rollout.returns, outs):
            probs = out.probs()
            adv = ret - b
            d_logits = probs * adv
            for axis in range(3):
                d_logits[axis, step.action[axis]] -= adv
            d_value = 2.0 * cfg.value_loss_weight * (out.value - ret)
            d_rot = 2.0 * cfg.aux_loss_weight * \
                wrap_angle_diff(out.rotation.as_array(), gt) / 180.0 ** 2
            g = policy_backward(d_logits, d_value, d_rot, params, cache)
            for k, v in g.items():
                grads[k] += v
    for k in grads:
        grads[k] /= n
    baseline.update(float(np.mean(all_returns)))
    return grads, baseline


# ---------------------------------------------------------------------------
# training


def policy_state_dim(geom: GeomNetParams) -> int:
    return 2 * geom.config.embed_channels


def run_episode(query: PointCloud, ref: ReferenceModel, geom: GeomNetParams,
                params: PolicyParams, cfg: LicpConfig, epsilon: float,
                rng: np.random.Generator,
                query_embedding: np.ndarray | None = None):
    """Roll out one episode. The reference starts at identity; each step the
    chosen action becomes the new reference pose (absolute orientation bins),
    the scene is re-rendered and the state rebuilt. Returns (Rollout,
    per-step list of (PolicyOutput, cache))."""
    if query_embedding is None:
        query_embedding = _embed(query, geom)
    pose = RigidTransform.identity()
    steps = []
    outputs = []
    for _ in range(cfg.episode_length):
        state = build_state(query, ref, pose, geom, cfg,
                            query_embedding=query_embedding)
        out, cache = policy_forward(state.vector, params, mode="train",
                                    rng=rng, want_cache=True)
        action = sample_action(out, epsilon, rng)
        reward = compute_reward(query, ref, action, cfg)
        steps.append(RolloutStep(state, action, reward))
        outputs.append((out, cache))
        pose = RigidTransform.from_euler(cfg.action_space.action_to_euler(action))
    rollout = Rollout(steps, cfg.gamma)
    rollout.compute_returns()
    return rollout, outputs


def train_licp(dataset, library: dict, geom: GeomNetParams,
               cfg: LicpConfig = LicpConfig(), steps: int = 1000,
               rollouts_per_step: int = 1, seed: int = 0,
               params: PolicyParams | None = None, log_every: int = 50,
               progress=None):
    """REINFORCE training of the rotation policy on a frozen geometry net.

    dataset: list of dicts with keys 'cloud' (query PointCloud in its capture
    frame), 'model_id', and 'rotation' (camera-relative EulerAngles gt).
    library: model_id -> ReferenceModel. Returns (PolicyParams, log rows
    (step, mean_reward, mean_return, epsilon, lr)).
    """
    if not dataset:
        raise EmptyDataset("train_licp needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    if params is None:
        pcfg = PolicyConfig(policy_state_dim(geom), hidden=cfg.hidden,
                            dropout_rate=cfg.dropout_rate,
                            bins_per_axis=cfg.action_space.bins_per_axis)
        params = init_policy(pcfg, seed=seed)
    baseline = Baseline(momentum=cfg.baseline_momentum)
    q_emb_cache = {}
    log = []
    recent_r, recent_ret = [], []
    for step_i in range(steps):
        eps = cfg.epsilon_at(step_i)
        i = int(rng.integers(len(dataset)))
        sample = dataset[i]
        ref = library[sample["model_id"]]
        if i not in q_emb_cache:
            q_emb_cache[i] = _embed(sample["cloud"], geom)
        batch, batch_outs = [], []
        for _ in range(rollouts_per_step):
            rollout, outs = run_episode(sample["cloud"], ref, geom, params,
                                        cfg, eps, rng,
                                        query_embedding=q_emb_cache[i])
            batch.append(rollout)
            batch_outs.append(outs)
        grads, baseline = reinforce_update(batch, batch_outs,
                                           sample["rotation"], cfg, params,
                                           baseline)
        params = PolicyParams(params.config,
                              sgd_step(params.arrays, grads, cfg.sgd, step_i))
        rewards = [s.reward for r in batch for s in r.steps]
        returns = [ret for r in batch for ret in r.returns]
        recent_r.extend(rewards)
        recent_ret.extend(returns)
        if (step_i + 1) % log_every == 0 or step_i == steps - 1:
            row = (step_i, float(np.mean(recent_r)), float(np.mean(recent_ret)),
                   eps, cfg.sgd.lr_at(step_i))
            log.append(row)
            recent_r, recent_ret = [], []
            if progress is not None:
                progress(row)
            else:
                logger.info("licp step %d: reward %.4f return %.4f eps %.3f",
                            row[0], row[1], row[2], row[3])
    return params, log


def training_log_to_csv(log, path):
    with open(path, "w") as fh:
        fh.write("step,mean_reward,mean_return,epsilon,lr\n")
        for step, r, ret, eps, lr in log:
            fh.write(f"{step},{r:.9g},{ret:.9g},{eps:.9g},{lr:.9g}\n")


# ---------------------------------------------------------------------------
# inference


def licp_align(query: PointCloud, ref: ReferenceModel, geom: GeomNetParams,
               policy: PolicyParams, cfg: LicpConfig = LicpConfig(),
               refine: bool = True, rescore: bool = True):
    """Full alignment of the reference onto the query segment.

    Translation comes from the query centroid, scale from the bbox-diagonal
    ratio, rotation from the policy (optionally top-k re-scored by the actual
    reward), followed by point-to-plane ICP refinement. Returns the composed
    RigidTransform (reference canonical frame -> query frame) and a
    diagnostics dict.
    """
    if len(query) == 0:
        raise EmptyCloud("licp_align needs a non-empty query")
    state = build_state(query, ref, RigidTransform.identity(), geom, cfg)
    out = policy_forward(state.vector, policy, mode="eval")
    best = argmax_action(out)
    diagnostics = {"argmax_action": list(best)}
    if rescore and cfg.topk > 1:
        cands = top_joint_actions(out, cfg.topk, cfg.topk_per_axis)
        scored = [(compute_reward(query, ref, a, cfg), a) for a, _ in cands]
        scored.sort(key=lambda c: (-c[0], c[1]))
        diagnostics["candidates"] = [
            {"action": list(a), "reward": r} for r, a in scored]
        best = scored[0][1]
        diagnostics["chosen_reward"] = scored[0][0]
    else:
        diagnostics["chosen_reward"] = compute_reward(query, ref, best, cfg)
    angles = cfg.action_space.action_to_euler(best)
    diagnostics["chosen_action"] = list(best)
    diagnostics["rotation_degrees"] = list(angles.as_array())
    scale = query.bbox_diagonal() / ref.cloud.bbox_diagonal()
    init = RigidTransform(euler_to_rotation(angles),
                          query.centroid(), scale)
    transform = init
    if refine:
        tgt = query
        if tgt.normals is None:
            try:
                tgt = estimate_normals(tgt, k=12, viewpoint=np.zeros(3))
            except (DegenerateNeighborhood, ValueError):
                tgt = None
        if tgt is not None:
            # refine with only the reference points visible under the chosen
            # rotation; hidden-side points would drag the fit off the partial
            # query
            pose = RigidTransform.from_euler(angles)
            cam = canonical_camera(cfg)
            vis = visible_indices(
                PointCloud(pose.apply_points(ref.cloud.points)),
                ref.mesh.transformed(pose), cam, tol=0.02)
            src = ref.cloud.select(vis) if len(vis) >= 10 else ref.cloud
            icp_cfg = IcpConfig(max_iterations=30, variant="point_to_plane",
                                max_correspondence_dist=0.2 * max(
                                    query.bbox_diagonal(), 1e-6),
                                reject_opposite_normals=True)
            result = icp_refine(src, tgt, init, icp_cfg)
            transform = result.transform
            diagnostics["refinement"] = result.to_dict()
    diagnostics["scale"] = transform.scale
    return transform, diagnostics


# ---------------------------------------------------------------------------
# surface-weight visualization


def surface_weights(query: PointCloud, ref: ReferenceModel,
                    geom: GeomNetParams, policy: PolicyParams,
                    cfg: LicpConfig = LicpConfig(), k: int | None = None) -> np.ndarray:
    """Per-point importance weights on the reference cloud.

    For each of the policy's top-k actions: the reference points visible from
    the canonical camera under that rotation accumulate
    joint_prob(action) * value(state after the action); weights are then
    min-max normalized to [0, 1].
    """
    if k is None:
        k = cfg.topk
    state = build_state(query, ref, RigidTransform.identity(), geom, cfg)
    out = policy_forward(state.vector, policy, mode="eval")
    cam = canonical_camera(cfg)
    weights = np.zeros(len(ref.cloud))
    q_emb = state.query_embedding
    for action, joint in top_joint_actions(out, k, cfg.topk_per_axis):
        pose = RigidTransform.from_euler(cfg.action_space.action_to_euler(action))
        next_state = build_state(query, ref, pose, geom, cfg,
                                 query_embedding=q_emb)
        value = policy_forward(next_state.vector, policy, mode="eval").value
        rotated = PointCloud(pose.apply_points(ref.cloud.points))
        vis = visible_indices(rotated, ref.mesh.transformed(pose), cam,
                              tol=0.02)
        weights[vis] += joint * max(value, 0.0)
    lo, hi = weights.min(), weights.max()
    if hi - lo < 1e-12:
        return np.ones_like(weights)
    return (weights - lo) / (hi - lo)


def weights_to_colors(weights: np.ndarray) -> np.ndarray:
    """Blue (0) -> red (1) colormap as uint8 RGB."""
    w = np.clip(np.asarray(weights, dtype=float), 0.0, 1.0)
    r = np.round(255 * w)
    b = np.round(255 * (1.0 - w))
    g = np.round(64 * (1.0 - np.abs(2 * w - 1.0)))
    return np.stack([r, g, b], axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# policy checkpointing


def save_policy(path, params: PolicyParams, cfg: LicpConfig | None = None,
                step: int | None = None):
    from .nn import save_checkpoint
    meta = {"policy_config": params.config.to_dict()}
    if cfg is not None:
        meta["action_space"] = cfg.action_space.to_dict()
    if step is not None:
        meta["step"] = step
    save_checkpoint(path, params.arrays, meta=meta)


def load_policy(path) -> PolicyParams:
    from .nn import load_checkpoint
    arrays, meta = load_checkpoint(path)
    return PolicyParams(PolicyConfig.from_dict(meta["policy_config"]), arrays)
