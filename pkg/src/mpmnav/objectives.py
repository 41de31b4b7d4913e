"""Training losses: masked path modeling, VLN imitation and actor-critic,
auxiliary pretraining tasks, and rollout generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agent import Conditioning, NavAgent, StepOutput, featurize, trajectory_headings
from .data import MASK_ID, VOCAB, MaskedPath, VLNEpisode
from .metrics import SUCCESS_RADIUS
from .neuralcore import nn
from .neuralcore import tensor as T
from .neuralcore.tensor import Tensor, no_grad
from .world import K_VIEWS, STOP, bin_heading, geodesic_distance, wrap_angle

STEP_CAP = 20
TERMINAL_BONUS = 2.0
GAMMA = 0.9
VALUE_COEF = 0.5
ENTROPY_COEF = 0.01


class ObjectiveError(ValueError):
    pass


def teacher_targets(out: StepOutput, trajectories) -> np.ndarray:
    """Candidate index of the ground-truth action for every row:
    the next node of the trajectory, or STOP at its last node."""
    idx = np.empty(len(out.rows), dtype=np.int64)
    for r, (b, t) in enumerate(out.rows):
        nodes = trajectories[b][1]
        if t + 1 < len(nodes):
            hit = np.flatnonzero(out.cand_target[r] == nodes[t + 1])
            if hit.size != 1:
                raise ObjectiveError(f"trajectory step {nodes[t]} -> {nodes[t + 1]} is not a candidate")
            idx[r] = hit[0]
        else:
            idx[r] = int(out.cand_mask[r].sum()) - 1
    return idx


def teacher_forced_loss(agent: NavAgent, cond, trajectories, rows=None) -> tuple[Tensor, StepOutput, np.ndarray]:
    out = agent.forward(cond, trajectories, rows)
    tgt = teacher_targets(out, trajectories)
    return nn.cross_entropy(out.action_logits, tgt, out.cand_mask), out, tgt


def _env_for(envs: dict, env_id: str):
    try:
        return envs[env_id]
    except KeyError:
        raise ObjectiveError(f"unknown environment {env_id!r}") from None


def loss_mpm(batch: list[MaskedPath], agent: NavAgent, envs: dict) -> Tensor:
    """Reconstruct the full path's actions from the facing views of its
    retained viewpoints; history is the ground-truth prefix."""
    if not batch:
        raise ObjectiveError("empty MPM batch")
    trajs = [(_env_for(envs, m.env_id), list(m.source.nodes)) for m in batch]
    cond = agent.encode_masked_paths(envs, batch)
    return teacher_forced_loss(agent, cond, trajs)[0]


def loss_vln_il(batch: list[VLNEpisode], agent: NavAgent, envs: dict) -> Tensor:
    if not batch:
        raise ObjectiveError("empty VLN batch")
    trajs = [(_env_for(envs, e.env_id), list(e.path.nodes)) for e in batch]
    cond = agent.encode_instruction([e.instruction for e in batch])
    return teacher_forced_loss(agent, cond, trajs)[0]


def mpm_accuracy(batch: list[MaskedPath], agent: NavAgent, envs: dict) -> float:
    """Teacher-forced next-action accuracy on masked paths (eval mode)."""
    prev, agent.rng = agent.rng, None
    try:
        with no_grad():
            trajs = [(envs[m.env_id], list(m.source.nodes)) for m in batch]
            out = agent.forward(agent.encode_masked_paths(envs, batch), trajs)
            tgt = teacher_targets(out, trajs)
            pred = masked_argmax(out.action_logits.data, out.cand_mask)
    finally:
        agent.rng = prev
    return float(np.mean(pred == tgt))


def masked_argmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.argmax(np.where(mask, logits, -np.inf), axis=-1)


# rollouts


@dataclass
class Rollout:
    episode_id: str
    env_id: str
    goal: int
    nodes: list[int]  # visited, starting node first
    actions: list[int] = field(default_factory=list)  # candidate index per step
    targets: list[int] = field(default_factory=list)  # node id or STOP per step
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    stopped: bool = False

    @property
    def steps(self) -> int:
        return len(self.actions)


def step_reward(env, nodes_before_after, goal: int, final: bool) -> float:
    s, s_next = nodes_before_after
    r = geodesic_distance(env, s, goal) - geodesic_distance(env, s_next, goal)
    if final:
        r += TERMINAL_BONUS if geodesic_distance(env, s_next, goal) <= SUCCESS_RADIUS else -TERMINAL_BONUS
    return r


def rollout_batch(
    episodes: list[VLNEpisode],
    agent: NavAgent,
    envs: dict,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    policy=None,
) -> list[Rollout]:
    """Run the agent from each episode's start on its own predictions.

    `policy(episode, visited)` replaces the model with an external actor
    returning the next node or STOP (used for oracle checks).
    """
    if mode not in ("greedy", "sample"):
        raise ObjectiveError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ObjectiveError("sample mode needs a random generator")
    rolls = [Rollout(e.id, e.env_id, e.goal, [e.start]) for e in episodes]
    prev_rng, agent.rng = agent.rng, None
    cond = None
    cache: dict = {}
    try:
        with no_grad():
            if policy is None:
                cond = agent.encode_instruction([e.instruction for e in episodes])
            active = list(range(len(episodes)))
            for step in range(STEP_CAP):
                if not active:
                    break
                trajs = [(envs[episodes[i].env_id], rolls[i].nodes) for i in active]
                feats = featurize(trajs)
                if policy is None:
                    sub = _subset_cond(cond, active)
                    rows = np.array([(k, len(rolls[i].nodes) - 1) for k, i in enumerate(active)])
                    out = agent.forward(sub, trajs, rows, feats, cache)
                    logits = out.action_logits.data
                    cmask = out.cand_mask
                    ctarget = out.cand_target
                    values = out.value_estimate.data
                else:
                    last = feats.offsets + feats.lengths - 1
                    cmask, ctarget = feats.cand_mask[last], feats.cand_target[last]
                    logits = values = None
                still = []
                for k, i in enumerate(active):
                    roll, ep = rolls[i], episodes[i]
                    n_c = int(cmask[k].sum())
                    if policy is not None:
                        want = policy(ep, list(roll.nodes))
                        a = n_c - 1 if want == STOP else int(np.flatnonzero(ctarget[k][: n_c - 1] == want)[0])
                        logp, v = 0.0, 0.0
                    else:
                        lg = logits[k, :n_c]
                        p = np.exp(lg - lg.max())
                        p /= p.sum()
                        a = int(np.argmax(lg)) if mode == "greedy" else int(rng.choice(n_c, p=p))
                        logp, v = float(np.log(p[a])), float(values[k])
                    target = STOP if a == n_c - 1 else int(ctarget[k][a])
                    env = envs[ep.env_id]
                    here = roll.nodes[-1]
                    there = here if target == STOP else target
                    final = target == STOP or step == STEP_CAP - 1
                    roll.actions.append(a)
                    roll.targets.append(target)
                    roll.log_probs.append(logp)
                    roll.values.append(v)
                    roll.rewards.append(step_reward(env, (here, there), ep.goal, final))
                    if target == STOP:
                        roll.stopped = True
                    else:
                        roll.nodes.append(target)
                        if not final:
                            still.append(i)
                active = still
    finally:
        agent.rng = prev_rng
    return rolls


def _subset_cond(cond, idx):
    if len(idx) == len(cond):
        return cond
    return Conditioning(Tensor(cond.states.data[idx]), cond.mask[idx], cond.kind)


def rollout_episode(episode: VLNEpisode, agent: NavAgent, envs: dict, mode: str = "greedy", rng=None) -> Rollout:
    return rollout_batch([episode], agent, envs, mode, rng)[0]


def discounted_returns(rewards, gamma: float = GAMMA) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class A2CTerms:
    policy: Tensor
    value: Tensor
    entropy: Tensor
    combined: Tensor


def a2c_loss(log_probs: Tensor, entropy: Tensor, values: Tensor, returns: np.ndarray) -> A2CTerms:
    """Advantage actor-critic over flattened steps.

    The advantage R - v is a constant in the policy term; the value term
    regresses v onto R.
    """
    adv = returns - values.data
    policy = -T.mean(log_probs * adv)
    resid = Tensor(returns) - values
    value = T.mean(resid * resid)
    ent = T.mean(entropy)
    return A2CTerms(policy, value, ent, policy + value * VALUE_COEF - ent * ENTROPY_COEF)


def loss_vln_rl(rollouts: list[Rollout], episodes: list[VLNEpisode], agent: NavAgent, envs: dict, gamma: float = GAMMA) -> A2CTerms:
    """Recompute log-probabilities and values on the sampled trajectories
    with gradients, then apply the actor-critic loss."""
    if not rollouts:
        raise ObjectiveError("empty rollout batch")
    by_id = {e.id: e for e in episodes}
    eps = [by_id[r.episode_id] for r in rollouts]
    trajs = [(envs[r.env_id], r.nodes) for r in rollouts]
    rows = np.array([(b, t) for b, r in enumerate(rollouts) for t in range(r.steps)], dtype=np.int64)
    cond = agent.encode_instruction([e.instruction for e in eps])
    out = agent.forward(cond, trajs, rows)
    actions = np.array([a for r in rollouts for a in r.actions])
    logp = T.log_softmax(out.action_logits, -1, out.cand_mask)
    picked = T.getitem(logp, (np.arange(len(actions)), actions))
    # H = logsumexp(x) - E_p[x], with logsumexp recovered from the picked entry
    rix = np.arange(len(actions))
    lse = T.getitem(out.action_logits, (rix, actions)) - picked
    probs = T.softmax(out.action_logits, -1, out.cand_mask)
    expected = T.tsum(probs * out.action_logits, axis=-1)
    ent_rows = lse - expected
    returns = np.concatenate([discounted_returns(r.rewards, gamma) for r in rollouts])
    return a2c_loss(picked, ent_rows, out.value_estimate, returns)


def combine_finetune(l_il, l_rl, l_mpm, rl_weight: float = 1.0, mpm_weight: float = 1.0):
    for name, v in (("il", l_il), ("rl", l_rl), ("mpm", l_mpm)):
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise ObjectiveError(f"non-finite {name} loss")
    return (l_il + l_rl * rl_weight) + l_mpm * mpm_weight


# auxiliary pretraining tasks


def _trajs(batch, envs):
    return [(_env_for(envs, e.env_id), list(e.path.nodes)) for e in batch]


def _final_rows(batch) -> np.ndarray:
    return np.array([(b, e.path.n - 1) for b, e in enumerate(batch)], dtype=np.int64)


def mask_tokens(instr, rng: np.random.Generator, mask_prob: float = 0.15) -> tuple[list[int], list[int]]:
    """Replace a random subset of non-control tokens by [MASK]; resample
    until at least one position is masked."""
    control = VOCAB.control_ids
    eligible = [i for i, t in enumerate(instr) if t not in control]
    if not eligible:
        raise ObjectiveError("instruction has no maskable tokens")
    while True:
        chosen = [i for i in eligible if rng.random() < mask_prob]
        if chosen:
            break
    ids = list(instr)
    for i in chosen:
        ids[i] = MASK_ID
    return ids, chosen


def loss_mlm(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng, mask_prob: float = 0.15) -> Tensor:
    if not batch:
        raise ObjectiveError("empty batch")
    masked, positions = zip(*(mask_tokens(e.instruction, rng, mask_prob) for e in batch))
    cond = agent.encode_instruction(list(masked))
    out = agent.forward(cond, _trajs(batch, envs), _final_rows(batch))
    logits = agent.mlm_head(out.cond_states)  # (B, L, V)
    bi = np.array([b for b, ps in enumerate(positions) for _ in ps])
    pi = np.array([p for ps in positions for p in ps])
    target = np.array([batch[b].instruction[p] for b, p in zip(bi, pi)])
    return nn.cross_entropy(T.getitem(logits, (bi, pi)), target)


def derangement(n: int, rng) -> np.ndarray:
    if n < 2:
        raise ObjectiveError("instruction-trajectory matching needs a batch of at least 2")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def itm_logits(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng) -> tuple[Tensor, np.ndarray]:
    perm = derangement(len(batch), rng)
    paired = list(batch) + [batch[j] for j in perm]
    instrs = [e.instruction for e in batch] * 2
    labels = np.concatenate([np.ones(len(batch)), np.zeros(len(batch))])
    cond = agent.encode_instruction(instrs)
    out = agent.forward(cond, _trajs(paired, envs), _final_rows(paired))
    return agent.itm_head(out.fused_pooled), labels


def loss_itm(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng) -> Tensor:
    logits, labels = itm_logits(batch, agent, envs, rng)
    return nn.binary_cross_entropy_with_logits(logits, labels)


def _sampled_rows(batch, rng, include_stop: bool) -> np.ndarray:
    return np.array(
        [(b, int(rng.integers(e.path.n if include_stop else e.path.n - 1))) for b, e in enumerate(batch)],
        dtype=np.int64,
    )


def loss_sap(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng) -> Tensor:
    trajs = _trajs(batch, envs)
    cond = agent.encode_instruction([e.instruction for e in batch])
    return teacher_forced_loss(agent, cond, trajs, _sampled_rows(batch, rng, True))[0]


def angle_targets(env, nodes, t) -> np.ndarray:
    """(sin, cos) of relative heading and elevation of the move nodes[t] -> nodes[t+1]."""
    heads = trajectory_headings(env, nodes)
    theta = wrap_angle(env.edge_heading(nodes[t], nodes[t + 1]) - heads[t])
    phi = env.edge_elevation(nodes[t], nodes[t + 1])
    return np.array([math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)])


def sincos_pairs(angles: Tensor) -> Tensor:
    """(N, 2) angles -> (N, 4) as (sin a0, cos a0, sin a1, cos a1)."""
    a0, a1 = angles[:, 0], angles[:, 1]
    return T.stack([T.sin(a0), T.cos(a0), T.sin(a1), T.cos(a1)], axis=1)


def loss_sar(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng) -> Tensor:
    trajs = _trajs(batch, envs)
    rows = _sampled_rows(batch, rng, False)
    cond = agent.encode_instruction([e.instruction for e in batch])
    out = agent.forward(cond, trajs, rows)
    pred = sincos_pairs(agent.sar_head(out.fused_pooled))
    target = np.stack([angle_targets(trajs[b][0], trajs[b][1], t) for b, t in rows])
    diff = pred - target
    return T.mean(diff * diff)


SPREL_VARIANTS = ("visual", "angle", "both")


def sprel_inputs(batch, envs, rng):
    """Pick a panorama from each path, two of its views and an input variant."""
    views, angles, pairs, targets = [], [], [], []
    for e in batch:
        env = _env_for(envs, e.env_id)
        node = int(e.path.nodes[int(rng.integers(e.path.n))])
        variant = SPREL_VARIANTS[int(rng.integers(3))]
        v = np.array(env.features[node])
        a = np.stack([[math.sin(bin_heading(k)), math.cos(bin_heading(k)), 0.0, 1.0] for k in range(K_VIEWS)])
        if variant == "visual":
            a = np.zeros_like(a)
        elif variant == "angle":
            v = np.zeros_like(v)
        i, j = (int(x) for x in rng.integers(K_VIEWS, size=2))
        delta = bin_heading(j) - bin_heading(i)
        views.append(v)
        angles.append(a)
        pairs.append((i, j))
        targets.append([math.sin(delta), math.cos(delta)])
    return np.stack(views), np.stack(angles), np.array(pairs), np.array(targets)


def loss_sprel(batch: list[VLNEpisode], agent: NavAgent, envs: dict, rng) -> Tensor:
    views, angles, pairs, targets = sprel_inputs(batch, envs, rng)
    states = agent.encode_panoramas(views, angles)
    idx = np.arange(len(pairs))
    pred = agent.sprel_head(T.getitem(states, (idx, pairs[:, 0])), T.getitem(states, (idx, pairs[:, 1])))
    diff = pred - targets
    return T.mean(diff * diff)


@dataclass
class LossReport:
    losses: dict[str, float]
    combined: float
    grad_norm: float

    @classmethod
    def build(cls, losses: dict, weights: dict, grad_norm: float) -> "LossReport":
        """Weighted sum of per-task losses; refuses non-finite terms."""
        vals = {k: (v.item() if isinstance(v, Tensor) else float(v)) for k, v in losses.items()}
        bad = [k for k, v in vals.items() if not math.isfinite(v)]
        if bad or not math.isfinite(grad_norm):
            raise ObjectiveError(f"non-finite loss terms: {bad or ['grad_norm']}")
        combined = sum(weights.get(k, 1.0) * v for k, v in vals.items())
        return cls(vals, combined, float(grad_norm))
