"""View selection over the rig's 8-neighborhood.

Baselines (random, oneway, greedy1, oracle) and a learned policy trained with
REINFORCE. The learned policy sees the memory state average-pooled to 4^3 and
the current RGB image pooled to 8x8, concatenated and mapped linearly to 8
action logits; invalid moves are masked out of the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .memory import Episode, MemoryState, ReconModel
from .metrics import voxel_iou
from .rig import NUM_ACTIONS, ViewIndex, action_mask, step_view
from .scenes import VoxelScene

POLICY_KINDS = ("random", "oneway", "greedy1", "oracle", "learned")
HORIZON = 4
ORACLE_SAMPLES = 100
POOL_3D = 4
POOL_2D = 8


class PolicyError(ValueError):
    pass


# --- the learned policy ----------------------------------------------------------

def feature_size(hidden: int) -> int:
    return hidden * POOL_3D**3 + POOL_2D * POOL_2D * 3


def pool_cube(h: np.ndarray, size: int) -> np.ndarray:
    C, M = h.shape[0], h.shape[1]
    f = M // size
    return h.reshape(C, size, f, size, f, size, f).mean(axis=(2, 4, 6))


def pool_image(rgb: np.ndarray, size: int) -> np.ndarray:
    H, W, _ = rgb.shape
    return rgb.reshape(size, H // size, size, W // size, 3).mean(axis=(1, 3))


def policy_features(h: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    return np.concatenate([pool_cube(h, POOL_3D).ravel(), pool_image(rgb, POOL_2D).ravel()]).astype(np.float64)


def init_policy(hidden: int, dtype=np.float64) -> dict[str, Tensor]:
    """Zero weights: the initial policy is uniform over valid moves."""
    F = feature_size(hidden)
    return {
        "w": Tensor(np.zeros((NUM_ACTIONS, F), dtype=dtype), requires_grad=True, name="w"),
        "b": Tensor(np.zeros(NUM_ACTIONS, dtype=dtype), requires_grad=True, name="b"),
    }


def action_log_probs(params: dict[str, Tensor], features: np.ndarray, valid: np.ndarray) -> Tensor:
    return ag.log_softmax_masked(ag.linear(Tensor(features), params["w"], params["b"]), valid)


def action_probs(params: dict[str, Tensor], features: np.ndarray, valid: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        lp = action_log_probs(params, features, valid).data.astype(np.float64)
    return np.where(valid, np.exp(lp), 0.0)


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from one uniform; deterministic given the generator state."""
    cdf = np.cumsum(probs)
    x = rng.random() * cdf[-1]
    a = int(np.searchsorted(cdf, x, side="right"))
    a = min(a, len(probs) - 1)
    while probs[a] <= 0:  # only reachable through rounding at the top end
        a -= 1
    return a


def act(
    params: dict[str, Tensor],
    state: MemoryState,
    rgb: np.ndarray,
    valid: np.ndarray,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> tuple[int, np.ndarray]:
    """Pick a move; returns (action, probabilities over all 8 actions)."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise PolicyError("no valid action")
    probs = action_probs(params, policy_features(state.h.data, rgb), valid)
    if greedy:
        return int(np.argmax(np.where(valid, probs, -1.0))), probs
    if rng is None:
        raise PolicyError("sampling needs a random generator")
    return sample_action(probs, rng), probs


# --- episodes --------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    scene_id: str
    kind: str
    views: list[ViewIndex]
    actions: list[int]
    ious: list[float]
    rewards: list[float] = field(init=False)
    ret: float = field(init=False)

    def __post_init__(self):
        self.rewards = [b - a for a, b in zip(self.ious, self.ious[1:])]
        self.ret = self.ious[-1] - self.ious[0]

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "policy": self.kind,
            "views": [str(v) for v in self.views],
            "actions": self.actions,
            "iou": self.ious,
            "rewards": self.rewards,
            "return": self.ret,
        }


@dataclass
class StepTrace:
    """What the learned policy saw and did, for the gradient estimate."""

    features: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


class _Walker:
    """Incremental evaluation of trajectories with memoized prefixes (noise-free only)."""

    def __init__(self, model: ReconModel, ep: Episode):
        self.model = model
        self.ep = ep
        self.memo: dict[tuple, tuple[MemoryState, float]] = {}

    def state(self, prefix: tuple[ViewIndex, ...]) -> tuple[MemoryState, float]:
        hit = self.memo.get(prefix)
        if hit is not None:
            return hit
        prev = self.model.initial() if len(prefix) == 1 else self.state(prefix[:-1])[0]
        st = self.model.advance(prev, self.ep, prefix[-1])
        iou = voxel_iou(self.model.decode(st).occupancy.data, self.ep.gt_occupancy)
        self.memo[prefix] = (st, iou)
        return st, iou


def _oneway_fallback(view: ViewIndex, direction: int) -> int:
    """Nearest valid action to `direction` in circular order; ties go to the lower index."""
    valid = action_mask(view)
    if valid[direction]:
        return direction
    for off in range(1, NUM_ACTIONS // 2 + 1):
        cands = sorted({(direction - off) % NUM_ACTIONS, (direction + off) % NUM_ACTIONS})
        for a in cands:
            if valid[a]:
                return a
    raise PolicyError("no valid action")


def _random_walk(start: ViewIndex, rng: np.random.Generator, length: int) -> tuple[list[ViewIndex], list[int]]:
    views, actions = [start], []
    while len(views) < length:
        valid = np.flatnonzero(action_mask(views[-1]))
        a = int(valid[rng.integers(len(valid))])
        actions.append(a)
        views.append(step_view(views[-1], a))
    return views, actions


def plan_trajectory(
    kind: str,
    model: ReconModel,
    ep: Episode,
    start: ViewIndex,
    rng: np.random.Generator,
    policy: dict[str, Tensor] | None = None,
    horizon: int = HORIZON,
    greedy_policy: bool = False,
    trace: StepTrace | None = None,
    walker: _Walker | None = None,
) -> tuple[list[ViewIndex], list[int]]:
    """Choose the views of one episode. The episode must be noise-free."""
    if ep.noise.active:
        raise PolicyError("trajectories are planned on noise-free episodes")
    if kind not in POLICY_KINDS:
        raise PolicyError(f"unknown policy kind {kind!r}; choose from {', '.join(POLICY_KINDS)}")
    if kind == "random":
        return _random_walk(start, rng, horizon)
    if kind == "oneway":
        valid = np.flatnonzero(action_mask(start))
        direction = int(valid[rng.integers(len(valid))])
        views, actions = [start], []
        while len(views) < horizon:
            a = _oneway_fallback(views[-1], direction)
            actions.append(a)
            views.append(step_view(views[-1], a))
        return views, actions

    walker = walker or _Walker(model, ep)
    if kind == "oracle":
        best = None
        for _ in range(ORACLE_SAMPLES):
            views, actions = _random_walk(start, rng, horizon)
            _, last = walker.state(tuple(views))
            _, first = walker.state((start,))
            ret = last - first
            if best is None or ret > best[0]:
                best = (ret, views, actions)
        return best[1], best[2]

    views, actions = [start], []
    while len(views) < horizon:
        cur = views[-1]
        valid = action_mask(cur)
        if kind == "greedy1":
            _, base = walker.state(tuple(views))
            best_a, best_gain = None, -math.inf
            for a in np.flatnonzero(valid):
                _, iou = walker.state(tuple(views) + (step_view(cur, int(a)),))
                if iou - base > best_gain:
                    best_a, best_gain = int(a), iou - base
            a = best_a
        else:
            if policy is None:
                raise PolicyError("learned policy needs parameters")
            state, _ = walker.state(tuple(views))
            rgb = ep.view(cur).rgb
            if trace is not None:
                trace.features.append(policy_features(state.h.data, rgb))
                trace.masks.append(valid)
            a, _ = act(policy, state, rgb, valid, rng, greedy=greedy_policy)
        actions.append(a)
        views.append(step_view(cur, a))
    return views, actions


def score_trajectory(model: ReconModel, ep: Episode, views: list[ViewIndex], walker: _Walker | None = None) -> list[float]:
    """Per-view occupancy IoU along a trajectory.

    With egomotion noise every view must be processed once, in order, so the
    memo is bypassed.
    """
    if ep.noise.active or walker is None:
        _, outs = model.run(ep, views)
        return [voxel_iou(o.occupancy.data, ep.gt_occupancy) for o in outs]
    return [walker.state(tuple(views[: t + 1]))[1] for t in range(len(views))]


def rollout_policy(
    kind: str,
    scene: VoxelScene,
    model: ReconModel,
    start: ViewIndex,
    rng: np.random.Generator,
    policy: dict[str, Tensor] | None = None,
    scene_id: str = "",
    horizon: int = HORIZON,
    greedy_policy: bool = False,
) -> EpisodeRecord:
    ep = model.episode(scene, start, key=scene_id or id(scene))
    walker = _Walker(model, ep)
    views, actions = plan_trajectory(kind, model, ep, start, rng, policy, horizon, greedy_policy, walker=walker)
    return EpisodeRecord(scene_id, kind, views, actions, score_trajectory(model, ep, views, walker))


# --- REINFORCE ----------------------------------------------------------------------

@dataclass
class Trajectory:
    """One sampled episode as seen by the gradient estimator."""

    features: list[np.ndarray]
    masks: list[np.ndarray]
    actions: list[int]
    rewards: list[float]  # reward after each action


def returns_to_go(rewards: list[float]) -> np.ndarray:
    return np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1]


def reinforce_gradient(
    params: dict[str, Tensor],
    batch: list[Trajectory],
    entropy_coef: float = 0.0,
    baseline: bool = True,
) -> dict:
    """Accumulate the ascent direction into params[*].grad.

    mean over episodes of sum_t grad log pi(a_t | s_t) * A_t (+ entropy bonus),
    with A_t = return-to-go minus (optionally) the mean return-to-go at t of
    the other episodes in the batch. Leaving the episode itself out keeps the
    estimate unbiased; it equals B/(B-1) times the deviation from the full
    batch mean.
    """
    if not batch:
        raise PolicyError("empty batch")
    T = len(batch[0].actions)
    if any(len(tr.actions) != T for tr in batch):
        raise PolicyError("trajectories in a batch must share a horizon")
    G = np.stack([returns_to_go(tr.rewards) for tr in batch])
    B = len(batch)
    if baseline and B > 1:
        adv = (G - G.mean(axis=0, keepdims=True)) * (B / (B - 1))
    else:
        adv = G
    objective = 0.0
    entropy = 0.0
    for b, tr in enumerate(batch):
        for t in range(T):
            lp = action_log_probs(params, tr.features[t], tr.masks[t])
            term = ag.pick(lp, tr.actions[t]) * float(adv[b, t] / B)
            if entropy_coef:
                ent = ag.masked_entropy(lp, tr.masks[t])
                entropy += float(ent.data) / (B * T)
                term = term + ent * (entropy_coef / B)
            objective += float(term.data)
            term.backward()
    if not math.isfinite(objective):
        raise PolicyError("non-finite policy objective")
    return {"objective": objective, "entropy": entropy, "mean_return": float(G[:, 0].mean())}


@dataclass
class PolicyTrainConfig:
    updates: int = 100
    batch: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    entropy_coef: float = 0.01
    horizon: int = HORIZON


def train_reinforce(
    model: ReconModel,
    policy: dict[str, Tensor],
    scenes: list[VoxelScene],
    pc: PolicyTrainConfig,
    rng: np.random.Generator,
    start_azims: list[int] | None = None,
    on_update=None,
) -> list[dict]:
    """Policy-gradient training with the reconstruction model frozen.

    Episodes start at elevation 1 and an azimuth drawn per episode (or taken
    from `start_azims[i]` for scene i); rewards are per-step occupancy IoU gains.
    """
    if not scenes:
        raise PolicyError("no training scenes")
    opt = ag.SGD(policy, lr=pc.lr, momentum=pc.momentum, ascent=True)
    curve = []
    for u in range(pc.updates):
        batch = []
        for _ in range(pc.batch):
            i = int(rng.integers(len(scenes)))
            azim = start_azims[i] if start_azims is not None else int(rng.integers(18))
            start = ViewIndex(1, azim)
            ep = model.episode(scenes[i], start, key=("train", i))
            trace = StepTrace()
            walker = _Walker(model, ep)
            views, actions = plan_trajectory("learned", model, ep, start, rng, policy, pc.horizon, trace=trace, walker=walker)
            ious = score_trajectory(model, ep, views, walker)
            batch.append(Trajectory(trace.features, trace.masks, actions, [b - a for a, b in zip(ious, ious[1:])]))
        opt.zero_grad()
        stats = reinforce_gradient(policy, batch, pc.entropy_coef)
        norm = opt.step()
        if not math.isfinite(norm):
            raise PolicyError(f"non-finite policy gradient at update {u}")
        rec = {"update": u, **{k: round(v, 8) for k, v in stats.items()}, "grad_norm": round(norm, 8)}
        curve.append(rec)
        if on_update is not None:
            on_update(rec)
    return curve
