"""Group-relative policy optimization on a toy softmax policy.

Group advantages, dynamic filtering of zero-signal groups, and the
token-level clipped surrogate loss with analytic gradients. The toy policy
is linear-softmax over a finite symbol alphabet, small enough that every
gradient can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import Trajectory

ADVANTAGE_EPS = 1e-6
DEFAULT_CLIP_EPS = 0.2


class NonFiniteLoss(Exception):
    """A taken action had -inf log-probability or the loss overflowed."""


def group_advantages(
    rewards: list[float],
    eps: float = ADVANTAGE_EPS,
    normalize_std: bool = True,
) -> tuple[list[float], bool]:
    """Standardize rewards within a group: (r - mean) / max(std, eps).

    Population std; eps only guards the degenerate (zero-variance) regime so
    standardization stays exactly invariant under reward shift and positive
    scaling. Returns (advantages, degenerate); a degenerate group carries no
    signal and should be routed to the dynamic filter rather than trained on.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 1:
        raise ValueError("rewards must be non-empty")
    mean = r.mean()
    std = float(r.std())
    degenerate = r.size < 2 or std == 0.0
    centered = r - mean
    adv = centered / max(std, eps) if normalize_std else centered
    return adv.tolist(), degenerate


@dataclass
class GroupBatch:
    """All trajectories sampled for one question, with their relative rewards."""

    qa_id: str
    trajectories: list[Trajectory]
    rewards: list[float]
    advantages: list[float]
    degenerate: bool = False
    retained: bool = True


def build_group(
    qa_id: str,
    trajectories: list[Trajectory],
    normalize_std: bool = True,
) -> GroupBatch:
    rewards = [t.reward.final if t.reward is not None else 0.0 for t in trajectories]
    advantages, degenerate = group_advantages(rewards, normalize_std=normalize_std)
    for traj, adv in zip(trajectories, advantages):
        traj.advantage = adv
    return GroupBatch(qa_id, list(trajectories), rewards, advantages, degenerate)


def dynamic_filter(groups: list[GroupBatch]) -> list[GroupBatch]:
    """Drop groups whose rewards are all identical; order is preserved.

    Every group's `retained` flag is set; the returned list holds only the
    retained groups.
    """
    for group in groups:
        if group.rewards:
            group.retained = max(group.rewards) != min(group.rewards)
        else:
            group.retained = False
    return [g for g in groups if g.retained]


class ToyPolicy:
    """Linear-softmax policy over a finite symbol alphabet.

    Scores are theta @ features per symbol; theta has shape [K, F].
    """

    def __init__(self, alphabet: tuple[str, ...], n_features: int,
                 theta: np.ndarray | None = None):
        self.alphabet = tuple(alphabet)
        self.n_features = int(n_features)
        shape = (len(self.alphabet), self.n_features)
        if theta is None:
            self.theta = np.zeros(shape)
        else:
            self.theta = np.array(theta, dtype=float).reshape(shape)

    @classmethod
    def random(cls, alphabet: tuple[str, ...], n_features: int, seed: int,
               scale: float = 0.5) -> "ToyPolicy":
        rng = np.random.default_rng([seed, 23])
        theta = rng.normal(0.0, scale, (len(alphabet), n_features))
        return cls(alphabet, n_features, theta)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.theta @ np.asarray(features, dtype=float)

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))

    def probs(self, features: np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(features))

    def action_log_prob(self, features: np.ndarray, symbol: int) -> float:
        return float(self.log_probs(features)[symbol])

    def sample(self, features: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        p = self.probs(features)
        symbol = int(rng.choice(len(self.alphabet), p=p))
        return symbol, float(np.log(p[symbol]))

    def clone(self) -> "ToyPolicy":
        return ToyPolicy(self.alphabet, self.n_features, self.theta.copy())

    def to_json(self) -> dict:
        return {
            "alphabet": list(self.alphabet),
            "n_features": self.n_features,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ToyPolicy":
        return cls(tuple(data["alphabet"]), data["n_features"],
                   np.array(data["theta"]))


def grpo_loss(
    policy: ToyPolicy,
    old: ToyPolicy | None,
    group: GroupBatch,
    clip_eps: float = DEFAULT_CLIP_EPS,
) -> tuple[float, np.ndarray]:
    """Token-level clipped surrogate loss and its analytic gradient.

    loss = -(1/G) sum_i (1/T_i) sum_t min(rho * A_i, clip(rho, 1-eps, 1+eps) * A_i)
    with rho the per-token probability ratio between `policy` and the
    behavior policy. When `old` is None, the behavior log-probs recorded at
    sampling time are used, which is what the training loop needs once
    trajectories span several weight versions.
    """
    if not group.retained:
        raise ValueError("group was filtered out; loss is undefined")
    n_traj = len(group.trajectories)
    if n_traj == 0:
        raise ValueError("group has no trajectories")
    loss = 0.0
    grad = np.zeros_like(policy.theta)
    for traj, adv in zip(group.trajectories, group.advantages):
        steps = traj.policy_steps
        if not steps:
            continue
        feats = np.stack([s.features for s in steps])  # [T, F]
        acts = np.array([s.symbol for s in steps])
        idx = np.arange(len(acts))

        logits = feats @ policy.theta.T  # [T, K]
        m = logits.max(axis=1)
        logz = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        lp_new = logits[idx, acts] - logz
        if old is not None:
            logits_old = feats @ old.theta.T
            mo = logits_old.max(axis=1)
            logz_old = mo + np.log(np.exp(logits_old - mo[:, None]).sum(axis=1))
            lp_old = logits_old[idx, acts] - logz_old
        else:
            lp_old = np.array([s.logprob for s in steps])
        if not (np.all(np.isfinite(lp_new)) and np.all(np.isfinite(lp_old))):
            raise NonFiniteLoss("log-probability of a taken action is not finite")

        ratio = np.exp(lp_new - lp_old)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
        token_obj = np.minimum(unclipped, clipped)
        n_tokens = len(steps)
        loss -= token_obj.sum() / (n_tokens * n_traj)

        # Gradient flows only where the min selects the ratio branch (which
        # includes the whole clip band, where both branches coincide).
        active = unclipped <= clipped
        w = np.where(active, -adv * ratio / (n_tokens * n_traj), 0.0)
        probs = np.exp(logits - logz[:, None])
        d = np.zeros_like(logits)
        d[idx, acts] = w
        d -= w[:, None] * probs
        grad += d.T @ feats
    if not np.isfinite(loss):
        raise NonFiniteLoss("loss is not finite")
    return float(loss), grad
