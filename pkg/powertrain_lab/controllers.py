"""
Powertrain controllers: the hybrid-action RL agent, the model-based
feedforward baseline and an adversarial max-torque driver.

The RL agent outputs a gear change from a categorical head over
{downshift, hold, upshift} and a wheel torque from a Gaussian head squashed
onto [-max brake, first-gear drive max].
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from powertrain_lab.dynamics import (
    SimState,
    VehicleParams,
    engine_speed_rpm,
    powertrain_point,
    resistance_force,
    torque_bounds,
)
from powertrain_lab.errors import NonFiniteGradient, OutOfEnvelope

logger = logging.getLogger(__name__)

GEAR_DELTAS = (-1, 0, 1)
N_FEATURES = 10
CHECKPOINT_FORMAT_VERSION = 2
LOG_STD_BOUNDS = (-20.0, 2.0)
DTYPE = torch.float64


# ============================================================
# 1. ACTIONS, OBSERVATIONS AND FEATURES
# ============================================================

@dataclass(frozen=True)
class HybridAction:
    torque_proposal_nm: float
    gear_delta: int

    def __post_init__(self):
        if self.gear_delta not in GEAR_DELTAS:
            raise ValueError(f"gear delta must be -1, 0 or +1, got {self.gear_delta}")
        if not math.isfinite(self.torque_proposal_nm):
            raise ValueError("torque proposal must be finite")


@dataclass(frozen=True)
class Observation:
    """Everything a controller may look at before acting."""

    state: SimState
    params: VehicleParams
    a_des_m_s2: float
    accel_m_s2: float
    lead_in_range: bool


class FeatureScales(BaseModel):
    """Fixed affine scaling of the 10 MDP state entries."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    speed_m_s: float = 40.0
    accel_m_s2: float = 3.0
    separation_m: float = 150.0
    gear: float = 9.0
    mass_kg: float = 12000.0
    grade_rad: float = 0.1
    torque_nm: float = 60000.0


def policy_features(obs: Observation, scales: FeatureScales = FeatureScales()) -> np.ndarray:
    """Order: v_l, v_rel, a_des, a, z, n_g, m_v, theta, T_p, f."""
    s = obs.state
    return np.array(
        [
            s.lead_speed_m_s / scales.speed_m_s,
            (s.lead_speed_m_s - s.host_speed_m_s) / scales.speed_m_s,
            obs.a_des_m_s2 / scales.accel_m_s2,
            obs.accel_m_s2 / scales.accel_m_s2,
            min(s.separation_m, 2.0 * scales.separation_m) / scales.separation_m,
            s.gear_index / scales.gear,
            obs.params.mass_kg / scales.mass_kg,
            s.grade_rad / scales.grade_rad,
            s.prev_wheel_torque_nm / scales.torque_nm,
            1.0 if obs.lead_in_range else 0.0,
        ],
        dtype=np.float64,
    )


class Controller(Protocol):
    name: str

    def act(self, obs: Observation) -> HybridAction: ...


# ============================================================
# 2. REWARD
# ============================================================

class RewardWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w_a: float = Field(0.675, ge=0.0)
    w_f: float = Field(0.25, ge=0.0)
    w_T: float = Field(0.075, ge=0.0)
    w_g: float = Field(0.075, ge=0.0)
    a_des_max: float = Field(3.0, gt=0.0)
    fuel_rate_max: float = Field(20.0, gt=0.0)
    torque_delta_max: float = Field(60000.0, gt=0.0)

    @property
    def max_reward(self) -> float:
        return math.fsum((self.w_a, self.w_f, self.w_T, self.w_g))


class Transition(NamedTuple):
    accel_m_s2: float
    a_des_m_s2: float
    fuel_rate_g_s: float
    torque_delta_nm: float
    gear_delta_realized: int


REWARD_TERMS = ("accommodation", "fuel", "torque", "gear")


def reward_terms(tr: Transition, w: RewardWeights) -> Tuple[float, float, float, float]:
    """Each term is w * 0.1^(normalized deviation), so one full normalizer costs a decade."""
    return (
        w.w_a * 0.1 ** (abs(tr.accel_m_s2 - tr.a_des_m_s2) / w.a_des_max),
        w.w_f * 0.1 ** (max(tr.fuel_rate_g_s, 0.0) / w.fuel_rate_max),
        w.w_T * 0.1 ** (abs(tr.torque_delta_nm) / w.torque_delta_max),
        w.w_g * 0.1 ** abs(tr.gear_delta_realized),
    )


def reward(tr: Transition, w: RewardWeights) -> float:
    return math.fsum(reward_terms(tr, w))


# ============================================================
# 3. NETWORKS AND THE HYBRID POLICY
# ============================================================

def _trunk(n_in: int, hidden: Sequence[int]) -> nn.Sequential:
    layers: List[nn.Module] = []
    width = n_in
    for h in hidden:
        layers += [nn.Linear(width, h, dtype=DTYPE), nn.Tanh()]
        width = h
    return nn.Sequential(*layers)


class PolicyNetwork(nn.Module):
    """Shared tanh trunk with a 3-logit gear head and a (mean, log-std) torque head."""

    def __init__(
        self,
        n_features: int = N_FEATURES,
        hidden: Sequence[int] = (128, 128),
        initial_mean: float = 0.0,
        initial_log_std: float = -0.7,
    ) -> None:
        super().__init__()
        self.trunk = _trunk(n_features, hidden)
        self.gear_head = nn.Linear(hidden[-1], len(GEAR_DELTAS), dtype=DTYPE)
        self.torque_head = nn.Linear(hidden[-1], 2, dtype=DTYPE)
        with torch.no_grad():
            self.gear_head.weight.mul_(0.01)
            self.gear_head.bias.zero_()
            self.torque_head.weight.mul_(0.01)
            self.torque_head.bias.copy_(torch.tensor([initial_mean, initial_log_std], dtype=DTYPE))

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.trunk(features)
        out = self.torque_head(h)
        log_std = out[..., 1].clamp(*LOG_STD_BOUNDS)
        return self.gear_head(h), out[..., 0], log_std


class CriticNetwork(nn.Module):
    """Value estimate; the head output is multiplied by value_scale, e.g. 1 / (1 - discount)."""

    def __init__(
        self,
        n_features: int = N_FEATURES,
        hidden: Sequence[int] = (128, 128),
        value_scale: float = 1.0,
    ) -> None:
        super().__init__()
        self.trunk = _trunk(n_features, hidden)
        self.value_head = nn.Linear(hidden[-1], 1, dtype=DTYPE)
        self.value_scale = float(value_scale)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.value_scale * self.value_head(self.trunk(features)).squeeze(-1)


class TorqueSquash(NamedTuple):
    """torque = lo + (tanh(u) + 1) / 2 * (hi - lo)"""

    lo: float
    hi: float

    def torque(self, u: torch.Tensor) -> torch.Tensor:
        return self.lo + 0.5 * (torch.tanh(u) + 1.0) * (self.hi - self.lo)

    def pre_image(self, torque: float) -> float:
        frac = (torque - self.lo) / (self.hi - self.lo)
        return math.atanh(2.0 * frac - 1.0)

    def log_det(self, u: torch.Tensor) -> torch.Tensor:
        """log |d torque / d u|, stable for large |u|."""
        log_one_minus_tanh2 = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
        return math.log(0.5 * (self.hi - self.lo)) + log_one_minus_tanh2


def squash_for(params: VehicleParams) -> TorqueSquash:
    return TorqueSquash(-params.max_brake_torque_nm, params.max_wheel_torque_nm(0))


def hybrid_log_prob(
    gear_logits: torch.Tensor,
    mean: torch.Tensor,
    log_std: torch.Tensor,
    gear_index: torch.Tensor,
    u: torch.Tensor,
    squash: TorqueSquash,
) -> torch.Tensor:
    """Joint log-density of (gear choice, squashed torque)."""
    gear_lp = torch.log_softmax(gear_logits, dim=-1).gather(-1, gear_index.unsqueeze(-1)).squeeze(-1)
    gauss_lp = (
        -0.5 * ((u - mean) / log_std.exp()) ** 2
        - log_std
        - 0.5 * math.log(2.0 * math.pi)
    )
    return gear_lp + gauss_lp - squash.log_det(u)


def sample_hybrid(
    gear_logits: torch.Tensor,
    mean: torch.Tensor,
    std: torch.Tensor,
    squash: TorqueSquash,
    generator: Optional[torch.Generator] = None,
) -> Tuple[int, float, float]:
    """
    Draw one hybrid action from explicit head outputs.

    Returns:
        (gear_index, pre-squash sample u, torque)
    """
    probs = torch.softmax(gear_logits, dim=-1)
    gear_index = int(torch.multinomial(probs, 1, generator=generator).item())
    noise = torch.randn((), dtype=DTYPE, generator=generator)
    u = mean + std * noise
    return gear_index, float(u), float(squash.torque(u))


class PolicySample(NamedTuple):
    action: HybridAction
    log_prob: float
    gear_index: int
    u: float


def policy_sample(
    policy: PolicyNetwork,
    features: np.ndarray,
    squash: TorqueSquash,
    generator: Optional[torch.Generator] = None,
) -> PolicySample:
    """Sample (gear delta, torque) and the joint log-probability, squash-corrected."""
    with torch.no_grad():
        x = torch.as_tensor(features, dtype=DTYPE)
        logits, mean, log_std = policy(x)
        gear_index, u, torque = sample_hybrid(logits, mean, log_std.exp(), squash, generator)
        lp = hybrid_log_prob(
            logits, mean, log_std,
            torch.tensor(gear_index), torch.tensor(u, dtype=DTYPE), squash,
        )
    return PolicySample(HybridAction(torque, GEAR_DELTAS[gear_index]), float(lp), gear_index, u)


def policy_mode(policy: PolicyNetwork, features: np.ndarray, squash: TorqueSquash) -> HybridAction:
    """Deterministic action: argmax gear, squashed Gaussian mean."""
    with torch.no_grad():
        logits, mean, _ = policy(torch.as_tensor(features, dtype=DTYPE))
        gear_index = int(torch.argmax(logits).item())
        return HybridAction(float(squash.torque(mean)), GEAR_DELTAS[gear_index])


# ============================================================
# 4. TRAINER
# ============================================================

class PolicyOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_sizes: Tuple[int, ...] = (128, 128)
    actor_lr: float = Field(3e-4, gt=0.0)
    critic_lr: float = Field(1e-3, gt=0.0)
    discount: float = Field(0.95, ge=0.0, lt=1.0)
    gae_lambda: float = Field(0.9, ge=0.0, le=1.0)
    entropy_coef: float = Field(1e-3, ge=0.0)
    normalize_advantages: bool = True
    # passes over each rollout, each split into shuffled minibatches
    update_epochs: int = Field(4, gt=0)
    minibatches: int = Field(4, gt=0)
    clip_ratio: float = Field(0.2, gt=0.0)
    target_kl: float = Field(0.05, gt=0.0)
    max_grad_norm: float = Field(1.0, gt=0.0)
    initial_log_std: float = -1.2
    deterministic_eval: bool = True


@dataclass
class TransitionBatch:
    """
    Time-major rollout from E parallel environments.

    features (T, E, F), gear_index (T, E), u (T, E), rewards (T, E),
    dones (T, E), last_features (E, F) for bootstrapping.
    """

    features: torch.Tensor
    gear_index: torch.Tensor
    u: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    last_features: torch.Tensor

    @classmethod
    def from_arrays(cls, features, gear_index, u, rewards, dones, last_features) -> "TransitionBatch":
        return cls(
            features=torch.as_tensor(np.asarray(features), dtype=DTYPE),
            gear_index=torch.as_tensor(np.asarray(gear_index), dtype=torch.long),
            u=torch.as_tensor(np.asarray(u), dtype=DTYPE),
            rewards=torch.as_tensor(np.asarray(rewards), dtype=DTYPE),
            dones=torch.as_tensor(np.asarray(dones), dtype=DTYPE),
            last_features=torch.as_tensor(np.asarray(last_features), dtype=DTYPE),
        )


class Trainer(Protocol):
    """Interface a policy optimizer implements to plug into `harness.train`."""

    policy: PolicyNetwork

    def update(self, batch: TransitionBatch) -> Dict[str, float]: ...

    def state_dict(self) -> Dict: ...


def n_step_returns(rewards: torch.Tensor, dones: torch.Tensor, bootstrap: torch.Tensor, gamma: float) -> torch.Tensor:
    returns = torch.empty_like(rewards)
    running = bootstrap
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        returns[t] = running
    return returns


def gae_advantages(
    rewards: torch.Tensor,
    values: torch.Tensor,
    dones: torch.Tensor,
    last_values: torch.Tensor,
    gamma: float,
    lam: float,
) -> torch.Tensor:
    """
    Generalized advantage estimates over a time-major rollout.

    lam = 1 gives n-step returns minus values; lam = 0 gives one-step TD errors.
    """
    advantages = torch.empty_like(rewards)
    running = torch.zeros_like(last_values)
    next_values = last_values
    for t in range(rewards.shape[0] - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * not_done * next_values - values[t]
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
        next_values = values[t]
    return advantages


class RolloutTargets(NamedTuple):
    """A rollout flattened to N samples, with targets fixed before the first pass."""

    features: torch.Tensor
    gear_index: torch.Tensor
    u: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    old_log_prob: torch.Tensor

    def take(self, idx: torch.Tensor) -> "RolloutTargets":
        return RolloutTargets(*(field[idx] for field in self))


def rollout_targets(
    policy: PolicyNetwork,
    critic: CriticNetwork,
    batch: TransitionBatch,
    squash: TorqueSquash,
    options: PolicyOptions,
) -> RolloutTargets:
    """Critic targets are n-step returns; policy advantages are GAE, optionally normalized."""
    with torch.no_grad():
        values = critic(batch.features)
        last_values = critic(batch.last_features)
        returns = n_step_returns(batch.rewards, batch.dones, last_values, options.discount)
        advantages = gae_advantages(
            batch.rewards, values, batch.dones, last_values, options.discount, options.gae_lambda
        )
        if options.normalize_advantages and advantages.numel() > 1:
            std = advantages.std()
            if std > 1e-8:
                advantages = (advantages - advantages.mean()) / std
        logits, mean, log_std = policy(batch.features)
        old_log_prob = hybrid_log_prob(logits, mean, log_std, batch.gear_index, batch.u, squash)

    n_features = batch.features.shape[-1]
    return RolloutTargets(
        features=batch.features.reshape(-1, n_features),
        gear_index=batch.gear_index.reshape(-1),
        u=batch.u.reshape(-1),
        advantages=advantages.reshape(-1),
        returns=returns.reshape(-1),
        old_log_prob=old_log_prob.reshape(-1),
    )


def actor_critic_losses(
    policy: PolicyNetwork,
    critic: CriticNetwork,
    targets: RolloutTargets,
    squash: TorqueSquash,
    options: PolicyOptions,
) -> Tuple[torch.Tensor, torch.Tensor, Dict[str, float]]:
    """
    Clipped-ratio policy loss and critic regression on one minibatch.

    Before the first optimizer step of an update the ratio is 1 and the
    policy gradient is the advantage-weighted joint log-probability gradient.
    """
    values = critic(targets.features)
    logits, mean, log_std = policy(targets.features)
    log_prob = hybrid_log_prob(logits, mean, log_std, targets.gear_index, targets.u, squash)
    ratio = torch.exp(log_prob - targets.old_log_prob)
    clipped = ratio.clamp(1.0 - options.clip_ratio, 1.0 + options.clip_ratio)
    surrogate = torch.minimum(ratio * targets.advantages, clipped * targets.advantages)

    gear_entropy = -(torch.softmax(logits, -1) * torch.log_softmax(logits, -1)).sum(-1)
    torque_entropy = log_std + 0.5 * math.log(2.0 * math.pi * math.e)
    policy_loss = -surrogate.mean() - options.entropy_coef * (gear_entropy + torque_entropy).mean()

    # regress in units of one step's reward so the loss scale does not depend on the discount
    scale = 1.0 - options.discount
    critic_loss = 0.5 * (((targets.returns - values) * scale) ** 2).mean()
    diagnostics = {
        "critic_loss": float(critic_loss),
        "policy_loss": float(policy_loss),
        "gear_entropy": float(gear_entropy.mean()),
        "torque_entropy": float(torque_entropy.mean()),
        "mean_value": float(values.mean()),
    }
    return policy_loss, critic_loss, diagnostics


def approx_kl(policy: PolicyNetwork, targets: RolloutTargets, squash: TorqueSquash) -> float:
    """Non-negative estimate of KL(old || current) over the rollout."""
    with torch.no_grad():
        logits, mean, log_std = policy(targets.features)
        log_prob = hybrid_log_prob(logits, mean, log_std, targets.gear_index, targets.u, squash)
        log_ratio = log_prob - targets.old_log_prob
        return float((torch.expm1(log_ratio) - log_ratio).mean())


class ActorCriticTrainer:
    """Clipped-ratio actor-critic on the hybrid heads; updates are serialized here."""

    def __init__(self, squash: TorqueSquash, options: PolicyOptions = PolicyOptions(), seed: int = 0):
        self.options = options
        self.squash = squash
        torch.manual_seed(seed)
        initial_mean = squash.pre_image(0.0)
        self.policy = PolicyNetwork(
            hidden=options.hidden_sizes,
            initial_mean=initial_mean,
            initial_log_std=options.initial_log_std,
        )
        self.critic = CriticNetwork(
            hidden=options.hidden_sizes, value_scale=1.0 / (1.0 - options.discount)
        )
        self.policy_optim = torch.optim.Adam(self.policy.parameters(), lr=options.actor_lr)
        self.critic_optim = torch.optim.Adam(self.critic.parameters(), lr=options.critic_lr)
        self.generator = torch.Generator().manual_seed(seed)
        self.updates = 0

    def act(self, features: np.ndarray) -> PolicySample:
        return policy_sample(self.policy, features, self.squash, self.generator)

    def update(self, batch: TransitionBatch) -> Dict[str, float]:
        """
        One train step on a freshly collected rollout: several shuffled
        minibatch passes, stopped early once the policy drifts past target_kl.

        Raises:
            NonFiniteGradient: the whole step is discarded and parameters
                and optimizer state are restored.
        """
        if batch.rewards.numel() == 0:
            raise ValueError("train step needs a non-empty batch")
        saved = copy.deepcopy((
            self.policy.state_dict(),
            self.critic.state_dict(),
            self.policy_optim.state_dict(),
            self.critic_optim.state_dict(),
        ))
        try:
            diagnostics = self._optimize(batch)
        except NonFiniteGradient:
            self.policy.load_state_dict(saved[0])
            self.critic.load_state_dict(saved[1])
            self.policy_optim.load_state_dict(saved[2])
            self.critic_optim.load_state_dict(saved[3])
            raise
        self.updates += 1
        return diagnostics

    def _optimize(self, batch: TransitionBatch) -> Dict[str, float]:
        options = self.options
        targets = rollout_targets(self.policy, self.critic, batch, self.squash, options)
        n = targets.features.shape[0]
        n_minibatches = min(options.minibatches, n)

        diagnostics: Dict[str, float] = {}
        kl = 0.0
        passes = 0
        for _ in range(options.update_epochs):
            order = torch.randperm(n, generator=self.generator)
            for idx in order.chunk(n_minibatches):
                diagnostics = self._minibatch_step(targets.take(idx))
            passes += 1
            kl = approx_kl(self.policy, targets, self.squash)
            if kl > options.target_kl:
                break
        diagnostics["approx_kl"] = kl
        diagnostics["passes"] = float(passes)
        return diagnostics

    def _minibatch_step(self, targets: RolloutTargets) -> Dict[str, float]:
        policy_loss, critic_loss, diagnostics = actor_critic_losses(
            self.policy, self.critic, targets, self.squash, self.options
        )
        self.policy_optim.zero_grad()
        self.critic_optim.zero_grad()
        (policy_loss + critic_loss).backward()

        policy_norm = nn.utils.clip_grad_norm_(self.policy.parameters(), self.options.max_grad_norm)
        critic_norm = nn.utils.clip_grad_norm_(self.critic.parameters(), self.options.max_grad_norm)
        if not (torch.isfinite(policy_norm) and torch.isfinite(critic_norm)):
            self.policy_optim.zero_grad()
            self.critic_optim.zero_grad()
            raise NonFiniteGradient(
                f"non-finite gradient at update {self.updates} "
                f"(policy {float(policy_norm)}, critic {float(critic_norm)})"
            )

        self.policy_optim.step()
        self.critic_optim.step()
        diagnostics["policy_grad_norm"] = float(policy_norm)
        diagnostics["critic_grad_norm"] = float(critic_norm)
        return diagnostics

    def state_dict(self) -> Dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "options": self.options.model_dump(mode="json"),
            "squash": [self.squash.lo, self.squash.hi],
            "policy": self.policy.state_dict(),
            "critic": self.critic.state_dict(),
            "policy_optim": self.policy_optim.state_dict(),
            "critic_optim": self.critic_optim.state_dict(),
            "generator_state": self.generator.get_state(),
            "updates": self.updates,
        }

    def load_state_dict(self, state: Dict) -> None:
        self.policy.load_state_dict(state["policy"])
        self.critic.load_state_dict(state["critic"])
        self.policy_optim.load_state_dict(state["policy_optim"])
        self.critic_optim.load_state_dict(state["critic_optim"])
        self.generator.set_state(state["generator_state"])
        self.updates = int(state["updates"])


def save_checkpoint(path: str, trainer: ActorCriticTrainer, feature_scales: FeatureScales) -> None:
    state = trainer.state_dict()
    state["feature_scales"] = feature_scales.model_dump(mode="json")
    torch.save(state, path)
    logger.info("Saved checkpoint %s (update %d)", path, trainer.updates)


def load_checkpoint(path: str) -> Tuple[ActorCriticTrainer, FeatureScales]:
    state = torch.load(path, weights_only=True)
    version = state.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"checkpoint {path} has format {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    options = PolicyOptions(**state["options"])
    trainer = ActorCriticTrainer(TorqueSquash(*state["squash"]), options)
    trainer.load_state_dict(state)
    return trainer, FeatureScales(**state["feature_scales"])


# ============================================================
# 5. CONTROLLERS
# ============================================================

class RlController:
    name = "rl"

    def __init__(
        self,
        policy: PolicyNetwork,
        squash: TorqueSquash,
        scales: FeatureScales = FeatureScales(),
        deterministic: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        self.policy = policy
        self.squash = squash
        self.scales = scales
        self.deterministic = deterministic
        self.generator = generator

    def act(self, obs: Observation) -> HybridAction:
        features = policy_features(obs, self.scales)
        if self.deterministic:
            return policy_mode(self.policy, features, self.squash)
        return policy_sample(self.policy, features, self.squash, self.generator).action


def fuel_optimal_gear(state: SimState, wheel_torque_nm: float, params: VehicleParams) -> Optional[int]:
    """Feasible gear with the lowest fuel rate, ties to the higher gear; None if no gear is feasible."""
    best_gear, best_rate = None, math.inf
    for gear in range(params.n_gears):
        candidate = SimState(
            separation_m=state.separation_m,
            host_speed_m_s=state.host_speed_m_s,
            lead_speed_m_s=state.lead_speed_m_s,
            gear_index=gear,
            grade_rad=state.grade_rad,
        )
        try:
            rate = powertrain_point(candidate, wheel_torque_nm, params, strict=True).fuel_rate_g_s
        except OutOfEnvelope:
            continue
        if rate <= best_rate:
            best_gear, best_rate = gear, rate
    return best_gear


def baseline_action(state: SimState, a_des_m_s2: float, params: VehicleParams) -> HybridAction:
    """
    Feedforward torque r_w (F_r + m a_des) and a one-step move toward the
    fuel-optimal feasible gear.
    """
    demand = params.wheel_radius_m * (resistance_force(state, params) + params.mass_kg * a_des_m_s2)
    lo, hi = torque_bounds(state, params)
    torque = min(max(demand, lo), hi)

    target = fuel_optimal_gear(state, demand, params)
    if target is None:
        target = state.gear_index
    delta = int(np.sign(target - state.gear_index))
    return HybridAction(torque, delta)


class BaselineController:
    name = "baseline"

    def act(self, obs: Observation) -> HybridAction:
        return baseline_action(obs.state, obs.a_des_m_s2, obs.params)


class AdversarialController:
    """Always requests the gear's full drive torque and shifts to keep pulling."""

    name = "adversarial"

    def __init__(self, upshift_rpm: float = 2200.0, downshift_rpm: float = 1100.0):
        self.upshift_rpm = upshift_rpm
        self.downshift_rpm = downshift_rpm

    def act(self, obs: Observation) -> HybridAction:
        state, params = obs.state, obs.params
        _, hi = torque_bounds(state, params)
        rpm = engine_speed_rpm(state.host_speed_m_s, state.gear_index, params)
        delta = 0
        if rpm > self.upshift_rpm:
            delta = 1
        elif rpm < self.downshift_rpm and state.host_speed_m_s > 0.5:
            delta = -1
        return HybridAction(max(hi, params.max_wheel_torque_nm(state.gear_index)), delta)
