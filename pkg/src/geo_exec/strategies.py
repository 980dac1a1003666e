"""Baseline execution schedules and the policy interface used by the engine."""

from __future__ import annotations

import logging
import math

import numpy as np

from .engine import ACTIONS, N_ACTIONS

log = logging.getLogger(__name__)

BASELINES = ("twap", "vwap", "pov")


class Policy:
    """Something that picks the next move from an observation.

    ``mode == "action"`` policies return a value from :data:`ACTIONS`;
    ``mode == "quantity"`` policies return shares directly.
    """

    mode = "action"
    name = "policy"

    def act(self, obs, rng, state=None):
        raise NotImplementedError


def baseline_quantity(kind, q0, horizon, t, profile=None, volume=None):
    """Shares to trade at minute ``t`` for a schedule baseline.

    ``profile`` is the expected volume per minute over the horizon and
    ``volume`` the realised market volume at ``t``. A non-positive profile
    falls back to TWAP.
    """
    if not 0 <= t < horizon:
        raise ValueError(f"t={t} outside horizon {horizon}")
    if kind == "twap":
        return q0 / horizon
    total = float(np.sum(profile)) if profile is not None else 0.0
    if total <= 0:
        log.warning("%s: empty volume profile, using TWAP", kind)
        return q0 / horizon
    if kind == "vwap":
        return q0 * float(profile[t]) / total
    if kind == "pov":
        return q0 / total * float(volume)
    raise ValueError(f"unknown baseline {kind!r}")


class ScheduleBaseline(Policy):
    mode = "quantity"

    def __init__(self, kind):
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}")
        self.kind = kind
        self.name = kind

    def act(self, obs, rng, state=None):
        d = state.data
        t = state.t
        return baseline_quantity(self.kind, state.q0, state.horizon, t, d.profile, d.volume[t])


def random_action(rng):
    return float(ACTIONS[rng.integers(N_ACTIONS)])


class RandomPolicy(Policy):
    name = "random"

    def act(self, obs, rng, state=None):
        return random_action(rng)


class ConstantPolicy(Policy):
    """Always the same action; ``0`` tracks the target-rate schedule exactly."""

    def __init__(self, action=0.0):
        self.action = float(action)
        self.name = f"const{self.action:+.2f}"

    def act(self, obs, rng, state=None):
        return self.action


class NetworkPolicy(Policy):
    """Actor-critic network behind the policy interface.

    ``deterministic`` picks the most likely action; otherwise actions are
    sampled from the softmax with the episode RNG.
    """

    name = "ppo"

    def __init__(self, net, params, norm=None, deterministic=True):
        self.net = net
        self.params = params
        self.norm = norm
        self.deterministic = deterministic
        self._views = net.views(params)

    def act(self, obs, rng, state=None):
        x = np.asarray(obs, dtype=np.float64)[None, :]
        if self.norm is not None:
            x = self.norm.normalize(x)
        probs = self.net.policy_probs(self.params, x, views=self._views)
        p = probs[0]
        if self.deterministic:
            k = int(np.argmax(p))
        else:
            k = int(rng.choice(N_ACTIONS, p=p))
        return float(ACTIONS[k])


def make_policy(name, checkpoint=None, archive=None):
    """Policy from a CLI strategy name: twap, vwap, pov, random, ppo, elite:<i>,<j>."""
    name = name.lower()
    if name in BASELINES:
        return ScheduleBaseline(name)
    if name == "random":
        return RandomPolicy()
    if name == "ppo":
        if checkpoint is None:
            raise ValueError("strategy ppo needs a checkpoint")
        from .ppo import load_checkpoint

        ck = load_checkpoint(checkpoint)
        return NetworkPolicy(ck.net, ck.params, ck.norm)
    if name.startswith("elite:"):
        if archive is None:
            raise ValueError("elite strategies need an archive directory")
        from .mapelites import load_elite

        i, j = (int(v) for v in name.split(":", 1)[1].split(","))
        pol = load_elite(archive, (i, j))
        pol.name = name
        return pol
    raise ValueError(f"unknown strategy {name!r}")


def implied_action(q, q_target):
    """The (1 + a) scaffolding equivalent of a direct quantity."""
    return q / q_target - 1.0 if q_target > 0 else math.nan
