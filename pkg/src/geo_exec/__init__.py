"""Minute-bar execution backtester with a transient-impact propagator,
schedule baselines, a numpy PPO agent and a MAP-Elites specialist search."""

from ._accel import backend
from .engine import ACTIONS, ExecutionEnv, RewardWeights, run_episode, run_episodes_vectorized
from .impact import ImpactParams, ImpactState, calibrate_propagator, propagate_state
from .marketdata import MarketData, SynthConfig, synth_generate
from .orders import Order

__version__ = "0.1.0"
