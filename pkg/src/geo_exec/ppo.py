"""Actor-critic PPO in numpy: MLP policy/value network with hand-written
backprop, GAE, clipped surrogate loss with entropy and KL terms, running
observation normalisation, and the rollout/update loop."""

from __future__ import annotations

import base64
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .engine import ACTIONS, N_ACTIONS, OBS_DIM, ExecutionEnv

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, params=None):
        super().__init__(msg)
        self.params = params


# ---------------------------------------------------------------------------
# network


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "silu":
        return x / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, pre, post):
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - post * post
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 + pre * (1.0 - s))
    raise ValueError(f"unknown activation {name!r}")


def _softmax_logp(z):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.exp(logp), logp


class ActorCritic:
    """Shared extractor feeding separate actor (9 logits) and critic (1 value) heads.

    Parameters live in one flat float64 vector; :meth:`views` slices it into
    per-layer weight matrices without copying.
    """

    def __init__(
        self,
        obs_dim=OBS_DIM,
        extractor=(256, 256),
        actor=(256, 256, 128),
        critic=(256, 256, 128),
        extractor_act="relu",
        head_act="tanh",
        n_actions=N_ACTIONS,
    ):
        self.obs_dim = obs_dim
        self.extractor = tuple(extractor)
        self.actor = tuple(actor)
        self.critic = tuple(critic)
        self.extractor_act = extractor_act
        self.head_act = head_act
        self.n_actions = n_actions
        feat = self.extractor[-1] if self.extractor else obs_dim
        self.blocks = {
            "ext": _dims(obs_dim, self.extractor),
            "pi": _dims(feat, self.actor) + [(self.actor[-1] if self.actor else feat, n_actions)],
            "vf": _dims(feat, self.critic) + [(self.critic[-1] if self.critic else feat, 1)],
        }
        self.layout = []
        off = 0
        for block, dims in self.blocks.items():
            for i, (a, b) in enumerate(dims):
                self.layout.append((f"{block}{i}.W", (a, b), off, a * b))
                off += a * b
                self.layout.append((f"{block}{i}.b", (b,), off, b))
                off += b
        self.size = off

    def config(self):
        return {
            "obs_dim": self.obs_dim,
            "extractor": list(self.extractor),
            "actor": list(self.actor),
            "critic": list(self.critic),
            "extractor_act": self.extractor_act,
            "head_act": self.head_act,
            "n_actions": self.n_actions,
        }

    def views(self, theta):
        return {name: theta[off : off + n].reshape(shape) for name, shape, off, n in self.layout}

    def init(self, rng, zero_final=False):
        theta = np.zeros(self.size)
        v = self.views(theta)
        for block, dims in self.blocks.items():
            last = len(dims) - 1
            for i, (a, b) in enumerate(dims):
                if block != "ext" and i == last:
                    gain = 0.0 if zero_final else (0.01 if block == "pi" else 1.0)
                else:
                    gain = math.sqrt(2.0)
                v[f"{block}{i}.W"][...] = _orthogonal(rng, a, b, gain)
        return theta

    def policy_slice(self):
        """Index range of extractor and actor weights (what mutation perturbs)."""
        idx = [np.arange(off, off + n) for name, _, off, n in self.layout if not name.startswith("vf")]
        return np.concatenate(idx)

    def _mlp(self, v, block, x, act, last_linear):
        cache = []
        dims = self.blocks[block]
        h = x
        for i in range(len(dims)):
            pre = h @ v[f"{block}{i}.W"] + v[f"{block}{i}.b"]
            if last_linear and i == len(dims) - 1:
                post = pre
            else:
                post = _act(act, pre)
            cache.append((h, pre, post))
            h = post
        return h, cache

    def forward(self, theta, x, return_cache=False, views=None):
        v = views if views is not None else self.views(theta)
        feat, c_ext = self._mlp(v, "ext", x, self.extractor_act, False)
        logits, c_pi = self._mlp(v, "pi", feat, self.head_act, True)
        value, c_vf = self._mlp(v, "vf", feat, self.head_act, True)
        probs, logp = _softmax_logp(logits)
        value = value[:, 0]
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(value))):
            bad = int(np.sum(~np.isfinite(logits)))
            n_x = int(np.sum(~np.isfinite(x)))
            raise NumericError(f"non-finite network output ({bad} logits, {n_x} non-finite inputs)")
        if return_cache:
            return probs, value, (logp, c_ext, c_pi, c_vf)
        return probs, value

    def policy_probs(self, theta, x, views=None):
        """Action probabilities only, skipping the critic (cheaper for acting)."""
        v = views if views is not None else self.views(theta)
        feat, _ = self._mlp(v, "ext", x, self.extractor_act, False)
        logits, _ = self._mlp(v, "pi", feat, self.head_act, True)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        return _softmax_logp(logits)[0]

    def _backprop(self, v, grads, block, cache, g_out, act, last_linear):
        g = g_out
        for i in range(len(cache) - 1, -1, -1):
            h_in, pre, post = cache[i]
            if not (last_linear and i == len(cache) - 1):
                g = g * _act_grad(act, pre, post)
            grads[f"{block}{i}.W"] += h_in.T @ g
            grads[f"{block}{i}.b"] += g.sum(axis=0)
            g = g @ v[f"{block}{i}.W"].T
        return g

    def backward(self, theta, cache, g_logits, g_value):
        v = self.views(theta)
        flat = np.zeros(self.size)
        grads = self.views(flat)
        _, c_ext, c_pi, c_vf = cache
        g_feat = self._backprop(v, grads, "pi", c_pi, g_logits, self.head_act, True)
        g_feat = g_feat + self._backprop(v, grads, "vf", c_vf, g_value[:, None], self.head_act, True)
        self._backprop(v, grads, "ext", c_ext, g_feat, self.extractor_act, False)
        return flat


def _dims(n_in, hidden):
    dims, a = [], n_in
    for b in hidden:
        dims.append((a, b))
        a = b
    return dims


def _orthogonal(rng, a, b, gain):
    if gain == 0.0:
        return np.zeros((a, b))
    m = rng.normal(size=(max(a, b), min(a, b)))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if a < b:
        q = q.T
    return gain * q[:a, :b]


def actor_critic_forward(net, theta, obs):
    """Action probabilities and state values for a batch of normalised observations."""
    return net.forward(theta, np.atleast_2d(np.asarray(obs, dtype=np.float64)))


# ---------------------------------------------------------------------------
# running observation normalisation


@dataclass
class RunningNorm:
    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 10.0
    eps: float = 1e-8
    frozen: bool = False

    @classmethod
    def create(cls, dim=OBS_DIM, clip=10.0):
        return cls(mean=np.zeros(dim), var=np.ones(dim), count=0.0, clip=clip)

    def update(self, batch):
        if self.frozen:
            return self
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        n = batch.shape[0]
        if n == 0:
            return self
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return self
        # Chan et al. pairwise merge of (count, mean, M2)
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot
        return self

    def normalize(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count, "clip": self.clip, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.array(d["mean"]), var=np.array(d["var"]), count=d["count"], clip=d["clip"], eps=d["eps"])


def obs_normalizer_update(norm, batch):
    return norm.update(batch)


# ---------------------------------------------------------------------------
# advantages and loss


def gae_advantages(rewards, values, gamma, lam, dones=None):
    """Generalised advantages and returns; ``values`` carries the bootstrap value last."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size != rewards.size + 1:
        raise ValueError("values must have one more entry than rewards")
    if dones is None:
        dones = np.zeros(rewards.size)
    adv = kernels.gae(rewards, values, dones, gamma, lam)
    return adv, adv + values[:-1]


@dataclass
class TrainConfig:
    n_steps: int = 2048
    n_envs: int = 1
    iterations: int = 50
    gamma: float = 0.999
    gae_lambda: float = 0.95
    epochs: int = 3
    clip_range: float = 0.18
    target_kl: float = 0.02
    ent_coef: float = 0.006
    vf_coef: float = 0.55
    kl_coef: float = 0.0
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    batch_sizes: tuple = (2048, 4096, 8192)
    normalize_advantage: bool = True
    extractor: tuple = (256, 256)
    actor: tuple = (256, 256, 128)
    critic: tuple = (256, 256, 128)
    extractor_act: str = "relu"
    head_act: str = "tanh"
    obs_clip: float = 10.0
    seed: int = 0

    def validate(self):
        for k in ("gamma", "gae_lambda", "ent_coef", "vf_coef", "kl_coef", "max_grad_norm", "learning_rate", "target_kl"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if not 0 < self.clip_range < 1:
            raise ValueError("clip_range must lie in (0, 1)")
        if self.n_steps < 1 or self.n_envs < 1 or self.iterations < 1 or self.epochs < 1:
            raise ValueError("counts must be positive")

    def minibatch_size(self):
        rollout = self.n_steps * self.n_envs
        fits = [b for b in sorted(self.batch_sizes) if b <= rollout]
        return fits[-1] if fits else rollout

    def make_net(self):
        return ActorCritic(
            extractor=self.extractor,
            actor=self.actor,
            critic=self.critic,
            extractor_act=self.extractor_act,
            head_act=self.head_act,
        )


def ppo_loss_and_grads(net, theta, batch, clip_range, vf_coef, ent_coef, kl_coef=0.0):
    """Minimised loss ``-L_clip + c_v L_V - c_e H + c_kl KL`` and its gradient.

    ``batch`` holds ``obs``, ``actions`` (indices), ``old_logp``, ``adv``,
    ``returns`` and ``old_probs``.
    """
    obs = batch["obs"]
    a = batch["actions"]
    n = obs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    probs, value, cache = net.forward(theta, obs, return_cache=True)
    logp = cache[0]
    rows = np.arange(n)
    adv = batch["adv"]
    ratio = np.exp(logp[rows, a] - batch["old_logp"])
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    s1, s2 = ratio * adv, clipped * adv
    unclipped = s1 <= s2
    l_pi = float(np.mean(np.minimum(s1, s2)))
    err = value - batch["returns"]
    l_v = float(np.mean(err**2))
    ent_i = -np.sum(probs * logp, axis=1)
    l_h = float(np.mean(ent_i))
    old_p = batch["old_probs"]
    with np.errstate(divide="ignore", invalid="ignore"):
        old_logp_full = np.where(old_p > 0, np.log(old_p), 0.0)
    kl = float(np.mean(np.sum(old_p * (old_logp_full - logp), axis=1)))
    loss = -l_pi + vf_coef * l_v - ent_coef * l_h + kl_coef * kl
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss (adv mean {adv.mean():.3g}, returns mean {batch['returns'].mean():.3g})")

    onehot = np.zeros_like(probs)
    onehot[rows, a] = 1.0
    g_logit = -(adv * ratio * unclipped)[:, None] * (onehot - probs)
    g_logit += ent_coef * probs * (logp + ent_i[:, None])
    g_logit += kl_coef * (probs - old_p)
    g_logit /= n
    g_value = vf_coef * 2.0 * err / n
    grads = net.backward(theta, cache, g_logit, g_value)
    diag = {
        "policy_loss": -l_pi,
        "value_loss": l_v,
        "entropy": l_h,
        "kl": kl,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_range)),
    }
    return loss, grads, diag


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-5):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return theta - lr * mh / (np.sqrt(vh) + self.eps)


def clip_grad_norm(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / (norm + 1e-12))
    return grad, norm


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: ActorCritic
    params: np.ndarray
    norm: RunningNorm
    config: TrainConfig
    log: list = field(default_factory=list)
    aborted: bool = False


class _OrderFeed:
    def __init__(self, orders, rng):
        self.orders = list(orders)
        self.rng = rng
        self.queue = []

    def next(self):
        if not self.queue:
            self.queue = [self.orders[i] for i in self.rng.permutation(len(self.orders))]
        return self.queue.pop()


def _sample(probs, rng):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def collect_rollout(net, theta, norm, envs, feed, n_steps, rng, obs_raw=None):
    """Step every env ``n_steps`` times with a frozen parameter snapshot."""
    n_envs = len(envs)
    if obs_raw is None:
        obs_raw = np.stack([env.reset(feed.next()) for env in envs])
    buf_obs = np.empty((n_steps, n_envs, net.obs_dim))
    buf_act = np.empty((n_steps, n_envs), dtype=np.int64)
    buf_logp = np.empty((n_steps, n_envs))
    buf_probs = np.empty((n_steps, n_envs, net.n_actions))
    buf_val = np.empty((n_steps + 1, n_envs))
    buf_rew = np.empty((n_steps, n_envs))
    buf_done = np.empty((n_steps, n_envs))
    ep_returns, running = [], np.zeros(n_envs)
    ep_actions = []
    for k in range(n_steps):
        norm.update(obs_raw)
        x = norm.normalize(obs_raw)
        probs, value = net.forward(theta, x)
        a = _sample(probs, rng)
        buf_obs[k], buf_act[k], buf_val[k], buf_probs[k] = x, a, value, probs
        buf_logp[k] = np.log(probs[np.arange(n_envs), a])
        nxt = np.empty_like(obs_raw)
        for e, env in enumerate(envs):
            frac = env.state.t / env.state.horizon
            o, r, done, _ = env.step(action=ACTIONS[a[e]])
            ep_actions.append((frac, ACTIONS[a[e]]))
            buf_rew[k, e] = r
            buf_done[k, e] = float(done)
            running[e] += r
            if done:
                ep_returns.append(running[e])
                running[e] = 0.0
                o = env.reset(feed.next())
            nxt[e] = o
        obs_raw = nxt
    _, last_v = net.forward(theta, norm.normalize(obs_raw))
    buf_val[n_steps] = last_v
    return {
        "obs": buf_obs,
        "actions": buf_act,
        "logp": buf_logp,
        "probs": buf_probs,
        "values": buf_val,
        "rewards": buf_rew,
        "dones": buf_done,
        "episode_returns": ep_returns,
        "episode_actions": ep_actions,
        "next_obs": obs_raw,
    }


def train_ppo(env_factory, orders, config, callback=None):
    """Rollout, GAE, then ``epochs`` passes of minibatch updates per iteration.

    Learning rate and clip range decay linearly over iterations; an epoch loop
    stops as soon as the measured KL exceeds ``target_kl``.
    """
    config.validate()
    if not orders:
        raise ValueError("no training orders")
    rng = np.random.default_rng(config.seed)
    net = config.make_net()
    theta = net.init(rng)
    norm = RunningNorm.create(net.obs_dim, clip=config.obs_clip)
    envs = [env_factory() for _ in range(config.n_envs)]
    feed = _OrderFeed(orders, np.random.default_rng(rng.integers(2**63)))
    opt = Adam(net.size)
    mb = config.minibatch_size()
    total = config.n_steps * config.n_envs
    history = []
    obs_raw = None
    good = theta.copy()
    for it in range(config.iterations):
        frac = 1.0 - it / config.iterations
        lr = config.learning_rate * frac
        eps = config.clip_range * frac
        try:
            ro = collect_rollout(net, theta, norm, envs, feed, config.n_steps, rng, obs_raw)
        except NumericError as exc:
            log.error("rollout diverged at iteration %d: %s", it, exc)
            return TrainResult(net, good, norm, config, history, aborted=True)
        obs_raw = ro["next_obs"]
        adv = np.empty((config.n_steps, config.n_envs))
        for e in range(config.n_envs):
            adv[:, e] = kernels.gae(ro["rewards"][:, e], ro["values"][:, e], ro["dones"][:, e], config.gamma, config.gae_lambda)
        rets = adv + ro["values"][:-1]
        flat = {
            "obs": ro["obs"].reshape(total, -1),
            "actions": ro["actions"].reshape(total),
            "old_logp": ro["logp"].reshape(total),
            "old_probs": ro["probs"].reshape(total, -1),
            "adv": adv.reshape(total),
            "returns": rets.reshape(total),
        }
        stats = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": [], "clip_fraction": []}
        stopped = False
        n_updates = 0
        for _ in range(config.epochs):
            perm = rng.permutation(total)
            for s in range(0, total, mb):
                idx = perm[s : s + mb]
                batch = {k: v[idx] for k, v in flat.items()}
                if config.normalize_advantage and idx.size > 1:
                    a_ = batch["adv"]
                    batch["adv"] = (a_ - a_.mean()) / (a_.std() + 1e-8)
                try:
                    loss, grad, diag = ppo_loss_and_grads(net, theta, batch, eps, config.vf_coef, config.ent_coef, config.kl_coef)
                except NumericError as exc:
                    log.error("update diverged at iteration %d: %s", it, exc)
                    return TrainResult(net, good, norm, config, history, aborted=True)
                if diag["kl"] > config.target_kl:
                    stopped = True
                    break
                for k in stats:
                    stats[k].append(diag[k])
                grad, _ = clip_grad_norm(grad, config.max_grad_norm)
                theta = opt.step(theta, grad, lr)
                n_updates += 1
            if stopped:
                break
        if not np.all(np.isfinite(theta)):
            log.error("parameters diverged at iteration %d", it)
            return TrainResult(net, good, norm, config, history, aborted=True)
        good = theta.copy()
        ep = ro["episode_returns"]
        row = {
            "iteration": it,
            "timesteps": (it + 1) * total,
            "episodes": len(ep),
            "mean_episode_reward": float(np.mean(ep)) if ep else math.nan,
            "mean_step_reward": float(ro["rewards"].mean()),
            "learning_rate": lr,
            "clip_range": eps,
            "n_updates": n_updates,
            "early_stop": int(stopped),
        }
        for k, v in stats.items():
            row[k] = float(np.mean(v)) if v else math.nan
        history.append(row)
        log.info("iter %d reward %.6g kl %.4g clip %.3f", it, row["mean_step_reward"], row["kl"], row["clip_fraction"])
        if callback is not None:
            callback(it, theta, row, ro)
    return TrainResult(net, theta, norm, config, history)


def make_env_factory(market, weights=None):
    return lambda: ExecutionEnv(market, weights)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    net: ActorCritic
    params: np.ndarray
    norm: RunningNorm
    config: dict


def _encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


def save_checkpoint(path, net, params, norm, config=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(config) if config is not None and not isinstance(config, dict) else (config or {})
    doc = {
        "version": CHECKPOINT_VERSION,
        "net": net.config(),
        "params": _encode(params),
        "norm": {**norm.to_dict(), "mean": _encode(norm.mean), "var": _encode(norm.var)},
        "train_config": _jsonable(cfg),
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    net = ActorCritic(**doc["net"])
    params = _decode(doc["params"])
    if params.size != net.size:
        raise ValueError(f"{path}: parameter count mismatch")
    nd = doc["norm"]
    norm = RunningNorm(mean=_decode(nd["mean"]), var=_decode(nd["var"]), count=nd["count"], clip=nd["clip"], eps=nd["eps"], frozen=True)
    return Checkpoint(net=net, params=params, norm=norm, config=doc["train_config"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_training_log(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
