"""Shared-trunk actor-critic, PPO updates, and the rollout/update training loop.

The network is a tanh MLP written directly in numpy with hand-derived
gradients. Two categorical heads pick the dimension and the operation;
the operation head is masked by the legal ops of the chosen dimension,
so the joint probability is p(dim) * p(op | dim).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .rlenv import (N_OPS, OBS_LEN, Decision, EnvConfig, Rollout, finalize_rewards,
                    penalized_costs, run_rollout)
from .ruleset import NUM_DIMS, RuleSet
from .tree import DecisionTree, tree_stats

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wa", "ba", "Wb", "bb", "Wv", "bv")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    gamma: float = 1.0  # inert: every experience is a one-step episode
    entropy_coeff: float = 0.01
    clip: float = 0.3
    vf_clip: float = 10.0
    vf_coeff: float = 1.0
    kl_target: float = 0.01
    kl_coeff: float = 0.2
    sgd_iters: int = 30
    minibatch: int = 1000
    batch: int = 60000
    total_timesteps: int = 10_000_000
    max_rollouts: Optional[int] = None
    workers: int = 1
    seed: int = 0
    hidden: tuple = (512, 512)
    algo: str = "ppo"  # ppo | a2c
    normalize_advantages: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one rollout worker")
        if self.minibatch > self.batch:
            raise ValueError("minibatch larger than batch")
        if self.algo not in ("ppo", "a2c"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        for name in ("lr", "clip", "vf_clip", "kl_target", "sgd_iters", "minibatch", "batch",
                     "total_timesteps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# --------------------------------------------------------------------------
# network

def init_params(obs_len: int = OBS_LEN, hidden=(512, 512), seed=0, dtype="float32") -> dict:
    """Orthogonal trunk, zero heads: the initial policy is uniform over legal actions."""
    rng = np.random.default_rng(seed)

    def ortho(n_in, n_out):
        a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        return q if n_in >= n_out else q.T

    h1, h2 = hidden
    p = {
        "W1": ortho(obs_len, h1), "b1": np.zeros(h1),
        "W2": ortho(h1, h2), "b2": np.zeros(h2),
        "Wa": np.zeros((h2, NUM_DIMS)), "ba": np.zeros(NUM_DIMS),
        "Wb": np.zeros((h2, N_OPS)), "bb": np.zeros(N_OPS),
        "Wv": np.zeros((h2, 1)), "bv": np.zeros(1),
    }
    return {k: v.astype(dtype) for k, v in p.items()}


def _trunk(params, X):
    h1 = np.tanh(X @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    return h1, h2


def masked_log_softmax(logits, mask):
    """Log-probabilities with masked entries at exactly -inf (probability 0)."""
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("every action of a head is masked")
    z = z - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_forward(params, obs, mask):
    """(probs over dims, per-dim conditional probs over ops, value) for one node.

    ``mask`` is the (dims, ops) legality table; ``probs_b[d]`` is the op
    distribution given dimension ``d`` (all zeros for an illegal ``d``).
    """
    x = np.asarray(obs, dtype=params["W1"].dtype)[None]
    _, h2 = _trunk(params, x)
    la = (h2 @ params["Wa"] + params["ba"])[0]
    lb = (h2 @ params["Wb"] + params["bb"])[0]
    v = float((h2 @ params["Wv"] + params["bv"])[0, 0])
    mask = np.asarray(mask, dtype=bool)
    pa = np.exp(masked_log_softmax(la, mask.any(axis=1)))
    pb = np.zeros((NUM_DIMS, N_OPS))
    for d in np.flatnonzero(mask.any(axis=1)):
        pb[d] = np.exp(masked_log_softmax(lb, mask[d]))
    return pa.astype(np.float64), pb, v


def _masked_probs(logits, mask) -> list:
    # plain-float softmax for the sampling hot path (heads have <= 12 entries);
    # caller guarantees at least one legal entry
    top = max(z for z, ok in zip(logits, mask) if ok)
    e = [math.exp(z - top) if ok else 0.0 for z, ok in zip(logits, mask)]
    tot = sum(e)
    return [x / tot for x in e]


def _draw_list(p, u) -> int:
    """``_draw`` for a plain list of probabilities."""
    acc, target, last = 0.0, u * sum(p), 0
    for i, x in enumerate(p):
        if x > 0:
            acc += x
            last = i
            if target < acc:
                return i
    return last


def _draw(p, u):
    """Inverse-CDF draw; never lands on a zero-probability entry."""
    c = np.cumsum(p)
    i = min(int(np.searchsorted(c, u * c[-1], side="right")), p.size - 1)
    while p[i] <= 0:  # only reachable when rounding pushes u * total past the last jump
        i -= 1
    return i


def sample_action(probs_a, probs_b, rng) -> tuple:
    """Draw (dim, op): dim from ``probs_a``, then op from ``probs_b[dim]`` (or ``probs_b`` if 1-D)."""
    dim = _draw(np.asarray(probs_a, dtype=np.float64), rng.random())
    pb = np.asarray(probs_b, dtype=np.float64)
    op = _draw(pb[dim] if pb.ndim == 2 else pb, rng.random())
    return dim, op


class PolicySampler:
    """Rollout-side policy sampling with a private generator.

    ``prefetch`` runs the network on a block of sibling observations;
    ``decide`` then masks and samples one of them.
    """

    def __init__(self, params, rng):
        self.params = params
        self.rng = rng

    def prefetch(self, obs) -> list:
        p = self.params
        x = np.asarray(obs, dtype=p["W1"].dtype)
        h2 = np.tanh(np.tanh(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])
        la = (h2 @ p["Wa"] + p["ba"]).astype(np.float64)
        lb = (h2 @ p["Wb"] + p["bb"]).astype(np.float64)
        v = (h2 @ p["Wv"][:, 0] + p["bv"][0]).astype(np.float64)
        return list(zip(la.tolist(), lb.tolist(), v.tolist()))

    def decide(self, pre, mask) -> Decision:
        la, lb, v = pre
        rows = mask.tolist()
        pa = _masked_probs(la, [any(r) for r in rows])
        dim = _draw_list(pa, self.rng.random())
        pb = _masked_probs(lb, rows[dim])
        op = _draw_list(pb, self.rng.random())
        return Decision(dim, op, math.log(pa[dim]) + math.log(pb[op]), v,
                        np.array(pa), np.array(pb))

    def __call__(self, obs, mask) -> Decision:
        return self.decide(self.prefetch(obs[None])[0], mask)


# --------------------------------------------------------------------------
# batches and loss

@dataclass
class Batch:
    obs: np.ndarray
    dims: np.ndarray
    ops: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    logp_old: np.ndarray
    v_old: np.ndarray
    pa_old: np.ndarray
    pb_old: np.ndarray
    rewards: np.ndarray
    adv: np.ndarray

    def __len__(self):
        return self.dims.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(**{k: v[idx] for k, v in self.__dict__.items()})


def make_batch(rollouts, normalize=True, dtype="float32") -> Batch:
    ros = [r for r in rollouts if len(r)]
    dims = np.concatenate([r.dims for r in ros]).astype(np.int64)
    masks = np.concatenate([np.stack(r.masks) for r in ros])
    n = dims.size
    rewards = np.concatenate([r.rewards for r in ros]).astype(np.float64)
    v_old = np.concatenate([r.values for r in ros]).astype(np.float64)
    adv = rewards - v_old
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return Batch(
        obs=np.concatenate([np.stack(r.obs) for r in ros]).astype(dtype),
        dims=dims,
        ops=np.concatenate([r.ops for r in ros]).astype(np.int64),
        mask_a=masks.any(axis=2),
        mask_b=masks[np.arange(n), dims],
        logp_old=np.concatenate([r.logp for r in ros]).astype(np.float64),
        v_old=v_old,
        pa_old=np.concatenate([np.stack(r.probs_a) for r in ros]).astype(np.float64),
        pb_old=np.concatenate([np.stack(r.probs_b) for r in ros]).astype(np.float64),
        rewards=rewards,
        adv=adv,
    )


def _entropy_terms(lp, mask):
    p = np.exp(lp)
    plogp = np.where(mask, p * np.where(mask, lp, 0.0), 0.0)
    H = -plogp.sum(axis=1)
    # d(-H)/dz_j = p_j (log p_j + H)
    dnegH = np.where(mask, p * (np.where(mask, lp, 0.0) + H[:, None]), 0.0)
    return p, H, dnegH


def loss_and_grads(params, mb: Batch, cfg: TrainConfig, kl_coeff: float):
    """Total loss on a minibatch and its gradient for every parameter.

    loss = policy surrogate + kl_coeff * KL(old || new) + vf_coeff * value loss
           - entropy_coeff * entropy, each averaged over the minibatch.
    """
    X = mb.obs
    n = len(mb)
    ar = np.arange(n)
    h1, h2 = _trunk(params, X)
    h2d = h2.astype(np.float64)
    la = h2d @ params["Wa"] + params["ba"]
    lb = h2d @ params["Wb"] + params["bb"]
    v = (h2d @ params["Wv"] + params["bv"])[:, 0]

    lpa = masked_log_softmax(la, mb.mask_a)
    lpb = masked_log_softmax(lb, mb.mask_b)
    pa, Ha, dnegHa = _entropy_terms(lpa, mb.mask_a)
    pb, Hb, dnegHb = _entropy_terms(lpb, mb.mask_b)
    logp = lpa[ar, mb.dims] + lpb[ar, mb.ops]
    A = mb.adv

    if cfg.algo == "ppo":
        ratio = np.exp(logp - mb.logp_old)
        lo, hi = 1 - cfg.clip, 1 + cfg.clip
        s1 = ratio * A
        s2 = np.clip(ratio, lo, hi) * A
        pi_loss = -np.minimum(s1, s2).mean()
        live = (s1 <= s2) | ((ratio > lo) & (ratio < hi))
        g_logp = -(A * ratio * live) / n
        kla = np.where(mb.mask_a, mb.pa_old * (np.log(np.where(mb.mask_a, mb.pa_old, 1.0) + 1e-300)
                                                 - np.where(mb.mask_a, lpa, 0.0)), 0.0).sum(axis=1)
        klb = np.where(mb.mask_b, mb.pb_old * (np.log(np.where(mb.mask_b, mb.pb_old, 1.0) + 1e-300)
                                                 - np.where(mb.mask_b, lpb, 0.0)), 0.0).sum(axis=1)
        kl = kla + klb
        kl_loss = kl_coeff * kl.mean()
        dla_kl = kl_coeff * (pa - mb.pa_old) / n
        dlb_kl = kl_coeff * (pb - mb.pb_old) / n

        vf1 = (v - mb.rewards) ** 2
        vc = mb.v_old + np.clip(v - mb.v_old, -cfg.vf_clip, cfg.vf_clip)
        vf2 = (vc - mb.rewards) ** 2
        vf_loss = np.maximum(vf1, vf2).mean()
        inside = np.abs(v - mb.v_old) < cfg.vf_clip
        dv = np.where(vf1 >= vf2, 2 * (v - mb.rewards), 2 * (vc - mb.rewards) * inside) / n
    else:
        ratio = np.ones(n)
        pi_loss = -(logp * A).mean()
        g_logp = -A / n
        kl = np.zeros(n)
        kl_loss = 0.0
        dla_kl = dlb_kl = 0.0
        vf_loss = ((v - mb.rewards) ** 2).mean()
        dv = 2 * (v - mb.rewards) / n

    ent = (Ha + Hb).mean()
    loss = pi_loss + kl_loss + cfg.vf_coeff * vf_loss - cfg.entropy_coeff * ent

    oh_a = np.zeros_like(pa)
    oh_a[ar, mb.dims] = 1.0
    oh_b = np.zeros_like(pb)
    oh_b[ar, mb.ops] = 1.0
    dla = g_logp[:, None] * (oh_a - pa) + dla_kl + cfg.entropy_coeff * dnegHa / n
    dlb = g_logp[:, None] * (oh_b - pb) + dlb_kl + cfg.entropy_coeff * dnegHb / n
    dv = cfg.vf_coeff * dv

    dt = params["W1"].dtype
    g = {
        "Wa": h2d.T @ dla, "ba": dla.sum(0),
        "Wb": h2d.T @ dlb, "bb": dlb.sum(0),
        "Wv": h2d.T @ dv[:, None], "bv": np.array([dv.sum()]),
    }
    dh2 = (dla @ params["Wa"].T + dlb @ params["Wb"].T + dv[:, None] @ params["Wv"].T).astype(dt)
    dz2 = dh2 * (1 - h2 * h2)
    g["W2"] = h1.T @ dz2
    g["b2"] = dz2.sum(0)
    dz1 = (dz2 @ params["W2"].T) * (1 - h1 * h1)
    g["W1"] = X.T @ dz1
    g["b1"] = dz1.sum(0)
    g = {k: np.asarray(v, dtype=dt) for k, v in g.items()}
    stats = {"loss": float(loss), "policy_loss": float(pi_loss), "vf_loss": float(vf_loss),
             "entropy": float(ent), "kl": float(kl.mean()), "ratio_mean": float(ratio.mean())}
    return float(loss), g, stats


# --------------------------------------------------------------------------
# optimiser

class Learner:
    """Parameters plus Adam moments and the adaptive KL coefficient."""

    def __init__(self, params: dict, cfg: TrainConfig, seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.kl_coeff = cfg.kl_coeff
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.rng = np.random.default_rng(seed)

    def _adam(self, grads, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        lr = self.cfg.lr * np.sqrt(1 - beta2 ** self.t) / (1 - beta1 ** self.t)
        for k, g in grads.items():
            self.m[k] = beta1 * self.m[k] + (1 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1 - beta2) * g * g
            self.params[k] = self.params[k] - (lr * self.m[k] / (np.sqrt(self.v[k]) + eps)).astype(g.dtype)

    def update(self, batch: Batch) -> dict:
        cfg = self.cfg
        saved = ({k: v.copy() for k, v in self.params.items()},
                 {k: v.copy() for k, v in self.m.items()},
                 {k: v.copy() for k, v in self.v.items()}, self.t)
        n = len(batch)
        mb = min(cfg.minibatch, n)
        last = []
        for it in range(cfg.sgd_iters):
            perm = self.rng.permutation(n)
            epoch = []
            for s in range(0, n - mb + 1, mb):
                loss, grads, st = loss_and_grads(self.params, batch.take(perm[s:s + mb]), cfg, self.kl_coeff)
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    self.params, self.m, self.v, self.t = saved
                    log.warning("non-finite loss; update aborted and parameters restored")
                    return {"aborted": True, "kl": float("nan"), "entropy": float("nan"),
                            "kl_coeff": self.kl_coeff}
                self._adam(grads)
                epoch.append(st)
            last = epoch
        diag = {k: float(np.mean([s[k] for s in last])) for k in last[0]}
        if cfg.algo == "ppo":
            if diag["kl"] > 2 * cfg.kl_target:
                self.kl_coeff *= 1.5
            elif diag["kl"] < 0.5 * cfg.kl_target:
                self.kl_coeff *= 0.5
        diag["kl_coeff"] = self.kl_coeff
        diag["aborted"] = False
        return diag


def ppo_update(params: dict, batch: Batch, cfg: TrainConfig, learner: Optional[Learner] = None):
    """One PPO update (``sgd_iters`` passes of minibatch Adam steps). Returns (params, diagnostics)."""
    if learner is None:
        learner = Learner({k: v.copy() for k, v in params.items()}, cfg, seed=cfg.seed)
    diag = learner.update(batch)
    return learner.params, diag


# --------------------------------------------------------------------------
# training loop

_WORKER = {}


def _init_worker(rs: RuleSet, env_cfg: EnvConfig):
    _WORKER["rs"] = rs
    _WORKER["env"] = env_cfg


def _rollout_job(params, key, rs=None, env_cfg=None) -> Rollout:
    rs = _WORKER["rs"] if rs is None else rs
    env_cfg = _WORKER["env"] if env_cfg is None else env_cfg
    ro = run_rollout(rs, env_cfg, PolicySampler(params, np.random.default_rng(key)))
    return finalize_rewards(ro, env_cfg)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_tree: Optional[DecisionTree] = None
    best_key: tuple = (True, float("inf"))
    best_stats: Optional[dict] = None
    params: Optional[dict] = None
    rollouts: int = 0
    timesteps: int = 0
    updates: int = 0
    env_cfg: Optional[EnvConfig] = None
    train_cfg: Optional[TrainConfig] = None

    CSV_FIELDS = ("iteration", "timesteps", "rollouts", "mean_reward", "best_time",
                  "best_bytes_per_rule", "best_truncated", "best_objective", "entropy", "kl",
                  "truncated_frac")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def deterministic_rows(self):
        return [{k: v for k, v in r.items() if k != "wall"} for r in self.rows]

    def save_checkpoint(self, path):
        meta = json.dumps({"version": 1, "env": asdict(self.env_cfg), "train": asdict(self.train_cfg),
                           "updates": self.updates, "timesteps": self.timesteps})
        np.savez(path, __meta__=np.array(meta), **self.params)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k: z[k] for k in PARAM_NAMES}
    return params, meta


def _track_best(report: TrainReport, ro: Rollout, env_cfg: EnvConfig):
    times, spaces = penalized_costs(ro.tree)
    root = ro.tree.root
    key = (ro.truncated, env_cfg.objective(times[root], spaces[root]))
    if key < report.best_key:
        report.best_key = key
        report.best_tree = ro.tree
        report.best_stats = tree_stats([ro.tree]).summary()


def train(rs: RuleSet, env_cfg: EnvConfig, cfg: TrainConfig, progress=None) -> TrainReport:
    """Alternate batches of rollouts under a frozen policy with PPO updates.

    Rollout ``i`` of iteration ``it`` samples with its own generator seeded
    from ``(seed, it, i)``, and a batch is always the shortest prefix of
    rollouts reaching ``cfg.batch`` steps, so results do not depend on the
    worker count.
    """
    if len(rs) == 0:
        raise ValueError("rule set is empty")
    learner = Learner(init_params(OBS_LEN, cfg.hidden, seed=[cfg.seed, 0], dtype=cfg.dtype), cfg,
                      seed=cfg.seed)
    report = TrainReport(env_cfg=env_cfg, train_cfg=cfg)
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(rs, env_cfg))
    t0 = time.perf_counter()
    it = 0
    try:
        while report.timesteps < cfg.total_timesteps:
            if cfg.max_rollouts is not None and report.rollouts >= cfg.max_rollouts:
                break
            params = {k: v.copy() for k, v in learner.params.items()}
            batch_ros, steps, i = [], 0, 0
            while steps < cfg.batch:
                if cfg.max_rollouts is not None and report.rollouts + len(batch_ros) >= cfg.max_rollouts:
                    break
                wave = cfg.workers if pool else 1
                keys = [[cfg.seed, 1, it, i + j] for j in range(wave)]
                if pool:
                    results = list(pool.map(_rollout_job, [params] * wave, keys))
                else:
                    results = [_rollout_job(params, keys[0], rs, env_cfg)]
                for ro in results:
                    if steps >= cfg.batch or (cfg.max_rollouts is not None and
                                              report.rollouts + len(batch_ros) >= cfg.max_rollouts):
                        break
                    ro.tree.ruleset = rs
                    batch_ros.append(ro)
                    steps += len(ro)
                    _track_best(report, ro, env_cfg)
                i += wave
                if steps == 0:
                    break  # the root is already terminal: nothing to learn
            report.rollouts += len(batch_ros)
            report.timesteps += steps
            if steps == 0:
                break
            batch = make_batch(batch_ros, cfg.normalize_advantages, cfg.dtype)
            diag = learner.update(batch)
            report.updates += 1
            row = {
                "iteration": it,
                "timesteps": report.timesteps,
                "rollouts": report.rollouts,
                "mean_reward": float(batch.rewards.mean()),
                "best_time": report.best_stats["time"],
                "best_bytes_per_rule": report.best_stats["bytes_per_rule"],
                "best_truncated": int(report.best_key[0]),
                "best_objective": report.best_key[1],
                "entropy": diag["entropy"],
                "kl": diag["kl"],
                "truncated_frac": float(np.mean([r.truncated for r in batch_ros])),
                "wall": time.perf_counter() - t0,
            }
            report.rows.append(row)
            if progress:
                progress(row)
            it += 1
    finally:
        if pool:
            pool.shutdown()
    if report.best_tree is None:
        ro = _rollout_job(learner.params, [cfg.seed, 1, it, 0], rs, env_cfg)
        _track_best(report, ro, env_cfg)
    report.params = learner.params
    return report
