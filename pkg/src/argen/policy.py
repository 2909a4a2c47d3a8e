"""Factorised sampler-hyperparameter policy, REINFORCE training and greedy generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .face import ClipRecord, EmotionDataset
from .labels import LATENT_DIM, N_IDENTITY
from .rewards import RewardConfig, RewardParts, audit_composites, score_clip
from .video import SamplerConfig, generate_clips

logger = logging.getLogger(__name__)

S_T = (5, 10, 15, 20)
S_A = (2.0, 3.0)
S_B = (2.0, 3.0)
TOKEN_DIM = 32
TRUNK_DIM = 64
HEAD_INIT = 0.01
TEXT_DIM = 32


@dataclass(frozen=True)
class Action:
    T: int
    a: float
    b: float

    def __post_init__(self):
        if self.T not in S_T or self.a not in S_A or self.b not in S_B:
            raise ValueError(f"action {self} off the grid")

    @property
    def index(self) -> int:
        return action_index(S_T.index(self.T), S_A.index(self.a), S_B.index(self.b))


def action_index(i_t: int, i_a: int, i_b: int) -> int:
    return (i_t * len(S_A) + i_a) * len(S_B) + i_b


def action_from_index(k: int) -> Action:
    i_t, rest = divmod(int(k), len(S_A) * len(S_B))
    i_a, i_b = divmod(rest, len(S_B))
    return Action(S_T[i_t], S_A[i_a], S_B[i_b])


ALL_ACTIONS = tuple(action_from_index(k) for k in range(len(S_T) * len(S_A) * len(S_B)))


@dataclass
class PolicyParams:
    weights: dict

    def copy(self):
        return PolicyParams({k: v.copy() for k, v in self.weights.items()})


def init_policy(rng, d_c: int = TEXT_DIM, d_r: int = LATENT_DIM) -> PolicyParams:
    def lin(i, o, scale=None):
        return rng.normal(0.0, scale if scale is not None else 1.0 / np.sqrt(i), size=(i, o))

    w = {
        "Wc": lin(d_c, TOKEN_DIM), "bc": np.zeros(TOKEN_DIM),
        "Wr": lin(d_r, TOKEN_DIM), "br": np.zeros(TOKEN_DIM),
        "Wq": lin(TOKEN_DIM, TOKEN_DIM), "Wk": lin(TOKEN_DIM, TOKEN_DIM), "Wv": lin(TOKEN_DIM, TOKEN_DIM),
        "W1": lin(TOKEN_DIM, TRUNK_DIM), "b1": np.zeros(TRUNK_DIM),
        "W2": lin(TRUNK_DIM, TRUNK_DIM), "b2": np.zeros(TRUNK_DIM),
    }
    for name, size in (("T", len(S_T)), ("a", len(S_A)), ("b", len(S_B))):
        w[f"H{name}"] = lin(TRUNK_DIM, size, HEAD_INIT)
        w[f"h{name}"] = np.zeros(size)
    return PolicyParams(w)


def _encode(w, c, r):
    c = np.atleast_2d(np.asarray(c, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if c.shape[1] != w["Wc"].shape[0] or r.shape[1] != w["Wr"].shape[0] or len(c) != len(r):
        raise ValueError(f"state inputs have shapes {c.shape} and {r.shape}")
    tok = np.stack([c @ w["Wc"] + w["bc"], r @ w["Wr"] + w["br"]], axis=1)  # (n, 2, D)
    q, k, v = tok @ w["Wq"], tok @ w["Wk"], tok @ w["Wv"]
    s = q @ k.transpose(0, 2, 1) / np.sqrt(TOKEN_DIM)
    s = s - s.max(axis=2, keepdims=True)
    att = np.exp(s)
    att /= att.sum(axis=2, keepdims=True)
    o = att @ v
    pooled = o.mean(axis=1)
    h1 = np.tanh(pooled @ w["W1"] + w["b1"])
    state = np.tanh(h1 @ w["W2"] + w["b2"])
    cache = dict(c=c, r=r, tok=tok, q=q, k=k, v=v, att=att, pooled=pooled, h1=h1, state=state)
    return state, cache


def encode_state(c, r, params: PolicyParams) -> np.ndarray:
    state, _ = _encode(params.weights, c, r)
    return state if np.ndim(c) > 1 else state[0]


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyDists:
    p_T: np.ndarray
    p_a: np.ndarray
    p_b: np.ndarray

    def joint(self) -> np.ndarray:
        """(..., 16) probabilities in action-index order."""
        j = self.p_T[..., :, None, None] * self.p_a[..., None, :, None] * self.p_b[..., None, None, :]
        return j.reshape(*j.shape[:-3], -1)

    def log_prob(self, action: Action) -> float:
        return float(np.log(self.p_T[..., S_T.index(action.T)]) + np.log(self.p_a[..., S_A.index(action.a)])
                     + np.log(self.p_b[..., S_B.index(action.b)]))


def head_logits(state, params: PolicyParams):
    w = params.weights
    s = np.asarray(state, dtype=float)
    return s @ w["HT"] + w["hT"], s @ w["Ha"] + w["ha"], s @ w["Hb"] + w["hb"]


def policy_forward(state, params: PolicyParams) -> PolicyDists:
    return PolicyDists(*(_softmax(l) for l in head_logits(state, params)))


def _draw(p, u):
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)


def sample_action(dists: PolicyDists, rng) -> Action:
    u = rng.random(3)
    return Action(S_T[_draw(dists.p_T, u[0])], S_A[_draw(dists.p_a, u[1])], S_B[_draw(dists.p_b, u[2])])


def select_action_greedy(dists: PolicyDists) -> Action:
    # np.argmax returns the first maximum, i.e. the lowest grid index on ties
    return Action(S_T[int(np.argmax(dists.p_T))], S_A[int(np.argmax(dists.p_a))], S_B[int(np.argmax(dists.p_b))])


def reinforce_objective_and_grads(params: PolicyParams, c, r, actions, rewards):
    """J = mean_j R_j * sum_i log pi_i(u_ji); returns (J, dJ/dw)."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim != 1 or len(rewards) == 0:
        raise ValueError("need a non-empty 1-d reward vector")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("non-finite reward")
    w = params.weights
    state, cache = _encode(w, c, r)
    n = len(rewards)
    J = 0.0
    grads = {}
    ds = np.zeros_like(state)
    for name, grid, attr in (("T", S_T, "T"), ("a", S_A, "a"), ("b", S_B, "b")):
        logits = state @ w[f"H{name}"] + w[f"h{name}"]
        p = _softmax(logits)
        idx = np.array([grid.index(getattr(u, attr)) for u in actions])
        J += float(np.sum(rewards * np.log(p[np.arange(n), idx]))) / n
        onehot = np.zeros_like(p)
        onehot[np.arange(n), idx] = 1.0
        dl = rewards[:, None] * (onehot - p) / n
        grads[f"H{name}"] = state.T @ dl
        grads[f"h{name}"] = dl.sum(axis=0)
        ds += dl @ w[f"H{name}"].T
    # trunk
    da2 = ds * (1.0 - cache["state"] ** 2)
    grads["W2"] = cache["h1"].T @ da2
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ w["W2"].T) * (1.0 - cache["h1"] ** 2)
    grads["W1"] = cache["pooled"].T @ da1
    grads["b1"] = da1.sum(axis=0)
    dpool = da1 @ w["W1"].T
    # attention over the two tokens
    do = np.repeat(dpool[:, None, :] / 2.0, 2, axis=1)
    att, q, k, v, tok = cache["att"], cache["q"], cache["k"], cache["v"], cache["tok"]
    datt = do @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ do
    dsc = att * (datt - (datt * att).sum(axis=2, keepdims=True)) / np.sqrt(TOKEN_DIM)
    dq = dsc @ k
    dk = dsc.transpose(0, 2, 1) @ q
    flat = tok.reshape(-1, TOKEN_DIM)
    grads["Wq"] = flat.T @ dq.reshape(-1, TOKEN_DIM)
    grads["Wk"] = flat.T @ dk.reshape(-1, TOKEN_DIM)
    grads["Wv"] = flat.T @ dv.reshape(-1, TOKEN_DIM)
    dtok = dq @ w["Wq"].T + dk @ w["Wk"].T + dv @ w["Wv"].T
    grads["Wc"] = cache["c"].T @ dtok[:, 0]
    grads["bc"] = dtok[:, 0].sum(axis=0)
    grads["Wr"] = cache["r"].T @ dtok[:, 1]
    grads["br"] = dtok[:, 1].sum(axis=0)
    return J, grads


def reinforce_update(params: PolicyParams, batch, lr: float = 1e-4, opt: nn.Adam | None = None):
    """One Adam ascent step on a batch of ``(c, r, Action, reward)``; returns (params, objective)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    c = np.array([b[0] for b in batch])
    r = np.array([b[1] for b in batch])
    actions = [b[2] for b in batch]
    rewards = np.array([b[3] for b in batch], dtype=float)
    J, grads = reinforce_objective_and_grads(params, c, r, actions, rewards)
    opt = opt if opt is not None else nn.Adam(lr)
    if np.all(rewards == 0.0):
        return params, J
    opt.step(params.weights, {k: -g for k, g in grads.items()}, lr=lr)
    return params, J


# --------------------------------------------------------------------------
# training


@dataclass
class Pair:
    """One generation request: the identity reference latent and its prompt embedding."""

    x0: np.ndarray
    c: np.ndarray
    emotion: str
    identity_id: int
    text: str = ""


@dataclass
class RLConfig:
    lr: float = 1e-4
    batch_size: int = 32
    pool_size: int = 4
    max_iters: int = 2000
    val_every: int = 50
    patience: int = 200
    tol: float = 1e-3
    dup_tries: int = 10
    train_fraction: float = 0.8


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, mean reward, loss, val reward or nan)
    best_iteration: int = 0
    best_val: float = float("-inf")
    converged: bool = False

    def to_csv(self) -> str:
        lines = ["iteration,mean_reward,loss,val_reward"]
        for it, mr, loss, val in self.rows:
            v = "" if val != val else f"{val:.10g}"
            lines.append(f"{it},{mr:.10g},{loss:.10g},{v}")
        return "\n".join(lines) + "\n"


def split_pairs(n: int, rng, train_fraction: float = 0.8):
    order = rng.permutation(n)
    cut = max(1, min(n - 1, int(round(train_fraction * n)))) if n > 1 else n
    return np.sort(order[:cut]), np.sort(order[cut:])


def sample_pool(dists: PolicyDists, rng, pool_size: int = 4, tries: int = 10):
    """Distinct actions where possible: a duplicate is redrawn up to ``tries`` times."""
    pool = []
    for _ in range(pool_size):
        u = sample_action(dists, rng)
        for _ in range(tries):
            if u not in pool:
                break
            u = sample_action(dists, rng)
        pool.append(u)
    return pool


def _raw_reward(value, reward_config: RewardConfig) -> float:
    return reward_config.composite(value) if isinstance(value, RewardParts) else float(value)


def _is_better(val, best, tol):
    return val > best + tol


def train_policy(c, r, reward_fn, reward_config: RewardConfig = RewardConfig(), rl: RLConfig = RLConfig(),
                 rng=None, params: PolicyParams | None = None, split=None):
    """Stage-1 REINFORCE loop.

    ``c`` (n, 32) and ``r`` (n, 12) are the pair states; ``reward_fn(i, action)``
    returns RewardParts (combined with ``reward_config``) or a raw float composite.
    One iteration draws ``batch_size / pool_size`` training pairs, a pool per pair,
    audits each pool and applies one update. Returns (best params, log, (train, val)).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c = np.atleast_2d(np.asarray(c, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    n = len(c)
    if n == 0:
        raise ValueError("no pairs")
    train_idx, val_idx = split if split is not None else split_pairs(n, rng, rl.train_fraction)
    if len(val_idx) == 0:
        val_idx = train_idx
    params = params if params is not None else init_policy(rng, c.shape[1], r.shape[1])
    opt = nn.Adam(rl.lr)
    per_iter = max(1, rl.batch_size // rl.pool_size)
    log = TrainLog()
    best = params.copy()
    history = []  # (iteration, best val so far)

    def validate():
        dists = policy_forward(encode_state(c[val_idx], r[val_idx], params), params)
        vals = [_raw_reward(reward_fn(int(i), select_action_greedy(PolicyDists(dists.p_T[j], dists.p_a[j],
                                                                                  dists.p_b[j]))), reward_config)
                for j, i in enumerate(val_idx)]
        return float(np.mean(vals))

    for it in range(1, rl.max_iters + 1):
        chosen = rng.choice(train_idx, size=per_iter, replace=True)
        dists = policy_forward(encode_state(c[chosen], r[chosen], params), params)
        batch, rewards = [], []
        for j, i in enumerate(chosen):
            pool = sample_pool(PolicyDists(dists.p_T[j], dists.p_a[j], dists.p_b[j]), rng, rl.pool_size,
                               rl.dup_tries)
            raw = np.array([[_raw_reward(reward_fn(int(i), u), reward_config) for u in pool]])
            audited = audit_composites(raw, reward_config.k, reward_config.gamma)[0]
            for u, rew in zip(pool, audited):
                batch.append((c[i], r[i], u, rew))
                rewards.append(rew)
        params, J = reinforce_update(params, batch, rl.lr, opt)
        val = float("nan")
        if it % rl.val_every == 0 or it == rl.max_iters:
            val = validate()
            if val >= log.best_val:  # ties go to the later, longer-trained checkpoint
                log.best_val, log.best_iteration, best = val, it, params.copy()
            history.append((it, log.best_val))
            logger.info("policy iter %d mean reward %.4f val %.4f", it, np.mean(rewards), val)
        log.rows.append((it, float(np.mean(rewards)), -J, val))
        if history and history[-1][0] == it:
            past = [b for i0, b in history if i0 <= it - rl.patience]
            if past and log.best_val - past[-1] < rl.tol:
                log.converged = True
                break
    if not log.converged:
        logger.warning("policy did not converge in %d iterations; returning best checkpoint", rl.max_iters)
    return best, log, (train_idx, val_idx)


def evaluate_policy(c, r, reward_fn, params: PolicyParams | None, reward_config: RewardConfig = RewardConfig(),
                    rng=None, pools_per_pair: int = 8, pool_size: int = 4, dup_tries: int = 10):
    """Mean audited composite of pools drawn from ``params`` (uniform heads when None)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    c = np.atleast_2d(np.asarray(c, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if params is None:
        uni = PolicyDists(np.full(len(S_T), 1 / len(S_T)), np.full(len(S_A), 1 / len(S_A)),
                          np.full(len(S_B), 1 / len(S_B)))
        dists = [uni] * len(c)
    else:
        d = policy_forward(encode_state(c, r, params), params)
        dists = [PolicyDists(d.p_T[j], d.p_a[j], d.p_b[j]) for j in range(len(c))]
    out = []
    for i in range(len(c)):
        for _ in range(pools_per_pair):
            pool = sample_pool(dists[i], rng, pool_size, dup_tries)
            raw = np.array([[_raw_reward(reward_fn(i, u), reward_config) for u in pool]])
            out.extend(audit_composites(raw, reward_config.k, reward_config.gamma)[0])
    return float(np.mean(out))


# --------------------------------------------------------------------------
# scoring table and generation


def clip_rng(seed: int, pair_idx: int, action_idx: int, stream: int = 0):
    """Counter-derived generator: a clip depends only on (seed, pair, action, stream)."""
    return np.random.default_rng([int(seed), int(stream), int(pair_idx), int(action_idx)])


def generate_for_actions(pairs, actions, theta, sched, seed, config: SamplerConfig, stream: int = 0):
    """One clip per ``(pair, action)`` item; items are batched by step count."""
    clips = [None] * len(pairs)
    errors = {}
    by_T: dict = {}
    for i, u in enumerate(actions):
        by_T.setdefault(u.T, []).append(i)
    for T in sorted(by_T):
        idx = by_T[T]
        try:
            out = _generate_items([pairs[i] for i in idx], [actions[i] for i in idx], idx, theta, sched, seed,
                                  config, stream)
        except (FloatingPointError, ValueError) as exc:
            logger.warning("batch T=%d failed (%s); retrying items one by one", T, exc)
            out = []
            for i in idx:
                try:
                    out.extend(_generate_items([pairs[i]], [actions[i]], [i], theta, sched, seed, config, stream))
                except (FloatingPointError, ValueError) as item_exc:
                    errors[i] = str(item_exc)
                    out.append(None)
        for i, clip in zip(idx, out):
            clips[i] = clip
    return clips, errors


def _generate_items(pairs, actions, idx, theta, sched, seed, config, stream):
    rngs = [clip_rng(seed, i, u.index, stream) for i, u in zip(idx, actions)]
    x0 = np.array([p.x0 for p in pairs])
    cc = np.array([p.c for p in pairs])
    return generate_clips(x0, cc, x0, actions[0].T, [(u.a, u.b) for u in actions], theta, sched, rngs, config)


def reward_table(pairs, theta, sched, seed: int, a_max: float, M_score: int = 8,
                 config: SamplerConfig = SamplerConfig(), step_set=S_T):
    """(n_pairs, 16, 4) array of (r_s, r_q, r_f, r_e) for every pair and grid action."""
    n = len(pairs)
    table = np.zeros((n, len(ALL_ACTIONS), 4))
    cfg = SamplerConfig(**{**config.__dict__, "M": M_score, "render": True})
    items = [(i, u) for i in range(n) for u in ALL_ACTIONS]
    clips, errors = generate_for_actions([pairs[i] for i, _ in items], [u for _, u in items], theta, sched, seed,
                                         cfg, stream=1)
    if errors:
        raise RuntimeError(f"{len(errors)} scoring clips failed: {next(iter(errors.values()))}")
    for (i, u), clip in zip(items, clips):
        p = score_clip(clip.latents, clip.frames, u.T, a_max, step_set)
        table[i, u.index] = (p.r_s, p.r_q, p.r_f, p.r_e)
    return table


def table_reward_fn(table):
    def fn(i, action):
        return RewardParts(*table[i, action.index])
    return fn


@dataclass
class GenerationRecord:
    pair_index: int
    action: Action
    clamp_count: int
    error: str | None = None


def adaptive_generate(pairs, params: PolicyParams | None, theta, sched, seed: int,
                      config: SamplerConfig = SamplerConfig(), actions=None, prefix: str = "gen"):
    """Stage 2: greedy action per pair, full-length clip, labelled with the prompt's emotion.

    ``actions`` overrides the policy (used for baselines). Returns (dataset, records).
    """
    if actions is None:
        if params is None:
            raise ValueError("a policy or explicit actions are required")
        c = np.array([p.c for p in pairs])
        r = np.array([p.x0 for p in pairs])
        d = policy_forward(encode_state(c, r, params), params)
        actions = [select_action_greedy(PolicyDists(d.p_T[j], d.p_a[j], d.p_b[j])) for j in range(len(pairs))]
    clips, errors = generate_for_actions(pairs, actions, theta, sched, seed, config, stream=2)
    records, out = [], []
    for i, (pair, u, clip) in enumerate(zip(pairs, actions, clips)):
        if clip is None:
            records.append(GenerationRecord(i, u, 0, errors.get(i, "failed")))
            continue
        records.append(GenerationRecord(i, u, clip.clamp_count))
        out.append(ClipRecord(f"{prefix}{i:04d}", pair.emotion, pair.identity_id, "aug", clip.latents, clip.frames,
                              float(clip.latents[:, N_IDENTITY:].max())))
    return EmotionDataset(out, np.zeros((0, N_IDENTITY))), records


def random_actions(n: int, rng):
    return [ALL_ACTIONS[int(k)] for k in rng.integers(0, len(ALL_ACTIONS), size=n)]
