"""Tabular MDPs, built-in toy environments, and exact solvers.

Everything in this module is small enough to solve exactly, so these
functions double as the ground-truth oracles for the learned components:
value iteration produces the optimal policy, finite-horizon backward
induction produces expected episodic returns, and both are cross-checked
against Monte-Carlo rollouts in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_ATOL = 1e-9

# Monolith grid actions, in tie-break priority order.
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense dynamics.

    transition[s, a, s'] is the probability of landing in s' after taking
    action a in state s; reward[s, a] is paid when a is taken in s.
    Terminal states are absorbing self-loops that pay nothing; rollouts
    stop on entering one.  Instances are immutable: the arrays are frozen
    at construction and safe for concurrent reads.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    start_dist: np.ndarray
    horizon: int
    terminal_states: frozenset = frozenset()
    name: str = "mdp"

    def __post_init__(self):
        t = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        s0 = np.array(self.start_dist, dtype=float)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {t.shape}")
        n_states, n_actions = t.shape[0], t.shape[1]
        if r.shape != (n_states, n_actions):
            raise ValueError(f"reward must be (S, A) = {(n_states, n_actions)}, got {r.shape}")
        if s0.shape != (n_states,):
            raise ValueError(f"start_dist must be (S,), got {s0.shape}")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=2) - 1.0) > ROW_ATOL):
            raise ValueError("every transition row must be a distribution over next states")
        if np.any(s0 < 0) or abs(s0.sum() - 1.0) > ROW_ATOL:
            raise ValueError("start_dist must be a distribution over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        terminal = frozenset(int(s) for s in self.terminal_states)
        for s in terminal:
            if not (0 <= s < n_states):
                raise ValueError(f"terminal state {s} out of range")
            if np.any(r[s] != 0.0) or not np.allclose(t[s, :, s], 1.0, atol=ROW_ATOL):
                raise ValueError(f"terminal state {s} must be an absorbing zero-reward self-loop")
        for arr in (t, r, s0):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "start_dist", s0)
        object.__setattr__(self, "terminal_states", terminal)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def is_terminal(self, state: int) -> bool:
        return state in self.terminal_states


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy: probs[s, a] = probability of action a in state s."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"policy must be (S, A), got shape {p.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_ATOL):
            raise ValueError("every policy row must be a distribution over actions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def is_deterministic(self) -> bool:
        return bool(np.all(self.probs.max(axis=1) == 1.0))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.shape[0], n_actions))
        p[np.arange(actions.shape[0]), actions] = 1.0
        return cls(p)


@dataclass(frozen=True)
class TabularSolution:
    """Output of value iteration: V*, Q*, and the greedy optimal policy."""

    v_star: np.ndarray
    q_star: np.ndarray
    policy_star: TabularPolicy


def build_monolith_grid(size: int, gamma: float = 0.99, horizon: int | None = None) -> TabularMdp:
    """Square grid with a single absorbing goal cell at the center.

    Four deterministic move actions (up/down/left/right); moving into a
    wall leaves the agent in place.  Entering the goal pays +1 and ends
    the episode; every other transition pays 0.  Episodes start uniformly
    over the non-goal cells.  `size` must be odd so a center exists.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"grid size must be an odd integer >= 3, got {size}")
    n = size * size
    goal = (size // 2) * size + size // 2
    if horizon is None:
        horizon = 4 * size

    transition = np.zeros((n, 4, n))
    reward = np.zeros((n, 4))
    for s in range(n):
        if s == goal:
            transition[s, :, s] = 1.0
            continue
        row, col = divmod(s, size)
        for a, (dr, dc) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
            nr, nc = row + dr, col + dc
            if 0 <= nr < size and 0 <= nc < size:
                nxt = nr * size + nc
            else:
                nxt = s
            transition[s, a, nxt] = 1.0
            if nxt == goal:
                reward[s, a] = 1.0

    start = np.full(n, 1.0 / (n - 1))
    start[goal] = 0.0
    return TabularMdp(
        transition=transition,
        reward=reward,
        gamma=gamma,
        start_dist=start,
        horizon=horizon,
        terminal_states=frozenset({goal}),
        name=f"monolith{size}",
    )


def build_single_state(rewards, gamma: float = 0.99, horizon: int = 10) -> TabularMdp:
    """One self-looping state with one reward per action (a bandit)."""
    rewards = np.asarray(rewards, dtype=float)
    n_actions = rewards.shape[0]
    transition = np.ones((1, n_actions, 1))
    return TabularMdp(
        transition=transition,
        reward=rewards.reshape(1, n_actions),
        gamma=gamma,
        start_dist=np.array([1.0]),
        horizon=horizon,
        name=f"single_state{n_actions}",
    )


def build_chain(length: int, gamma: float = 0.99, horizon: int | None = None) -> TabularMdp:
    """Deterministic chain 0 -> 1 -> ... with an absorbing reward at the end.

    Action 0 advances, action 1 stays put.  Entering the last state pays +1.
    """
    if length < 2:
        raise ValueError("chain needs at least 2 states")
    if horizon is None:
        horizon = length
    transition = np.zeros((length, 2, length))
    reward = np.zeros((length, 2))
    for s in range(length - 1):
        transition[s, 0, s + 1] = 1.0
        transition[s, 1, s] = 1.0
        if s + 1 == length - 1:
            reward[s, 0] = 1.0
    transition[length - 1, :, length - 1] = 1.0
    start = np.zeros(length)
    start[0] = 1.0
    return TabularMdp(
        transition=transition,
        reward=reward,
        gamma=gamma,
        start_dist=start,
        horizon=horizon,
        terminal_states=frozenset({length - 1}),
        name=f"chain{length}",
    )


def random_mdp(
    n_states: int,
    n_actions: int,
    horizon: int,
    gamma: float = 0.95,
    rng: np.random.Generator | None = None,
    n_terminal: int = 0,
) -> TabularMdp:
    """Random dense MDP (Dirichlet rows, uniform rewards) for property tests."""
    rng = np.random.default_rng(rng)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    start = rng.dirichlet(np.ones(n_states))
    terminal = set()
    if n_terminal > 0:
        # Never absorb the whole start distribution.
        candidates = [s for s in range(n_states) if start[s] < 0.99]
        terminal = set(rng.choice(candidates, size=min(n_terminal, len(candidates)), replace=False).tolist())
        for s in terminal:
            transition[s] = 0.0
            transition[s, :, s] = 1.0
            reward[s] = 0.0
    return TabularMdp(
        transition=transition,
        reward=reward,
        gamma=gamma,
        start_dist=start,
        horizon=horizon,
        terminal_states=frozenset(terminal),
        name=f"random{n_states}x{n_actions}",
    )


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> TabularSolution:
    """Solve the discounted MDP to a sup-norm Bellman residual <= tol.

    Greedy ties break toward the lowest action index, so the returned
    policy is deterministic in the strict sense required by the
    concentrability analysis.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    gamma = mdp.gamma
    while True:
        q = mdp.reward + gamma * mdp.transition @ v
        v_next = q.max(axis=1)
        delta = np.abs(v_next - v).max()
        v = v_next
        # One more application of the Bellman operator contracts by gamma,
        # so the residual of v is at most gamma * delta.
        if gamma * delta <= tol or delta == 0.0:
            break
    q = mdp.reward + gamma * mdp.transition @ v
    v = q.max(axis=1)
    policy = TabularPolicy.deterministic(q.argmax(axis=1), mdp.n_actions)
    return TabularSolution(v_star=v, q_star=q, policy_star=policy)


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Exact discounted V^pi via a linear solve (infinite horizon)."""
    _check_dims(mdp, policy)
    p_pi = np.einsum("sa,sap->sp", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def episodic_return(mdp: TabularMdp, policy: TabularPolicy, discount: float = 1.0) -> float:
    """Exact expected episodic return over the MDP's horizon.

    Backward induction over `horizon` steps.  With discount=1 and sparse
    goal-entry rewards this equals the probability of reaching the goal
    within the horizon, which is what rollout success rates estimate.
    """
    _check_dims(mdp, policy)
    v = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        q = mdp.reward + discount * mdp.transition @ v
        v = np.einsum("sa,sa->s", policy.probs, q)
    return float(mdp.start_dist @ v)


def epsilon_noised(policy: TabularPolicy, eps: float) -> TabularPolicy:
    """Mix a policy with the uniform policy: (1-eps)*pi + eps/|A|."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    mixed = (1.0 - eps) * policy.probs + eps / policy.n_actions
    return TabularPolicy(mixed)


def calibrate_suboptimal(
    mdp: TabularMdp,
    optimal: TabularPolicy,
    target_fraction: float = 0.6,
    iters: int = 50,
) -> tuple[TabularPolicy, float, float]:
    """Find the noise level whose return is ~ target_fraction of optimal.

    Binary search over eps in [0, 1]; episodic return is monotone
    non-increasing in eps for the environments shipped here.  Returns
    (policy, eps, achieved_return).  If even the uniform policy exceeds
    the target, the closest achievable point (eps=1) is returned.
    """
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")
    optimal_return = episodic_return(mdp, optimal)
    target = target_fraction * optimal_return
    if episodic_return(mdp, epsilon_noised(optimal, 1.0)) >= target:
        policy = epsilon_noised(optimal, 1.0)
        return policy, 1.0, episodic_return(mdp, policy)
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if episodic_return(mdp, epsilon_noised(optimal, mid)) >= target:
            lo = mid
        else:
            hi = mid
    policy = epsilon_noised(optimal, lo)
    return policy, lo, episodic_return(mdp, policy)


def _check_dims(mdp: TabularMdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match "
            f"MDP ({mdp.n_states} states, {mdp.n_actions} actions)"
        )


# ---------------------------------------------------------------------------
# Environment spec files: plain text, one `key = value` per line.
# ---------------------------------------------------------------------------

_ENV_KEYS = {"kind", "size", "gamma", "horizon", "seed"}


def parse_env_spec(text: str) -> TabularMdp:
    """Build an environment from a key = value spec.

    Recognized kinds: monolith (size = grid side), single_state (size =
    number of actions, reward 1 on action 0), chain (size = length).
    gamma, horizon and seed are optional; seed only matters for kind=random.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"env spec line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ENV_KEYS:
            raise ValueError(f"env spec line {lineno}: unknown key {key!r}")
        values[key] = val

    if "kind" not in values:
        raise ValueError("env spec is missing 'kind'")
    kind = values["kind"]
    try:
        size = int(values["size"]) if "size" in values else None
        gamma = float(values.get("gamma", 0.99))
        horizon = int(values["horizon"]) if "horizon" in values else None
        seed = int(values.get("seed", 0))
    except ValueError as exc:
        raise ValueError(f"env spec has a malformed numeric value: {exc}") from exc

    if kind == "monolith":
        if size is None:
            raise ValueError("kind=monolith requires size")
        return build_monolith_grid(size, gamma=gamma, horizon=horizon)
    if kind == "single_state":
        if size is None:
            raise ValueError("kind=single_state requires size (number of actions)")
        rewards = np.zeros(size)
        rewards[0] = 1.0
        return build_single_state(rewards, gamma=gamma, horizon=horizon or 10)
    if kind == "chain":
        if size is None:
            raise ValueError("kind=chain requires size (chain length)")
        return build_chain(size, gamma=gamma, horizon=horizon)
    if kind == "random":
        if size is None:
            raise ValueError("kind=random requires size (number of states)")
        return random_mdp(size, 3, horizon or size, gamma=gamma, rng=np.random.default_rng(seed))
    raise ValueError(f"unknown environment kind {kind!r}")


def load_env_spec(path) -> TabularMdp:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_env_spec(fh.read())
