"""End-to-end offline training loop.

Each iteration: measure ensemble uncertainty on the previous batch,
select a buffer (gated mode) or draw from the combined dataset (mixed
mode), update every critic member, optionally improve a categorical soft
actor, and periodically evaluate the current policy with exact seeded
rollouts.  Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .critic import QEnsemble, critic_step, uncertainty
from .data import Batch, ReplayDataset, is_successful, rollout
from .envs import TabularMdp, TabularPolicy
from .net import AdamState, MlpNet, NonFiniteError, adam_step
from .sampler import (
    MODE_GATED,
    MODE_MIXED,
    SamplerConfig,
    SamplerDecision,
    draw_ledger,
    select_batch_gated,
    select_batch_mixed,
)

RL_Q_LEARNING = "q_learning"
RL_ACTOR_CRITIC = "actor_critic"


@dataclass(frozen=True)
class TrainerConfig:
    """Desk-scale defaults for the grid tasks.

    epsilon was pinned from a threshold sweep on the 5x5 grid task (see
    the sweep demo); reference_config() keeps the large-scale settings
    the desk-scale ones were adapted from.
    """

    steps: int = 3000
    ensemble_size: int = 10
    hidden_sizes: tuple[int, ...] = (64, 64)
    epsilon: float = 0.03
    batch_size: int = 32
    gamma: float = 0.99
    eta_q: float = 1e-3
    eta_pi: float = 1e-3
    alpha: float = 1.0
    tau: float = 0.01
    entropy_coeff: float = 1.0
    rl_mode: str = RL_Q_LEARNING
    sampler_mode: str = MODE_GATED
    soa_fraction: float = 0.8
    eval_every: int = 100
    eval_episodes: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if not 1 <= self.eval_every <= self.steps:
            raise ValueError("eval_every must lie in [1, steps]")
        if self.rl_mode not in (RL_Q_LEARNING, RL_ACTOR_CRITIC):
            raise ValueError(f"unknown rl_mode {self.rl_mode!r}")
        if self.sampler_mode not in (MODE_GATED, MODE_MIXED):
            raise ValueError(f"unknown sampler_mode {self.sampler_mode!r}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            mode=self.sampler_mode,
            soa_fraction=self.soa_fraction,
        )

    def to_dict(self) -> dict:
        d = {
            "steps": self.steps,
            "ensemble_size": self.ensemble_size,
            "hidden_sizes": list(self.hidden_sizes),
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
            "gamma": self.gamma,
            "eta_q": self.eta_q,
            "eta_pi": self.eta_pi,
            "alpha": self.alpha,
            "tau": self.tau,
            "entropy_coeff": self.entropy_coeff,
            "rl_mode": self.rl_mode,
            "sampler_mode": self.sampler_mode,
            "soa_fraction": self.soa_fraction,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "seed": self.seed,
        }
        return d


def reference_config() -> TrainerConfig:
    """Settings used at continuous-control scale; kept for reference.

    The iteration count and threshold are not meaningful for the desk
    tasks (Q-values there live in [0, 1], not tens).
    """
    return TrainerConfig(
        steps=36,
        ensemble_size=10,
        hidden_sizes=(256, 256),
        epsilon=16.0,
        batch_size=256,
        gamma=0.99,
        eta_q=3e-4,
        eta_pi=1e-4,
        eval_every=36,
    )


class ActorNet:
    """Categorical policy: network logits, normalized exponentiation."""

    def __init__(self, n_states: int, n_actions: int, hidden_sizes, seed):
        self.net = MlpNet([n_states, *hidden_sizes, n_actions], seed=seed)
        self.n_states = n_states
        self.n_actions = n_actions

    def action_probs(self, features: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(self.net.forward(features))
        peak = logits.max(axis=1, keepdims=True)
        expl = np.exp(logits - peak)
        return expl / expl.sum(axis=1, keepdims=True)

    def policy_table(self) -> TabularPolicy:
        return TabularPolicy(self.action_probs(np.eye(self.n_states)))


@dataclass(frozen=True)
class StepRecord:
    step: int
    source: str
    sigma: float
    bellman_loss: float
    cql_penalty: float
    total_loss: float
    actor_loss: float | None = None


@dataclass(frozen=True)
class EvalPoint:
    step: int
    mean_return: float
    returns: tuple[float, ...]


@dataclass
class TrainLog:
    config: dict
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    human_records_drawn: int = 0
    soa_records_drawn: int = 0
    human_successful_touched: int = 0

    def ledger(self) -> dict[str, int]:
        return draw_ledger(self.decisions)

    @property
    def final_eval_return(self) -> float:
        if not self.evals:
            raise ValueError("no evaluations were recorded")
        return self.evals[-1].mean_return

    def eval_steps(self) -> tuple[int, ...]:
        return tuple(e.step for e in self.evals)

    def steps_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["step", "source", "sigma", "bellman_loss", "cql_penalty", "total_loss", "actor_loss"]
        )
        for rec in self.steps:
            writer.writerow(
                [
                    rec.step,
                    rec.source,
                    repr(rec.sigma),
                    repr(rec.bellman_loss),
                    repr(rec.cql_penalty),
                    repr(rec.total_loss),
                    "" if rec.actor_loss is None else repr(rec.actor_loss),
                ]
            )
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "mean_return", "returns"])
        for ev in self.evals:
            writer.writerow(
                [ev.step, repr(ev.mean_return), ";".join(repr(r) for r in ev.returns)]
            )
        return buf.getvalue()


@dataclass
class TrainResult:
    ensemble: QEnsemble
    actor: ActorNet | None
    log: TrainLog


def actor_step(
    actor: ActorNet,
    ens: QEnsemble,
    batch: Batch,
    opt: AdamState,
    entropy_coeff: float = 1.0,
) -> float:
    """One soft policy-improvement step against a frozen critic.

    Minimizes the batch mean of sum_a pi(a|s) * (c*log pi(a|s) - Qmin(s,a))
    where Qmin is the member-wise minimum, i.e. ascends expected
    pessimistic value plus entropy.  The per-state optimum is
    pi proportional to exp(Qmin / c).
    """
    x = ens.features(batch.states)
    q_min = ens.member_q(batch.states).min(axis=0)
    logits = np.atleast_2d(actor.net.forward(x))
    peak = logits.max(axis=1, keepdims=True)
    expl = np.exp(logits - peak)
    z = expl.sum(axis=1, keepdims=True)
    probs = expl / z
    log_probs = (logits - peak) - np.log(z)
    gain = entropy_coeff * log_probs - q_min
    baseline = (probs * gain).sum(axis=1, keepdims=True)
    loss = float(baseline.mean())
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite actor loss")
    # The entropy term's own derivative cancels under the softmax, leaving
    # the advantage-weighted score function.
    grad_logits = probs * (gain - baseline) / len(batch)
    grads = actor.net.backward(grad_logits)
    adam_step(actor.net, grads, opt)
    return loss


def greedy_policy_from_ensemble(ens: QEnsemble) -> TabularPolicy:
    """Deterministic argmax of the mean ensemble Q over all states."""
    q = ens.mean_q(np.arange(ens.n_states))
    return TabularPolicy.deterministic(q.argmax(axis=1), ens.n_actions)


def evaluate(policy_source, mdp: TabularMdp, episodes: int, seed: int) -> tuple[float, np.ndarray]:
    """Seeded rollout evaluation; returns (mean, per-episode returns).

    policy_source may be a TabularPolicy, an ActorNet, or a QEnsemble
    (evaluated greedily over the mean ensemble Q).  No learning happens;
    network parameters are read once to build the policy table.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    if isinstance(policy_source, QEnsemble):
        policy = greedy_policy_from_ensemble(policy_source)
    elif isinstance(policy_source, ActorNet):
        policy = policy_source.policy_table()
    elif isinstance(policy_source, TabularPolicy):
        policy = policy_source
    else:
        raise TypeError(f"cannot evaluate a {type(policy_source).__name__}")
    rng = np.random.default_rng(seed)
    returns = np.array([rollout(mdp, policy, rng).total_reward for _ in range(episodes)])
    return float(returns.mean()), returns


def train(
    cfg: TrainerConfig,
    mdp: TabularMdp,
    d_soa: ReplayDataset | None = None,
    d_h: ReplayDataset | None = None,
    d_mixed: ReplayDataset | None = None,
) -> TrainResult:
    """Run the full offline loop for cfg.steps iterations.

    Gated mode requires both buffers; mixed mode requires the combined
    one.  The first iteration has no previous batch to measure
    uncertainty on, so it records sigma = 0 and draws from the
    sub-optimal buffer.  Evaluations run before training (step 0) and at
    every multiple of eval_every.
    """
    if cfg.sampler_mode == MODE_GATED:
        if d_soa is None or d_h is None:
            raise ValueError("gated mode needs both the sub-optimal and human buffers")
    else:
        if d_mixed is None:
            raise ValueError("mixed mode needs the combined dataset")

    ens_ss, actor_ss, sample_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    ens = QEnsemble.create(
        mdp.n_states, mdp.n_actions, cfg.ensemble_size, cfg.hidden_sizes, seed=ens_ss
    )
    opts = [AdamState(lr=cfg.eta_q) for _ in range(ens.m)]
    actor = None
    actor_opt = None
    if cfg.rl_mode == RL_ACTOR_CRITIC:
        actor = ActorNet(
            mdp.n_states, mdp.n_actions, cfg.hidden_sizes, seed=np.random.default_rng(actor_ss)
        )
        actor_opt = AdamState(lr=cfg.eta_pi)
    train_rng = np.random.default_rng(sample_ss)
    eval_rng = np.random.default_rng(eval_ss)

    log = TrainLog(config=cfg.to_dict())
    successful_human_ids = set()
    if d_h is not None:
        successful_human_ids = {t.episode_id for t in d_h.trajectories if is_successful(t)}
    human_ids_touched: set[int] = set()

    def run_eval(step: int) -> None:
        source = actor if actor is not None else ens
        mean, returns = evaluate(source, mdp, cfg.eval_episodes, int(eval_rng.integers(2**63)))
        log.evals.append(EvalPoint(step=step, mean_return=mean, returns=tuple(float(r) for r in returns)))

    run_eval(0)
    scfg = cfg.sampler_config()
    prev_batch: Batch | None = None
    for step in range(1, cfg.steps + 1):
        if cfg.sampler_mode == MODE_GATED:
            if prev_batch is None:
                sigma = 0.0
            else:
                sigma = uncertainty(ens, prev_batch).batch_sigma
            batch, decision = select_batch_gated(sigma, scfg, d_soa, d_h, train_rng, step=step)
        else:
            batch, decision = select_batch_mixed(scfg, d_mixed, train_rng, step=step)
        try:
            report = critic_step(
                ens, batch, cfg.gamma, cfg.alpha, opts, cfg.tau, actor=actor, rng=train_rng
            )
            a_loss = None
            if actor is not None:
                a_loss = actor_step(actor, ens, batch, actor_opt, cfg.entropy_coeff)
        except NonFiniteError as exc:
            raise NonFiniteError(f"aborted at step {step}: {exc}") from exc
        log.decisions.append(decision)
        log.steps.append(
            StepRecord(
                step=step,
                source=decision.source,
                sigma=decision.sigma_observed,
                bellman_loss=report.bellman_loss,
                cql_penalty=report.cql_penalty,
                total_loss=report.total,
                actor_loss=a_loss,
            )
        )
        if decision.source == "human":
            log.human_records_drawn += len(batch)
            human_ids_touched.update(int(e) for e in batch.episode_ids)
        elif decision.source == "soa":
            log.soa_records_drawn += len(batch)
        if step % cfg.eval_every == 0:
            run_eval(step)
        prev_batch = batch

    log.human_successful_touched = len(human_ids_touched & successful_human_ids)
    return TrainResult(ensemble=ens, actor=actor, log=log)


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    final_return: float
    human_batches: int
    human_records: int


def sweep_epsilon(
    cfg: TrainerConfig,
    candidates,
    d_soa: ReplayDataset,
    d_h: ReplayDataset,
    mdp: TabularMdp,
) -> list[SweepRow]:
    """One seeded gated run per candidate threshold.

    Rows are sorted by final evaluation return (descending), ties broken
    by fewest human draws, so the head of the table is the cheapest
    best-performing threshold.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("sweep needs at least one candidate threshold")
    rows = []
    for eps in candidates:
        run_cfg = replace(cfg, epsilon=float(eps), sampler_mode=MODE_GATED)
        result = train(run_cfg, mdp, d_soa=d_soa, d_h=d_h)
        ledger = result.log.ledger()
        rows.append(
            SweepRow(
                epsilon=float(eps),
                final_return=result.log.final_eval_return,
                human_batches=ledger["human"],
                human_records=result.log.human_records_drawn,
            )
        )
    rows.sort(key=lambda r: (-r.final_return, r.human_batches))
    return rows
