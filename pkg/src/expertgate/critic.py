"""Q-ensemble critic: temporal-difference and conservative losses plus the
ensemble-disagreement uncertainty estimate that drives buffer selection.

Every member has a slowly tracking target copy; bootstrap targets always
come from the targets, never the running networks.  Uncertainty is the
population variance (divisor M) of member Q-values at the batch's
state-action pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Batch
from .net import (
    ENSEMBLE_MAGIC,
    CODEC_VERSION,
    AdamState,
    MlpNet,
    NonFiniteError,
    adam_step,
    dump_net,
    load_net_bytes,
    one_hot,
    soft_update,
)


class QEnsemble:
    """M running Q-networks with matching target networks.

    Members share the architecture but start from distinct sub-seeds;
    their disagreement is the whole uncertainty signal, so m >= 2 is
    required.  Targets initialize as exact copies of their members.
    """

    def __init__(self, members, targets, n_states: int):
        if len(members) < 2:
            raise ValueError("ensemble needs at least 2 members")
        if len(members) != len(targets):
            raise ValueError("one target per member")
        arch = members[0].layer_sizes
        for net in list(members) + list(targets):
            if net.layer_sizes != arch:
                raise ValueError("all ensemble networks must share one architecture")
        if arch[0] != n_states:
            raise ValueError(f"member input width {arch[0]} != n_states {n_states}")
        self.members = list(members)
        self.targets = list(targets)
        self.n_states = n_states
        self._eye = np.eye(n_states)

    @classmethod
    def create(cls, n_states: int, n_actions: int, m: int, hidden_sizes, seed) -> "QEnsemble":
        sizes = [n_states, *hidden_sizes, n_actions]
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        members = [MlpNet(sizes, seed=np.random.default_rng(s)) for s in ss.spawn(m)]
        targets = [net.copy() for net in members]
        return cls(members, targets, n_states)

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def n_actions(self) -> int:
        return self.members[0].n_outputs

    def features(self, states: np.ndarray) -> np.ndarray:
        return self._eye[np.asarray(states, dtype=np.int64)]

    def member_q(self, states: np.ndarray) -> np.ndarray:
        """Stacked running-network Q-values, shape (M, batch, actions)."""
        x = self.features(states)
        return np.stack([net.forward(x) for net in self.members])

    def target_q(self, states: np.ndarray) -> np.ndarray:
        x = self.features(states)
        return np.stack([net.forward(x) for net in self.targets])

    def mean_q(self, states: np.ndarray) -> np.ndarray:
        return self.member_q(states).mean(axis=0)


@dataclass(frozen=True)
class UncertaintyEstimate:
    """Ensemble mean and population variance per batch entry."""

    mu: np.ndarray
    sigma_sq: np.ndarray
    batch_sigma: float


@dataclass(frozen=True)
class CriticLossReport:
    bellman_loss: float
    cql_penalty: float
    total: float
    per_member_bellman: tuple[float, ...]
    per_member_cql: tuple[float, ...]


def uncertainty(ens: QEnsemble, batch: Batch) -> UncertaintyEstimate:
    """Mean and variance of member Q-values at the batch's (s, a) pairs.

    The variance uses divisor M (population form).  batch_sigma is the
    batch mean of the per-pair standard deviations; it is the scalar the
    sampler compares against its threshold.
    """
    if ens.m < 2:
        raise ValueError("uncertainty needs an ensemble of at least 2 members")
    if len(batch) == 0:
        raise ValueError("uncertainty needs a non-empty batch")
    qs = ens.member_q(batch.states)[:, np.arange(len(batch)), batch.actions]
    mu = qs.mean(axis=0)
    sigma_sq = np.mean((qs - mu) ** 2, axis=0)
    return UncertaintyEstimate(
        mu=mu,
        sigma_sq=sigma_sq,
        batch_sigma=float(np.mean(np.sqrt(sigma_sq))),
    )


def bellman_targets(
    ens: QEnsemble,
    batch: Batch,
    gamma: float,
    actor=None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Bootstrap targets y = r + gamma * Q'(s', a') (y = r when done).

    Q' is the mean over target networks.  The next action a' is the
    greedy argmax of Q' when no actor is given, otherwise a sample from
    the actor's distribution at s'.  Targets never touch the running
    networks, so no gradient can flow through them.
    """
    q_next = ens.target_q(batch.next_states).mean(axis=0)
    if actor is None:
        boot = q_next.max(axis=1)
    else:
        if rng is None:
            raise ValueError("sampling next actions from an actor requires an rng")
        probs = actor.action_probs(ens.features(batch.next_states))
        cum = np.cumsum(probs, axis=1)
        draws = rng.random(len(batch))
        next_actions = (draws[:, None] < cum).argmax(axis=1)
        boot = q_next[np.arange(len(batch)), next_actions]
    return batch.rewards + gamma * boot * (~batch.dones)


def bellman_loss(ens: QEnsemble, batch: Batch, targets: np.ndarray) -> tuple[float, tuple[float, ...]]:
    """Mean over batch and members of the squared TD error."""
    qs = ens.member_q(batch.states)[:, np.arange(len(batch)), batch.actions]
    per_member = np.mean((qs - targets) ** 2, axis=1)
    return float(per_member.mean()), tuple(float(x) for x in per_member)


def cql_penalty(ens: QEnsemble, batch: Batch) -> tuple[float, tuple[float, ...]]:
    """Conservatism gap: logsumexp over actions minus the data-action Q.

    Non-negative for every input because logsumexp dominates the maximum.
    """
    qs = ens.member_q(batch.states)
    per_member = [float(_logsumexp_gap(q, batch.actions).mean()) for q in qs]
    per_member = tuple(per_member)
    return float(np.mean(per_member)), per_member


def _logsumexp_gap(q: np.ndarray, actions: np.ndarray) -> np.ndarray:
    peak = q.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(q - peak).sum(axis=1))
    return lse - q[np.arange(q.shape[0]), actions]


def critic_step(
    ens: QEnsemble,
    batch: Batch,
    gamma: float,
    alpha: float,
    opts: list[AdamState],
    tau: float,
    actor=None,
    rng: np.random.Generator | None = None,
) -> CriticLossReport:
    """One gradient step on every member, then soft-update the targets.

    Loss per member is mean TD error squared plus alpha times the
    conservatism gap.  All members regress to the same target vector,
    computed from the (pre-update) target networks.  Raises
    NonFiniteError with parameters untouched if anything goes non-finite.
    """
    if len(opts) != ens.m:
        raise ValueError("one optimizer state per member")
    targets = bellman_targets(ens, batch, gamma, actor=actor, rng=rng)
    if not np.all(np.isfinite(targets)):
        raise NonFiniteError("non-finite bootstrap targets")
    n = len(batch)
    rows = np.arange(n)
    x = ens.features(batch.states)
    data_mask = np.zeros((n, ens.n_actions))
    data_mask[rows, batch.actions] = 1.0

    member_grads = []
    bell_terms = []
    cql_terms = []
    for net in ens.members:
        q = net.forward(x)
        q_data = q[rows, batch.actions]
        td = q_data - targets
        bell_terms.append(float(np.mean(td**2)))
        peak = q.max(axis=1, keepdims=True)
        expq = np.exp(q - peak)
        lse = peak[:, 0] + np.log(expq.sum(axis=1))
        cql_terms.append(float(np.mean(lse - q_data)))
        softmax = expq / expq.sum(axis=1, keepdims=True)
        grad_out = (2.0 * td[:, None] * data_mask + alpha * (softmax - data_mask)) / n
        member_grads.append(net.backward(grad_out))

    losses = np.array(bell_terms) + alpha * np.array(cql_terms)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite critic loss")
    for net, grads, opt in zip(ens.members, member_grads, opts):
        adam_step(net, grads, opt)
    for target, net in zip(ens.targets, ens.members):
        soft_update(target, net, tau)

    bell = float(np.mean(bell_terms))
    cql = float(np.mean(cql_terms))
    return CriticLossReport(
        bellman_loss=bell,
        cql_penalty=cql,
        total=bell + alpha * cql,
        per_member_bellman=tuple(bell_terms),
        per_member_cql=tuple(cql_terms),
    )


# ---------------------------------------------------------------------------
# Ensemble checkpoints: an index header followed by concatenated member
# checkpoints (running networks first, then targets).
# ---------------------------------------------------------------------------


def dump_ensemble(ens: QEnsemble) -> bytes:
    blobs = [dump_net(net) for net in ens.members + ens.targets]
    header = [ENSEMBLE_MAGIC, struct.pack("<III", CODEC_VERSION, ens.m, ens.n_states)]
    header.append(struct.pack(f"<{len(blobs)}Q", *(len(b) for b in blobs)))
    return b"".join(header + blobs)


def load_ensemble_bytes(blob: bytes) -> QEnsemble:
    if blob[:8] != ENSEMBLE_MAGIC:
        raise ValueError("not an ensemble checkpoint (bad magic)")
    version, m, n_states = struct.unpack_from("<III", blob, 8)
    if version != CODEC_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    lengths = struct.unpack_from(f"<{2 * m}Q", blob, 20)
    offset = 20 + 8 * 2 * m
    nets = []
    for length in lengths:
        nets.append(load_net_bytes(blob[offset : offset + length]))
        offset += length
    if offset != len(blob):
        raise ValueError("checkpoint has trailing or missing bytes")
    return QEnsemble(nets[:m], nets[m:], n_states)


def save_ensemble(ens: QEnsemble, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_ensemble(ens))


def load_ensemble(path) -> QEnsemble:
    with open(path, "rb") as fh:
        return load_ensemble_bytes(fh.read())
