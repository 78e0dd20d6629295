"""Offline transition data: rollouts, replay datasets, and the file codec.

Datasets are immutable once built.  Provenance is tracked at the episode
level: a dataset generated by one behavior policy is tagged "human" or
"soa" uniformly, and a composed dataset is tagged "mixed" with the origin
of every episode recorded so the human/sub-optimal split stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import TabularMdp, TabularPolicy, episodic_return, _check_dims

DATASET_MAGIC = "EXPERTGATE-DATASET"
DATASET_VERSION = 1

SOURCE_HUMAN = "human"
SOURCE_SOA = "soa"
SOURCE_MIXED = "mixed"
_SOURCES = (SOURCE_HUMAN, SOURCE_SOA, SOURCE_MIXED)


class UnreachableGoalError(RuntimeError):
    """The behavior policy cannot produce a successful trajectory."""


class InsufficientDataError(ValueError):
    """A dataset is too small for the requested composition."""


class EmptyDatasetError(ValueError):
    """A batch was requested from an empty buffer."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed; carries the offending line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class VersionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SarsRecord:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool
    episode_id: int
    t: int


@dataclass(frozen=True)
class Trajectory:
    """One episode: consecutive records sharing an episode id."""

    records: tuple[SarsRecord, ...]

    def __post_init__(self):
        recs = tuple(self.records)
        for k, rec in enumerate(recs):
            if rec.t != k:
                raise ValueError(f"record {k} has step index {rec.t}, expected {k}")
            if rec.episode_id != recs[0].episode_id:
                raise ValueError("all records in a trajectory must share an episode id")
            if k + 1 < len(recs):
                if rec.done:
                    raise ValueError("done record must be the last of its episode")
                if rec.next_state != recs[k + 1].state:
                    raise ValueError(f"record {k} next_state does not chain into record {k + 1}")
        object.__setattr__(self, "records", recs)

    @property
    def episode_id(self) -> int:
        return self.records[0].episode_id

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    def __len__(self) -> int:
        return len(self.records)


def is_successful(traj: Trajectory) -> bool:
    """An episode counts as successful iff its summed reward is positive."""
    return traj.total_reward > 0.0


@dataclass(frozen=True)
class DatasetStats:
    n_episodes: int
    n_timesteps: int
    n_successful_trajectories: int
    mean_return: float
    n_human_successful: int | None = None
    n_soa_successful: int | None = None

    def to_dict(self) -> dict:
        d = {
            "n_episodes": self.n_episodes,
            "n_timesteps": self.n_timesteps,
            "n_successful_trajectories": self.n_successful_trajectories,
            "mean_return": self.mean_return,
        }
        if self.n_human_successful is not None:
            d["n_human_successful"] = self.n_human_successful
            d["n_soa_successful"] = self.n_soa_successful
        return d


@dataclass(frozen=True)
class Batch:
    """Columnar view of sampled records (uniform with replacement)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayDataset:
    """Immutable store of trajectories with a uniform source tag.

    Episodes are non-empty and carry strictly increasing ids, so file
    order and id order coincide.  Mixed datasets additionally carry
    `origins`, one entry per episode ("human" or "soa"), preserved from
    the composed inputs.
    """

    def __init__(
        self,
        trajectories,
        source: str,
        env_name: str = "mdp",
        origins: tuple[str, ...] | None = None,
    ):
        if source not in _SOURCES:
            raise ValueError(f"source must be one of {_SOURCES}, got {source!r}")
        trajs = tuple(trajectories)
        if source == SOURCE_MIXED:
            if origins is None or len(origins) != len(trajs):
                raise ValueError("mixed datasets need one origin per episode")
            if any(o not in (SOURCE_HUMAN, SOURCE_SOA) for o in origins):
                raise ValueError("episode origins must be 'human' or 'soa'")
            origins = tuple(origins)
        elif origins is not None:
            raise ValueError("origins are only meaningful for mixed datasets")
        last_id = -1
        for traj in trajs:
            if len(traj) == 0:
                raise ValueError("datasets cannot hold empty episodes")
            if traj.episode_id <= last_id:
                raise ValueError("episode ids must be strictly increasing")
            last_id = traj.episode_id
        self.trajectories = trajs
        self.source = source
        self.env_name = env_name
        self.origins = origins
        records = [rec for traj in trajs for rec in traj.records]
        self.records = tuple(records)
        self.states = np.array([r.state for r in records], dtype=np.int64)
        self.actions = np.array([r.action for r in records], dtype=np.int64)
        self.rewards = np.array([r.reward for r in records], dtype=float)
        self.next_states = np.array([r.next_state for r in records], dtype=np.int64)
        self.dones = np.array([r.done for r in records], dtype=bool)
        self.episode_ids = np.array([r.episode_id for r in records], dtype=np.int64)
        for arr in (self.states, self.actions, self.rewards, self.next_states,
                    self.dones, self.episode_ids):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_episodes(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayDataset):
            return NotImplemented
        return (
            self.records == other.records
            and self.source == other.source
            and self.env_name == other.env_name
            and self.origins == other.origins
        )

    def stats(self) -> DatasetStats:
        returns = [traj.total_reward for traj in self.trajectories]
        n_h = n_s = None
        if self.source == SOURCE_MIXED:
            n_h = sum(
                1 for t, o in zip(self.trajectories, self.origins)
                if o == SOURCE_HUMAN and is_successful(t)
            )
            n_s = sum(
                1 for t, o in zip(self.trajectories, self.origins)
                if o == SOURCE_SOA and is_successful(t)
            )
        return DatasetStats(
            n_episodes=len(self.trajectories),
            n_timesteps=len(self.records),
            n_successful_trajectories=sum(is_successful(t) for t in self.trajectories),
            mean_return=float(np.mean(returns)) if returns else 0.0,
            n_human_successful=n_h,
            n_soa_successful=n_s,
        )

    def record_origins(self) -> np.ndarray | None:
        """Per-record origin tags for mixed datasets (None otherwise)."""
        if self.source != SOURCE_MIXED:
            return None
        out = []
        for traj, origin in zip(self.trajectories, self.origins):
            out.extend([origin] * len(traj))
        return np.array(out)


def rollout(
    mdp: TabularMdp,
    policy: TabularPolicy,
    seed: int | np.random.Generator,
    episode_id: int = 0,
) -> Trajectory:
    """Run one seeded episode; stops at the horizon or an absorbing state."""
    _check_dims(mdp, policy)
    rng = np.random.default_rng(seed)
    states = np.arange(mdp.n_states)
    actions = np.arange(mdp.n_actions)
    s = int(rng.choice(states, p=mdp.start_dist))
    records = []
    for t in range(mdp.horizon):
        if mdp.is_terminal(s):
            break
        a = int(rng.choice(actions, p=policy.probs[s]))
        nxt = int(rng.choice(states, p=mdp.transition[s, a]))
        done = mdp.is_terminal(nxt)
        records.append(
            SarsRecord(
                state=s,
                action=a,
                reward=float(mdp.reward[s, a]),
                next_state=nxt,
                done=done,
                episode_id=episode_id,
                t=t,
            )
        )
        if done:
            break
        s = nxt
    return Trajectory(tuple(records))


def generate_dataset(
    mdp: TabularMdp,
    policy: TabularPolicy,
    target_successful: int,
    seed: int,
    source: str,
    episode_cap: int | None = None,
) -> ReplayDataset:
    """Roll episodes until the dataset holds `target_successful` successes.

    Unsuccessful episodes encountered along the way are retained; the
    successful-trajectory count is the dataset's size metric.  Episodes
    that start in a terminal state produce no transitions and are
    discarded.  Raises UnreachableGoalError if the policy has zero
    expected reward (exact DP check) or if `episode_cap` episodes pass
    without enough successes.
    """
    if target_successful < 1:
        raise ValueError(f"target_successful must be >= 1, got {target_successful}")
    if source not in (SOURCE_HUMAN, SOURCE_SOA):
        raise ValueError("generated datasets must be tagged 'human' or 'soa'")
    if episodic_return(mdp, policy) <= 0.0:
        raise UnreachableGoalError("policy has zero probability of a positive-reward episode")
    if episode_cap is None:
        episode_cap = 1000 + 200 * target_successful
    rng = np.random.default_rng(seed)
    trajectories = []
    successes = 0
    attempts = 0
    while successes < target_successful:
        if attempts >= episode_cap:
            raise UnreachableGoalError(
                f"only {successes}/{target_successful} successes after {episode_cap} episodes"
            )
        traj = rollout(mdp, policy, rng, episode_id=len(trajectories))
        attempts += 1
        if len(traj) == 0:
            continue
        trajectories.append(traj)
        if is_successful(traj):
            successes += 1
    return ReplayDataset(trajectories, source=source, env_name=mdp.name)


def truncate_to_successful(dataset: ReplayDataset, n_successful: int) -> ReplayDataset:
    """Prefix of a dataset containing exactly n successful trajectories.

    Interleaved failures up to the n-th success are retained, mirroring
    what generation with a smaller target would have produced.
    """
    if n_successful < 1:
        raise ValueError("n_successful must be >= 1")
    kept = []
    count = 0
    for traj in dataset.trajectories:
        kept.append(traj)
        if is_successful(traj):
            count += 1
            if count == n_successful:
                break
    if count < n_successful:
        raise InsufficientDataError(
            f"dataset has {count} successful trajectories, needs {n_successful}"
        )
    origins = dataset.origins[: len(kept)] if dataset.origins is not None else None
    return ReplayDataset(kept, source=dataset.source, env_name=dataset.env_name, origins=origins)


def compose_mixed(d_soa: ReplayDataset, d_h: ReplayDataset, soa_fraction: float) -> ReplayDataset:
    """Combine both buffers into one dataset for the naive baseline.

    All sub-optimal episodes are kept; enough successful human episodes
    are appended so that successful trajectories split
    soa_fraction : (1 - soa_fraction) within rounding.  Human failures
    are dropped (expert data is curated).  Episodes are re-numbered
    0..n-1 in composition order; per-episode origins record where each
    came from, and no transition is fabricated: every output episode is a
    re-numbered copy of an input episode.
    """
    if not 0.0 < soa_fraction < 1.0:
        raise ValueError(f"soa_fraction must lie in (0, 1), got {soa_fraction}")
    if d_soa.n_episodes == 0 or d_h.n_episodes == 0:
        raise InsufficientDataError("both input datasets must be non-empty")
    if d_soa.env_name != d_h.env_name:
        raise ValueError(f"environment mismatch: {d_soa.env_name} vs {d_h.env_name}")
    n_soa_succ = d_soa.stats().n_successful_trajectories
    needed_h = int(round(n_soa_succ * (1.0 - soa_fraction) / soa_fraction))
    if needed_h < 1:
        raise InsufficientDataError(
            f"soa_fraction={soa_fraction} with {n_soa_succ} sub-optimal successes "
            "leaves no room for human data"
        )
    human_successes = [t for t in d_h.trajectories if is_successful(t)]
    if len(human_successes) < needed_h:
        raise InsufficientDataError(
            f"human side has {len(human_successes)} successful trajectories, needs {needed_h}"
        )
    episodes: list[Trajectory] = []
    origins: list[str] = []
    for traj in d_soa.trajectories:
        episodes.append(_relabel(traj, len(episodes)))
        origins.append(SOURCE_SOA)
    for traj in human_successes[:needed_h]:
        episodes.append(_relabel(traj, len(episodes)))
        origins.append(SOURCE_HUMAN)
    return ReplayDataset(
        episodes, source=SOURCE_MIXED, env_name=d_soa.env_name, origins=tuple(origins)
    )


def _relabel(traj: Trajectory, episode_id: int) -> Trajectory:
    if traj.episode_id == episode_id:
        return traj
    return Trajectory(
        tuple(
            SarsRecord(r.state, r.action, r.reward, r.next_state, r.done, episode_id, r.t)
            for r in traj.records
        )
    )


def sample_batch(dataset: ReplayDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement sample of records, as a columnar batch."""
    if len(dataset) == 0:
        raise EmptyDatasetError(f"cannot sample from empty {dataset.source} dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return Batch(
        states=dataset.states[idx],
        actions=dataset.actions[idx],
        rewards=dataset.rewards[idx],
        next_states=dataset.next_states[idx],
        dones=dataset.dones[idx],
        episode_ids=dataset.episode_ids[idx],
    )


# ---------------------------------------------------------------------------
# File codec: text header, then one record per line.
# ---------------------------------------------------------------------------


def dumps(dataset: ReplayDataset) -> str:
    lines = [
        f"{DATASET_MAGIC} v{DATASET_VERSION}",
        f"env = {dataset.env_name}",
        f"source = {dataset.source}",
        f"episodes = {dataset.n_episodes}",
        f"records = {len(dataset)}",
    ]
    if dataset.source == SOURCE_MIXED:
        human_eids = [
            str(traj.episode_id)
            for traj, origin in zip(dataset.trajectories, dataset.origins)
            if origin == SOURCE_HUMAN
        ]
        lines.append(f"human_episodes = {','.join(human_eids)}")
    lines.append("---")
    for rec in dataset.records:
        done = 1 if rec.done else 0
        lines.append(
            f"{rec.episode_id} {rec.t} {rec.state} {rec.action} {rec.reward!r} "
            f"{rec.next_state} {done}"
        )
    return "\n".join(lines) + "\n"


def save(dataset: ReplayDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(dataset))


def loads(text: str) -> ReplayDataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(1, "empty file")
    head = lines[0].split(" v")
    if len(head) != 2 or head[0] != DATASET_MAGIC:
        raise DatasetFormatError(1, f"bad magic line {lines[0]!r}")
    try:
        version = int(head[1])
    except ValueError:
        raise DatasetFormatError(1, f"bad version field {head[1]!r}") from None
    if version != DATASET_VERSION:
        raise VersionMismatchError(
            f"dataset version {version} is not supported (expected {DATASET_VERSION})"
        )

    header: dict[str, str] = {}
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "---":
            body_start = lineno
            break
        key, sep, val = line.partition("=")
        if not sep:
            raise DatasetFormatError(lineno, f"expected 'key = value' in header, got {line!r}")
        header[key.strip()] = val.strip()
    if body_start is None:
        raise DatasetFormatError(len(lines), "missing '---' separator")
    for required in ("env", "source", "episodes", "records"):
        if required not in header:
            raise DatasetFormatError(body_start, f"header is missing {required!r}")
    try:
        n_episodes = int(header["episodes"])
        n_records = int(header["records"])
    except ValueError as exc:
        raise DatasetFormatError(body_start, f"bad count in header: {exc}") from None
    source = header["source"]
    if source not in _SOURCES:
        raise DatasetFormatError(body_start, f"unknown source {source!r}")

    records = []
    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        if not line.strip():
            raise DatasetFormatError(lineno, "blank line in record section")
        parts = line.split()
        if len(parts) != 7:
            raise DatasetFormatError(lineno, f"expected 7 fields, got {len(parts)}")
        if parts[6] not in ("0", "1"):
            raise DatasetFormatError(lineno, f"done flag must be 0 or 1, got {parts[6]!r}")
        try:
            records.append(
                SarsRecord(
                    episode_id=int(parts[0]),
                    t=int(parts[1]),
                    state=int(parts[2]),
                    action=int(parts[3]),
                    reward=float(parts[4]),
                    next_state=int(parts[5]),
                    done=parts[6] == "1",
                )
            )
        except ValueError as exc:
            raise DatasetFormatError(lineno, f"malformed record: {exc}") from None
    if len(records) != n_records:
        raise DatasetFormatError(
            len(lines), f"header declares {n_records} records but file has {len(records)}"
        )

    trajectories = []
    current: list[SarsRecord] = []
    for rec in records:
        if current and rec.episode_id != current[0].episode_id:
            trajectories.append(_traj_or_error(current, len(lines)))
            current = []
        current.append(rec)
    if current:
        trajectories.append(_traj_or_error(current, len(lines)))
    if len(trajectories) != n_episodes:
        raise DatasetFormatError(
            len(lines), f"header declares {n_episodes} episodes but file has {len(trajectories)}"
        )
    origins = None
    if source == SOURCE_MIXED:
        if "human_episodes" not in header:
            raise DatasetFormatError(body_start, "mixed dataset is missing human_episodes header")
        human_ids = set()
        if header["human_episodes"]:
            human_ids = {int(x) for x in header["human_episodes"].split(",")}
        origins = tuple(
            SOURCE_HUMAN if t.episode_id in human_ids else SOURCE_SOA for t in trajectories
        )
    try:
        return ReplayDataset(trajectories, source=source, env_name=header["env"], origins=origins)
    except ValueError as exc:
        raise DatasetFormatError(len(lines), f"inconsistent dataset: {exc}") from None


def _traj_or_error(records, lineno):
    try:
        return Trajectory(tuple(records))
    except ValueError as exc:
        raise DatasetFormatError(lineno, f"ill-formed episode {records[0].episode_id}: {exc}") from None


def load(path) -> ReplayDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
