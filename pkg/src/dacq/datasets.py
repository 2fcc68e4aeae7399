"""Offline trajectory collection and on-disk dataset format.

A dataset is a mu-mixed batch of episodes: ``round(mu * D)`` come from an
exploitation behavior policy (a scripted DE schedule, a pool of fixed
parameter settings filtered by return, or random episodes filtered by
return) and the rest from a uniform-random policy.  Episodes
cycle over the training problem instances and every episode derives its
own seed from the master seed, so collection is reproducible and could be
parallelized without changing content.

On disk a dataset is a directory with ``trajectories.jsonl`` (one episode
per line, UTF-8, floats printed as shortest round-trip decimals) and a
sibling ``manifest.json`` carrying counts, parameters, and a sha256 of the
trajectory file.  The reader re-validates every invariant and reports
violations with line numbers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import algorithms, env, problems
from .env import DEFAULT_BINS, StepRecord, Trajectory

#: bump when the serialized layout changes incompatibly
FORMAT_VERSION = 1

TRAJECTORY_FILE = "trajectories.jsonl"
MANIFEST_FILE = "manifest.json"

EXPLOITATION_KINDS = ("scripted_de_schedule", "scripted_constant",
                      "filtered_random")


# ---------------------------------------------------------------------------
# behavior policies
# ---------------------------------------------------------------------------

def random_policy(alg_id: int, seed, n_bins: int = DEFAULT_BINS):
    """Uniform behavior: each decision draws a bin from [0, m_i).

    Returns a ``policy(state, t) -> (K,) bins`` callback for run_episode.
    """
    specs = algorithms.alg_spec(alg_id)
    ms = [env.mask_bins(s, n_bins) for s in specs]
    rng = np.random.default_rng(seed)

    def _policy(state, t):
        return np.array([rng.integers(m) for m in ms], dtype=np.int64)

    return _policy


def constant_setting(rng, specs, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Draw one fixed parameter setting from classic fixed-parameter EA
    practice: F-like dims uniform in [0.3, 0.95], Cr-like in [0.7, 1.0],
    other continuous dims in [0.2, 0.8]; discrete dims a uniform choice.
    Returns the (K,) bin vector."""
    bins = np.empty(len(specs), dtype=np.int64)
    for i, spec in enumerate(specs):
        if spec.kind == "discrete":
            bins[i] = int(rng.integers(spec.n_choices))
        elif spec.name.startswith("Cr"):
            bins[i] = int(np.rint(rng.uniform(0.7, 1.0) * (n_bins - 1)))
        elif spec.name.startswith("F"):
            bins[i] = int(np.rint(rng.uniform(0.3, 0.95) * (n_bins - 1)))
        else:
            bins[i] = int(np.rint(rng.uniform(0.2, 0.8) * (n_bins - 1)))
    return bins


@dataclass(frozen=True)
class FilteredRandomPolicy:
    """Collect-level directive: keep random episodes whose return exceeds
    the given quantile of a calibration batch.  Not a per-step callback;
    ``collect`` interprets it."""

    quantile: float = 0.5
    calibration_episodes: int = 100


def filter_threshold(perfs, quantile: float) -> float:
    """Return threshold below/at which calibration episodes are discarded."""
    perfs = np.asarray(perfs, dtype=float)
    if perfs.size == 0:
        raise ValueError("cannot calibrate a threshold on zero episodes")
    return float(np.quantile(perfs, quantile))


def exploitation_policy(kind: str, alg_id: int, seed, T: int,
                        n_bins: int = DEFAULT_BINS, jitter: float = 0.02,
                        quantile: float = 0.5, calibration_episodes: int = 100):
    """Exploitation behavior for dataset collection.

    ``scripted_de_schedule`` returns a policy callback implementing a
    known-good DE heuristic on the bin grid: F-like dims (and sigma)
    anneal from 0.9 toward 0.3 across the episode with small seeded
    Gaussian jitter, Cr-like dims hold at 0.9, and discrete dims keep a
    fixed seeded preference.  ``scripted_constant`` returns a policy
    that plays one seeded ``constant_setting`` for the whole episode
    (``collect`` additionally calibrates a pool of such settings and
    keeps the above-quantile ones).  ``filtered_random`` returns a
    FilteredRandomPolicy directive consumed by ``collect``.
    """
    if kind == "filtered_random":
        return FilteredRandomPolicy(quantile, calibration_episodes)
    if kind == "scripted_constant":
        bins = constant_setting(np.random.default_rng(seed),
                                algorithms.alg_spec(alg_id), n_bins)
        return lambda state, t: bins.copy()
    if kind != "scripted_de_schedule":
        raise ValueError(f"unknown exploitation policy kind: {kind!r}")

    specs = algorithms.alg_spec(alg_id)
    rng = np.random.default_rng(seed)
    # fixed per-episode preference for every discrete dim
    pref = {i: int(rng.integers(s.n_choices))
            for i, s in enumerate(specs) if s.kind == "discrete"}

    def _policy(state, t):
        frac = min(t / (T - 1), 1.0) if T > 1 else 0.0
        bins = np.empty(len(specs), dtype=np.int64)
        for i, spec in enumerate(specs):
            if spec.kind == "discrete":
                bins[i] = pref[i]
                continue
            if spec.name.startswith("Cr"):
                v = 0.9
            else:  # F-like dims and sigma anneal toward 0.3
                v = 0.9 - 0.6 * frac
            if jitter > 0.0:
                v += rng.normal(0.0, jitter)
            v = min(max(v, 0.0), 1.0)
            bins[i] = int(np.rint(v * (n_bins - 1)))
        return bins

    return _policy


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    format_version: int
    alg_id: int
    K: int
    M: int
    T: int
    D: int
    mu: float
    seed: int
    n_exploitation: int
    n_exploration: int
    policy_counts: dict
    checksum: str
    train_ids: list

    def validate(self):
        if self.format_version != FORMAT_VERSION:
            raise ValueError(f"format version {self.format_version} != "
                             f"supported {FORMAT_VERSION}")
        if self.n_exploitation != int(round(self.mu * self.D)):
            raise ValueError("exploitation count does not match round(mu*D)")
        if self.n_exploitation + self.n_exploration != self.D:
            raise ValueError("exploitation + exploration != D")
        if sum(self.policy_counts.values()) != self.D:
            raise ValueError("per-policy counts do not sum to D")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        obj = json.loads(text)
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValueError(f"bad manifest: {exc}") from None


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def trajectory_to_obj(traj: Trajectory) -> dict:
    """Flat JSON-ready object: meta fields plus a steps array."""
    return {
        "alg_id": int(traj.alg_id), "K": int(traj.K), "M": int(traj.M),
        "function_id": int(traj.function_id), "dim": int(traj.dim),
        "instance_seed": traj.instance_seed,
        "episode_seed": traj.episode_seed,
        "T": int(traj.T), "policy_id": traj.policy_id,
        "f_best_init": float(traj.f_best_init),
        "f_star": float(traj.f_star),
        "steps": [{"s": [float(v) for v in st.state],
                   "a": [int(b) for b in st.actions],
                   "r": float(st.reward),
                   "bsf": float(st.best_so_far_f)} for st in traj.steps],
    }


def trajectory_from_obj(obj: dict) -> Trajectory:
    meta_keys = ("alg_id", "K", "M", "function_id", "dim", "instance_seed",
                 "episode_seed", "T", "policy_id", "f_best_init", "f_star")
    missing = [k for k in meta_keys if k not in obj]
    if missing or "steps" not in obj:
        missing += [] if "steps" in obj else ["steps"]
        raise ValueError(f"missing fields: {', '.join(missing)}")
    steps = [StepRecord(state=np.asarray(st["s"], dtype=float),
                        actions=np.asarray(st["a"], dtype=np.int64),
                        reward=float(st["r"]),
                        best_so_far_f=float(st["bsf"]))
             for st in obj["steps"]]
    return Trajectory(
        alg_id=int(obj["alg_id"]), K=int(obj["K"]), M=int(obj["M"]),
        function_id=int(obj["function_id"]), dim=int(obj["dim"]),
        instance_seed=obj["instance_seed"], episode_seed=obj["episode_seed"],
        T=int(obj["T"]), policy_id=str(obj["policy_id"]),
        f_best_init=float(obj["f_best_init"]), f_star=float(obj["f_star"]),
        steps=steps)


def serialize_trajectory(traj: Trajectory) -> str:
    """One canonical JSON line (no trailing newline).  Python's float repr
    already emits the shortest decimal that round-trips a 64-bit float."""
    return json.dumps(trajectory_to_obj(traj),
                      separators=(",", ":"), sort_keys=True)


def validate_trajectory(traj: Trajectory, where: str = "trajectory"):
    """Re-check structural and reward invariants of a stored episode."""
    def fail(msg):
        raise ValueError(f"{where}: {msg}")

    if traj.T < 1 or len(traj.steps) != traj.T:
        fail(f"has {len(traj.steps)} steps, expected T={traj.T}")
    try:
        specs = algorithms.alg_spec(traj.alg_id)
    except ValueError as exc:
        fail(str(exc))
    if traj.K != len(specs):
        fail(f"K={traj.K} does not match algorithm {traj.alg_id} "
             f"({len(specs)} dims)")
    masks = [env.mask_bins(s, traj.M) for s in specs]

    prev = traj.f_best_init
    total = 0.0
    for t, st in enumerate(traj.steps):
        if st.state.shape != (9,):
            fail(f"step {t}: state has shape {st.state.shape}")
        if st.actions.shape != (traj.K,):
            fail(f"step {t}: action vector has length {st.actions.shape}")
        for i, (b, m) in enumerate(zip(st.actions, masks)):
            if not 0 <= b < m:
                fail(f"step {t}: bin {b} out of range [0, {m}) "
                     f"for {specs[i].name}")
        try:
            expect = env.reward(prev, st.best_so_far_f,
                                traj.f_best_init, traj.f_star)
        except ValueError as exc:
            fail(f"step {t}: {exc}")
        if abs(st.reward - expect) > 1e-9:
            fail(f"step {t}: reward {st.reward!r} inconsistent with "
                 f"best-so-far sequence (expected {expect!r})")
        prev = st.best_so_far_f
        total += st.reward
    if total > 1.0 + 1e-9:
        fail(f"cumulative reward {total!r} exceeds 1")


def write_trajectories(path, trajs):
    data = "".join(serialize_trajectory(t) + "\n" for t in trajs)
    Path(path).write_bytes(data.encode("utf-8"))


def read_trajectories(path, validate: bool = True):
    """Parse a line-delimited trajectory file; errors carry line numbers."""
    trajs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") \
                    from None
            try:
                traj = trajectory_from_obj(obj)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if validate:
                validate_trajectory(traj, where=f"line {lineno}")
            trajs.append(traj)
    return trajs


def _checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(out_dir, trajs, manifest: DatasetManifest):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = "".join(serialize_trajectory(t) + "\n" for t in trajs)
    payload = data.encode("utf-8")
    manifest.checksum = _checksum(payload)
    (out / TRAJECTORY_FILE).write_bytes(payload)
    (out / MANIFEST_FILE).write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_dataset(dataset_dir, validate: bool = True):
    """Read (trajectories, manifest), verifying checksum, version, counts."""
    root = Path(dataset_dir)
    manifest = DatasetManifest.from_json(
        (root / MANIFEST_FILE).read_text(encoding="utf-8"))
    manifest.validate()
    payload = (root / TRAJECTORY_FILE).read_bytes()
    digest = _checksum(payload)
    if digest != manifest.checksum:
        raise ValueError(f"checksum mismatch: manifest {manifest.checksum} "
                         f"!= file {digest}")
    trajs = read_trajectories(root / TRAJECTORY_FILE, validate=validate)
    if len(trajs) != manifest.D:
        raise ValueError(f"{len(trajs)} trajectories on disk, "
                         f"manifest says {manifest.D}")
    counts = {}
    for t in trajs:
        counts[t.policy_id] = counts.get(t.policy_id, 0) + 1
    if counts != manifest.policy_counts:
        raise ValueError(f"policy counts {counts} do not match manifest "
                         f"{manifest.policy_counts}")
    return trajs, manifest


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------

# episode-seed namespaces, so calibration/filter attempts never collide
# with regular episodes under one master seed
_NS_MAIN, _NS_CAL, _NS_FILTER = 0, 1, 2


def _episode(alg_id, problem, policy, T, seed_ids, n_bins, normalize,
             policy_id):
    return env.run_episode(alg_id, problem, policy, T, list(seed_ids),
                           n_bins=n_bins, normalize=normalize,
                           policy_id=policy_id)


def collect(alg_id: int, split: problems.ProblemSplit, policies, mu: float,
            D: int, T: int, seed: int, out_dir=None,
            n_bins: int = DEFAULT_BINS, instance_seed: int = 0,
            jitter: float = 0.02, quantile: float = 0.5,
            calibration_episodes: int = 100, max_attempt_factor: int = 50,
            normalize: bool = True):
    """Collect a mu-mixed offline dataset.

    ``policies`` is ``(exploitation_kind, "random")``.  The first
    ``round(mu*D)`` episodes use the exploitation policy, the rest are
    uniform random; problems cycle over the split's training instances in
    order.  Returns (trajectories, manifest); also writes
    ``trajectories.jsonl`` + ``manifest.json`` when out_dir is given.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    if not split.train_ids:
        raise ValueError("no training problems in split")
    exploit_kind, explore_kind = policies
    if explore_kind != "random":
        raise ValueError(f"exploration policy must be 'random', "
                         f"got {explore_kind!r}")

    instances = [problems.make_instance(fid, split.dims[fid],
                                        seed=instance_seed)
                 for fid in split.train_ids]
    n_exploit = int(round(mu * D))
    trajs = []

    if n_exploit > 0:
        if exploit_kind in ("scripted_de_schedule", "scripted_constant"):
            for e in range(n_exploit):
                pol = exploitation_policy(
                    exploit_kind, alg_id,
                    seed=[seed, _NS_MAIN, e, 1], T=T,
                    n_bins=n_bins, jitter=jitter)
                trajs.append(_episode(
                    alg_id, instances[e % len(instances)], pol, T,
                    [seed, _NS_MAIN, e], n_bins, normalize, exploit_kind))
        elif exploit_kind == "filtered_random":
            cal = []
            for i in range(calibration_episodes):
                pol = random_policy(alg_id, [seed, _NS_CAL, i, 1], n_bins)
                cal.append(_episode(
                    alg_id, instances[i % len(instances)], pol, T,
                    [seed, _NS_CAL, i], n_bins, normalize, "random"))
            threshold = filter_threshold([t.perf for t in cal], quantile)
            kept, k = [], 0
            max_attempts = max_attempt_factor * n_exploit
            while len(kept) < n_exploit and k < max_attempts:
                pol = random_policy(alg_id, [seed, _NS_FILTER, k, 1], n_bins)
                traj = _episode(
                    alg_id, instances[k % len(instances)], pol, T,
                    [seed, _NS_FILTER, k], n_bins, normalize,
                    "filtered_random")
                if traj.perf > threshold:
                    kept.append(traj)
                k += 1
            if len(kept) < n_exploit:
                raise RuntimeError(
                    f"filtered_random kept only {len(kept)}/{n_exploit} "
                    f"episodes after {max_attempts} attempts "
                    f"(threshold {threshold})")
            trajs.extend(kept)
        else:
            raise ValueError(
                f"unknown exploitation policy kind: {exploit_kind!r}")

    for e in range(n_exploit, D):
        pol = random_policy(alg_id, [seed, _NS_MAIN, e, 1], n_bins)
        trajs.append(_episode(
            alg_id, instances[e % len(instances)], pol, T,
            [seed, _NS_MAIN, e], n_bins, normalize, "random"))

    counts = {}
    for t in trajs:
        counts[t.policy_id] = counts.get(t.policy_id, 0) + 1
    specs = algorithms.alg_spec(alg_id)
    data = "".join(serialize_trajectory(t) + "\n" for t in trajs)
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION, alg_id=alg_id, K=len(specs),
        M=n_bins, T=T, D=D, mu=float(mu), seed=seed,
        n_exploitation=n_exploit, n_exploration=D - n_exploit,
        policy_counts=counts, checksum=_checksum(data.encode("utf-8")),
        train_ids=list(split.train_ids))
    manifest.validate()
    if out_dir is not None:
        write_dataset(out_dir, trajs, manifest)
    return trajs, manifest
