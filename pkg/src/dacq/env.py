"""Per-generation control loop around the algorithm assemblies.

Exposes the nine-feature optimization state, the relative-improvement
reward, the bin-grid action decoding, and an episode runner that threads
a policy callback through T generations of one algorithm on one problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import algorithms
from .algorithms import AlgorithmState, HyperParameterSpec

#: default number of grid bins for continuous hyper-parameters
DEFAULT_BINS = 16

#: tokens occupy 5 bits, so at most 32 bins can be represented
MAX_BINS = 32


@dataclass
class StepRecord:
    """One transition: state seen, bins chosen, reward earned, best after."""

    state: np.ndarray          # (9,) float
    actions: np.ndarray        # (K,) int bins, 0-based
    reward: float
    best_so_far_f: float


@dataclass
class Trajectory:
    """A full controlled episode plus the metadata needed to replay it."""

    alg_id: int
    K: int
    M: int
    function_id: int
    dim: int
    instance_seed: int | None
    episode_seed: object       # int or list of ints
    T: int
    policy_id: str
    f_best_init: float
    f_star: float
    steps: list = field(default_factory=list)

    @property
    def perf(self) -> float:
        """Accumulated normalized improvement, in [0, 1]."""
        return float(sum(s.reward for s in self.steps))

    @property
    def final_best_f(self) -> float:
        return self.steps[-1].best_so_far_f if self.steps else self.f_best_init


def cal_state(alg_state: AlgorithmState, problem, T: int,
              f_best_init: float, normalize: bool = True) -> np.ndarray:
    """Nine summary features of the current optimizer state.

    s1 mean pairwise distance, s2 mean distance to the generation best,
    s3 mean distance to the best-so-far point, s4 mean objective gap to
    the best-so-far value, s5 mean gap to the generation best, s6
    objective std, s7 remaining-budget fraction, s8 stagnation fraction,
    s9 improved-last-generation flag.  Features are computed over the
    union of all sub-populations.  With normalize=True, s1-s3 are divided
    by the search-space diameter and s4-s6 by (f_best_init - f_star).
    """
    X = np.vstack([p.X for p in alg_state.sub_pops])
    fit = np.concatenate([p.fitness for p in alg_state.sub_pops])
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty population")

    gi = int(np.argmin(fit))
    if n > 1:
        # row-at-a-time upper triangle keeps memory at O(n*dim)
        total = 0.0
        for i in range(n - 1):
            total += np.linalg.norm(X[i + 1:] - X[i], axis=1).sum()
        s1 = total / (n * (n - 1) / 2)
    else:
        s1 = 0.0
    s2 = np.linalg.norm(X - X[gi], axis=1).mean()
    s3 = np.linalg.norm(X - alg_state.best_x, axis=1).mean()
    s4 = (fit - alg_state.best_f).mean()
    s5 = (fit - fit[gi]).mean()
    s6 = fit.std()
    s7 = (T - alg_state.t) / T
    s8 = alg_state.stagnation / T
    s9 = 1.0 if alg_state.improved_last_step else 0.0

    out = np.array([s1, s2, s3, s4, s5, s6, s7, s8, s9], dtype=np.float64)
    if normalize:
        diameter = np.sqrt(problem.dim) * (problem.upper - problem.lower)
        out[0:3] /= diameter
        span = f_best_init - problem.f_opt
        if span > 0:
            out[3:6] /= span
        else:
            out[3:6] = 0.0
    return out


def reward(f_best_prev: float, f_best_now: float,
           f_best_init: float, f_star: float) -> float:
    """Relative improvement of the best-so-far objective over one step,
    normalized so that a whole episode's rewards sum to at most 1."""
    denom = f_best_init - f_star
    if denom < 0:
        raise ValueError("f_best_init below f_star")
    if denom == 0:
        return 0.0
    return (f_best_prev - f_best_now) / denom


def mask_bins(spec: HyperParameterSpec, n_bins: int = DEFAULT_BINS) -> int:
    """Number of valid bins for one hyper-parameter dimension."""
    return n_bins if spec.kind == "continuous" else spec.n_choices


def decode_action(spec: HyperParameterSpec, bin_idx: int,
                  n_bins: int = DEFAULT_BINS):
    """Concrete value for one bin: continuous dims use a uniform grid
    whose endpoints are the bounds; discrete dims index their choices."""
    m = mask_bins(spec, n_bins)
    if not 0 <= bin_idx < m:
        raise ValueError(f"bin {bin_idx} out of range [0, {m}) for {spec.name}")
    if spec.kind == "continuous":
        return spec.lo + bin_idx * (spec.hi - spec.lo) / (n_bins - 1)
    return spec.choices[bin_idx]


def decode_config(specs, bins, n_bins: int = DEFAULT_BINS) -> list:
    if len(bins) != len(specs):
        raise ValueError(f"expected {len(specs)} bins, got {len(bins)}")
    return [decode_action(s, int(b), n_bins) for s, b in zip(specs, bins)]


def run_episode(alg_id: int, problem, policy, T: int, seed,
                n_bins: int = DEFAULT_BINS, normalize: bool = True,
                policy_id: str = "") -> Trajectory:
    """Run one controlled episode.

    policy(state_vector, t) must return K bin indices; they are decoded
    on the per-dimension grids and fed to the optimizer each generation.
    The seed (int, list of ints, or SeedSequence) splits into independent
    init and stepping streams.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    init_ss, step_ss = ss.spawn(2)
    state = algorithms.init_state(alg_id, problem, init_ss, horizon=T)
    rng = np.random.default_rng(step_ss)
    specs = algorithms.alg_spec(alg_id)
    masks = [mask_bins(s, n_bins) for s in specs]
    f_best_init = state.best_f

    steps = []
    for t in range(T):
        s = cal_state(state, problem, T, f_best_init, normalize)
        bins = np.asarray(policy(s, t), dtype=np.int64)
        if bins.shape != (len(specs),):
            raise ValueError(f"policy returned shape {bins.shape}, "
                             f"expected ({len(specs)},)")
        for b, m, spec in zip(bins, masks, specs):
            if not 0 <= b < m:
                raise ValueError(f"policy chose bin {b} out of range "
                                 f"[0, {m}) for {spec.name}")
        config = decode_config(specs, bins, n_bins)
        prev_best = state.best_f
        state, _ = algorithms.step(alg_id, state, config, problem, rng)
        r = reward(prev_best, state.best_f, f_best_init, problem.f_opt)
        steps.append(StepRecord(s, bins, float(r), float(state.best_f)))

    return Trajectory(
        alg_id=alg_id, K=len(specs), M=n_bins,
        function_id=problem.function_id, dim=problem.dim,
        instance_seed=problem.seed,
        episode_seed=seed if not isinstance(seed, np.random.SeedSequence)
        else seed.entropy,
        T=T, policy_id=policy_id,
        f_best_init=float(f_best_init), f_star=float(problem.f_opt),
        steps=steps)
