"""Three fixed evolutionary algorithm assemblies with controllable
per-generation hyper-parameters.

* alg 0 (K=3): DE/current-to-rand/1/exponential on one population of 100,
  uniform init, clip bound control.  The population-size reduction stage
  is wired but its floor defaults to the initial size (no shrink).
* alg 1 (K=10): GA sub-population (MPX, Gaussian mutation, roulette,
  size 50 shrinking linearly to 10) plus DE/best/2/binomial sub-population
  (size 200), Halton init, per-sub-population bound control and
  information sharing.
* alg 2 (K=16): four sub-populations (MPX+polynomial+roulette,
  SBX+Gaussian+tournament, DE/rand/2/exponential, DE/current-to-best/1/
  binomial), Halton init sizes (200, 100, 100, 100), information sharing,
  no size reduction.

The DE sub-populations of alg 2 use greedy pairwise selection, and
pipelines whose operators can leave the search range clip before
evaluation; both are inferences where the written procedure is silent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ea_ops
from .ea_ops import OperatorParams, Population

ALGORITHM_IDS = (0, 1, 2)

_ALG1_NAMES = ("Cr1", "Xr_mpx", "sigma", "bc1", "cm1",
               "F1", "F2", "Cr2", "bc2", "cm2")
_ALG2_NAMES = ("Cr1", "Xr_mpx", "eta_m", "eta_c", "Xr_sbx", "sigma",
               "F1_3", "F2_3", "Cr3", "F1_4", "F2_4", "Cr4",
               "cm1", "cm2", "cm3", "cm4")


@dataclass(frozen=True)
class HyperParameterSpec:
    """One controllable dimension of an algorithm's configuration space."""

    name: str
    kind: str                 # "continuous" | "discrete"
    index: int                # 1-based position in the action sequence
    lo: float = 0.0
    hi: float = 1.0
    choices: tuple = ()       # concrete values when discrete

    @property
    def n_choices(self) -> int:
        return len(self.choices)


def _cont(name, index):
    return HyperParameterSpec(name, "continuous", index)


def _disc(name, index, choices):
    return HyperParameterSpec(name, "discrete", index, choices=tuple(choices))


def alg_spec(alg_id: int) -> list[HyperParameterSpec]:
    """The ordered hyper-parameter descriptions for one algorithm."""
    if alg_id == 0:
        return [_cont("F1", 1), _cont("F2", 2), _cont("Cr", 3)]
    if alg_id == 1:
        kinds = {
            "Xr_mpx": ("uniform", "rank"),
            "bc1": ea_ops.BOUND_METHODS, "bc2": ea_ops.BOUND_METHODS,
            "cm1": (0, 1), "cm2": (0, 1),
        }
        return [_disc(n, i + 1, kinds[n]) if n in kinds else _cont(n, i + 1)
                for i, n in enumerate(_ALG1_NAMES)]
    if alg_id == 2:
        kinds = {
            "Xr_mpx": ("uniform", "rank"), "Xr_sbx": ("uniform", "rank"),
            "eta_m": (1, 2, 3), "eta_c": (1, 2, 3),
            "cm1": (0, 1, 2, 3), "cm2": (0, 1, 2, 3),
            "cm3": (0, 1, 2, 3), "cm4": (0, 1, 2, 3),
        }
        return [_disc(n, i + 1, kinds[n]) if n in kinds else _cont(n, i + 1)
                for i, n in enumerate(_ALG2_NAMES)]
    raise ValueError(f"unknown alg_id {alg_id}")


def validate_config(specs: list[HyperParameterSpec], config) -> None:
    if len(config) != len(specs):
        raise ValueError(f"config length {len(config)} != K={len(specs)}")
    for spec, value in zip(specs, config):
        if spec.kind == "continuous":
            if not (spec.lo <= float(value) <= spec.hi):
                raise ValueError(f"{spec.name}={value} outside [{spec.lo}, {spec.hi}]")
        elif value not in spec.choices:
            raise ValueError(f"{spec.name}={value!r} not among {spec.choices}")


@dataclass
class AlgorithmState:
    """Mutable per-episode optimizer state (owned by one episode)."""

    alg_id: int
    sub_pops: list[Population]
    t: int                    # completed generations
    horizon: int
    stagnation: int = 0
    improved_last_step: bool = False
    evals_used: int = 0
    lpsr_plans: tuple = ()    # (sub_pop_index, np_init, np_final) triples

    @property
    def best_f(self) -> float:
        return min(p.best_so_far_f for p in self.sub_pops)

    @property
    def best_x(self) -> np.ndarray:
        p = min(self.sub_pops, key=lambda q: q.best_so_far_f)
        return p.best_so_far_x


_INIT_SIZES = {0: (100,), 1: (50, 200), 2: (200, 100, 100, 100)}


def init_state(alg_id: int, problem, seed, horizon: int = 500,
               alg0_np_final: int | None = None) -> AlgorithmState:
    """Sample and evaluate the initial (sub-)populations.

    alg 0 draws uniformly; algs 1 and 2 draw one scrambled Halton sequence
    and split it into the declared sub-population sizes.  alg0_np_final
    switches on population shrinking for alg 0 (defaults to the initial
    size, i.e. inactive).
    """
    if alg_id not in ALGORITHM_IDS:
        raise ValueError(f"unknown alg_id {alg_id}")
    rng = np.random.default_rng(seed)
    sizes = _INIT_SIZES[alg_id]
    bounds = (problem.lower, problem.upper)
    if alg_id == 0:
        X = rng.uniform(problem.lower, problem.upper, (sizes[0], problem.dim))
        pops = [Population(X)]
        floor = sizes[0] if alg0_np_final is None else alg0_np_final
        plans = ((0, sizes[0], floor),)
    else:
        whole = ea_ops.halton_init(sum(sizes), problem.dim, bounds, seed=rng)
        pops, row = [], 0
        for n in sizes:
            pops.append(Population(whole.X[row:row + n].copy()))
            row += n
        plans = ((0, 50, 10),) if alg_id == 1 else ()
    evals = 0
    for p in pops:
        evals += ea_ops.evaluate_population(p, problem)
    return AlgorithmState(alg_id, pops, 0, horizon, 0, False, evals, plans)


def step(alg_id: int, state: AlgorithmState, config, problem, rng):
    """Advance one generation under the given concrete configuration.

    Returns (new state, number of objective evaluations consumed).
    """
    if alg_id != state.alg_id:
        raise ValueError("state/alg_id mismatch")
    specs = alg_spec(alg_id)
    validate_config(specs, config)
    bounds = (problem.lower, problem.upper)
    prev_best = state.best_f
    evals = 0

    def spawn(X, src: Population) -> Population:
        return Population(X, None,
                          None if src.best_so_far_x is None else src.best_so_far_x.copy(),
                          src.best_so_far_f)

    def bc_index(name: str) -> int:
        return ea_ops.BOUND_METHODS.index(name)

    if alg_id == 0:
        f1, f2, cr = config
        pop = state.sub_pops[0]
        par = OperatorParams(f1=f1, f2=f2, cr=cr)
        Xp = ea_ops.de_mutate("current_to_rand_1", pop, par, rng)
        Xpp = ea_ops.crossover("exponential", pop.X, Xp, par, rng)
        Xpp = ea_ops.bound_control(0, Xpp, pop.X, bounds, rng)  # clip
        off = spawn(Xpp, pop)
        evals += ea_ops.evaluate_population(off, problem)
        new = ea_ops.select("greedy_pairwise", pop, off, rng)
        pops = [new]

    elif alg_id == 1:
        cr1, xr, sigma, bc1, cm1, f1, f2, cr2, bc2, cm2 = config
        ga, de = state.sub_pops
        X1 = ea_ops.crossover("mpx", ga.X, ga.X, OperatorParams(cr=cr1, xr=xr),
                              rng, fitness=ga.fitness)
        X1 = ea_ops.ga_mutate("gaussian", X1, OperatorParams(sigma=sigma),
                              bounds, rng)
        X1 = ea_ops.bound_control(bc_index(bc1), X1, ga.X, bounds, rng)
        off1 = spawn(X1, ga)
        evals += ea_ops.evaluate_population(off1, problem)
        ga_new = ea_ops.select("roulette", ga, off1, rng)

        par = OperatorParams(f1=f1, f2=f2, cr=cr2)
        X2 = ea_ops.de_mutate("best_2", de, par, rng)
        X2 = ea_ops.crossover("binomial", de.X, X2, par, rng)
        X2 = ea_ops.bound_control(bc_index(bc2), X2, de.X, bounds, rng)
        off2 = spawn(X2, de)
        evals += ea_ops.evaluate_population(off2, problem)
        de_new = ea_ops.select("greedy_pairwise", de, off2, rng)

        pops = ea_ops.share_information([ga_new, de_new], [cm1, cm2])

    else:
        (cr1, xr1, eta_m, eta_c, xr2, sigma,
         f1_3, f2_3, cr3, f1_4, f2_4, cr4, cm1, cm2, cm3, cm4) = config
        p1, p2, p3, p4 = state.sub_pops

        X1 = ea_ops.crossover("mpx", p1.X, p1.X, OperatorParams(cr=cr1, xr=xr1),
                              rng, fitness=p1.fitness)
        X1 = ea_ops.ga_mutate("polynomial", X1, OperatorParams(eta_m=eta_m),
                              bounds, rng)
        X1 = ea_ops.bound_control(0, X1, p1.X, bounds, rng)
        off1 = spawn(X1, p1)
        evals += ea_ops.evaluate_population(off1, problem)
        n1 = ea_ops.select("roulette", p1, off1, rng)

        X2 = ea_ops.crossover("sbx", p2.X, p2.X,
                              OperatorParams(eta_c=eta_c, xr=xr2), rng,
                              fitness=p2.fitness)
        X2 = ea_ops.ga_mutate("gaussian", X2, OperatorParams(sigma=sigma),
                              bounds, rng)
        X2 = ea_ops.bound_control(0, X2, p2.X, bounds, rng)
        off2 = spawn(X2, p2)
        evals += ea_ops.evaluate_population(off2, problem)
        n2 = ea_ops.select("tournament", p2, off2, rng)

        par3 = OperatorParams(f1=f1_3, f2=f2_3, cr=cr3)
        X3 = ea_ops.de_mutate("rand_2", p3, par3, rng)
        X3 = ea_ops.crossover("exponential", p3.X, X3, par3, rng)
        X3 = ea_ops.bound_control(0, X3, p3.X, bounds, rng)
        off3 = spawn(X3, p3)
        evals += ea_ops.evaluate_population(off3, problem)
        n3 = ea_ops.select("greedy_pairwise", p3, off3, rng)

        par4 = OperatorParams(f1=f1_4, f2=f2_4, cr=cr4)
        X4 = ea_ops.de_mutate("current_to_best_1", p4, par4, rng)
        X4 = ea_ops.crossover("binomial", p4.X, X4, par4, rng)
        X4 = ea_ops.bound_control(0, X4, p4.X, bounds, rng)
        off4 = spawn(X4, p4)
        evals += ea_ops.evaluate_population(off4, problem)
        n4 = ea_ops.select("greedy_pairwise", p4, off4, rng)

        pops = ea_ops.share_information([n1, n2, n3, n4], [cm1, cm2, cm3, cm4])

    t_next = state.t + 1
    for sub_idx, np_init, np_final in state.lpsr_plans:
        pops[sub_idx] = ea_ops.lpsr(pops[sub_idx], t_next, state.horizon,
                                    np_init, np_final)

    new_best = min(p.best_so_far_f for p in pops)
    improved = new_best < prev_best
    new_state = replace(
        state,
        sub_pops=pops,
        t=t_next,
        stagnation=0 if improved else state.stagnation + 1,
        improved_last_step=improved,
        evals_used=state.evals_used + evals,
    )
    return new_state, evals
