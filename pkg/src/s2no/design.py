"""Genetic-algorithm inverse design over voxel material distributions.

A :class:`DesignProblem` wraps a batched shape predictor (trained model or
oracle) and a target point set. Fitness is the mean point-to-point distance,
either over all points or over mid-surface pairs. Evaluations are memoised on
the chromosome bytes, so repeated individuals cost nothing.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .geometry import Mesh, VoxelCoarsening, coarsen_voxels, mid_surface, pair_layers
from .oracle import OracleConfig, get_system

Predictor = Callable[[np.ndarray], np.ndarray]  # (P, K) int -> (P, n, 3)


class DesignError(ValueError):
    pass


# ---------------------------------------------------------------------------
# predictors


def model_predictor(params, ctx, mesh: Mesh, alphas=(0.0, 1e-3), batch_size: int = 128) -> Predictor:
    from .model import forward

    table = np.asarray(alphas, dtype=np.float64)
    vmap = mesh.voxel_map

    @torch.no_grad()
    def predict(omega: np.ndarray) -> np.ndarray:
        a = table[np.asarray(omega, dtype=np.int64)][:, vmap]
        out = np.empty((a.shape[0], mesh.n, 3))
        for i in range(0, a.shape[0], batch_size):
            out[i:i + batch_size] = forward(params, ctx, torch.as_tensor(a[i:i + batch_size], dtype=params.dtype),
                                            check=False).double().numpy()
        return out

    return predict


def oracle_predictor(mesh: Mesh, cfg: OracleConfig = OracleConfig()) -> Predictor:
    """Exact oracle shapes via superposition of per-voxel unit responses.

    The oracle is linear in the voxel CTE values, so one solve per voxel
    yields a response matrix that reproduces any design by a matrix product.
    """
    system = get_system(mesh, cfg)
    K = mesh.n_voxels
    resp = np.empty((K, 3 * mesh.n))
    for j in range(K):
        e = np.zeros(K)
        e[j] = 1.0
        d, _ = system.solve_cte(e)
        resp[j] = d.ravel()
    alphas = np.asarray(cfg.alphas)
    base = mesh.points.ravel()

    def predict(omega: np.ndarray) -> np.ndarray:
        cte = alphas[np.asarray(omega, dtype=np.int64)]
        return (base + cte @ resp).reshape(-1, mesh.n, 3)

    return predict


# ---------------------------------------------------------------------------
# problem and objective


@dataclass
class DesignProblem:
    predictor: Predictor
    target: np.ndarray  # (m, 3)
    K: int
    q: int = 2
    kind: str = "full"  # "full" or "surface"
    pairs: tuple[np.ndarray, np.ndarray] | None = None
    cache: dict = field(default_factory=dict, repr=False)
    evaluations: int = 0

    @classmethod
    def build(cls, predictor: Predictor, mesh: Mesh, target, kind: str = "full", q: int = 2) -> "DesignProblem":
        target = np.asarray(target, dtype=np.float64)
        if kind not in ("full", "surface"):
            raise DesignError(f"unknown target kind {kind!r}")
        pairs = pair_layers(mesh) if kind == "surface" else None
        m = mesh.n if kind == "full" else len(pairs[0])
        if target.shape != (m, 3):
            raise DesignError(f"target has {target.shape[0]} points, {kind} objective expects {m}")
        return cls(predictor, target, mesh.n_voxels, q, kind, pairs)

    def shapes_to_points(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "surface":
            bot, top = self.pairs
            return 0.5 * (u[:, bot] + u[:, top])
        return u

    def distance(self, u: np.ndarray) -> np.ndarray:
        pts = self.shapes_to_points(np.asarray(u, dtype=np.float64))
        return np.linalg.norm(pts - self.target, axis=-1).mean(axis=-1)

    def evaluate(self, omega: np.ndarray) -> np.ndarray:
        """Objective for each row of ``omega`` (P, K), memoised."""
        omega = np.ascontiguousarray(np.asarray(omega, dtype=np.uint8))
        if omega.ndim != 2 or omega.shape[1] != self.K:
            raise DesignError(f"designs must have {self.K} genes")
        if omega.size and omega.max() >= self.q:
            raise DesignError(f"gene values must lie in [0, {self.q})")
        keys = [row.tobytes() for row in omega]
        todo = {}
        for i, k in enumerate(keys):
            if k not in self.cache and k not in todo:
                todo[k] = i
        if todo:
            idx = np.fromiter(todo.values(), dtype=np.int64)
            vals = self.distance(self.predictor(omega[idx]))
            self.evaluations += len(idx)
            for k, v in zip(todo, vals):
                self.cache[k] = float(v)
        return np.array([self.cache[k] for k in keys])


def objective(omega, problem: DesignProblem) -> float:
    """Mean point-to-point distance (mm) between the predicted shape and the target."""
    return float(problem.evaluate(np.asarray(omega)[None])[0])


# ---------------------------------------------------------------------------
# genetic algorithm


@dataclass(frozen=True)
class GAConfig:
    population: int = 1000
    generations: int = 100
    crossover: float = 0.75
    mutation: float = 0.2
    tournament: int = 2
    elite_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be even and >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        for name in ("crossover", "mutation", "elite_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tournament < 1:
            raise ValueError("tournament size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GAResult:
    best: np.ndarray
    fitness: float
    history: list[float]  # best fitness after each generation, index 0 = initial population
    evaluations: int
    wall_time: float
    population: np.ndarray | None = None
    pop_fitness: np.ndarray | None = None

    def generations_to_reach(self, value: float, tol: float = 1e-12) -> int | None:
        for g, h in enumerate(self.history):
            if h <= value + tol:
                return g
        return None


def _mutate(children: np.ndarray, rate: float, q: int, rng: np.random.Generator) -> None:
    """With probability ``rate`` per individual, change one random gene to another value."""
    P, K = children.shape
    hit = np.flatnonzero(rng.random(P) < rate)
    genes = rng.integers(0, K, size=hit.size)
    shift = rng.integers(1, q, size=hit.size) if q > 2 else np.ones(hit.size, dtype=np.int64)
    children[hit, genes] = (children[hit, genes].astype(np.int64) + shift) % q


def ga_run(problem: DesignProblem, cfg: GAConfig = GAConfig(), init_population: np.ndarray | None = None,
           keep_population: bool = False) -> GAResult:
    """Tournament selection, uniform crossover, one-gene mutation, elitism."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    P, K, q = cfg.population, problem.K, problem.q
    pop = rng.integers(0, q, size=(P, K), dtype=np.uint8)
    if init_population is not None:
        seeds = np.asarray(init_population, dtype=np.uint8)[:P]
        pop[:len(seeds)] = seeds
    fit = problem.evaluate(pop)
    n_elite = max(1, int(round(cfg.elite_fraction * P))) if cfg.elite_fraction > 0 else 0
    history = [float(fit.min())]
    for _ in range(cfg.generations):
        order = np.argsort(fit, kind="stable")
        elites = pop[order[:n_elite]]
        n_child = P - n_elite
        n_pairs = (n_child + 1) // 2
        # tournaments: lowest fitness wins, lowest index breaks ties
        cand = rng.integers(0, P, size=(2 * n_pairs, cfg.tournament))
        win = cand[np.arange(cand.shape[0]), np.argmin(fit[cand], axis=1)]
        pa, pb = pop[win[0::2]], pop[win[1::2]]
        do_cross = rng.random(n_pairs) < cfg.crossover
        mask = (rng.random((n_pairs, K)) < 0.5) & do_cross[:, None]
        ca = np.where(mask, pb, pa)
        cb = np.where(mask, pa, pb)
        children = np.concatenate([ca, cb])[:n_child]
        _mutate(children, cfg.mutation, q, rng)
        pop = np.concatenate([elites, children])
        fit = problem.evaluate(pop)
        history.append(float(fit.min()))
    i = int(np.argmin(fit))
    res = GAResult(pop[i].copy(), float(fit[i]), history, problem.evaluations, time.perf_counter() - t0)
    if keep_population:
        res.population, res.pop_fitness = pop, fit
    return res


def exhaustive_search(problem: DesignProblem, max_candidates: int = 2 ** 20, chunk: int = 4096,
                      tie_tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Exact minimiser by enumeration in lexicographic order.

    Values within ``tie_tol`` (relative) of the minimum count as ties and the
    lexicographically smallest design wins, so mirror-image optima that
    differ only by rounding resolve deterministically.
    """
    total = problem.q ** problem.K
    if total > max_candidates:
        raise DesignError(f"design space has {problem.q}^{problem.K} = {total} candidates, "
                          f"exceeding the bound {max_candidates}")
    weights = problem.q ** np.arange(problem.K - 1, -1, -1, dtype=np.int64)
    values = np.empty(total)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk), dtype=np.int64)
        omega = (codes[:, None] // weights) % problem.q
        values[start:start + len(codes)] = problem.distance(problem.predictor(omega.astype(np.uint8)))
    best = values.min()
    i = int(np.flatnonzero(values <= best + tie_tol * max(1.0, abs(best)))[0])
    omega = ((i // weights) % problem.q).astype(np.uint8)
    return omega, float(values[i])


# ---------------------------------------------------------------------------
# multi-resolution


class CoarseProblem(DesignProblem):
    """A design problem whose genes are coarse voxels broadcast to the fine map."""

    def __init__(self, fine: DesignProblem, coarsening: VoxelCoarsening):
        super().__init__(self._wrap(fine, coarsening), fine.target, coarsening.n_coarse, fine.q, fine.kind,
                         fine.pairs)
        self.fine = fine
        self.coarsening = coarsening

    @staticmethod
    def _wrap(fine, coarsening):
        def predict(omega_c):
            return fine.predictor(coarsening.broadcast(np.asarray(omega_c)))
        return predict


def restrict(omega_fine: np.ndarray, coarsening: VoxelCoarsening, q: int) -> np.ndarray:
    """Majority vote of fine genes per coarse voxel (ties go to the lower value)."""
    out = np.empty(coarsening.n_coarse, dtype=np.uint8)
    for c, group in enumerate(coarsening.groups):
        out[c] = np.argmax(np.bincount(np.asarray(omega_fine)[group], minlength=q))
    return out


@dataclass
class MultiresResult:
    best: np.ndarray
    fitness: float
    levels: list[dict]  # per level: factor, result
    wall_time: float

    @property
    def fine(self) -> GAResult:
        return self.levels[-1]["result"]


def _seed_population(parents: np.ndarray, size: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Cycle through ``parents``; the first copy of each is kept exact, the rest mutated once."""
    reps = np.resize(np.arange(len(parents)), size)
    out = parents[reps].copy()
    dup = np.arange(size) >= len(parents)
    if dup.any():
        sub = out[dup]
        _mutate(sub, 1.0, q, rng)
        out[dup] = sub
    return out


def multires_optimize(problem: DesignProblem, mesh: Mesh, factors, cfg: GAConfig = GAConfig(),
                      seed_fraction: float = 0.5, level_generations=None) -> MultiresResult:
    """Coarse-to-fine GA: optima of each level seed half of the next population.

    ``factors`` is a coarsening ladder such as ``[4, 2, 1]``; a trailing 1
    (the fine level) is appended when missing.
    """
    t0 = time.perf_counter()
    factors = [int(f) for f in factors]
    if not factors or factors[-1] != 1:
        factors.append(1)
    rng = np.random.default_rng([cfg.seed, 0x3D])
    levels = []
    prev_best_fine = None
    prev_pop_fine = None
    for li, f in enumerate(factors):
        coarsening = coarsen_voxels(mesh, f)
        level_problem = problem if f == 1 and coarsening.n_coarse == problem.K and \
            np.array_equal(coarsening.fine_to_coarse, np.arange(problem.K)) else CoarseProblem(problem, coarsening)
        init = None
        if prev_pop_fine is not None:
            parents = np.stack([restrict(w, coarsening, problem.q) for w in prev_pop_fine])
            _, first = np.unique(parents, axis=0, return_index=True)
            parents = parents[np.sort(first)]
            init = _seed_population(parents, int(round(seed_fraction * cfg.population)), problem.q, rng)
        gens = cfg.generations if level_generations is None else level_generations[li]
        level_cfg = GAConfig(cfg.population, gens, cfg.crossover, cfg.mutation, cfg.tournament,
                             cfg.elite_fraction, cfg.seed)
        res = ga_run(level_problem, level_cfg, init, keep_population=True)
        order = np.argsort(res.pop_fitness, kind="stable")
        top = res.population[order]
        prev_pop_fine = top if level_problem is problem else coarsening.broadcast(top)
        prev_best_fine = res.best if level_problem is problem else coarsening.broadcast(res.best[None])[0]
        levels.append({"factor": f, "n_genes": coarsening.n_coarse, "result": res,
                       "best_fine": prev_best_fine})
    fine_res = levels[-1]["result"]
    return MultiresResult(levels[-1]["best_fine"], fine_res.fitness, levels, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# targets

DOME_PARAMS = {
    "dome-hat": (10.0, 0.0, 12.04, 0.0, 0.0, 0.0),
    "dome-volcano": (5.0, 0.5, 8.4, -2.0, 8.4, 1.0),
}
DOME_RADIUS = 28.0


def dome_height(r: np.ndarray, params, radius: float = DOME_RADIUS) -> np.ndarray:
    """Rotationally symmetric offset f(r) g(r) with peak, dip and taper terms.

    ``params`` = (A_p, beta, sigma_p, A_d, sigma_d, alpha).
    """
    A_p, beta, s_p, A_d, s_d, alpha = (float(x) for x in params)
    f = A_p * np.exp(-(r - radius * beta) ** 2 / (2 * s_p ** 2))
    if A_d != 0.0:
        f = f + A_d * np.exp(-r ** 2 / (2 * s_d ** 2))
    return f * (1.0 - alpha * (r / radius) ** 2)


def dome_target(mesh: Mesh, params, radius: float = DOME_RADIUS, center=None) -> np.ndarray:
    """Mid-surface target z' = z + f(r) g(r), r measured from the in-plane centre."""
    ms = mid_surface(mesh)
    pts = ms.points.copy()
    c = mesh.points[:, :2].mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    r = np.linalg.norm(pts[:, :2] - c, axis=1)
    pts[:, 2] += dome_height(r, params, radius)
    return pts


def curvature_target(mesh: Mesh, kappa: float, axis: int = 0) -> np.ndarray:
    """Mid-surface rolled onto a cylinder of curvature ``kappa`` from its minimum ``axis`` edge."""
    pts = mid_surface(mesh).points.copy()
    if kappa == 0:
        return pts
    s = pts[:, axis] - pts[:, axis].min()
    base = pts[:, axis].min()
    pts[:, axis] = base + np.sin(kappa * s) / kappa
    pts[:, 2] = pts[:, 2] + (1.0 - np.cos(kappa * s)) / kappa
    return pts


def replay_omega(K: int, seed: int, q: int = 2) -> np.ndarray:
    return np.random.default_rng([seed, 0x7A]).integers(0, q, size=K).astype(np.uint8)


def replay_target(predictor: Predictor, omega: np.ndarray, mesh: Mesh, kind: str = "full") -> np.ndarray:
    u = predictor(np.asarray(omega)[None])[0]
    if kind == "surface":
        bot, top = pair_layers(mesh)
        return 0.5 * (u[bot] + u[top])
    return u


TARGET_NAMES = ("dome-hat", "dome-volcano", "curvature", "replay", "file")


def load_point_cloud(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "x":
                continue
            rows.append([float(v) for v in row[:3]])
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# reporting


def design_report(result, problem: DesignProblem, extra: dict | None = None) -> dict:
    history = result.history if isinstance(result, GAResult) else result.fine.history
    rep = {
        "best_omega": [int(x) for x in result.best],
        "objective_mm": float(result.fitness),
        "history": [float(h) for h in history],
        "wall_time_s": float(result.wall_time),
        "target_kind": problem.kind,
        "n_genes": int(problem.K),
    }
    if isinstance(result, MultiresResult):
        rep["levels"] = [{"factor": lv["factor"], "n_genes": lv["n_genes"],
                          "objective_mm": lv["result"].fitness,
                          "history": [float(h) for h in lv["result"].history]} for lv in result.levels]
    rep.update(extra or {})
    return rep


def shape_csv(points: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z"])
    for p in np.asarray(points):
        w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])
    return buf.getvalue()


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


__all__ = [
    "DesignProblem", "GAConfig", "GAResult", "MultiresResult", "DesignError", "objective", "ga_run",
    "exhaustive_search", "multires_optimize", "model_predictor", "oracle_predictor", "dome_target",
    "dome_height", "curvature_target", "replay_omega", "replay_target", "DOME_PARAMS", "design_report",
    "shape_csv", "write_report", "load_point_cloud", "TARGET_NAMES", "restrict",
]
