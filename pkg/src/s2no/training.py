"""Objective, optimiser, schedule and training regimes.

Gradients come from torch autograd, which records the forward pass and
replays its adjoint. A single training loop serves standard and
multi-geometry training; fine-tuning re-enters it from existing parameters.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .model import (PODNN, GeometryContext, ModelConfig, ModelParams, Stats, forward, forward_normalised,
                    init_params, pod_fit)
from .oracle import Dataset


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3  # peak of the one-cycle schedule
    batch_size: int = 16
    epochs: int = 100
    weight_decay: float = 1e-4
    warmup: float = 0.3
    div_initial: float = 25.0
    div_final: float = 1e4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0
    log_every: int = 0  # print progress every N epochs (0 = silent)

    def __post_init__(self):
        for name in ("lr", "batch_size", "weight_decay", "div_initial", "div_final", "eps"):
            if getattr(self, name) < 0 or (name != "weight_decay" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.warmup < 1.0:
            raise ValueError("warmup must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# objective and gradients


def relative_l2_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Batch mean of ||pred - truth|| / ||truth|| over flattened fields."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    B = truth.shape[0]
    den = truth.reshape(B, -1).norm(dim=1)
    if torch.any(den == 0):
        raise ValueError("degenerate target with zero norm")
    return ((pred - truth).reshape(B, -1).norm(dim=1) / den).mean()


def loss_and_grad(params: ModelParams, ctx: GeometryContext, a: torch.Tensor, u: torch.Tensor,
                  scale: float = 1.0, check: bool = True) -> tuple[float, dict[str, torch.Tensor]]:
    """Batch loss and its exact gradient for every parameter tensor."""
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.tensors.items()}
    live = ModelParams(params.cfg, leaves, params.stats)
    loss = relative_l2_loss(forward(live, ctx, a, check), u) * scale
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(names, grads)}
    return float(loss.detach()), out


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 1e-4,
               betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One decoupled-weight-decay Adam update; returns new tensors and advances ``state``."""
    b1, b2 = betas
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p * (1.0 - lr * weight_decay) if weight_decay else p.clone()
        new -= lr * (m / c1) / ((v / c2).sqrt() + eps)
        out[name] = new
    return out


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Cosine warm-up from lr/div_initial to lr, then cosine decay to lr/div_final."""
    if not 0 <= step < max(total_steps, 1):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.lr
    lo, hi = peak / cfg.div_initial, peak / cfg.div_final
    warm = max(1, int(round(cfg.warmup * total_steps)))
    if step < warm:
        return lo + (peak - lo) * 0.5 * (1.0 - math.cos(math.pi * step / warm))
    span = total_steps - 1 - warm
    if span <= 0:
        return peak
    t = (step - warm) / span
    return peak - (peak - hi) * 0.5 * (1.0 - math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: object
    history: list[dict]
    best_epoch: int
    wall_time: float = 0.0

    def write_csv(self, path) -> None:
        write_history(path, self.history)


def write_history(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_l2", "val_l2", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_l2"]), repr(row["val_l2"]), repr(row["lr"])])


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(fraction * n))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class _Task:
    ctx: GeometryContext
    a: torch.Tensor
    u: torch.Tensor
    val_a: torch.Tensor
    val_u: torch.Tensor


def _make_tasks(datasets, contexts, cfg: TrainConfig, dtype):
    tasks = []
    for ds, ctx in zip(datasets, contexts):
        if ds.n != ctx.n:
            raise TrainingError(f"dataset {ds.geometry_id!r} has n={ds.n}, geometry has n={ctx.n}")
        if ds.geometry_id != ctx.geometry_id:
            raise TrainingError(f"dataset geometry {ds.geometry_id!r} does not match context {ctx.geometry_id!r}")
        tr, va = split_validation(len(ds), cfg.val_fraction, cfg.seed)
        a = torch.as_tensor(ds.a, dtype=dtype)
        u = torch.as_tensor(ds.u, dtype=dtype)
        tasks.append(_Task(ctx, a[tr], u[tr], a[va], u[va]))
    return tasks


@torch.no_grad()
def batched_loss(params, ctx, a, u, batch_size=64) -> float:
    if a.shape[0] == 0:
        return float("nan")
    tot = 0.0
    for i in range(0, a.shape[0], batch_size):
        pred = forward(params, ctx, a[i:i + batch_size], check=False)
        tot += float(relative_l2_loss(pred, u[i:i + batch_size])) * pred.shape[0]
    return tot / a.shape[0]


def _schedule(tasks, batch_size: int, rng: np.random.Generator):
    """Round-robin over geometries, shuffled samples within each geometry."""
    per = [np.array_split(rng.permutation(t.a.shape[0]), max(1, math.ceil(t.a.shape[0] / batch_size)))
           for t in tasks]
    out = []
    for j in range(max(len(p) for p in per)):
        for g, p in enumerate(per):
            if j < len(p):
                out.append((g, p[j]))
    return out


def _run(params: ModelParams, tasks: list[_Task], cfg: TrainConfig, tag: str = "train") -> TrainResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = len(_schedule(tasks, cfg.batch_size, np.random.default_rng(0)))
    total = steps_per_epoch * cfg.epochs
    state = AdamState()
    history = []
    best = (math.inf, params.clone(), 0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        tot, cnt = 0.0, 0
        lr = cfg.lr
        for g, idx in _schedule(tasks, cfg.batch_size, rng):
            task = tasks[g]
            idx_t = torch.as_tensor(idx)
            lr = onecycle_lr(step, total, cfg)
            loss, grads = loss_and_grad(params, task.ctx, task.a[idx_t], task.u[idx_t], check=False)
            if not math.isfinite(loss):
                raise TrainingError(f"{tag}: loss diverged at epoch {epoch}")
            params.tensors = adamw_step(params.tensors, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
            tot += loss * len(idx)
            cnt += len(idx)
            step += 1
        vals = [batched_loss(params, t.ctx, t.val_a, t.val_u) for t in tasks if t.val_a.shape[0]]
        val = float(np.mean(vals)) if vals else tot / cnt
        if not math.isfinite(val):
            raise TrainingError(f"{tag}: validation loss diverged at epoch {epoch}")
        history.append({"epoch": epoch, "train_l2": tot / cnt, "val_l2": val, "lr": lr})
        if val < best[0]:
            best = (val, params.clone(), epoch)
        if cfg.log_every and epoch % cfg.log_every == 0:
            print(f"[{tag}] epoch {epoch:4d} train {tot / cnt:.3e} val {val:.3e} "
                  f"lr {lr:.2e} ({time.perf_counter() - t0:.0f}s)", flush=True)
    final = best[1] if history else params
    return TrainResult(final, history, best[2], time.perf_counter() - t0)


def fit_stats(datasets, contexts, cfg: TrainConfig) -> dict[str, Stats]:
    stats = {}
    for ds, ctx in zip(datasets, contexts):
        tr, _ = split_validation(len(ds), cfg.val_fraction, cfg.seed)
        stats[ctx.stats_key] = Stats.fit(ds.u[tr], ctx.points.double().numpy())
    return stats


def train_multi(datasets: list[Dataset], contexts: list[GeometryContext], cfg: TrainConfig,
                model_cfg: ModelConfig | None = None, params: ModelParams | None = None,
                dtype=torch.float32) -> TrainResult:
    """Train one shared parameter set on several geometries.

    Each dataset is paired with the context of its geometry; every geometry
    keeps its own normalisation statistics.
    """
    if len(datasets) != len(contexts) or not datasets:
        raise TrainingError("need one geometry context per dataset")
    if params is None:
        params = init_params(model_cfg or ModelConfig(), cfg.seed, dtype)
    elif model_cfg is not None and model_cfg != params.cfg:
        raise TrainingError("model config does not match the given parameters")
    params = params.clone()
    tasks = _make_tasks(datasets, contexts, cfg, params.dtype)
    params.stats.update(fit_stats(datasets, contexts, cfg))
    return _run(params, tasks, cfg, "train" if len(tasks) == 1 else "train-multi")


def train(dataset: Dataset, ctx: GeometryContext, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          params: ModelParams | None = None, dtype=torch.float32) -> TrainResult:
    return train_multi([dataset], [ctx], cfg, model_cfg, params, dtype)


def rescale_output(params: ModelParams, key: str, new: Stats) -> ModelParams:
    """Install new statistics for ``key`` without changing any prediction.

    The last projection layer absorbs the change of affine map, and every
    other geometry's statistics are adjusted so its outputs stay identical.
    """
    out = params.clone()
    old = out.stats.get(key)
    if old is None:
        out.stats[key] = new
        return out
    T = out.tensors
    dt = T["proj2.W"].dtype
    s_old = torch.as_tensor(old.std, dtype=torch.float64)
    s_new = torch.as_tensor(new.std, dtype=torch.float64)
    shift = torch.as_tensor(old.mean - new.mean, dtype=torch.float64)
    T["proj2.W"] = (T["proj2.W"].double() * (s_old / s_new)).to(dt)
    T["proj2.b"] = ((T["proj2.b"].double() * s_old + shift) / s_new).to(dt)
    for k, st in list(out.stats.items()):
        if k == key:
            continue
        ratio = st.std / old.std
        out.stats[k] = Stats(st.mean + ratio * (new.mean - old.mean), ratio * new.std)
    out.stats[key] = new
    return out


def finetune(params_low: ModelParams, dataset_high: Dataset, ctx_high: GeometryContext, cfg: TrainConfig,
             model_cfg: ModelConfig | None = None, lr_factor: float = 0.1) -> TrainResult:
    """Continue training a low-resolution model on high-resolution data.

    Training starts exactly from ``params_low``; statistics are refitted on
    the new data through :func:`rescale_output`, so the initial loss equals
    the zero-shot loss. The peak learning rate is ``lr_factor`` times the
    configured one.
    """
    if model_cfg is not None and model_cfg != params_low.cfg:
        raise TrainingError("fine-tuning requires the same model configuration")
    if cfg.epochs == 0:
        return TrainResult(params_low.clone(), [], 0)
    src_key = ctx_high.stats_key
    if src_key not in params_low.stats:
        raise TrainingError(f"no statistics for {src_key!r} in the low-resolution model")
    params = params_low.clone()
    key = ctx_high.geometry_id
    if key != src_key:
        params.stats[key] = params.stats[src_key]
        ctx_high = replace(ctx_high, stats_key=key)
    new = fit_stats([dataset_high], [ctx_high], cfg)[key]
    params = rescale_output(params, key, new)
    tasks = _make_tasks([dataset_high], [ctx_high], cfg, params.dtype)
    return _run(params, tasks, replace(cfg, lr=cfg.lr * lr_factor), "finetune")


# ---------------------------------------------------------------------------
# PODNN baseline


def voxel_values(ds: Dataset, alphas) -> np.ndarray:
    return np.asarray(alphas, dtype=np.float64)[ds.omega.astype(np.int64)]


def train_podnn(dataset: Dataset, cfg: TrainConfig, alphas=(0.0, 1e-3), modes: int = 64,
                hidden=(512, 512, 512, 512), dtype=torch.float32) -> TrainResult:
    """POD of the training outputs plus an MLP regressing the POD coefficients.

    Uses the same objective, optimiser and schedule as the neural operator.
    """
    tr, va = split_validation(len(dataset), cfg.val_fraction, cfg.seed)
    pod = pod_fit(dataset.u[tr], modes)
    model = PODNN.init(pod, dataset.n_voxels, cfg.seed, hidden, dtype)
    x = torch.as_tensor(voxel_values(dataset, alphas), dtype=dtype)
    u = torch.as_tensor(dataset.u, dtype=dtype)
    xt, ut, xv, uv = x[tr], u[tr], x[va], u[va]
    rng = np.random.default_rng(cfg.seed)
    nb = max(1, math.ceil(len(tr) / cfg.batch_size))
    total = nb * cfg.epochs
    state = AdamState()
    history, best, step = [], (math.inf, dict(model.tensors), 0), 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        tot = 0.0
        lr = cfg.lr
        for idx in np.array_split(rng.permutation(len(tr)), nb):
            lr = onecycle_lr(step, total, cfg)
            idx_t = torch.as_tensor(idx)
            leaves = {k: v.detach().requires_grad_(True) for k, v in model.tensors.items()}
            live = PODNN(pod, model.widths, leaves, model.coeff_scale, model.a_scale)
            loss = relative_l2_loss(live.forward(xt[idx_t]), ut[idx_t])
            names = list(leaves)
            grads = dict(zip(names, torch.autograd.grad(loss, [leaves[k] for k in names])))
            if not torch.isfinite(loss):
                raise TrainingError(f"podnn: loss diverged at epoch {epoch}")
            model.tensors = adamw_step(model.tensors, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
            tot += float(loss.detach()) * len(idx)
            step += 1
        with torch.no_grad():
            val = float(relative_l2_loss(model.forward(xv), uv)) if len(va) else tot / len(tr)
        history.append({"epoch": epoch, "train_l2": tot / len(tr), "val_l2": val, "lr": lr})
        if val < best[0]:
            best = (val, dict(model.tensors), epoch)
        if cfg.log_every and epoch % cfg.log_every == 0:
            print(f"[podnn] epoch {epoch:4d} train {tot / len(tr):.3e} val {val:.3e}", flush=True)
    model.tensors = best[1]
    return TrainResult(model, history, best[2], time.perf_counter() - t0)


__all__ = [
    "TrainConfig", "TrainResult", "TrainingError", "AdamState", "relative_l2_loss", "loss_and_grad",
    "adamw_step", "onecycle_lr", "train", "train_multi", "finetune", "train_podnn", "rescale_output",
    "split_validation", "write_history", "batched_loss", "voxel_values",
]
