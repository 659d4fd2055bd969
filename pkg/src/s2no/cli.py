"""Command-line entry point: ``s2no <command> [options]``.

Every command reads an optional YAML/JSON config (``--config``) whose
sections mirror the library config objects; flags override file values.
Artifacts embed the seed, a hash of the effective config and the tool
version, and reruns with ``--threads 1`` reproduce them byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .design import (DOME_PARAMS, TARGET_NAMES, DesignError, DesignProblem, GAConfig, curvature_target,
                     design_report, dome_target, ga_run, load_point_cloud, model_predictor, multires_optimize,
                     oracle_predictor, replay_omega, replay_target, shape_csv, write_report)
from .evaluation import LeakageError, MetricReport, check_leakage
from .geometry import (MeshSpec, compute_eigenbasis, downsample_basis, generate_mesh, load_basis, load_mesh,
                       point_mass, save_basis, save_mesh, shared_point_indices)
from .model import GeometryContext, ModelConfig, load_checkpoint, predict, save_checkpoint
from .oracle import Dataset, OracleConfig, generate_dataset, load_dataset, save_dataset, solve, MaterialDistribution
from .training import TrainConfig, finetune, train, train_multi, write_history

GEOMETRY_FILE = "geometry.json"
BASIS_FILE = "basis.eig"
DATASET_FILE = "dataset.s2d"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    cfg = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must contain a mapping")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def provenance(cfg: dict, seed: int, command: str) -> dict:
    return {"seed": int(seed), "config_hash": config_hash(cfg), "tool_version": __version__, "command": command}


def section(cfg: dict, name: str) -> dict:
    val = cfg.get(name) or {}
    if not isinstance(val, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    return dict(val)


def _tuple_fields(d: dict, names) -> dict:
    for n in names:
        if n in d and isinstance(d[n], list):
            d[n] = tuple(d[n])
    return d


def mesh_spec(cfg: dict) -> MeshSpec:
    return MeshSpec(**_tuple_fields(section(cfg, "geometry"), ("dims", "resolution", "voxels")))


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**section(cfg, "model"))


def train_config(cfg: dict, seed: int, overrides: dict | None = None) -> TrainConfig:
    d = section(cfg, "train")
    d.setdefault("seed", seed)
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# artifact bundles


class Bundle:
    """Geometry, basis and dataset files living in one directory."""

    def __init__(self, directory, geometry=None, basis=None, dataset=None):
        d = Path(directory) if directory else None
        self.geometry_path = Path(geometry) if geometry else d / GEOMETRY_FILE
        self.basis_path = Path(basis) if basis else d / BASIS_FILE
        self.dataset_path = Path(dataset) if dataset else (d / DATASET_FILE if d else None)
        for p in (self.geometry_path, self.basis_path):
            if not p.exists():
                raise UsageError(f"missing input file {p}")
        self.mesh = load_mesh(self.geometry_path)
        self.basis = load_basis(self.basis_path)
        if self.basis.n != self.mesh.n:
            raise UsageError(f"basis {self.basis_path} has {self.basis.n} rows, mesh has {self.mesh.n}")
        bid = self.basis.meta.get("geometry_id")
        if bid and bid != self.mesh.geometry_id:
            raise UsageError(f"geometry_id mismatch: basis {bid!r} vs geometry {self.mesh.geometry_id!r}")
        self._dataset = None

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            if self.dataset_path is None or not self.dataset_path.exists():
                raise UsageError(f"missing dataset file {self.dataset_path}")
            ds = load_dataset(self.dataset_path)
            if ds.geometry_id != self.mesh.geometry_id:
                raise UsageError(f"geometry_id mismatch: dataset {ds.geometry_id!r} vs geometry "
                                 f"{self.mesh.geometry_id!r}")
            if ds.n != self.mesh.n or ds.n_voxels != self.mesh.n_voxels:
                raise UsageError("dataset dimensions do not match the geometry")
            self._dataset = ds
        return self._dataset

    def context(self, stats_key=None) -> GeometryContext:
        return GeometryContext.build(self.mesh, self.basis, stats_key=stats_key)


def _bundle(args, directory=None) -> Bundle:
    return Bundle(directory if directory is not None else args.data, getattr(args, "geometry", None),
                  getattr(args, "basis", None), getattr(args, "dataset", None))


def _train_record(ds: Dataset) -> dict:
    return {"geometry_id": ds.geometry_id, "seed": int(ds.seed), "ids": [int(i) for i in ds.sample_ids]}


def _trained_keys(prov: dict) -> set:
    keys = set()
    for rec in prov.get("train_samples", []):
        keys |= {(rec["geometry_id"], rec["seed"], i) for i in rec["ids"]}
    return keys


def _report(params, ctx, ds: Dataset, model_id: str) -> MetricReport:
    pred = predict(params, ctx, ds.a)
    return MetricReport.compute(pred, ds.u.astype(np.float64), ds.sample_ids, model_id, ds.geometry_id)


def _print_metrics(label: str, rep: MetricReport) -> None:
    print(f"{label}: L2 {rep.L2:.4f} %  MAE {rep.MAE:.5f} mm  M-Max {rep.MMax:.5f} mm  (N={rep.count})")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = mesh_spec(cfg)
    mesh = generate_mesh(spec)
    bcfg = section(cfg, "basis")
    k = int(bcfg.get("k", 64))
    refine = int(bcfg.get("refine", 1))
    if refine > 1:
        # eigenbasis computed on a refined copy and restricted to this mesh, so
        # models on both resolutions see the same modes
        rx, ry = spec.resolution
        fine_spec = MeshSpec(spec.kind, spec.dims, ((rx - 1) * refine + 1, (ry - 1) * refine + 1),
                             tuple(v * refine for v in spec.voxels), spec.clamp, spec.thickness)
        fine = generate_mesh(fine_spec)
        basis = downsample_basis(compute_eigenbasis(fine, k), shared_point_indices(mesh, fine),
                                 mass=point_mass(mesh), geometry_id=mesh.geometry_id)
    else:
        basis = compute_eigenbasis(mesh, k)
    ocfg = OracleConfig.from_dict(section(cfg, "oracle"))
    dcfg = section(cfg, "data")
    count = int(args.count if args.count is not None else dcfg.get("count", 200))
    n_test = int(dcfg.get("test", 0) if args.test is None else args.test)
    prov = provenance(cfg, args.seed, "gen")
    ds = generate_dataset(mesh, count, args.seed, ocfg, start=int(dcfg.get("start", 0)),
                          threads=args.threads).split(n_test)
    save_mesh(out / GEOMETRY_FILE, mesh, prov)
    save_basis(out / BASIS_FILE, basis, dict(prov, refine=refine))
    save_dataset(out / DATASET_FILE, ds, prov)
    print(f"geometry {mesh.geometry_id}: n={mesh.n} K={mesh.n_voxels} k={basis.k} N={len(ds)} "
          f"(test {n_test})")
    return 0


def _save_training(out: Path, params, history, cfg, args, command, train_sets, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, args.seed, command)
    prov["train_samples"] = [_train_record(ds) for ds in train_sets]
    prov.update(extra or {})
    ckpt = out / CHECKPOINT_FILE
    save_checkpoint(ckpt, params, prov)
    write_history(out / "history.csv", history)
    return ckpt


def cmd_train(args, cfg: dict) -> int:
    b = _bundle(args)
    ds = b.dataset
    tcfg = train_config(cfg, args.seed, {"epochs": args.epochs})
    res = train(ds.train(), b.context(), tcfg, model_config(cfg))
    _save_training(Path(args.out), res.params, res.history, cfg, args, "train", [ds.train()],
                   {"train_config": tcfg.to_dict()})
    test = ds.test()
    if len(test):
        _print_metrics("test", _report(res.params, b.context(), test, "s2no"))
    print(f"best epoch {res.best_epoch}; checkpoint written to {Path(args.out) / CHECKPOINT_FILE}")
    return 0


def _file_record(path) -> dict:
    # name and content hash rather than the full path, so reruns in another
    # directory produce identical checkpoints
    p = Path(path)
    return {"name": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}


def cmd_finetune(args, cfg: dict) -> int:
    if not args.from_ckpt:
        raise UsageError("finetune requires --from CHECKPOINT")
    params, prov = load_checkpoint(args.from_ckpt)
    b = _bundle(args)
    ds = b.dataset
    keys = sorted(params.stats)
    src = args.stats_key or (b.mesh.geometry_id if b.mesh.geometry_id in params.stats else keys[0])
    ctx = b.context(stats_key=src)
    test = ds.test()
    if len(test):
        _print_metrics("zero-shot test", _report(params, ctx, test, "zero-shot"))
    tcfg = train_config(cfg, args.seed, {"epochs": args.epochs})
    res = finetune(params, ds.train(), ctx, tcfg, lr_factor=float(section(cfg, "finetune").get("lr_factor", 0.1)))
    trained = prov.get("train_samples", []) + [_train_record(ds.train())]
    out = Path(args.out)
    _save_training(out, res.params, res.history, cfg, args, "finetune", [], {"train_samples": trained,
                                                                           "from": _file_record(args.from_ckpt)})
    if len(test):
        _print_metrics("fine-tuned test", _report(res.params, b.context(), test, "finetuned"))
    return 0


def cmd_train_multi(args, cfg: dict) -> int:
    dirs = args.data_dirs or section(cfg, "paths").get("data_dirs") or []
    if not dirs:
        raise UsageError("train-multi needs at least one --data DIR")
    bundles = [Bundle(d) for d in dirs]
    if len(bundles) == 1:
        print("warning: a single geometry given; train-multi reduces to plain training", file=sys.stderr)
    ids = [b.mesh.geometry_id for b in bundles]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate geometry ids {ids}")
    tcfg = train_config(cfg, args.seed, {"epochs": args.epochs})
    sets = [b.dataset.train() for b in bundles]
    res = train_multi(sets, [b.context() for b in bundles], tcfg, model_config(cfg))
    _save_training(Path(args.out), res.params, res.history, cfg, args, "train-multi", sets,
                   {"train_config": tcfg.to_dict()})
    for b in bundles:
        test = b.dataset.test()
        if len(test):
            _print_metrics(f"test [{b.mesh.geometry_id}]", _report(res.params, b.context(), test, "s2no"))
    return 0


def _parse_thresholds(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"threshold {item!r} must look like metric=value")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def cmd_eval(args, cfg: dict) -> int:
    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    params, prov = load_checkpoint(args.checkpoint)
    b = _bundle(args)
    ds = b.dataset
    test = ds.test() if ds.test_mask.any() else ds
    shared = _trained_keys(prov) & test.sample_keys()
    if shared:
        raise LeakageError(f"{len(shared)} evaluation samples were used for training")
    key = args.stats_key or (b.mesh.geometry_id if b.mesh.geometry_id in params.stats else sorted(params.stats)[0])
    rep = _report(params, b.context(stats_key=key), test, Path(args.checkpoint).name)
    rep.write(args.out, "report")
    _print_metrics("test", rep)
    bad = rep.violations(_parse_thresholds(args.threshold or section(cfg, "eval").get("thresholds")))
    if bad:
        for v in bad:
            print(f"threshold violated: {v}", file=sys.stderr)
        return 1
    return 0


def _load_omega(path, K: int) -> np.ndarray:
    p = Path(path)
    omega = np.load(p) if p.suffix == ".npy" else np.asarray(json.loads(p.read_text()))
    if isinstance(omega, np.ndarray) and omega.dtype == object:
        raise UsageError(f"{path}: not a design vector")
    omega = np.asarray(omega).astype(np.int64).ravel()
    if omega.size != K:
        raise UsageError(f"{path}: design has {omega.size} genes, geometry has {K}")
    return omega.astype(np.uint8)


def cmd_design(args, cfg: dict) -> int:
    b = _bundle(args)
    mesh = b.mesh
    tsec = section(cfg, "target")
    name = args.target or tsec.get("name")
    if name not in TARGET_NAMES:
        raise UsageError(f"unknown target {name!r}; available targets: {', '.join(TARGET_NAMES)}")
    ocfg = OracleConfig.from_dict(section(cfg, "oracle"))
    use_oracle = args.model == "oracle"
    if use_oracle:
        predictor = oracle_predictor(mesh, ocfg)
    else:
        ckpt = args.checkpoint or section(cfg, "paths").get("checkpoint")
        if not ckpt:
            raise UsageError("design needs --checkpoint (or --model oracle)")
        params, _ = load_checkpoint(ckpt)
        key = b.mesh.geometry_id if b.mesh.geometry_id in params.stats else sorted(params.stats)[0]
        predictor = model_predictor(params, b.context(stats_key=key), mesh, ocfg.alphas)
    kind = args.kind or tsec.get("kind")
    extra = {"target": name}
    if name in DOME_PARAMS:
        vals = args.target_params or tsec.get("params") or DOME_PARAMS[name]
        if len(vals) != 6:
            raise UsageError("dome targets take six parameters (A_p, beta, sigma_p, A_d, sigma_d, alpha)")
        target = dome_target(mesh, vals, float(tsec.get("radius", 28.0)))
        kind = kind or "surface"
        extra["target_params"] = [float(v) for v in vals]
    elif name == "curvature":
        kappa = float((args.target_params or [tsec.get("kappa", 0.05)])[0])
        target = curvature_target(mesh, kappa)
        kind = kind or "surface"
        extra["kappa"] = kappa
    elif name == "replay":
        kind = kind or "full"
        if args.omega:
            omega_star = _load_omega(args.omega, mesh.n_voxels)
        else:
            rs = int(args.replay_seed if args.replay_seed is not None else tsec.get("seed", 0))
            omega_star = replay_omega(mesh.n_voxels, rs, ocfg.q)
            extra["replay_seed"] = rs
        source = args.replay_source or tsec.get("source", "model")
        src_pred = oracle_predictor(mesh, ocfg) if source == "oracle" else predictor
        target = replay_target(src_pred, omega_star, mesh, kind)
        extra.update(replay_omega=[int(x) for x in omega_star], replay_source=source)
    else:
        path = args.target_file or tsec.get("file")
        if not path:
            raise UsageError("target 'file' needs --target-file")
        target = load_point_cloud(path)
        kind = kind or ("full" if len(target) == mesh.n else "surface")
    try:
        problem = DesignProblem.build(predictor, mesh, target, kind, ocfg.q)
    except DesignError as exc:
        raise UsageError(str(exc)) from exc
    gsec = section(cfg, "ga")
    gsec.setdefault("seed", args.seed)
    for flag in ("population", "generations"):
        if getattr(args, flag) is not None:
            gsec[flag] = getattr(args, flag)
    gcfg = GAConfig.from_dict(gsec)
    factors = args.multires or section(cfg, "design").get("multires")
    if factors:
        result = multires_optimize(problem, mesh, [int(f) for f in factors], gcfg)
    else:
        result = ga_run(problem, gcfg)
    best_u = predictor(result.best[None])[0]
    extra["ga"] = gcfg.to_dict()
    extra["model"] = "oracle" if use_oracle else "s2no"
    if args.verify:
        shape = solve(mesh, MaterialDistribution.from_omega(mesh, result.best, ocfg.alphas), ocfg).u
        extra["verify_oracle_error_mm"] = float(problem.distance(shape[None])[0])
        print(f"oracle-vs-target error {extra['verify_oracle_error_mm']:.6f} mm")
    report = design_report(result, problem, extra)
    wall = report.pop("wall_time_s")
    out = Path(args.out)
    write_report(out / "design.json", dict(report, provenance=provenance(cfg, args.seed, "design")))
    write_report(out / "design.timing.json", {"wall_time_s": wall})
    (out / "design_shape.csv").write_text(shape_csv(best_u))
    print(f"best objective {result.fitness:.6f} mm after {len(report['history']) - 1} generations "
          f"({wall:.1f} s)")
    return 0


def cmd_predict(args, cfg: dict) -> int:
    if not args.checkpoint:
        raise UsageError("predict requires --checkpoint")
    params, _ = load_checkpoint(args.checkpoint)
    b = _bundle(args)
    mesh = b.mesh
    ocfg = OracleConfig.from_dict(section(cfg, "oracle"))
    if args.omega:
        omega = _load_omega(args.omega, mesh.n_voxels)
    else:
        omega = replay_omega(mesh.n_voxels, args.seed if args.replay_seed is None else args.replay_seed, ocfg.q)
    key = mesh.geometry_id if mesh.geometry_id in params.stats else sorted(params.stats)[0]
    u = model_predictor(params, b.context(stats_key=key), mesh, ocfg.alphas)(omega[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prediction.csv").write_text(shape_csv(u))
    print(f"wrote {out / 'prediction.csv'} ({mesh.n} points)")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "finetune": cmd_finetune, "train-multi": cmd_train_multi,
            "eval": cmd_eval, "design": cmd_design, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 guarantees bit-determinism")
    common.add_argument("--out", default="out", help="output directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory holding geometry/basis/dataset files")
    data.add_argument("--geometry", help="geometry file (overrides --data)")
    data.add_argument("--basis", help="basis cache file (overrides --data)")
    data.add_argument("--dataset", help="dataset file (overrides --data)")

    p = argparse.ArgumentParser(prog="s2no", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"s2no {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate geometry, eigenbasis and dataset")
    g.add_argument("--count", type=int, help="number of samples")
    g.add_argument("--test", type=int, help="number of trailing samples tagged as test")

    for name, helptext in (("train", "train on one geometry"), ("finetune", "fine-tune a checkpoint")):
        t = sub.add_parser(name, parents=[common, data], help=helptext)
        t.add_argument("--epochs", type=int)
        if name == "finetune":
            t.add_argument("--from", dest="from_ckpt", help="low-resolution checkpoint")
            t.add_argument("--stats-key", help="statistics entry used for the zero-shot start")

    m = sub.add_parser("train-multi", parents=[common], help="train one model on several geometries")
    m.add_argument("--data", dest="data_dirs", action="append", help="data directory (repeatable)")
    m.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint on a test split")
    e.add_argument("--checkpoint")
    e.add_argument("--threshold", action="append", help="metric=value, e.g. l2=5.0 (repeatable)")
    e.add_argument("--stats-key")

    d = sub.add_parser("design", parents=[common, data], help="GA inverse design")
    d.add_argument("--checkpoint")
    d.add_argument("--model", choices=("s2no", "oracle"), default="s2no")
    d.add_argument("--target", help=f"one of {', '.join(TARGET_NAMES)}")
    d.add_argument("--target-params", type=float, nargs="+")
    d.add_argument("--target-file")
    d.add_argument("--kind", choices=("full", "surface"))
    d.add_argument("--omega", help="design vector file for replay targets (.json or .npy)")
    d.add_argument("--replay-seed", type=int)
    d.add_argument("--replay-source", choices=("model", "oracle"))
    d.add_argument("--population", type=int)
    d.add_argument("--generations", type=int)
    d.add_argument("--multires", type=int, nargs="+", help="coarsening ladder, e.g. 2 1")
    d.add_argument("--verify", action="store_true", help="re-evaluate the best design with the oracle")

    q = sub.add_parser("predict", parents=[common, data], help="predict the shape of one design")
    q.add_argument("--checkpoint")
    q.add_argument("--omega")
    q.add_argument("--replay-seed", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        if "out" in cfg and args.out == "out":
            args.out = cfg["out"]
        paths = section(cfg, "paths")
        for attr in ("data", "geometry", "basis", "dataset", "checkpoint"):
            if hasattr(args, attr) and getattr(args, attr) is None and attr in paths:
                setattr(args, attr, paths[attr])
        warnings.simplefilter("ignore", UserWarning)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (LeakageError, DesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with a nonzero exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
