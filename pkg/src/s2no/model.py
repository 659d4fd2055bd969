"""S2NO network and the PODNN baseline.

Parameters live in a flat ``name -> tensor`` dict so they can be shared
between geometries, serialised bit-exactly and differentiated with torch
autograd. Everything geometry-specific (basis, adjacency, coordinates) is
bundled in a :class:`GeometryContext`.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta")

from .geometry import GeometryError, Mesh, SpectralBasis, build_adjacency, mid_surface, pair_layers
from .oracle import ALPHA_ACTIVE


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    d_c: int = 128
    k: int = 128
    H: int = 8
    d_in: int = 4
    d_out: int = 3
    proj_hidden: int = 128
    a_scale: float = ALPHA_ACTIVE  # material values are divided by this before lifting

    def __post_init__(self):
        if self.d_c % self.H:
            raise ValueError(f"d_c={self.d_c} is not divisible by H={self.H}")
        for name in ("L", "d_c", "k", "H", "d_in", "d_out", "proj_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_c // self.H

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Stats:
    """Per-channel mean/std of the displacement field of one geometry."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, u: np.ndarray, points: np.ndarray) -> "Stats":
        d = np.asarray(u, dtype=np.float64) - points
        d = d.reshape(-1, 3)
        std = d.std(axis=0)
        return cls(d.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, torch.Tensor]
    stats: dict[str, Stats] = field(default_factory=dict)

    def clone(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.detach().clone() for k, v in self.tensors.items()},
                           {k: Stats(v.mean.copy(), v.std.copy()) for k, v in self.stats.items()})

    def to(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.detach().to(dtype) for k, v in self.tensors.items()}, dict(self.stats))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_parameters(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh = cfg.d_c, cfg.head_dim
    shapes = {"lift.W": (cfg.d_in, d), "lift.b": (d,)}
    for l in range(cfg.L):
        p = f"layer{l}."
        shapes.update({
            p + "R": (cfg.H, cfg.k, dh, dh),
            p + "Wg": (d, d),
            p + "Wi": (d, d), p + "bi": (d,),
            p + "Wo": (d, d), p + "bo": (d,),
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff1.W": (d, d), p + "ff1.b": (d,),
            p + "ff2.W": (d, d), p + "ff2.b": (d,),
        })
    shapes.update({"proj1.W": (d, cfg.proj_hidden), "proj1.b": (cfg.proj_hidden,),
                   "proj2.W": (cfg.proj_hidden, cfg.d_out), "proj2.b": (cfg.d_out,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> ModelParams:
    """Uniform fan-in initialisation; layer-norm gains 1, gate biases 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("ln1.g") or name.endswith("ln2.g"):
            arr = np.ones(shape)
        elif name.endswith("ln1.b") or name.endswith("ln2.b") or leaf in ("bi", "bo"):
            arr = np.zeros(shape)
        elif leaf == "R":
            bound = 1.0 / np.sqrt(shape[-2])
            arr = rng.uniform(-bound, bound, shape)
        elif leaf.startswith("W") or leaf == "W":
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        else:  # biases of linear maps share the fan-in of their weight
            fan_in = param_shapes(cfg)[name[:-1] + "W"][0]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, shape)
        tensors[name] = torch.tensor(arr, dtype=dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# geometry context


def _sparse_tensor(A: sp.spmatrix, dtype) -> torch.Tensor:
    A = sp.csr_matrix(A)
    A.sort_indices()
    return torch.sparse_csr_tensor(torch.from_numpy(A.indptr.astype(np.int64)),
                                   torch.from_numpy(A.indices.astype(np.int64)),
                                   torch.from_numpy(A.data).to(dtype), size=A.shape,
                                   check_invariants=False)


@dataclass
class GeometryContext:
    """Tensors a forward pass needs for one discretisation."""
    geometry_id: str
    points: torch.Tensor  # (n, 3) undeformed
    coords: torch.Tensor  # (n, 3) normalised
    phi: torch.Tensor  # (n, k)
    encoder: torch.Tensor  # (k, n)
    adj: torch.Tensor  # sparse (n, n)
    stats_key: str
    pairs: tuple[np.ndarray, np.ndarray] | None = None
    # (point -> mid row index, phi_mid, encoder_mid) when paired layers share basis rows
    fold: tuple | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @classmethod
    def build(cls, mesh: Mesh, basis: SpectralBasis, adj=None, dtype=torch.float32,
              stats_key: str | None = None, center=None, scale=None) -> "GeometryContext":
        if basis.n != mesh.n:
            raise GeometryError(f"basis has {basis.n} rows but mesh has {mesh.n} points")
        if adj is None:
            adj = build_adjacency(mesh)
        if adj.shape != (mesh.n, mesh.n):
            raise GeometryError("adjacency does not match mesh")
        pts = mesh.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        # each axis is mapped to [-1, 1] separately so the thin direction
        # (which separates the two layers) is as visible as the in-plane ones
        center = 0.5 * (lo + hi) if center is None else np.asarray(center)
        scale = np.maximum(0.5 * (hi - lo), 1e-12) if scale is None else np.asarray(scale, dtype=np.float64)
        try:
            pairs = pair_layers(mesh)
        except GeometryError:
            pairs = None
        fold = _fold(pairs, basis.eigenvectors, basis.encoder, dtype) if pairs is not None else None
        return cls(mesh.geometry_id, torch.tensor(pts, dtype=dtype),
                   torch.tensor((pts - center) / scale, dtype=dtype),
                   torch.tensor(basis.eigenvectors, dtype=dtype),
                   torch.tensor(basis.encoder, dtype=dtype),
                   _sparse_tensor(adj, dtype), stats_key or mesh.geometry_id, pairs, fold)

    def to(self, dtype) -> "GeometryContext":
        fold = None if self.fold is None else (self.fold[0], self.fold[1].to(dtype), self.fold[2].to(dtype))
        return GeometryContext(self.geometry_id, self.points.to(dtype), self.coords.to(dtype),
                               self.phi.to(dtype), self.encoder.to(dtype), self.adj.to(dtype),
                               self.stats_key, self.pairs, fold)

    def subsample(self, idx, adj_sub, encoder=None) -> "GeometryContext":
        """Context restricted to the node subset ``idx`` (basis rows downsampled)."""
        idx_t = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        phi = self.phi[idx_t]
        if encoder is None:
            encoder = torch.linalg.pinv(phi)
        return GeometryContext(self.geometry_id, self.points[idx_t], self.coords[idx_t], phi,
                               torch.as_tensor(encoder, dtype=phi.dtype), _sparse_tensor(adj_sub, phi.dtype),
                               self.stats_key, None)


def _fold(pairs, phi: np.ndarray, enc: np.ndarray, dtype):
    """Mid-surface form of a basis whose paired rows (and encoder columns) coincide.

    Encoding then sums each pair before a half-size product, and decoding
    evaluates once per pair; both are exact rewrites of the full products.
    """
    bot, top = pairs
    if not (np.array_equal(phi[bot], phi[top]) and np.array_equal(enc[:, bot], enc[:, top])):
        return None
    index = np.empty(phi.shape[0], dtype=np.int64)
    index[bot] = np.arange(len(bot))
    index[top] = np.arange(len(top))
    return (torch.from_numpy(index), torch.tensor(phi[bot], dtype=dtype), torch.tensor(enc[:, bot], dtype=dtype))


# ---------------------------------------------------------------------------
# layers


def spectral_conv(v: torch.Tensor, phi: torch.Tensor, encoder: torch.Tensor, R: torch.Tensor,
                  fold=None) -> torch.Tensor:
    """Encode to the eigenbasis, mix channels per mode and head, decode.

    ``v`` is a node-major field (n, d) or (n, B, d); ``R`` is
    (H, k_cfg, dh, dh) and the modes used are ``min(k_cfg, basis k)``.
    ``fold`` (see :class:`GeometryContext`) selects the equivalent
    mid-surface evaluation.
    """
    n = v.shape[0]
    if n != phi.shape[0]:
        raise GeometryError(f"field has {n} rows but basis has {phi.shape[0]}")
    H, kc, dh, _ = R.shape
    m = min(kc, phi.shape[1])
    rest = v.shape[1:]
    flat = v.reshape(n, -1)
    if fold is not None:
        index, phi_mid, enc_mid = fold
        summed = flat.new_zeros(phi_mid.shape[0], flat.shape[1]).index_add_(0, index, flat)
        c = enc_mid[:m] @ summed
    else:
        c = encoder[:m] @ flat  # (m, B*d)
    c = c.reshape(m, -1, H, dh)
    c = torch.einsum("mbhi,hmij->mbhj", c, R[:, :m]).reshape(m, -1)
    if fold is not None:
        return (phi_mid[:, :m] @ c).index_select(0, index).reshape(n, *rest)
    return (phi[:, :m] @ c).reshape(n, *rest)


def graph_matmul(adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply sparse (n, n) ``adj`` to a node-major field (n, ...)."""
    n = x.shape[0]
    if adj.shape[0] != n:
        raise GeometryError(f"adjacency is {adj.shape[0]}x{adj.shape[1]}, field has {n} rows")
    return (adj @ x.reshape(n, -1)).reshape(x.shape)


def spatial_conv(v, adj, Wg, Wi, bi, Wo, bo) -> torch.Tensor:
    """Gated graph convolution: sigma(v Wo + bo) * (A (sigma(v Wi + bi) * v) Wg)."""
    gi = torch.sigmoid(torch.addmm(bi, v.reshape(-1, v.shape[-1]), Wi)).reshape(v.shape)
    go = torch.sigmoid(torch.addmm(bo, v.reshape(-1, v.shape[-1]), Wo)).reshape(v.shape)
    return go * (graph_matmul(adj, gi * v) @ Wg)


def _check(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise ModelError(f"non-finite values after {where}")
    return x


def _linear(x, W, b):
    return torch.addmm(b, x.reshape(-1, x.shape[-1]), W).reshape(*x.shape[:-1], W.shape[1])


def features(a: torch.Tensor, ctx: GeometryContext, cfg: ModelConfig) -> torch.Tensor:
    """Node-major input features (n, B, d_in): scaled material value and coordinates."""
    B, n = a.shape
    if n != ctx.n:
        raise GeometryError(f"material field has {n} points, geometry has {ctx.n}")
    return torch.cat([(a.T / cfg.a_scale).unsqueeze(-1), ctx.coords.unsqueeze(1).expand(n, B, 3)], dim=-1)


def forward_normalised(params: ModelParams, ctx: GeometryContext, a: torch.Tensor, check: bool = True):
    """Network output before de-normalisation, shape (B, n, 3)."""
    cfg, T = params.cfg, params.tensors
    chk = _check if check else (lambda x, w: x)
    v = chk(_linear(features(a, ctx, cfg), T["lift.W"], T["lift.b"]), "lifting")
    d = cfg.d_c
    for l in range(cfg.L):
        p = f"layer{l}."
        h = F.layer_norm(v, (d,), T[p + "ln1.g"], T[p + "ln1.b"])
        s = spectral_conv(h, ctx.phi, ctx.encoder, T[p + "R"], ctx.fold)
        g = spatial_conv(h, ctx.adj, T[p + "Wg"], T[p + "Wi"], T[p + "bi"], T[p + "Wo"], T[p + "bo"])
        v = v + s + g
        h = F.layer_norm(v, (d,), T[p + "ln2.g"], T[p + "ln2.b"])
        h = _linear(F.gelu(_linear(h, T[p + "ff1.W"], T[p + "ff1.b"])), T[p + "ff2.W"], T[p + "ff2.b"])
        v = chk(v + h, f"layer {l}")
    y = _linear(F.gelu(_linear(v, T["proj1.W"], T["proj1.b"])), T["proj2.W"], T["proj2.b"])
    return chk(y, "projection").transpose(0, 1)


def denormalise(params: ModelParams, ctx: GeometryContext, y: torch.Tensor) -> torch.Tensor:
    st = params.stats.get(ctx.stats_key)
    if st is None:
        raise ModelError(f"no normalisation statistics for geometry {ctx.stats_key!r}")
    mean = torch.as_tensor(st.mean, dtype=y.dtype)
    std = torch.as_tensor(st.std, dtype=y.dtype)
    return ctx.points + y * std + mean


def forward(params: ModelParams, ctx: GeometryContext, a, check: bool = True) -> torch.Tensor:
    """Predicted actuated coordinates (B, n, 3) for material fields ``a`` (B, n).

    A single (n,) field is accepted and returns (n, 3).
    """
    a = torch.as_tensor(a, dtype=params.dtype)
    single = a.dim() == 1
    if single:
        a = a.unsqueeze(0)
    u = denormalise(params, ctx, forward_normalised(params, ctx, a, check))
    return u[0] if single else u


@torch.no_grad()
def predict(params: ModelParams, ctx: GeometryContext, a: np.ndarray, batch_size: int = 64) -> np.ndarray:
    a = np.asarray(a)
    out = np.empty((a.shape[0], ctx.n, 3), dtype=np.float64)
    for i in range(0, a.shape[0], batch_size):
        out[i:i + batch_size] = forward(params, ctx, torch.as_tensor(a[i:i + batch_size])).double().numpy()
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"S2NOCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {0: ("<f4", torch.float32), 1: ("<f8", torch.float64)}


def _blob(fh, obj):
    raw = json.dumps(obj, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def save_checkpoint(path, params: ModelParams, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        _blob(fh, params.cfg.to_dict())
        _blob(fh, {k: v.to_dict() for k, v in sorted(params.stats.items())})
        fh.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            t = params.tensors[name].detach().contiguous()
            raw_name = name.encode()
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[t.dtype], t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.numpy().astype(_TAG_DTYPES[_DTYPE_TAGS[t.dtype]][0]).tobytes())
        _blob(fh, provenance or {})


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<H", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10

    def blob():
        nonlocal off
        (ln,) = struct.unpack_from("<I", buf, off)
        obj = json.loads(buf[off + 4:off + 4 + ln].decode())
        off += 4 + ln
        return obj

    cfg = ModelConfig.from_dict(blob())
    stats = {k: Stats.from_dict(v) for k, v in blob().items()}
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        tag, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        np_dtype, t_dtype = _TAG_DTYPES[tag]
        size = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(buf, np_dtype, int(np.prod(dims)), off).reshape(dims).copy()
        off += size
        tensors[name] = torch.from_numpy(arr).to(t_dtype)
    prov = blob() if off < len(buf) else {}
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors or tuple(tensors[name].shape) != shape:
            raise ValueError(f"{path}: tensor {name!r} missing or misshaped")
    return ModelParams(cfg, tensors, stats), prov


# ---------------------------------------------------------------------------
# PODNN baseline


@dataclass
class PODBasis:
    mean: np.ndarray  # (3n,)
    modes: np.ndarray  # (r, 3n), orthonormal rows
    singular_values: np.ndarray  # all singular values of the centred data
    coefficients: np.ndarray  # (N, r) projections of the fitting samples

    @property
    def r(self) -> int:
        return self.modes.shape[0]

    def reconstruct(self, coeff: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(coeff) @ self.modes


def pod_fit(u: np.ndarray, modes: int = 64) -> PODBasis:
    """POD of the mean-centred flattened output fields ``u`` (N, n, 3)."""
    u = np.asarray(u, dtype=np.float64)
    N = u.shape[0]
    if modes > N:
        raise ValueError(f"cannot keep {modes} POD modes from {N} samples")
    X = u.reshape(N, -1)
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = Vt[:modes]
    return PODBasis(mean, basis, S, (X - mean) @ basis.T)


@dataclass
class PODNN:
    pod: PODBasis
    widths: tuple[int, ...]
    tensors: dict[str, torch.Tensor]
    coeff_scale: np.ndarray  # per-coefficient std used to normalise MLP targets
    a_scale: float = ALPHA_ACTIVE

    @classmethod
    def init(cls, pod: PODBasis, K: int, seed: int, hidden=(512, 512, 512, 512), dtype=torch.float32) -> "PODNN":
        widths = (K, *hidden, pod.r)
        rng = np.random.default_rng(seed)
        tensors = {}
        for i in range(len(widths) - 1):
            bound = 1.0 / np.sqrt(widths[i])
            tensors[f"mlp{i}.W"] = torch.tensor(rng.uniform(-bound, bound, (widths[i], widths[i + 1])), dtype=dtype)
            tensors[f"mlp{i}.b"] = torch.tensor(rng.uniform(-bound, bound, (widths[i + 1],)), dtype=dtype)
        scale = pod.coefficients.std(axis=0)
        return cls(pod, widths, tensors, np.where(scale > 1e-12, scale, 1.0))

    @property
    def dtype(self):
        return self.tensors["mlp0.W"].dtype

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            x = x @ self.tensors[f"mlp{i}.W"] + self.tensors[f"mlp{i}.b"]
            if i < n_layers - 1:
                x = F.gelu(x)
        return x

    def forward(self, voxel_a) -> torch.Tensor:
        """Predicted coordinates (B, n, 3) from per-voxel material values (B, K)."""
        x = torch.as_tensor(voxel_a, dtype=self.dtype)
        if x.shape[-1] != self.widths[0]:
            raise GeometryError(f"PODNN expects {self.widths[0]} voxel inputs, got {x.shape[-1]}")
        coeff = self.mlp(x / self.a_scale) * torch.as_tensor(self.coeff_scale, dtype=self.dtype)
        u = torch.as_tensor(self.pod.mean, dtype=self.dtype) + coeff @ torch.as_tensor(self.pod.modes, dtype=self.dtype)
        return u.reshape(x.shape[0], -1, 3)

    @torch.no_grad()
    def predict(self, voxel_a: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(voxel_a[i:i + batch_size]).double().numpy() for i in range(0, len(voxel_a), batch_size)]
        return np.concatenate(out)


def mid_surface_tensor(ctx: GeometryContext, u: torch.Tensor) -> torch.Tensor:
    """Mid-surface coordinates (..., m, 3) of a predicted field."""
    if ctx.pairs is None:
        raise GeometryError("geometry has no paired layers")
    bot, top = ctx.pairs
    return 0.5 * (u[..., bot, :] + u[..., top, :])


__all__ = [
    "ModelConfig", "ModelParams", "Stats", "GeometryContext", "PODBasis", "PODNN", "ModelError",
    "init_params", "param_shapes", "spectral_conv", "spatial_conv", "graph_matmul", "forward",
    "forward_normalised", "predict", "save_checkpoint", "load_checkpoint", "pod_fit", "mid_surface",
    "mid_surface_tensor",
]
