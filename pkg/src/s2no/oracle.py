"""Linear thermo-elastic ground truth for bilayer sheets.

Small-strain isotropic elasticity on the hexahedral mesh with a thermal
eigenstrain ``alpha * dT * I`` per material voxel. Hexahedra are trilinear
with Wilson-Taylor incompatible bending modes (condensed per element), so a
single element through the thickness bends without shear locking. The
eigenstrain load is integrated separately over the bottom and top half of
each cell, which makes the material step at mid-thickness exact.

The stiffness does not depend on the material distribution, so it is
assembled and factorised once per mesh; every sample is then one
preconditioned CG solve.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GeometryError, Mesh

ALPHA_ACTIVE = 0.001
ALPHA_PASSIVE = 0.0


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    delta_t: float = 60.0
    alphas: tuple[float, ...] = (ALPHA_PASSIVE, ALPHA_ACTIVE)  # CTE per material type
    youngs_modulus: float = 1.0
    poisson: float = 0.3
    cg_tol: float = 1e-9
    cg_max_iter: int = 500
    preconditioner: str = "lu"  # "lu" or "jacobi"

    def __post_init__(self):
        if not self.delta_t > 0:
            raise ValueError(f"delta_t must be positive, got {self.delta_t}")
        if not 0.0 <= self.poisson < 0.5:
            raise ValueError(f"poisson ratio must lie in [0, 0.5), got {self.poisson}")
        if self.youngs_modulus <= 0:
            raise ValueError("youngs_modulus must be positive")
        if len(self.alphas) < 2:
            raise ValueError("need at least two material types")

    @property
    def q(self) -> int:
        return len(self.alphas)

    def to_dict(self) -> dict:
        return {"delta_t": self.delta_t, "alphas": list(self.alphas),
                "youngs_modulus": self.youngs_modulus, "poisson": self.poisson,
                "cg_tol": self.cg_tol, "cg_max_iter": self.cg_max_iter,
                "preconditioner": self.preconditioner}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        d = dict(d)
        if "alphas" in d:
            d["alphas"] = tuple(float(x) for x in d["alphas"])
        return cls(**d)


@dataclass(frozen=True)
class MaterialDistribution:
    omega: np.ndarray  # (K,) material type per voxel
    a: np.ndarray  # (n,) CTE per point
    q: int = 2

    @classmethod
    def from_omega(cls, mesh: Mesh, omega, alphas=(ALPHA_PASSIVE, ALPHA_ACTIVE)) -> "MaterialDistribution":
        omega = np.asarray(omega)
        if omega.shape != (mesh.n_voxels,):
            raise GeometryError(f"omega must have {mesh.n_voxels} entries, got {omega.shape}")
        q = len(alphas)
        if omega.min() < 0 or omega.max() >= q:
            raise ValueError(f"omega entries must lie in [0, {q})")
        omega = omega.astype(np.int64)
        a = np.asarray(alphas, dtype=np.float64)[omega][mesh.voxel_map]
        return cls(omega, a, q)


@dataclass
class DeformationField:
    u: np.ndarray  # (n, 3) actuated coordinates
    meta: dict = field(default_factory=dict)

    @property
    def displacement(self) -> np.ndarray:
        return self.u - self.meta["reference"] if "reference" in self.meta else None


# ---------------------------------------------------------------------------
# element matrices

_XI = np.array([-1, 1, 1, -1, -1, 1, 1, -1], dtype=np.float64)
_ETA = np.array([-1, -1, 1, 1, -1, -1, 1, 1], dtype=np.float64)
_ZETA = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float64)
_G = 1.0 / np.sqrt(3.0)


def isotropic_elasticity(E: float, nu: float) -> np.ndarray:
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[np.arange(3, 6), np.arange(3, 6)] = mu
    return D


def _shape_grads(xi, eta, zeta) -> np.ndarray:
    """dN_a/d(xi, eta, zeta) at one natural point, (8, 3)."""
    return 0.125 * np.column_stack([
        _XI * (1 + _ETA * eta) * (1 + _ZETA * zeta),
        _ETA * (1 + _XI * xi) * (1 + _ZETA * zeta),
        _ZETA * (1 + _XI * xi) * (1 + _ETA * eta),
    ])


def _strain_matrix(grads: np.ndarray) -> np.ndarray:
    """Voigt strain-displacement matrix for (..., m, 3) gradients -> (..., 6, 3m)."""
    *lead, m, _ = grads.shape
    B = np.zeros((*lead, 6, 3 * m))
    gx, gy, gz = grads[..., 0], grads[..., 1], grads[..., 2]
    B[..., 0, 0::3] = gx
    B[..., 1, 1::3] = gy
    B[..., 2, 2::3] = gz
    B[..., 3, 1::3] = gz
    B[..., 3, 2::3] = gy
    B[..., 4, 0::3] = gz
    B[..., 4, 2::3] = gx
    B[..., 5, 0::3] = gy
    B[..., 5, 1::3] = gx
    return B


def _b_full(X: np.ndarray, xi, eta, zeta, J0inv, detJ0):
    """(nc, 6, 33) compatible + incompatible B and det J at one natural point."""
    dN = _shape_grads(xi, eta, zeta)
    J = np.einsum("eai,aj->eij", X, dN)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        raise GeometryError("inverted or degenerate hexahedron")
    Jinv = np.linalg.inv(J)
    gu = np.einsum("aj,eji->eai", dN, Jinv)
    dP = np.diag([-2 * xi, -2 * eta, -2 * zeta])
    ga = np.einsum("aj,eji->eai", dP, J0inv) * (detJ0 / detJ)[:, None, None]
    B = np.concatenate([_strain_matrix(gu), _strain_matrix(ga)], axis=-1)
    return B, detJ


def element_matrices(X: np.ndarray, D: np.ndarray):
    """Condensed stiffness (nc, 24, 24) and unit-eigenstrain loads for each half.

    Returns ``(Ke, g_bottom, g_top)``; ``g_*`` is the nodal load (nc, 24) of a
    unit isotropic eigenstrain filling that half of the cell.
    """
    nc = X.shape[0]
    J0 = np.einsum("eai,aj->eij", X, _shape_grads(0.0, 0.0, 0.0))
    detJ0 = np.linalg.det(J0)
    J0inv = np.linalg.inv(J0)
    Kf = np.zeros((nc, 33, 33))
    for xi in (-_G, _G):
        for eta in (-_G, _G):
            for zeta in (-_G, _G):
                B, detJ = _b_full(X, xi, eta, zeta, J0inv, detJ0)
                Kf += np.einsum("eki,kl,elj->eij", B, D, B) * detJ[:, None, None]
    eps1 = D @ np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    loads = []
    for lo, hi in ((-1.0, 0.0), (0.0, 1.0)):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        g = np.zeros((nc, 33))
        for xi in (-_G, _G):
            for eta in (-_G, _G):
                for zeta in (mid - half * _G, mid + half * _G):
                    B, detJ = _b_full(X, xi, eta, zeta, J0inv, detJ0)
                    g += np.einsum("eki,k->ei", B, eps1) * (detJ * half)[:, None]
        loads.append(g)
    Kuu, Kua, Kaa = Kf[:, :24, :24], Kf[:, :24, 24:], Kf[:, 24:, 24:]
    KaaInv_Kau = np.linalg.solve(Kaa, np.swapaxes(Kua, 1, 2))
    Ke = Kuu - Kua @ KaaInv_Kau
    Ke = 0.5 * (Ke + np.swapaxes(Ke, 1, 2))
    out = []
    for g in loads:
        ga = np.linalg.solve(Kaa, g[:, 24:, None])[..., 0]
        out.append(g[:, :24] - np.einsum("eij,ej->ei", Kua, ga))
    return Ke, out[0], out[1]


def rigid_modes(points: np.ndarray) -> np.ndarray:
    """Orthonormal basis (3n, 6) of rigid translations and rotations."""
    n = points.shape[0]
    c = points - points.mean(axis=0)
    R = np.zeros((3 * n, 6))
    for i in range(3):
        R[i::3, i] = 1.0
    # rotations about x, y, z: omega x r
    R[1::3, 3], R[2::3, 3] = -c[:, 2], c[:, 1]
    R[0::3, 4], R[2::3, 4] = c[:, 2], -c[:, 0]
    R[0::3, 5], R[1::3, 5] = -c[:, 1], c[:, 0]
    Q, _ = np.linalg.qr(R)
    return Q


# ---------------------------------------------------------------------------
# solver


def pcg(matvec, b: np.ndarray, precond, tol: float, max_iter: int, project=None):
    """Preconditioned conjugate gradients; returns (x, iterations, relative residual).

    ``project`` (optional) is applied to residuals and search directions to
    keep the iteration inside a subspace, e.g. orthogonal to rigid modes.
    """
    P = project or (lambda v: v)
    x = np.zeros_like(b)
    r = P(b.copy())
    bnorm = np.linalg.norm(r)
    if bnorm == 0.0:
        return x, 0, 0.0
    z = P(precond(r))
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = P(matvec(p))
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            # recompute the true residual to guard against drift
            r_true = P(b - matvec(x))
            rel = np.linalg.norm(r_true) / bnorm
            if rel <= tol:
                return x, it, rel
            r = r_true
        z = P(precond(r))
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise OracleError(f"CG did not converge in {max_iter} iterations; relative residual {rel:.3e}")


class ThermoElasticSystem:
    """Assembled stiffness, eigenstrain load operator and factorisation for one mesh."""

    def __init__(self, mesh: Mesh, cfg: OracleConfig):
        self.mesh = mesh
        self.cfg = cfg
        D = isotropic_elasticity(cfg.youngs_modulus, cfg.poisson)
        X = mesh.points[mesh.cells]
        Ke, g_bot, g_top = element_matrices(X, D)
        dofs = (3 * mesh.cells[:, :, None] + np.arange(3)).reshape(len(mesh.cells), 24)
        ndof = 3 * mesh.n
        rows = np.repeat(dofs, 24, axis=1).ravel()
        cols = np.tile(dofs, (1, 24)).ravel()
        K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
        K = 0.5 * (K + K.T)
        K.sum_duplicates()
        self.K = K.tocsr()
        Kvox = mesh.n_voxels
        frows = np.concatenate([dofs.ravel(), dofs.ravel()])
        fcols = np.concatenate([np.repeat(mesh.cell_voxels[:, 0], 24), np.repeat(mesh.cell_voxels[:, 1], 24)])
        fvals = np.concatenate([g_bot.ravel(), g_top.ravel()])
        # nodal load per unit voxel CTE
        self.F = sp.coo_matrix((fvals * cfg.delta_t, (frows, fcols)), shape=(ndof, Kvox)).tocsr()

        fixed = np.zeros(ndof, dtype=bool)
        for c in range(3):
            fixed[3 * mesh.fixed_point_ids + c] = True
        self.free = np.flatnonzero(~fixed)
        self.Kff = self.K[self.free][:, self.free].tocsc()
        self.rigid = None
        if mesh.fixed_point_ids.size == 0:
            self.rigid = rigid_modes(mesh.points)
        self._precond = None

    def _preconditioner(self):
        if self._precond is None:
            if self.cfg.preconditioner == "jacobi":
                d = self.Kff.diagonal()
                self._precond = lambda r: r / d
            elif self.cfg.preconditioner == "lu":
                A = self.Kff
                if self.rigid is not None:
                    # rigid modes are exact eigenvectors of K + shift*I, so the
                    # shifted factorisation stays consistent on their complement
                    shift = 1e-8 * float(A.diagonal().mean())
                    A = (A + shift * sp.eye(A.shape[0])).tocsc()
                lu = spla.splu(A)
                self._precond = lu.solve
            else:
                raise ValueError(f"unknown preconditioner {self.cfg.preconditioner!r}")
        return self._precond

    def load(self, voxel_cte: np.ndarray) -> np.ndarray:
        return self.F @ np.asarray(voxel_cte, dtype=np.float64)

    def solve_load(self, f: np.ndarray) -> tuple[np.ndarray, dict]:
        meta: dict = {"rigid_filtered": self.rigid is not None}
        ff = f[self.free]
        project = None
        if self.rigid is not None:
            R = self.rigid
            imbalance = np.linalg.norm(R.T @ ff)
            meta["load_imbalance"] = float(imbalance)
            project = lambda v: v - R @ (R.T @ v)  # noqa: E731
            ff = project(ff)
        x, it, rel = pcg(self.Kff.__matmul__, ff, self._preconditioner(),
                         self.cfg.cg_tol, self.cfg.cg_max_iter, project)
        d = np.zeros_like(f)
        d[self.free] = x
        meta.update(cg_iterations=it, cg_residual=float(rel))
        return d, meta

    def solve_cte(self, voxel_cte: np.ndarray) -> tuple[np.ndarray, dict]:
        """Nodal displacement (n, 3) for a real-valued CTE per voxel."""
        d, meta = self.solve_load(self.load(voxel_cte))
        return d.reshape(-1, 3), meta


_SYSTEMS: dict = {}


def get_system(mesh: Mesh, cfg: OracleConfig) -> ThermoElasticSystem:
    key = (mesh.fingerprint(), cfg)
    sys_ = _SYSTEMS.get(key)
    if sys_ is None:
        if len(_SYSTEMS) > 8:
            _SYSTEMS.clear()
        sys_ = _SYSTEMS[key] = ThermoElasticSystem(mesh, cfg)
    return sys_


def solve(mesh: Mesh, mat: MaterialDistribution, cfg: OracleConfig = OracleConfig()) -> DeformationField:
    """Actuated shape of the bilayer for one material distribution."""
    omega = np.asarray(mat.omega)
    if omega.shape != (mesh.n_voxels,):
        raise GeometryError(f"material has {omega.shape[0]} voxels, mesh has {mesh.n_voxels}")
    if mat.q != cfg.q:
        raise ValueError(f"material uses q={mat.q} types, oracle configured for {cfg.q}")
    system = get_system(mesh, cfg)
    cte = np.asarray(cfg.alphas)[omega.astype(np.int64)]
    d, meta = system.solve_cte(cte)
    u = mesh.points + d
    if not np.all(np.isfinite(u)):
        raise OracleError("non-finite displacement")
    return DeformationField(u, meta)


# ---------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Dataset:
    geometry_id: str
    omega: np.ndarray  # (N, K) uint8
    a: np.ndarray  # (N, n) float32
    u: np.ndarray  # (N, n, 3) float32
    sample_ids: np.ndarray  # (N,) generation index
    seed: int = 0
    test_mask: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.omega.shape[0]
        if self.a.shape[0] != N or self.u.shape[0] != N or self.sample_ids.shape != (N,):
            raise ValueError("dataset arrays disagree on sample count")
        if self.u.shape[1:] != (self.a.shape[1], 3):
            raise ValueError("u must be (N, n, 3) matching a")
        if self.test_mask is None:
            self.test_mask = np.zeros(N, dtype=bool)

    def __len__(self) -> int:
        return self.omega.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    @property
    def n_voxels(self) -> int:
        return self.omega.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.geometry_id, self.omega[idx], self.a[idx], self.u[idx],
                       self.sample_ids[idx], self.seed, self.test_mask[idx], dict(self.provenance))

    def split(self, n_test: int) -> "Dataset":
        """Mark the last ``n_test`` samples as the test split."""
        mask = np.zeros(len(self), dtype=bool)
        if n_test:
            mask[-n_test:] = True
        return Dataset(self.geometry_id, self.omega, self.a, self.u, self.sample_ids,
                       self.seed, mask, dict(self.provenance))

    def train(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.test_mask))

    def test(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.test_mask))

    def sample_keys(self) -> set:
        return {(self.geometry_id, self.seed, int(i)) for i in self.sample_ids}


def sample_omega(seed: int, index: int, K: int, q: int) -> np.ndarray:
    """Independent uniform material type per voxel, keyed by (seed, index)."""
    rng = np.random.default_rng([seed, index])
    return rng.integers(0, q, size=K).astype(np.uint8)


def generate_dataset(mesh: Mesh, count: int, seed: int, cfg: OracleConfig = OracleConfig(),
                     start: int = 0, threads: int = 1) -> Dataset:
    """Random material distributions and their oracle shapes.

    Sample ``i`` depends only on ``(seed, start + i)``, so any thread count
    produces the same content in the same order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    K, n = mesh.n_voxels, mesh.n
    omega = np.zeros((count, K), dtype=np.uint8)
    a = np.zeros((count, n), dtype=np.float32)
    u = np.zeros((count, n, 3), dtype=np.float32)
    system = get_system(mesh, cfg)
    system._preconditioner()
    alphas = np.asarray(cfg.alphas)

    def work(i):
        w = sample_omega(seed, start + i, K, cfg.q)
        try:
            d, _ = system.solve_cte(alphas[w])
        except OracleError as exc:
            raise OracleError(f"sample {start + i}: {exc}") from exc
        omega[i] = w
        a[i] = alphas[w][mesh.voxel_map]
        u[i] = mesh.points + d

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, range(count)))
    else:
        for i in range(count):
            work(i)
    return Dataset(mesh.geometry_id, omega, a, u, np.arange(start, start + count, dtype=np.int64), seed,
                   provenance={"seed": seed, "oracle": cfg.to_dict()})


DATASET_MAGIC = b"S2NODAT"
FORMAT_VERSION = 1


def save_dataset(path, ds: Dataset, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gid = ds.geometry_id.encode()
    N, n, K = len(ds), ds.n, ds.n_voxels
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(gid)))
        fh.write(gid)
        fh.write(struct.pack("<III", N, n, K))
        om = ds.omega.astype(np.uint8)
        aa = ds.a.astype("<f4")
        uu = ds.u.astype("<f4").reshape(N, n * 3)
        rec = np.empty((N, K + 4 * n + 12 * n), dtype=np.uint8)
        rec[:, :K] = om
        rec[:, K:K + 4 * n] = aa.view(np.uint8).reshape(N, 4 * n)
        rec[:, K + 4 * n:] = uu.view(np.uint8).reshape(N, 12 * n)
        fh.write(rec.tobytes())
        prov = dict(ds.provenance)
        prov.update(provenance or {})
        prov["seed"] = int(ds.seed)
        prov["sample_ids"] = [int(i) for i in ds.sample_ids]
        prov["test_ids"] = [int(i) for i in ds.sample_ids[ds.test_mask]]
        blob = json.dumps(prov, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:7] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<H", buf, 7)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 9
    (glen,) = struct.unpack_from("<I", buf, off)
    off += 4
    gid = buf[off:off + glen].decode()
    off += glen
    N, n, K = struct.unpack_from("<III", buf, off)
    off += 12
    rec_len = K + 16 * n
    rec = np.frombuffer(buf, np.uint8, N * rec_len, off).reshape(N, rec_len)
    off += N * rec_len
    omega = rec[:, :K].copy()
    a = rec[:, K:K + 4 * n].copy().view("<f4").reshape(N, n).astype(np.float32)
    u = rec[:, K + 4 * n:].copy().view("<f4").reshape(N, n, 3).astype(np.float32)
    prov = {}
    if off + 4 <= len(buf):
        (plen,) = struct.unpack_from("<I", buf, off)
        prov = json.loads(buf[off + 4:off + 4 + plen].decode())
    ids = np.asarray(prov.get("sample_ids", range(N)), dtype=np.int64)
    test_ids = set(prov.get("test_ids", []))
    mask = np.array([int(i) in test_ids for i in ids], dtype=bool)
    return Dataset(gid, omega, a, u, ids, int(prov.get("seed", 0)), mask, prov)
