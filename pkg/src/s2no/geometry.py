"""Meshes, graph operators and Laplacian eigenbases for bilayer sheets.

Every mesh here is a thin sheet extruded into exactly two point layers
(bottom ``z = 0`` and top ``z = thickness``) and connected by trilinear
hexahedra. Material voxels partition the sheet in-plane and through the
thickness: voxel ids ``0 .. K/2 - 1`` live in the bottom half of the cells,
``K/2 .. K - 1`` in the top half.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

BOTTOM, TOP = 0, 1
THICKNESS_MM = 1.0

DENSE_EIGEN_LIMIT = 2000
SIGN_EPS = 1e-6
DEGENERACY_EPS = 1e-9


class GeometryError(ValueError):
    pass


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    """Parametric description of a sheet.

    ``dims`` is (length, width) for plates/strips and (outer radius, hole
    radius) for annuli. ``resolution`` is the in-plane point count per
    direction (x/y, or radial/angular for annuli) and ``voxels`` the in-plane
    voxel grid.
    """

    kind: str = "plate"
    dims: tuple[float, float] = (40.0, 20.0)
    resolution: tuple[int, int] = (33, 17)
    voxels: tuple[int, int] = (16, 8)
    clamp: str | None = None
    thickness: float = THICKNESS_MM
    geometry_id: str | None = None

    def default_clamp(self) -> str:
        if self.clamp is not None:
            return self.clamp
        return "outer" if self.kind == "annulus" else "left"

    def label(self) -> str:
        if self.geometry_id:
            return self.geometry_id
        d0, d1 = self.dims
        return f"{self.kind}-{d0:g}x{d1:g}-{self.voxels[0]}x{self.voxels[1]}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": list(self.dims),
            "resolution": list(self.resolution),
            "voxels": list(self.voxels),
            "clamp": self.default_clamp(),
            "thickness": self.thickness,
            "geometry_id": self.label(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeshSpec":
        return cls(
            kind=d.get("kind", "plate"),
            dims=tuple(float(x) for x in d.get("dims", (40.0, 20.0))),
            resolution=tuple(int(x) for x in d.get("resolution", (33, 17))),
            voxels=tuple(int(x) for x in d.get("voxels", (16, 8))),
            clamp=d.get("clamp"),
            thickness=float(d.get("thickness", THICKNESS_MM)),
            geometry_id=d.get("geometry_id"),
        )


@dataclass(eq=False)
class Mesh:
    points: np.ndarray  # (n, 3) mm
    cells: np.ndarray  # (n_cells, 8) hexahedra, bottom quad then top quad
    fixed_point_ids: np.ndarray  # sorted point indices with zero displacement
    voxel_map: np.ndarray  # (n,) voxel id per point
    layer_tags: np.ndarray  # (n,) BOTTOM / TOP
    geometry_id: str
    cell_voxels: np.ndarray  # (n_cells, 2) voxel of the bottom / top half of each cell
    voxel_centroids: np.ndarray  # (K/2, 2) in-plane centroid per voxel column
    voxel_grid: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.fixed_point_ids = np.unique(np.asarray(self.fixed_point_ids, dtype=np.int64))
        self.voxel_map = np.asarray(self.voxel_map, dtype=np.int64)
        self.layer_tags = np.asarray(self.layer_tags, dtype=np.int8)
        self.cell_voxels = np.asarray(self.cell_voxels, dtype=np.int64)
        self.voxel_centroids = np.asarray(self.voxel_centroids, dtype=np.float64)
        for arr in (self.points, self.cells, self.fixed_point_ids, self.voxel_map,
                    self.layer_tags, self.cell_voxels, self.voxel_centroids):
            arr.setflags(write=False)
        self.validate()

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def n_voxels(self) -> int:
        return 2 * self.voxel_centroids.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must be (n, 3), got {self.points.shape}")
        if self.cells.ndim != 2 or self.cells.shape[1] != 8:
            raise GeometryError(f"cells must be (n_cells, 8), got {self.cells.shape}")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= n):
            raise GeometryError("cell index out of range")
        if self.voxel_map.shape != (n,) or self.layer_tags.shape != (n,):
            raise GeometryError("voxel_map and layer_tags must cover every point")
        K = self.n_voxels
        if self.voxel_map.min() < 0 or self.voxel_map.max() >= K:
            raise GeometryError("voxel id out of range")
        counts = np.bincount(self.voxel_map, minlength=K)
        if np.any(counts == 0):
            raise GeometryError(f"voxels without points: {np.flatnonzero(counts == 0)[:10].tolist()}")
        if self.fixed_point_ids.size and self.fixed_point_ids.max() >= n:
            raise GeometryError("fixed point id out of range")
        if set(np.unique(self.layer_tags).tolist()) != {BOTTOM, TOP}:
            raise GeometryError("mesh needs exactly two point layers")

    def in_plane_count(self) -> int:
        return int(np.count_nonzero(self.layer_tags == BOTTOM))

    def edges(self) -> np.ndarray:
        """Unique undirected hexahedron edges as (E, 2), sorted."""
        local = np.array([[0, 1], [1, 2], [2, 3], [3, 0],
                          [4, 5], [5, 6], [6, 7], [7, 4],
                          [0, 4], [1, 5], [2, 6], [3, 7]])
        e = self.cells[:, local].reshape(-1, 2)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def is_connected(self) -> bool:
        e = self.edges()
        g = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n, self.n))
        ncomp, _ = connected_components(g, directed=False)
        return ncomp == 1

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.points, self.cells, self.fixed_point_ids, self.voxel_map,
                    self.layer_tags, self.cell_voxels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(self.geometry_id.encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# mesh generation


def _voxel_index(p: np.ndarray, n_points: int, n_vox: int) -> np.ndarray:
    return np.minimum(p * n_vox // (n_points - 1), n_vox - 1)


def generate_mesh(spec: MeshSpec) -> Mesh:
    """Build a two-layer hexahedral sheet from a parametric spec."""
    if spec.kind in ("plate", "strip"):
        return _grid_mesh(spec)
    if spec.kind == "annulus":
        return _annulus_mesh(spec)
    raise GeometryError(f"unknown mesh kind {spec.kind!r}; expected plate, strip or annulus")


def _check_common(spec: MeshSpec) -> None:
    if spec.thickness <= 0:
        raise GeometryError(f"thickness must be positive, got {spec.thickness}")
    if min(spec.resolution) < 2:
        raise GeometryError(f"resolution needs >= 2 points per edge, got {spec.resolution}")
    if min(spec.voxels) < 1:
        raise GeometryError(f"voxel grid must be positive, got {spec.voxels}")


def _extrude(xy: np.ndarray, quads: np.ndarray, thickness: float):
    m = xy.shape[0]
    points = np.zeros((2 * m, 3))
    points[:m, :2] = xy
    points[m:, :2] = xy
    points[m:, 2] = thickness
    cells = np.concatenate([quads, quads + m], axis=1)
    tags = np.repeat(np.array([BOTTOM, TOP], dtype=np.int8), m)
    return points, cells, tags


def _grid_mesh(spec: MeshSpec) -> Mesh:
    _check_common(spec)
    length, width = spec.dims
    if length <= 0 or width <= 0:
        raise GeometryError(f"plate dimensions must be positive, got {spec.dims}")
    nx, ny = spec.resolution
    vx, vy = spec.voxels
    if vx > nx - 1 or vy > ny - 1:
        raise GeometryError(f"voxel grid {spec.voxels} finer than element grid {(nx - 1, ny - 1)}")
    xs = np.linspace(0.0, length, nx)
    ys = np.linspace(0.0, width, ny)
    X, Y = np.meshgrid(xs, ys)  # (ny, nx): index = iy * nx + ix
    xy = np.column_stack([X.ravel(), Y.ravel()])
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    ix, iy = ix.ravel(), iy.ravel()
    p00 = iy * nx + ix
    quads = np.column_stack([p00, p00 + 1, p00 + nx + 1, p00 + nx])
    points, cells, tags = _extrude(xy, quads, spec.thickness)

    K2 = vx * vy
    cvx = ix * vx // (nx - 1)
    cvy = iy * vy // (ny - 1)
    col = cvy * vx + cvx
    cell_voxels = np.column_stack([col, col + K2])
    px, py = np.meshgrid(np.arange(nx), np.arange(ny))
    pcol = _voxel_index(py.ravel(), ny, vy) * vx + _voxel_index(px.ravel(), nx, vx)
    voxel_map = np.concatenate([pcol, pcol + K2])
    cx = (np.arange(vx) + 0.5) * length / vx
    cy = (np.arange(vy) + 0.5) * width / vy
    CX, CY = np.meshgrid(cx, cy)
    centroids = np.column_stack([CX.ravel(), CY.ravel()])

    fixed = _clamp_ids(points, spec.default_clamp(), spec)
    return Mesh(points, cells, fixed, voxel_map, tags, spec.label(), cell_voxels,
                centroids, voxel_grid=(vx, vy), meta={"spec": spec.to_dict()})


def _annulus_mesh(spec: MeshSpec) -> Mesh:
    _check_common(spec)
    r_out, r_in = spec.dims
    if r_in <= 0 or r_out <= r_in:
        raise GeometryError(f"annulus needs 0 < hole radius < outer radius, got {spec.dims}")
    nr, nt = spec.resolution
    vr, vt = spec.voxels
    if nt < 3:
        raise GeometryError("annulus needs >= 3 angular points")
    rs = np.linspace(r_in, r_out, nr)
    ts = 2.0 * np.pi * np.arange(nt) / nt
    R, T = np.meshgrid(rs, ts, indexing="ij")  # index = ir * nt + it
    xy = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    ir, it = np.meshgrid(np.arange(nr - 1), np.arange(nt), indexing="ij")
    ir, it = ir.ravel(), it.ravel()
    a = ir * nt + it
    b = (ir + 1) * nt + it
    c = (ir + 1) * nt + (it + 1) % nt
    d = ir * nt + (it + 1) % nt
    quads = np.column_stack([a, b, c, d])
    points, cells, tags = _extrude(xy, quads, spec.thickness)

    # polar voxel centroids, nearest-centroid assignment in-plane
    edges_r = np.linspace(r_in, r_out, vr + 1)
    rc = 0.5 * (edges_r[:-1] + edges_r[1:])
    tc = 2.0 * np.pi * (np.arange(vt) + 0.5) / vt
    RC, TC = np.meshgrid(rc, tc, indexing="ij")
    centroids = np.column_stack([(RC * np.cos(TC)).ravel(), (RC * np.sin(TC)).ravel()])
    K2 = centroids.shape[0]
    pcol = nearest_centroid(xy, centroids)
    cell_xy = xy[quads].mean(axis=1)
    ccol = nearest_centroid(cell_xy, centroids)
    voxel_map = np.concatenate([pcol, pcol + K2])
    cell_voxels = np.column_stack([ccol, ccol + K2])
    fixed = _clamp_ids(points, spec.default_clamp(), spec)
    return Mesh(points, cells, fixed, voxel_map, tags, spec.label(), cell_voxels,
                centroids, voxel_grid=None, meta={"spec": spec.to_dict()})


def nearest_centroid(xy: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for each in-plane location (ties -> lowest id)."""
    d2 = ((xy[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def _clamp_ids(points: np.ndarray, clamp: str, spec: MeshSpec) -> np.ndarray:
    tol = 1e-9 * max(1.0, float(np.abs(points).max()))
    r = np.hypot(points[:, 0], points[:, 1])
    if clamp == "none":
        return np.zeros(0, dtype=np.int64)
    if clamp == "left":
        return np.flatnonzero(points[:, 0] <= points[:, 0].min() + tol)
    if clamp == "inner":
        return np.flatnonzero(r <= r.min() + tol)
    if clamp == "outer":
        return np.flatnonzero(r >= r.max() - tol)
    raise GeometryError(f"unknown clamp {clamp!r}")


# ---------------------------------------------------------------------------
# mid-surface


@dataclass(frozen=True)
class MidSurface:
    bottom: np.ndarray  # (m,) bottom point ids
    top: np.ndarray  # (m,) paired top point ids
    points: np.ndarray  # (m, 3) mid-point coordinates
    triangles: np.ndarray  # (t, 3) indices into the pair list


def pair_layers(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Pair each bottom point with the top point at the same in-plane location."""
    bottom = np.flatnonzero(mesh.layer_tags == BOTTOM)
    top = np.flatnonzero(mesh.layer_tags == TOP)
    scale = max(1.0, float(np.abs(mesh.points[:, :2]).max()))
    keys = np.round(mesh.points[:, :2] / scale, 9)
    lookup = {tuple(keys[i]): i for i in top}
    if len(lookup) != len(top):
        raise GeometryError("top layer has coincident in-plane locations")
    partner = np.empty(len(bottom), dtype=np.int64)
    used = set()
    for j, b in enumerate(bottom):
        t = lookup.get(tuple(keys[b]))
        if t is None:
            raise GeometryError(f"bottom point {int(b)} has no top partner")
        partner[j] = t
        used.add(t)
    if len(used) != len(top):
        missing = sorted(set(top.tolist()) - used)
        raise GeometryError(f"top point {missing[0]} has no bottom partner")
    return bottom, partner


def mid_surface(mesh: Mesh, coords: np.ndarray | None = None) -> MidSurface:
    """Mid-surface of a (possibly deformed) bilayer: mean of paired layer points."""
    bottom, top = pair_layers(mesh)
    X = mesh.points if coords is None else np.asarray(coords)
    mid = 0.5 * (X[bottom] + X[top])
    pos = np.full(mesh.n, -1, dtype=np.int64)
    pos[bottom] = np.arange(len(bottom))
    quads = pos[mesh.cells[:, :4]]
    tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], axis=0)
    return MidSurface(bottom, top, mid, tris)


# ---------------------------------------------------------------------------
# Laplacians


def cotangent_laplacian(vertices: np.ndarray, triangles: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Linear-FEM stiffness (cotangent) matrix and lumped mass for a triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    nv = v.shape[0]
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    e0, e1, e2 = p2 - p1, p0 - p2, p1 - p0  # edge opposite each corner
    cr = np.cross(e1, e2)
    area2 = np.linalg.norm(cr, axis=1)
    if np.any(area2 <= 0):
        raise GeometryError("degenerate triangle in mid-surface")
    # cot of angle at corner i = (e_j . e_k) / |e_j x e_k| with e_j, e_k adjacent edges
    cot0 = -(e1 * e2).sum(1) / area2
    cot1 = -(e2 * e0).sum(1) / area2
    cot2 = -(e0 * e1).sum(1) / area2
    i = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    w = 0.5 * np.concatenate([cot0, cot1, cot2])
    off = sp.coo_matrix((-w, (i, j)), shape=(nv, nv))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    A = (off + sp.diags(diag)).tocsr()
    A.sum_duplicates()
    mass = np.bincount(t.ravel(), weights=np.repeat(area2 / 6.0, 3), minlength=nv)
    return A, mass


def graph_laplacian(edges: np.ndarray, n: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Combinatorial Laplacian D - E with degree mass (normalised-Laplacian spectrum)."""
    e = np.asarray(edges, dtype=np.int64)
    E = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    E = ((E + E.T) > 0).astype(np.float64)
    deg = np.asarray(E.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise GeometryError("isolated vertex in graph")
    return (sp.diags(deg) - E).tocsr(), deg


def mesh_laplacian(mesh: Mesh) -> tuple[sp.csr_matrix, np.ndarray, str]:
    """Laplacian on the mid-surface pairs: cotangent if triangulable, graph otherwise."""
    ms = mid_surface(mesh)
    try:
        A, mass = cotangent_laplacian(ms.points, ms.triangles)
        return A, mass, "cotangent"
    except GeometryError:
        e = mesh.edges()
        pos = np.full(mesh.n, -1, dtype=np.int64)
        pos[ms.bottom] = np.arange(len(ms.bottom))
        pos[ms.top] = np.arange(len(ms.top))
        e = np.unique(np.sort(pos[e], axis=1), axis=0)
        e = e[e[:, 0] != e[:, 1]]
        A, mass = graph_laplacian(e, len(ms.bottom))
        return A, mass, "graph"


def point_mass(mesh: Mesh) -> np.ndarray:
    """Lumped mass per mesh point: mid-surface mass split evenly between the layers."""
    ms = mid_surface(mesh)
    _, mass, _ = mesh_laplacian(mesh)
    out = np.empty(mesh.n)
    out[ms.bottom] = 0.5 * mass
    out[ms.top] = 0.5 * mass
    return out


# ---------------------------------------------------------------------------
# eigenbasis


@dataclass(eq=False)
class SpectralBasis:
    eigenvalues: np.ndarray  # (k,) ascending
    eigenvectors: np.ndarray  # (n, k)
    mass: np.ndarray  # (n,) lumped mass
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self.eigenvectors = np.ascontiguousarray(self.eigenvectors, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.eigenvectors.shape != (self.mass.shape[0], self.eigenvalues.shape[0]):
            raise GeometryError("basis shapes inconsistent")
        if np.any(self.mass <= 0):
            raise GeometryError("mass weights must be positive")
        self._encoder = None

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def gram(self) -> np.ndarray:
        return self.eigenvectors.T @ (self.mass[:, None] * self.eigenvectors)

    @property
    def encoder(self) -> np.ndarray:
        """(k, n) analysis operator.

        ``Phi^T M`` when the basis is mass-orthonormal; otherwise the
        mass-weighted least-squares projector ``(Phi^T M Phi)^-1 Phi^T M``,
        which still recovers exact coefficients for fields in span(Phi) on a
        subsampled point set.
        """
        if self._encoder is None:
            PtM = self.eigenvectors.T * self.mass[None, :]
            G = PtM @ self.eigenvectors
            if np.abs(G - np.eye(self.k)).max() < 1e-8:
                self._encoder = PtM
            else:
                self._encoder = scipy.linalg.solve(G, PtM, assume_a="pos")
        return self._encoder

    def degenerate_pairs(self, eps: float = DEGENERACY_EPS) -> list[tuple[int, int]]:
        lam = self.eigenvalues
        return [(i, i + 1) for i in range(self.k - 1) if abs(lam[i + 1] - lam[i]) < eps]


def fix_signs(vecs: np.ndarray, eps: float = SIGN_EPS) -> np.ndarray:
    """Flip each column so its first entry with |x| > eps is positive."""
    out = vecs.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > eps)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def generalized_eigenpairs(A, mass: np.ndarray, k: int, max_iter: int | None = None):
    """k smallest eigenpairs of ``A phi = lambda M phi`` with diagonal M.

    Dense symmetric solve for small systems; shift-invert Lanczos otherwise.
    Eigenvectors are M-orthonormal with the sign convention of ``fix_signs``.
    """
    n = A.shape[0]
    if k < 1 or k > n:
        raise GeometryError(f"need 1 <= k <= {n}, got {k}")
    mass = np.asarray(mass, dtype=np.float64)
    if n <= DENSE_EIGEN_LIMIT or k >= n - 1:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=np.float64)
        # symmetric reduction with M^-1/2 keeps the problem standard and exact
        s = 1.0 / np.sqrt(mass)
        B = s[:, None] * Ad * s[None, :]
        B = 0.5 * (B + B.T)
        lam, y = scipy.linalg.eigh(B, subset_by_index=[0, k - 1], driver="evr")
        vecs = s[:, None] * y
        solver = "dense"
    else:
        A = sp.csc_matrix(A)
        M = sp.diags(mass).tocsc()
        # shift slightly below zero so the factorisation is non-singular
        sigma = -1e-3 * float(A.diagonal().mean() / mass.mean())
        try:
            lam, vecs = spla.eigsh(A, k=k, M=M, sigma=sigma, which="LM",
                                   maxiter=max_iter or 20 * n, tol=0.0)
        except spla.ArpackNoConvergence as exc:
            res = _residuals(A, mass, exc.eigenvalues, exc.eigenvectors) if len(exc.eigenvalues) else [np.inf]
            raise EigenSolverError(
                f"eigensolver did not converge for k={k}; max residual {max(res):.3e}") from exc
        order = np.argsort(lam)
        lam, vecs = lam[order], vecs[:, order]
        # re-orthonormalise in the M inner product to remove Lanczos drift
        G = vecs.T @ (mass[:, None] * vecs)
        L = np.linalg.cholesky(0.5 * (G + G.T))
        vecs = scipy.linalg.solve_triangular(L, vecs.T, lower=True).T
        solver = "shift-invert-lanczos"
    lam = np.where(np.abs(lam) < 1e-10 * max(1.0, float(np.abs(lam).max())), 0.0, lam)
    return lam, fix_signs(vecs), solver


def _residuals(A, mass, lam, vecs) -> list[float]:
    out = []
    for i in range(len(lam)):
        v = vecs[:, i]
        r = A @ v - lam[i] * mass * v
        out.append(float(np.linalg.norm(r) / np.linalg.norm(v)))
    return out


def eigen_residuals(A, mass: np.ndarray, lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    return np.asarray(_residuals(A, mass, lam, vecs))


def compute_eigenbasis(mesh: Mesh, k: int) -> SpectralBasis:
    """k lowest Laplace-Beltrami modes of the mid-surface, lifted to both layers.

    Paired top and bottom points share eigenvector values and split the
    mid-surface lumped mass, so the lifted basis stays mass-orthonormal.
    """
    if not mesh.is_connected():
        raise GeometryError(f"mesh {mesh.geometry_id!r} is not connected")
    ms = mid_surface(mesh)
    m = len(ms.bottom)
    if k > m:
        raise GeometryError(f"k={k} exceeds the {m} in-plane points")
    A, mass, kind = mesh_laplacian(mesh)
    lam, vecs, solver = generalized_eigenpairs(A, mass, k)
    phi = np.empty((mesh.n, k))
    phi[ms.bottom] = vecs
    phi[ms.top] = vecs
    M = np.empty(mesh.n)
    M[ms.bottom] = 0.5 * mass
    M[ms.top] = 0.5 * mass
    basis = SpectralBasis(lam, phi, M, meta={
        "geometry_id": mesh.geometry_id, "laplacian": kind, "solver": solver,
    })
    basis.meta["degenerate"] = basis.degenerate_pairs()
    return basis


def downsample_basis(basis: SpectralBasis, kept_indices, mass: np.ndarray | None = None,
                     geometry_id: str | None = None) -> SpectralBasis:
    """Restrict a basis to a subset of points.

    Eigenvalues are unchanged. Mass weights are re-lumped on the subsample:
    the caller may pass the coarse mesh's own lumped mass, otherwise the
    kept weights are rescaled to preserve total mass.
    """
    idx = np.asarray(kept_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise GeometryError("kept_indices must be 1-D")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= basis.n:
        raise GeometryError(f"kept_indices must lie in [0, {basis.n})")
    if np.unique(idx).size != idx.size:
        raise GeometryError("kept_indices contains duplicates")
    if idx.size == basis.n and np.array_equal(idx, np.arange(basis.n)) and mass is None:
        return SpectralBasis(basis.eigenvalues.copy(), basis.eigenvectors.copy(),
                             basis.mass.copy(), meta=dict(basis.meta))
    if mass is None:
        m = basis.mass[idx] * (basis.mass.sum() / basis.mass[idx].sum())
    else:
        m = np.asarray(mass, dtype=np.float64)
        if m.shape != idx.shape:
            raise GeometryError("re-lumped mass must match kept_indices")
    meta = dict(basis.meta)
    meta["downsampled_from"] = basis.meta.get("geometry_id")
    if geometry_id is not None:
        meta["geometry_id"] = geometry_id
    return SpectralBasis(basis.eigenvalues.copy(), basis.eigenvectors[idx], m, meta=meta)


def shared_point_indices(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """For each coarse point, the index of the coincident fine point."""
    scale = max(1.0, float(np.abs(fine.points).max()))
    fk = np.round(fine.points / scale, 9)
    lookup = {tuple(r): i for i, r in enumerate(fk)}
    ck = np.round(coarse.points / scale, 9)
    out = np.empty(coarse.n, dtype=np.int64)
    for i, r in enumerate(ck):
        j = lookup.get(tuple(r))
        if j is None:
            raise GeometryError(f"coarse point {i} has no coincident fine point")
        out[i] = j
    return out


# ---------------------------------------------------------------------------
# graph adjacency


def build_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric-normalised adjacency with self loops: D^-1/2 (E + I) D^-1/2."""
    return normalized_adjacency(mesh.edges(), mesh.n)


def normalized_adjacency(edges: np.ndarray, n: int) -> sp.csr_matrix:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    E = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    E = ((E + E.T + sp.eye(n)) > 0).astype(np.float64).tocsr()
    deg = np.asarray(E.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(deg))
    A = (s @ E @ s).tocsr()
    A.sort_indices()
    return A


# ---------------------------------------------------------------------------
# voxel coarsening


@dataclass(frozen=True)
class VoxelCoarsening:
    fine_to_coarse: np.ndarray  # (K_fine,) coarse voxel id per fine voxel
    groups: tuple  # coarse id -> array of fine voxel ids
    point_map: np.ndarray  # (n,) coarse voxel id per point

    @property
    def n_coarse(self) -> int:
        return len(self.groups)

    def broadcast(self, coarse_omega: np.ndarray) -> np.ndarray:
        return np.asarray(coarse_omega)[..., self.fine_to_coarse]


def coarsen_voxels(mesh: Mesh, factor: int) -> VoxelCoarsening:
    """Group fine voxels into coarse ones (per layer) by an integer factor."""
    if factor < 1:
        raise GeometryError(f"factor must be >= 1, got {factor}")
    K2 = mesh.voxel_centroids.shape[0]
    if mesh.voxel_grid is not None:
        vx, vy = mesh.voxel_grid
        if vx % factor or vy % factor:
            raise GeometryError(f"factor {factor} does not divide voxel grid {mesh.voxel_grid}")
        cx, cy = vx // factor, vy // factor
        ids = np.arange(K2)
        col = (ids // vx // factor) * cx + (ids % vx) // factor
        n_col = cx * cy
    else:
        n_col = int(np.ceil(K2 / factor**2))
        seeds = _farthest_points(mesh.voxel_centroids, n_col)
        col = nearest_centroid(mesh.voxel_centroids, mesh.voxel_centroids[seeds])
    # counted per layer: two layers of one column would make a trivial design space
    if n_col < 2:
        raise GeometryError(f"factor {factor} leaves fewer than 2 coarse voxels per layer")
    f2c = np.concatenate([col, col + n_col])
    groups = tuple(np.flatnonzero(f2c == c) for c in range(2 * n_col))
    if any(g.size == 0 for g in groups):
        raise GeometryError("coarsening produced an empty coarse voxel")
    return VoxelCoarsening(f2c, groups, f2c[mesh.voxel_map])


def _farthest_points(xy: np.ndarray, count: int) -> np.ndarray:
    chosen = [0]
    d = ((xy - xy[0]) ** 2).sum(1)
    while len(chosen) < count:
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, ((xy - xy[i]) ** 2).sum(1))
    return np.array(sorted(chosen))


# ---------------------------------------------------------------------------
# files

BASIS_MAGIC = b"S2NOEIG"
FORMAT_VERSION = 1


def _write_trailer(fh, provenance: dict | None) -> None:
    blob = json.dumps(provenance or {}, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_trailer(buf: bytes, off: int) -> dict:
    if off + 4 > len(buf):
        return {}
    (ln,) = struct.unpack_from("<I", buf, off)
    return json.loads(buf[off + 4: off + 4 + ln].decode()) if ln else {}


def save_basis(path, basis: SpectralBasis, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<HII", FORMAT_VERSION, basis.n, basis.k))
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(basis.mass.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvectors, dtype="<f8").tobytes())
        prov = dict(provenance or {})
        prov.setdefault("geometry_id", basis.meta.get("geometry_id"))
        _write_trailer(fh, prov)


def load_basis(path) -> SpectralBasis:
    buf = Path(path).read_bytes()
    if buf[:7] != BASIS_MAGIC:
        raise GeometryError(f"{path}: not a basis cache file")
    version, n, k = struct.unpack_from("<HII", buf, 7)
    if version != FORMAT_VERSION:
        raise GeometryError(f"{path}: unsupported version {version}")
    off = 7 + 10
    lam = np.frombuffer(buf, "<f8", k, off).astype(np.float64)
    off += 8 * k
    mass = np.frombuffer(buf, "<f8", n, off).astype(np.float64)
    off += 8 * n
    phi = np.frombuffer(buf, "<f8", n * k, off).astype(np.float64).reshape(n, k)
    off += 8 * n * k
    prov = _read_trailer(buf, off)
    basis = SpectralBasis(lam, phi, mass, meta={"geometry_id": prov.get("geometry_id"),
                                                "provenance": prov})
    basis.meta["degenerate"] = basis.degenerate_pairs()
    return basis


def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "geometry_id": mesh.geometry_id,
        "points": mesh.points.tolist(),
        "cells": mesh.cells.tolist(),
        "fixed_point_ids": mesh.fixed_point_ids.tolist(),
        "voxel_map": mesh.voxel_map.tolist(),
        "layer_tags": mesh.layer_tags.tolist(),
        "cell_voxels": mesh.cell_voxels.tolist(),
        "voxel_centroids": mesh.voxel_centroids.tolist(),
        "voxel_grid": list(mesh.voxel_grid) if mesh.voxel_grid else None,
        "meta": mesh.meta,
    }


def mesh_from_dict(d: dict) -> Mesh:
    vg = d.get("voxel_grid")
    return Mesh(
        points=np.asarray(d["points"], dtype=np.float64),
        cells=np.asarray(d["cells"], dtype=np.int64),
        fixed_point_ids=np.asarray(d["fixed_point_ids"], dtype=np.int64),
        voxel_map=np.asarray(d["voxel_map"], dtype=np.int64),
        layer_tags=np.asarray(d["layer_tags"], dtype=np.int8),
        geometry_id=d["geometry_id"],
        cell_voxels=np.asarray(d["cell_voxels"], dtype=np.int64),
        voxel_centroids=np.asarray(d["voxel_centroids"], dtype=np.float64),
        voxel_grid=tuple(vg) if vg else None,
        meta=d.get("meta", {}),
    )


def save_mesh(path, mesh: Mesh, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = mesh_to_dict(mesh)
    d["provenance"] = provenance or {}
    path.write_text(json.dumps(d, sort_keys=True))


def load_mesh(path) -> Mesh:
    return mesh_from_dict(json.loads(Path(path).read_text()))
