"""Discretization of the orientation sphere.

Directions are produced as a Fibonacci spiral on the upper hemisphere that is
mirrored through the origin, so every direction has a bit-exact antipode.
Adjacency comes from the convex hull of the point set (the dual of the
spherical Voronoi tessellation).
"""

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation

from .errors import ConstructionError, ParameterError

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """N unit vectors with Voronoi neighbourhoods and the antipodal permutation.

    ``n`` has shape (N, 3). ``neighbors[i]`` is a sorted int array of the
    directions adjacent to ``i``. ``antipode[i]`` is the index of ``-n[i]``.
    """

    n: np.ndarray
    neighbors: tuple = ()
    antipode: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "n", _readonly(np.asarray(self.n, dtype=float)))
        if self.antipode is not None:
            object.__setattr__(self, "antipode", _readonly(np.asarray(self.antipode, dtype=np.int64)))
        object.__setattr__(self, "neighbors", tuple(_readonly(np.asarray(nb, dtype=np.int64)) for nb in self.neighbors))

    @property
    def N(self):
        return len(self.n)

    @property
    def primary(self):
        """Indices that represent each antipodal pair (the smaller index)."""
        return np.flatnonzero(np.arange(self.N) < self.antipode)

    def degree(self):
        return np.array([len(nb) for nb in self.neighbors])

    def angles_from(self, i):
        """Great-circle angles (rad) of all directions from direction ``i``."""
        return np.arccos(np.clip(self.n @ self.n[i], -1.0, 1.0))

    def rotated(self, rotation):
        """Apply a rotation to the whole set, keeping antipodes bit-exact.

        ``rotation`` is a 3x3 matrix or a :class:`scipy.spatial.transform.Rotation`.
        Adjacency is unchanged by an isometry and is carried over.
        """
        R = rotation.as_matrix() if isinstance(rotation, Rotation) else np.asarray(rotation, dtype=float)
        prim = self.primary
        n = np.empty_like(self.n)
        n[prim] = self.n[prim] @ R.T
        n[prim] /= np.linalg.norm(n[prim], axis=1, keepdims=True)
        n[self.antipode[prim]] = -n[prim]
        return DirectionSet(n, self.neighbors, self.antipode)


def _mirrored(half):
    half = np.asarray(half, dtype=float)
    return np.vstack([half, -half])


def octahedron():
    """The six directions +-e_x, +-e_y, +-e_z."""
    return _finish(_mirrored(np.eye(3)))


def icosahedron():
    """The twelve vertices of the regular icosahedron (each has 5 neighbours)."""
    g = (1.0 + np.sqrt(5.0)) / 2.0
    half = np.array([[0, 1, g], [0, -1, g], [1, g, 0], [-1, g, 0], [g, 0, 1], [g, 0, -1]], dtype=float)
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    return _finish(_mirrored(half))


def _hemisphere_spiral(M):
    k = np.arange(M) + 0.5
    z = 1.0 - k / M
    r = np.sqrt(1.0 - z * z)
    phi = np.arange(M) * GOLDEN_ANGLE
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _relax(half, iterations, step=0.1):
    # Coulomb repulsion of the hemisphere points against the full mirrored set.
    q = half.copy()
    M = len(q)
    spacing = np.sqrt(4.0 * np.pi / (2 * M))
    for _ in range(iterations):
        full = np.vstack([q, -q])
        diff = q[:, None, :] - full[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(M), np.arange(M)] = np.inf
        force = np.einsum("ijk,ij->ik", diff, d2 ** -1.5)
        force -= np.sum(force * q, axis=1, keepdims=True) * q
        q = q + step * spacing * force / np.abs(force).max()
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def generate_directions(N, relax_iterations=50, seed=None):
    """Near-uniform, exactly antipodal direction set with ``N`` points.

    ``N == 6`` returns the octahedron. Otherwise ``N/2`` spiral points on the
    hemisphere are optionally relaxed by mirrored repulsion and then mirrored.
    With ``seed`` the whole set is rotated by a seeded random rotation.
    """
    if int(N) != N or N < 6 or N % 2:
        raise ParameterError(f"direction count must be an even integer >= 6, got {N!r}")
    N = int(N)
    if N == 6:
        dirs = octahedron()
    else:
        half = _hemisphere_spiral(N // 2)
        if relax_iterations:
            half = _relax(half, relax_iterations)
        dirs = _finish(_mirrored(half))
    if seed is not None:
        dirs = dirs.rotated(Rotation.random(random_state=seed))
    return dirs


def antipode_permutation(n):
    """Permutation mapping each direction onto its exact negation."""
    n = np.asarray(n, dtype=float)
    index = {row.tobytes(): i for i, row in enumerate(n)}
    perm = np.empty(len(n), dtype=np.int64)
    for i, row in enumerate(n):
        j = index.get((-row).tobytes())
        if j is None:
            raise ConstructionError(f"direction {i} has no exact antipode")
        perm[i] = j
    if np.any(perm[perm] != np.arange(len(n))) or np.any(perm == np.arange(len(n))):
        raise ConstructionError("antipodal map is not a fixed-point-free involution")
    return perm


def voronoi_neighbors(dirs):
    """Fill the neighbourhood lists from the convex hull of the directions.

    Neighbourhoods are closed under the antipodal map so that the discrete
    angular operator commutes with the point reflection.
    """
    n = dirs.n
    antipode = dirs.antipode if dirs.antipode is not None else antipode_permutation(n)
    try:
        hull = ConvexHull(n)
    except (QhullError, ValueError) as exc:
        raise ConstructionError(f"convex hull of the direction set failed: {exc}") from exc
    if len(hull.vertices) != len(n):
        raise ConstructionError("some directions are not hull vertices (degenerate point set)")
    N = len(n)
    adj = [set() for _ in range(N)]
    for a, b, c in hull.simplices:
        for u, v in ((a, b), (b, c), (a, c)):
            adj[u].add(v)
            adj[v].add(u)
    for i in range(N):
        for j in list(adj[i]):
            adj[antipode[i]].add(antipode[j])
            adj[antipode[j]].add(antipode[i])
    neighbors = tuple(np.array(sorted(s), dtype=np.int64) for s in adj)
    return DirectionSet(n, neighbors, antipode)


def _finish(n):
    return voronoi_neighbors(DirectionSet(n, (), antipode_permutation(n)))


def is_connected(dirs):
    """Breadth-first check that the neighbour graph has a single component."""
    seen = np.zeros(dirs.N, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in dirs.neighbors[i]:
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return bool(seen.all())


def cell_areas(dirs):
    """Voronoi cell areas approximated by one third of the adjacent hull facets."""
    hull = ConvexHull(dirs.n)
    tri = dirs.n[hull.simplices]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    cells = np.zeros(dirs.N)
    for k in range(3):
        np.add.at(cells, hull.simplices[:, k], area / 3.0)
    return cells


def min_pairwise_angle(dirs):
    g = np.clip(dirs.n @ dirs.n.T, -1.0, 1.0)
    np.fill_diagonal(g, -1.0)
    return float(np.arccos(g.max()))
