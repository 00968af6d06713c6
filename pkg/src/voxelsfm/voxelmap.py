"""Global LiDAR map: a hash grid of 3m root cells, each an octree whose
nodes carry incrementally maintained Gaussian statistics.

Leaves that pass the planarity test freeze as plane voxels and accept no
further insertions, which bounds map growth on structured scenes. Parent
nodes keep live statistics so queries can fall back to the deepest
sufficiently populated ancestor.

Single-writer: concurrent read-only queries are safe between mutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyVoxel, MissingVoxel, NonFinite
from .geom import EigenSystem3, eig3_sym


@dataclass
class VoxelMapConfig:
    root_size: float = 3.0
    max_depth: int = 3
    min_points_for_fit: int = 10
    sigma_d: float = 0.03          # plane test: e3/e1 below this
    sigma_s: float = 0.5           # plane test: e2/e1 above this
    eig_floor: float = 1e-6        # m^2, floors e3 before inversion
    recompute_interval: int = 10000  # incremental ops per node before batch refit

    def __post_init__(self):
        if self.root_size <= 0:
            raise ValueError("root_size must be positive")
        if not 0 < self.sigma_d < self.sigma_s:
            raise ValueError("need 0 < sigma_d < sigma_s")


class GaussianStats:
    """Count, mean and population covariance of a point multiset.

    ``add``/``remove`` apply the closed-form single-point updates so the
    result always equals a from-scratch recomputation over the surviving
    points (up to float rounding).
    """

    __slots__ = ("count", "mean", "cov")

    def __init__(self, count=0, mean=None, cov=None):
        self.count = int(count)
        self.mean = np.zeros(3) if mean is None else np.array(mean, dtype=float)
        self.cov = np.zeros((3, 3)) if cov is None else np.array(cov, dtype=float)

    def copy(self) -> "GaussianStats":
        return GaussianStats(self.count, self.mean, self.cov)

    def add(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        n = self.count
        if n == 0:
            self.count = 1
            self.mean = x.copy()
            self.cov = np.zeros((3, 3))
            return
        new_mean = (n * self.mean + x) / (n + 1)
        second = n * (self.cov + np.outer(self.mean, self.mean)) + np.outer(x, x)
        self.cov = second / (n + 1) - np.outer(new_mean, new_mean)
        self.mean = new_mean
        self.count = n + 1

    def remove(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        n = self.count
        if n == 0:
            raise EmptyVoxel("remove from empty statistics")
        if n == 1:
            self.count = 0
            self.mean = np.zeros(3)
            self.cov = np.zeros((3, 3))
            return
        new_mean = (n * self.mean - x) / (n - 1)
        second = n * (self.cov + np.outer(self.mean, self.mean)) - np.outer(x, x)
        self.cov = second / (n - 1) - np.outer(new_mean, new_mean)
        self.mean = new_mean
        self.count = n - 1

    @staticmethod
    def from_points(points: np.ndarray) -> "GaussianStats":
        """Batch recomputation: mean and population covariance."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = points.shape[0]
        if n == 0:
            return GaussianStats()
        mean = points.mean(axis=0)
        d = points - mean
        cov = d.T @ d / n
        return GaussianStats(n, mean, cov)


def stats_add(s: GaussianStats, x: np.ndarray) -> GaussianStats:
    out = s.copy()
    out.add(x)
    return out


def stats_remove(s: GaussianStats, x: np.ndarray) -> GaussianStats:
    out = s.copy()
    out.remove(x)
    return out


def voxel_key(x: np.ndarray, root_size: float) -> tuple[int, int, int]:
    """Floor-quantized root-cell index of a world point."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"non-finite coordinate {x}")
    k = np.floor(x / root_size)
    return (int(k[0]), int(k[1]), int(k[2]))


class VoxelNode:
    """Octree node holding Gaussian statistics of the points below it."""

    __slots__ = ("stats", "is_plane", "creation_time", "depth", "center",
                 "half", "children", "points", "raw_complete", "_eig",
                 "_ops")

    def __init__(self, depth, center, half, creation_time):
        self.stats = GaussianStats()
        self.is_plane = False
        self.creation_time = creation_time
        self.depth = depth
        self.center = np.asarray(center, dtype=float)
        self.half = float(half)
        self.children = None          # list of 8 (or None) once subdivided
        self.points = []              # retained (xyz, intensity, frame) for leaves
        self.raw_complete = True      # False once raw points were dropped
        self._eig = None
        self._ops = 0

    @property
    def count(self) -> int:
        return self.stats.count

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def octant(self, x) -> int:
        c = self.center
        return (4 if x[0] > c[0] else 0) | (2 if x[1] > c[1] else 0) | (1 if x[2] > c[2] else 0)

    def child_center(self, ci: int) -> np.ndarray:
        q = self.half / 2.0
        off = np.array([q if ci & 4 else -q, q if ci & 2 else -q, q if ci & 1 else -q])
        return self.center + off

    def eigensystem(self) -> EigenSystem3:
        if self._eig is None:
            self._eig = eig3_sym(self.stats.cov)
        return self._eig

    def _mutate_add(self, x) -> None:
        self.stats.add(x)
        self._eig = None
        self._ops += 1

    def _mutate_remove(self, x) -> None:
        self.stats.remove(x)
        self._eig = None
        self._ops += 1

    def _refit_from_points(self) -> None:
        # Guards float drift of the incremental updates on long-lived leaves.
        if self.points and self.raw_complete and len(self.points) == self.count:
            self.stats = GaussianStats.from_points(np.array([p[0] for p in self.points]))
            self._eig = None
        self._ops = 0


class QueryHit:
    """Result of a point query: the node plus whether it is mature."""

    __slots__ = ("node", "mature")

    def __init__(self, node, mature):
        self.node = node
        self.mature = mature


class BatchQuery:
    """Vectorized lookup result for a stack of points.

    ``node_index[i]`` indexes into the per-node arrays, or -1 when point i
    has no mature voxel. Eigen data is floored and ready for residuals.
    """

    __slots__ = ("node_index", "nodes", "mean", "normal", "e3_floored",
                 "creation_time")

    def __init__(self, node_index, nodes, mean, normal, e3_floored, creation_time):
        self.node_index = node_index
        self.nodes = nodes
        self.mean = mean
        self.normal = normal
        self.e3_floored = e3_floored
        self.creation_time = creation_time

    @property
    def matched(self) -> np.ndarray:
        return self.node_index >= 0

    def coverage(self) -> float:
        return float(self.matched.mean()) if len(self.node_index) else 0.0


class VoxelMap:
    """Hash-indexed grid of octrees with incremental Gaussian statistics."""

    def __init__(self, config: VoxelMapConfig | None = None):
        self.config = config or VoxelMapConfig()
        self.cells: dict[tuple[int, int, int], VoxelNode] = {}

    # -- insertion ---------------------------------------------------------

    def insert(self, x_w, intensity: float, frame_index: int) -> bool:
        """Insert one world point; returns False when a frozen plane leaf
        discarded it (the map is then unchanged)."""
        cfg = self.config
        key = voxel_key(x_w, cfg.root_size)
        x = np.asarray(x_w, dtype=float)
        root = self.cells.get(key)
        if root is None:
            center = (np.array(key, dtype=float) + 0.5) * cfg.root_size
            root = VoxelNode(0, center, cfg.root_size / 2.0, frame_index)
            self.cells[key] = root
        node = root
        path = [root]
        while node.children is not None:
            ci = node.octant(x)
            child = node.children[ci]
            if child is None:
                child = VoxelNode(node.depth + 1, node.child_center(ci),
                                  node.half / 2.0, frame_index)
                node.children[ci] = child
            node = child
            path.append(node)
        if node.is_plane:
            return False
        for n in path:
            n._mutate_add(x)
        node.points.append((x.copy(), float(intensity), int(frame_index)))
        self._classify(node)
        if node._ops >= cfg.recompute_interval:
            node._refit_from_points()
        return True

    def insert_frame(self, points_w: np.ndarray, intensities, frame_index: int) -> np.ndarray:
        """Insert a whole frame; returns the per-point absorbed mask."""
        points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
        intensities = np.broadcast_to(np.asarray(intensities, dtype=float),
                                      (points_w.shape[0],))
        mask = np.zeros(points_w.shape[0], dtype=bool)
        for i in range(points_w.shape[0]):
            mask[i] = self.insert(points_w[i], intensities[i], frame_index)
        return mask

    def _classify(self, leaf: VoxelNode) -> None:
        cfg = self.config
        if leaf.is_plane or leaf.count < cfg.min_points_for_fit:
            return
        e1, e2, e3 = leaf.eigensystem().values
        if e1 > 0 and e3 / e1 < cfg.sigma_d and e2 / e1 > cfg.sigma_s:
            leaf.is_plane = True
            leaf.points = []
            leaf.raw_complete = False
            return
        if leaf.depth >= cfg.max_depth or not leaf.raw_complete:
            return
        # Subdivide and push the retained points one level down.
        leaf.children = [None] * 8
        pts = leaf.points
        leaf.points = []
        leaf.raw_complete = False
        for x, u, f in pts:
            ci = leaf.octant(x)
            child = leaf.children[ci]
            if child is None:
                child = VoxelNode(leaf.depth + 1, leaf.child_center(ci),
                                  leaf.half / 2.0, f)
                leaf.children[ci] = child
            child._mutate_add(x)
            child.points.append((x, u, f))
        for child in leaf.children:
            if child is not None:
                self._classify(child)

    # -- removal -----------------------------------------------------------

    def remove(self, x_w_old) -> None:
        """Remove a previously inserted point by its old world position."""
        cfg = self.config
        key = voxel_key(x_w_old, cfg.root_size)
        root = self.cells.get(key)
        if root is None:
            raise MissingVoxel(f"no root cell at {key}")
        x = np.asarray(x_w_old, dtype=float)
        node = root
        path = [root]
        while node.children is not None:
            child = node.children[node.octant(x)]
            if child is None:
                raise MissingVoxel("no populated child contains the point")
            node = child
            path.append(node)
        if node.count == 0:
            raise MissingVoxel("leaf is empty")
        point_idx = -1
        if node.raw_complete:
            point_idx = self._match_retained(node, x)
            if point_idx < 0:
                raise MissingVoxel("point not found among retained leaf points")
        for n in path:
            n._mutate_remove(x)
        if point_idx >= 0:
            node.points.pop(point_idx)
        if node.is_plane and node.count >= cfg.min_points_for_fit:
            e1, e2, e3 = node.eigensystem().values
            if not (e1 > 0 and e3 / e1 < cfg.sigma_d and e2 / e1 > cfg.sigma_s):
                node.is_plane = False  # declassified; raw points are gone
        elif node.is_plane and node.count < cfg.min_points_for_fit and node.count > 0:
            node.is_plane = False
        self._prune(key, path)

    def remove_frame(self, points_w: np.ndarray, mask=None) -> list[int]:
        """Remove many points; returns indices that raised MissingVoxel."""
        points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
        missing = []
        for i in range(points_w.shape[0]):
            if mask is not None and not mask[i]:
                continue
            try:
                self.remove(points_w[i])
            except MissingVoxel:
                missing.append(i)
        return missing

    @staticmethod
    def _match_retained(node: VoxelNode, x: np.ndarray, tol: float = 1e-7) -> int:
        best, best_d = -1, tol
        for i, (p, _, _) in enumerate(node.points):
            d = abs(p[0] - x[0]) + abs(p[1] - x[1]) + abs(p[2] - x[2])
            if d < best_d:
                best, best_d = i, d
        return best

    def _prune(self, key, path) -> None:
        if path[0].count == 0:
            del self.cells[key]
            return
        for i in range(len(path) - 1, 0, -1):
            node = path[i]
            if node.count == 0:
                parent = path[i - 1]
                parent.children[parent.children.index(node)] = None

    # -- queries -----------------------------------------------------------

    def query(self, x_w) -> QueryHit | None:
        """Deepest mature node containing the point, else the deepest
        available node flagged immature, else None."""
        cfg = self.config
        try:
            key = voxel_key(x_w, cfg.root_size)
        except NonFinite:
            return None
        node = self.cells.get(key)
        if node is None:
            return None
        x = np.asarray(x_w, dtype=float)
        best = None
        while True:
            if node.count >= cfg.min_points_for_fit:
                best = node
            if node.children is None:
                deepest = node
                break
            child = node.children[node.octant(x)]
            if child is None:
                deepest = node
                break
            node = child
        if best is not None:
            return QueryHit(best, True)
        return QueryHit(deepest, False)

    def batch_query(self, points_w: np.ndarray) -> BatchQuery:
        """Vectorized :meth:`query` keeping only mature assignments.

        Immature or absent voxels appear as node_index -1. Safe to call
        concurrently with other readers.
        """
        cfg = self.config
        pts = np.asarray(points_w, dtype=float).reshape(-1, 3)
        n = pts.shape[0]
        node_index = np.full(n, -1, dtype=np.int64)
        nodes: list[VoxelNode] = []
        node_ids: dict[int, int] = {}

        def register(node) -> int:
            nid = node_ids.get(id(node))
            if nid is None:
                nid = len(nodes)
                node_ids[id(node)] = nid
                nodes.append(node)
            return nid

        def visit(node, idx):
            if node.count >= cfg.min_points_for_fit:
                node_index[idx] = register(node)
            if node.children is None:
                return
            sub = pts[idx]
            c = node.center
            octs = ((sub[:, 0] > c[0]).astype(np.int8) * 4
                    + (sub[:, 1] > c[1]).astype(np.int8) * 2
                    + (sub[:, 2] > c[2]).astype(np.int8))
            for ci in range(8):
                child = node.children[ci]
                if child is None:
                    continue
                m = octs == ci
                if m.any():
                    visit(child, idx[m])

        if n:
            keys = np.floor(pts / cfg.root_size).astype(np.int64)
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            for ui in range(uniq.shape[0]):
                root = self.cells.get((int(uniq[ui, 0]), int(uniq[ui, 1]), int(uniq[ui, 2])))
                if root is None:
                    continue
                visit(root, np.nonzero(inverse == ui)[0])

        m = len(nodes)
        mean = np.zeros((m, 3))
        normal = np.zeros((m, 3))
        e3f = np.zeros(m)
        created = np.zeros(m, dtype=np.int64)
        for i, node in enumerate(nodes):
            es = node.eigensystem()
            mean[i] = node.stats.mean
            normal[i] = es.normal
            e3f[i] = max(es.values[2], cfg.eig_floor)
            created[i] = node.creation_time
        return BatchQuery(node_index, nodes, mean, normal, e3f, created)

    # -- inspection --------------------------------------------------------

    def leaves(self):
        """Yield (key, path string, node) for every leaf, sorted."""
        for key in sorted(self.cells):
            stack = [("", self.cells[key])]
            while stack:
                prefix, node = stack.pop()
                if node.children is None:
                    yield key, prefix, node
                    continue
                for ci in range(7, -1, -1):
                    child = node.children[ci]
                    if child is not None:
                        stack.append((prefix + str(ci), child))

    def node_count(self) -> int:
        total = 0
        for key in self.cells:
            stack = [self.cells[key]]
            while stack:
                node = stack.pop()
                total += 1
                if node.children is not None:
                    stack.extend(c for c in node.children if c is not None)
        return total

    def total_points(self) -> int:
        return sum(root.count for root in self.cells.values())

    def mature_leaf_count(self) -> int:
        return sum(1 for _, _, n in self.leaves()
                   if n.count >= self.config.min_points_for_fit)

    def dump(self, stream) -> None:
        """One line per leaf: key path, count, mean, covariance (upper
        triangle), plane flag, creation time."""
        for key, path, node in self.leaves():
            mu = node.stats.mean
            c = node.stats.cov
            stream.write(
                "LEAF %d,%d,%d/%s count=%d mu=%.9g,%.9g,%.9g "
                "cov=%.9g,%.9g,%.9g,%.9g,%.9g,%.9g plane=%d created=%d\n"
                % (key[0], key[1], key[2], path or "-", node.count,
                   mu[0], mu[1], mu[2],
                   c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2],
                   int(node.is_plane), node.creation_time))

    def leaf_table(self) -> dict:
        """Map of (key, path) -> (count, mean, cov, is_plane) for equality
        checks against a rebuilt map."""
        return {(key, path): (node.count, node.stats.mean.copy(),
                              node.stats.cov.copy(), node.is_plane)
                for key, path, node in self.leaves()}
