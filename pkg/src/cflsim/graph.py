"""Network topologies and consensus mixing matrices.

Devices form an undirected communication graph; model aggregation is
governed by a symmetric, doubly stochastic mixing matrix built from that
graph (Metropolis weights, optionally "lazified" to (I + W) / 2).  The
second-largest eigenvalue modulus of the mixing matrix controls how fast
repeated mixing pulls the devices' models together, and feeds the
iteration-count estimate used to compare topologies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Edge = tuple[int, int]

TOPOLOGY_KINDS = ("path", "complete", "star", "grid", "custom")
MIXING_KINDS = ("metropolis", "lazy-metropolis", "uniform")


def _canonical_edge(i: int, j: int) -> Edge:
    if i == j:
        raise ValueError(f"self-loop on vertex {i}")
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class NetworkGraph:
    """Undirected device graph, optionally with one base-station vertex.

    Vertices 0..n_devices-1 are devices; when ``bs`` is set, the base
    station occupies the extra vertex index ``n_devices``.  The BS holds
    no dataset but may appear in edges (device-BS links).
    """

    n_devices: int
    edges: frozenset[Edge]
    positions: tuple[tuple[float, float], ...] | None = None
    bs: bool = False
    bs_position: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.n_devices < 1:
            raise ValueError("graph needs at least one device")
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on vertex {i}")
            if not (0 <= i < j < self.n_vertices):
                raise ValueError(f"edge ({i}, {j}) references an invalid vertex")
        if self.positions is not None and len(self.positions) != self.n_devices:
            raise ValueError(
                f"got {len(self.positions)} positions for {self.n_devices} devices"
            )
        if self.bs and self.bs_position is None and self.positions is not None:
            raise ValueError("BS vertex needs a position when devices have positions")

    @property
    def n_vertices(self) -> int:
        return self.n_devices + (1 if self.bs else 0)

    @property
    def bs_index(self) -> int | None:
        return self.n_devices if self.bs else None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> list[int]:
        out = [j for i, j in self.edges if i == v] + [i for i, j in self.edges if j == v]
        return sorted(out)

    def degree(self, v: int) -> int:
        return sum(1 for e in self.edges if v in e)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_vertices, self.n_vertices))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def position_of(self, v: int) -> tuple[float, float] | None:
        if self.bs and v == self.bs_index:
            return self.bs_position
        if self.positions is None:
            return None
        return self.positions[v]

    def device_subgraph(self) -> "NetworkGraph":
        """Drop the BS vertex and every edge incident to it."""
        if not self.bs:
            return self
        kept = frozenset(e for e in self.edges if self.n_devices not in e)
        return NetworkGraph(self.n_devices, kept, positions=self.positions)


def build_topology(
    kind: str,
    n: int,
    *,
    grid_shape: tuple[int, int] | None = None,
    edges: Iterable[Edge] | None = None,
    positions: Sequence[Sequence[float]] | None = None,
) -> NetworkGraph:
    """Construct one of the canonical device topologies.

    ``path``: chain 0-1-...-(n-1).  ``complete``: all pairs.  ``star``:
    vertex 0 is the hub.  ``grid``: r x c lattice (``grid_shape`` must
    multiply to n).  ``custom``: caller-provided edge list.
    """
    if kind not in TOPOLOGY_KINDS:
        raise ValueError(f"unknown topology kind {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")

    if kind == "path":
        es = {(i, i + 1) for i in range(n - 1)}
    elif kind == "complete":
        es = {(i, j) for i in range(n) for j in range(i + 1, n)}
    elif kind == "star":
        es = {(0, i) for i in range(1, n)}
    elif kind == "grid":
        if grid_shape is None:
            raise ValueError("grid topology needs grid_shape=(rows, cols)")
        r, c = grid_shape
        if r < 1 or c < 1 or r * c != n:
            raise ValueError(f"grid shape {r}x{c} does not match n={n}")
        es = set()
        for a in range(r):
            for b in range(c):
                v = a * c + b
                if b + 1 < c:
                    es.add((v, v + 1))
                if a + 1 < r:
                    es.add((v, v + c))
    else:  # custom
        if edges is None:
            raise ValueError("custom topology needs an edge list")
        es = {_canonical_edge(i, j) for i, j in edges}
        for i, j in es:
            if j >= n:
                raise ValueError(f"edge ({i}, {j}) references vertex >= n={n}")

    pos = None
    if positions is not None:
        pos = tuple((float(x), float(y)) for x, y in positions)
    return NetworkGraph(n, frozenset(es), positions=pos)


def with_base_station(
    g: NetworkGraph,
    position: tuple[float, float] | None = None,
    links: Iterable[int] = (),
) -> NetworkGraph:
    """Attach a BS vertex (index ``g.n_devices``) linked to ``links`` devices."""
    if g.bs:
        raise ValueError("graph already has a BS vertex")
    bs = g.n_devices
    es = set(g.edges)
    for i in links:
        if not (0 <= i < g.n_devices):
            raise ValueError(f"BS link to invalid device {i}")
        es.add((i, bs))
    pos = None if position is None else (float(position[0]), float(position[1]))
    return NetworkGraph(g.n_devices, frozenset(es), positions=g.positions,
                        bs=True, bs_position=pos)


def load_edge_list(text: str) -> NetworkGraph:
    """Parse a plain-text topology: ``i j`` edge lines, then an optional
    ``positions`` section of ``i x y`` lines (meters).  ``#`` starts a comment.
    """
    edges: set[Edge] = set()
    pos: dict[int, tuple[float, float]] = {}
    in_positions = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "positions":
            in_positions = True
            continue
        parts = line.split()
        try:
            if in_positions:
                if len(parts) != 3:
                    raise ValueError("expected 'i x y'")
                pos[int(parts[0])] = (float(parts[1]), float(parts[2]))
            else:
                if len(parts) != 2:
                    raise ValueError("expected 'i j'")
                edges.add(_canonical_edge(int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise ValueError(f"edge list line {lineno}: {exc}") from exc
    if not edges:
        raise ValueError("edge list defines no edges")
    n = max(max(e) for e in edges) + 1
    if pos and max(pos) >= n:
        n = max(pos) + 1
    positions = None
    if pos:
        missing = [i for i in range(n) if i not in pos]
        if missing:
            raise ValueError(f"positions section missing vertices {missing}")
        positions = tuple(pos[i] for i in range(n))
    return NetworkGraph(n, frozenset(edges), positions=positions)


def load_edge_list_file(path) -> NetworkGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return load_edge_list(fh.read())


def is_connected(g: NetworkGraph) -> bool:
    """True iff a single component spans every vertex (BS included)."""
    n = g.n_vertices
    if n == 1:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in g.edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if not seen[u]:
                seen[u] = True
                count += 1
                stack.append(u)
    return count == n


# ---------------------------------------------------------------------------
# Mixing matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric row-stochastic aggregation weights over the graph vertices."""

    n: int
    weights: np.ndarray = field(repr=False)
    kind: str = "metropolis"

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.n, self.n):
            raise ValueError(f"weights shape {w.shape} != ({self.n}, {self.n})")
        if self.kind not in MIXING_KINDS:
            raise ValueError(f"unknown mixing kind {self.kind!r}")
        if np.any(w < 0):
            raise ValueError("negative mixing weight")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows must sum to 1")
        if np.max(np.abs(w - w.T)) > 1e-12:
            raise ValueError("mixing matrix must be symmetric")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def apply(self, stack: np.ndarray) -> np.ndarray:
        """Mix a (n, d) stack of row vectors: returns W @ stack."""
        return self.weights @ np.asarray(stack)


def metropolis_weights(g: NetworkGraph) -> MixingMatrix:
    """Metropolis rule: w_ij = 1/(1 + max(deg_i, deg_j)) on edges,
    diagonal absorbs the remainder.  Symmetric and doubly stochastic.

    An attached BS vertex is weighted like a device of its own degree.
    """
    if not is_connected(g):
        warnings.warn("graph is disconnected; mixing will not reach consensus",
                      stacklevel=2)
    n = g.n_vertices
    deg = [g.degree(v) for v in range(n)]
    w = np.zeros((n, n))
    for i, j in g.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(n):
        w[i, i] = 1.0 - w[i].sum()
    return MixingMatrix(n, w, kind="metropolis")


def uniform_weights(g: NetworkGraph) -> MixingMatrix:
    """All-pairs averaging matrix (every entry 1/n); complete graphs only."""
    n = g.n_vertices
    if g.n_edges != n * (n - 1) // 2:
        raise ValueError("uniform weights require a complete graph")
    return MixingMatrix(n, np.full((n, n), 1.0 / n), kind="uniform")


def lazify(w: MixingMatrix) -> MixingMatrix:
    """Lazy variant (I + W) / 2: diagonal >= 1/2, eigenvalues in [0, 1]."""
    lazy = (np.eye(w.n) + w.weights) / 2.0
    return MixingMatrix(w.n, lazy, kind="lazy-metropolis")


def build_mixing(g: NetworkGraph, kind: str) -> MixingMatrix:
    if kind == "metropolis":
        return metropolis_weights(g)
    if kind == "lazy-metropolis":
        return lazify(metropolis_weights(g))
    if kind == "uniform":
        return uniform_weights(g)
    raise ValueError(f"unknown mixing kind {kind!r}")


class EigenSolverError(RuntimeError):
    """Power iteration failed to converge within its iteration cap."""


def second_eigenvalue(w: MixingMatrix, *, max_iter: int = 10_000,
                      tol: float = 1e-10) -> float:
    """Largest |eigenvalue| of W restricted to the subspace orthogonal to
    the all-ones vector.

    Computed by power iteration on B^2 where B = W - J/n deflates the known
    (1, ones/sqrt(n)) eigenpair; B^2 is positive semidefinite so iteration
    cannot oscillate between +/- eigenvalues of equal magnitude.  Equals 1
    exactly iff the graph is disconnected (for the lazy kind).
    """
    n = w.n
    if n == 1:
        return 0.0
    b = w.weights - 1.0 / n
    rng = np.random.default_rng(0)
    x = rng.standard_normal(n)
    x -= x.mean()  # project out the deflated direction
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        x = np.zeros(n)
        x[0], x[1] = 1.0, -1.0
        nrm = math.sqrt(2.0)
    x /= nrm
    lam = 0.0
    for _ in range(max_iter):
        y = b @ (b @ x)
        lam = float(x @ y)  # Rayleigh quotient for B^2
        res = np.linalg.norm(y - lam * x)
        ynrm = np.linalg.norm(y)
        if ynrm == 0.0:
            return 0.0
        x = y / ynrm
        if res <= tol:
            return math.sqrt(max(lam, 0.0))
    raise EigenSolverError(
        f"power iteration did not reach tolerance {tol} in {max_iter} iterations"
    )


def spectral_pn(w: MixingMatrix) -> float:
    """Topology constant P_n := 1 / (1 - sigma_2), the inverse spectral gap."""
    s2 = second_eigenvalue(w)
    if s2 > 1.0 - 1e-9:
        raise ValueError("spectral gap is zero (disconnected graph)")
    return 1.0 / (1.0 - s2)


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the iteration-count estimate for consensus-based training.

    g0_dist: Euclidean distance from the average initial model to the
    optimum; L: gradient bound; p_n: topology constant (inverse spectral
    gap); eps: target accuracy; c: explicit leading constant (the estimate
    is an asymptotic order, so the constant is a user knob, default 1).
    """

    g0_dist: float
    L: float
    p_n: float
    eps: float
    c: float = 1.0

    def __post_init__(self) -> None:
        if self.g0_dist < 0 or self.L < 0 or self.p_n < 0:
            raise ValueError("g0_dist, L and p_n must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")


def iteration_bound(p: BoundParams) -> int:
    """Estimated iterations to converge: ceil(c * max(g0^4, L^4 * P_n^2) / eps^2),
    clamped to at least one iteration."""
    raw = p.c * max(p.g0_dist ** 4, p.L ** 4 * p.p_n ** 2) / p.eps ** 2
    return max(1, math.ceil(raw))
