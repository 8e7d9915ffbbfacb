"""Partitioning, placement and energy accounting on a tile-based substrate.

The spiking network is cut into capacity-bounded clusters in topological
order, clusters are placed on a mesh of tiles by a greedy descending-traffic
heuristic with local swap refinement, and energy is charged per spike
(23.6 pJ) plus per routing hop (3 pJ) for spikes whose synapses cross tile
boundaries, weighted by Manhattan distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .convert import KIND_INPUT, SnnNetwork


@dataclass(frozen=True)
class TileGrid:
    rows: int = 4
    cols: int = 4
    neuron_capacity: int = 256
    synapse_capacity: int = 65536
    e_spike_pj: float = 23.6
    e_hop_pj: float = 3.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one tile")
        if self.neuron_capacity < 1 or self.synapse_capacity < 1:
            raise ValueError("capacities must be >= 1")
        if self.e_spike_pj <= 0 or self.e_hop_pj <= 0:
            raise ValueError("energy constants must be > 0")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    def coords(self, tile: int) -> tuple[int, int]:
        return divmod(tile, self.cols)

    def distance(self, a: int, b: int) -> int:
        (r1, c1), (r2, c2) = self.coords(a), self.coords(b)
        return abs(r1 - r2) + abs(c1 - c2)


def partition(net: SnnNetwork, grid: TileGrid) -> list[np.ndarray]:
    """Greedy packing in topological (id) order under both capacities.

    A cluster's synapse load counts synapses incoming to its neurons.
    Input neurons stay off-substrate (they are the stimulus).
    """
    neuron_ids = np.flatnonzero(net.kind != KIND_INPUT)
    indegree = np.asarray(
        (net.weights != 0).sum(axis=0)).reshape(-1)
    clusters: list[list[int]] = []
    cur: list[int] = []
    cur_syn = 0
    for nid in neuron_ids:
        syn = int(indegree[nid])
        if syn > grid.synapse_capacity:
            raise ValueError(f"neuron {nid} alone exceeds synapse capacity")
        if cur and (len(cur) + 1 > grid.neuron_capacity
                    or cur_syn + syn > grid.synapse_capacity):
            clusters.append(cur)
            cur, cur_syn = [], 0
        cur.append(int(nid))
        cur_syn += syn
    if cur:
        clusters.append(cur)
    if len(clusters) > grid.n_tiles:
        raise ValueError(
            f"network needs {len(clusters)} clusters but grid has {grid.n_tiles} tiles")
    return [np.asarray(c, dtype=int) for c in clusters]


def cluster_traffic(net: SnnNetwork, clusters: list[np.ndarray],
                    spike_counts: np.ndarray = None) -> np.ndarray:
    """Spike transmissions between cluster pairs.

    With per-neuron spike counts the traffic is count-weighted; without,
    each synapse counts once (structural estimate).
    """
    n = len(clusters)
    cluster_of = np.full(net.n_neurons, -1, dtype=int)
    for ci, members in enumerate(clusters):
        cluster_of[members] = ci
    coo = net.weights.tocoo()
    traffic = np.zeros((n, n))
    weight = (spike_counts[coo.row] if spike_counts is not None
              else np.ones(len(coo.row)))
    pre_c = cluster_of[coo.row]
    post_c = cluster_of[coo.col]
    valid = (pre_c >= 0) & (post_c >= 0) & (pre_c != post_c)
    np.add.at(traffic, (pre_c[valid], post_c[valid]), weight[valid])
    return traffic


@dataclass
class TileMapping:
    clusters: list  # neuron id arrays
    tiles: np.ndarray  # cluster index -> tile index
    grid: TileGrid
    traffic: np.ndarray
    cluster_of: np.ndarray = field(default=None)  # neuron id -> cluster (or -1)
    hops: np.ndarray = field(default=None, repr=False)  # per-spike hop cache

    def __post_init__(self):
        if self.cluster_of is None:
            n = int(max(int(c.max()) for c in self.clusters if len(c))) + 1
            self.cluster_of = np.full(n, -1, dtype=int)
            for ci, members in enumerate(self.clusters):
                self.cluster_of[members] = ci

    def objective(self) -> float:
        """Sum of traffic x Manhattan distance over cluster pairs."""
        total = 0.0
        for i in range(len(self.clusters)):
            for j in range(len(self.clusters)):
                if self.traffic[i, j]:
                    total += self.traffic[i, j] * self.grid.distance(
                        int(self.tiles[i]), int(self.tiles[j]))
        return total


def place(clusters: list[np.ndarray], grid: TileGrid, traffic: np.ndarray,
          refine_iters: int = 50) -> TileMapping:
    """Greedy descending-traffic placement plus local swap refinement.

    Cluster pairs are visited by descending traffic; each unplaced cluster
    takes the free tile closest to its placed partner.  Swap refinement
    accepts only strictly improving tile exchanges, so the objective never
    increases.
    """
    n = len(clusters)
    if n > grid.n_tiles:
        raise ValueError("more clusters than tiles")
    sym = traffic + traffic.T
    tiles = np.full(n, -1, dtype=int)
    free = list(range(grid.n_tiles))

    pairs = sorted(((sym[i, j], i, j) for i in range(n) for j in range(i + 1, n)
                    if sym[i, j] > 0), reverse=True)

    def take_tile(near: int = None) -> int:
        if near is None:
            tile = free[0]
        else:
            tile = min(free, key=lambda t: (grid.distance(t, near), t))
        free.remove(tile)
        return tile

    for _, i, j in pairs:
        if tiles[i] < 0 and tiles[j] < 0:
            tiles[i] = take_tile()
            tiles[j] = take_tile(near=tiles[i])
        elif tiles[i] < 0:
            tiles[i] = take_tile(near=tiles[j])
        elif tiles[j] < 0:
            tiles[j] = take_tile(near=tiles[i])
    for i in range(n):
        if tiles[i] < 0:
            tiles[i] = take_tile()

    mapping = TileMapping(clusters=clusters, tiles=tiles, grid=grid,
                          traffic=traffic)

    # pairwise swap refinement with a fixed iteration budget
    best = mapping.objective()
    for _ in range(refine_iters):
        improved = False
        for i, j in combinations(range(n), 2):
            mapping.tiles[i], mapping.tiles[j] = mapping.tiles[j], mapping.tiles[i]
            obj = mapping.objective()
            if obj < best - 1e-12:
                best = obj
                improved = True
            else:
                mapping.tiles[i], mapping.tiles[j] = mapping.tiles[j], mapping.tiles[i]
        if not improved:
            break
    return mapping


@dataclass(frozen=True)
class SpikeEnergyReport:
    spike_count: int  # S
    hop_count: float  # H, distance-weighted boundary crossings
    spike_pj: float
    hop_pj: float
    total_pj: float


def hops_per_spike(net: SnnNetwork, mapping: TileMapping) -> np.ndarray:
    """Distance-weighted inter-tile deliveries per spike of each neuron.

    One multicast packet per destination tile: distinct target tiles of a
    neuron's fan-out, each weighted by Manhattan distance from its own tile.
    Cached on the mapping (the synapse structure is immutable).
    """
    if mapping.hops is not None:
        return mapping.hops
    hops = np.zeros(net.n_neurons)
    coo = net.weights.tocoo()
    cluster_of = _padded_cluster_of(mapping, net.n_neurons)
    pre_c, post_c = cluster_of[coo.row], cluster_of[coo.col]
    valid = (pre_c >= 0) & (post_c >= 0)
    t_pre = mapping.tiles[pre_c[valid]]
    t_post = mapping.tiles[post_c[valid]]
    cross = t_pre != t_post
    pairs = np.unique(
        np.stack([coo.row[valid][cross], t_post[cross]], axis=1), axis=0)
    if len(pairs):
        pre_tiles = mapping.tiles[cluster_of[pairs[:, 0]]]
        rc_pre = np.stack(np.divmod(pre_tiles, mapping.grid.cols), axis=1)
        rc_post = np.stack(np.divmod(pairs[:, 1], mapping.grid.cols), axis=1)
        dist = np.abs(rc_pre - rc_post).sum(axis=1)
        np.add.at(hops, pairs[:, 0], dist)
    mapping.hops = hops
    return hops


def _padded_cluster_of(mapping: TileMapping, n: int) -> np.ndarray:
    c = mapping.cluster_of
    if len(c) < n:
        c = np.concatenate([c, np.full(n - len(c), -1, dtype=int)])
    return c[:n]


def energy(spike_counts: np.ndarray, mapping: TileMapping,
           grid: TileGrid, net: SnnNetwork) -> SpikeEnergyReport:
    """Exact accounting: total = S * e_spike + H * e_hop.

    spike_counts: per-neuron counts (e.g. SpikeTrace.counts).  Every neuron
    that spiked must be covered by the mapping.
    """
    spike_counts = np.asarray(spike_counts)
    cluster_of = _padded_cluster_of(mapping, len(spike_counts))
    active = np.flatnonzero(spike_counts > 0)
    unmapped = active[cluster_of[active] < 0]
    if len(unmapped):
        raise ValueError(f"trace contains unmapped neuron {int(unmapped[0])}")
    s = int(spike_counts.sum())
    hops = hops_per_spike(net, mapping)
    h = float((spike_counts * hops).sum())
    return SpikeEnergyReport(
        spike_count=s, hop_count=h,
        spike_pj=s * grid.e_spike_pj, hop_pj=h * grid.e_hop_pj,
        total_pj=s * grid.e_spike_pj + h * grid.e_hop_pj,
    )
