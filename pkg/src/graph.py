import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import DimensionError, IngestionError
from src.numerics import SupportIndex

DistanceRecord = Tuple[str, str, float]


@dataclass(frozen=True, eq=False)
class NeighborSets:
    """NB(i) = {j | E[i, j] = 1} U {i}, each list in ascending vertex order."""
    lists: Tuple[Tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.lists)

    def __getitem__(self, i: int) -> Tuple[int, ...]:
        return self.lists[i]

    @cached_property
    def support(self) -> SupportIndex:
        mask = np.zeros((self.n, self.n), dtype=bool)
        for i, nb in enumerate(self.lists):
            mask[i, list(nb)] = True
        return SupportIndex.from_mask(mask)


@dataclass(frozen=True, eq=False)
class SensorGraph:
    """
    Directed sensor graph. `adjacency` is the binary E (self-loops are not
    stored in it); `distances` keeps the raw values of the records used, NaN
    where no record exists.
    """
    adjacency: np.ndarray
    vertex_ids: Tuple[str, ...]
    distances: Optional[np.ndarray] = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] != len(self.vertex_ids):
            raise DimensionError(f"Adjacency {adj.shape} does not match {len(self.vertex_ids)} vertex ids.")
        if not np.isin(adj, (0, 1)).all():
            raise DimensionError("Adjacency entries must be 0 or 1.")

    @property
    def n(self) -> int:
        return len(self.vertex_ids)

    @property
    def edge_count(self) -> int:
        return int(np.asarray(self.adjacency).sum())

    def index_of(self, vertex_id: str) -> int:
        return self.vertex_ids.index(vertex_id)

    def edge_list(self) -> List[List[str]]:
        """Directed edges as [from_id, to_id] pairs in row-major order; self-loops are implicit."""
        return [[self.vertex_ids[i], self.vertex_ids[j]] for i, j in np.argwhere(np.asarray(self.adjacency))]

    @cached_property
    def out_neighbors(self) -> NeighborSets:
        return out_neighbor_sets(self)

    @cached_property
    def in_neighbors(self) -> NeighborSets:
        return out_neighbor_sets(transpose_graph(self))


def build_graph(distance_records: Iterable[DistanceRecord], threshold: float,
                vertex_ids: Sequence[str] = None) -> SensorGraph:
    """
    Edge i -> j iff a record (i, j, d) has d < threshold.

    Without `vertex_ids`, vertices are indexed in first-appearance order of
    the records. With `vertex_ids` (e.g. the series columns) that order is
    used, ids missing from the records stay isolated, and a record naming an
    unknown id is an ingestion error.
    """
    records = [(str(a), str(b), float(d)) for a, b, d in distance_records]

    if vertex_ids is None:
        order = {}
        for a, b, _ in records:
            order.setdefault(a, len(order))
            order.setdefault(b, len(order))
    else:
        order = {str(v): i for i, v in enumerate(vertex_ids)}
        if len(order) != len(vertex_ids):
            raise IngestionError("Duplicate sensor ids in the vertex list.")

    n = len(order)
    adjacency = np.zeros((n, n), dtype=np.int8)
    distances = np.full((n, n), np.nan)
    for a, b, d in records:
        if a not in order or b not in order:
            missing = a if a not in order else b
            raise IngestionError(f"Distance record names unknown sensor id {missing!r}.")
        if d < 0 or not np.isfinite(d):
            raise IngestionError(f"Distance {a}->{b} must be a nonnegative number, got {d}.")
        i, j = order[a], order[b]
        distances[i, j] = d
        if d < threshold:
            adjacency[i, j] = 1

    ids = tuple(sorted(order, key=order.get))
    graph = SensorGraph(adjacency=adjacency, vertex_ids=ids, distances=distances)
    isolated = int((~(adjacency.any(axis=0) | adjacency.any(axis=1))).sum())
    logging.info(f"[GRAPH] Built graph: {n} sensors | {graph.edge_count} edges (d < {threshold}) | {isolated} isolated")
    return graph


def load_distances(path) -> List[DistanceRecord]:
    """Read a `from,to,dist` CSV into distance records."""
    try:
        df = pd.read_csv(path, dtype={'from': str, 'to': str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"Cannot parse distance file: {e}", path=path) from e

    if list(df.columns[:3]) != ['from', 'to', 'dist']:
        raise IngestionError(f"Expected header 'from,to,dist', got {','.join(map(str, df.columns))}.", path=path, line=1)

    dist = pd.to_numeric(df['dist'], errors='coerce')
    bad = dist.isna() | df['from'].isna() | df['to'].isna()
    if bad.any():
        first = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError("Incomplete or non-numeric distance record.", path=path, line=first + 2)

    return list(zip(df['from'].str.strip(), df['to'].str.strip(), dist.astype(float)))


def out_neighbor_sets(g: SensorGraph) -> NeighborSets:
    adj = np.asarray(g.adjacency).astype(bool)
    lists = []
    for i in range(g.n):
        members = set(np.flatnonzero(adj[i]).tolist())
        members.add(i)
        lists.append(tuple(sorted(members)))
    return NeighborSets(tuple(lists))


def transpose_graph(g: SensorGraph) -> SensorGraph:
    distances = None if g.distances is None else np.asarray(g.distances).T.copy()
    return SensorGraph(adjacency=np.asarray(g.adjacency).T.copy(), vertex_ids=g.vertex_ids, distances=distances)


def ring_distance_records(vertex_ids: Sequence[str], forward: float = 500.0, skip: float = 2500.0,
                          backward: float = 4000.0) -> List[DistanceRecord]:
    """
    Distance records for a directed ring: short hops to the next sensor, a
    longer hop two ahead, and long return paths (pruned by a 3000 threshold).
    """
    n = len(vertex_ids)
    records = []
    for i, v in enumerate(vertex_ids):
        if n < 2:
            break
        records.append((v, vertex_ids[(i + 1) % n], forward))
        records.append((vertex_ids[(i + 1) % n], v, backward))
        if n > 3:
            records.append((v, vertex_ids[(i + 2) % n], skip))
    return records


def write_distances(records: Iterable[DistanceRecord], path) -> None:
    df = pd.DataFrame(list(records), columns=['from', 'to', 'dist'])
    df.to_csv(path, index=False, float_format='%.1f', lineterminator='\n')
