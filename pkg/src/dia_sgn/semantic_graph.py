"""Semantic graphs over insertion-area nodes.

A 2D graph is one spatial snapshot: one node per extracted insertion area,
implicitly fully connected, with the predicted vehicle's front gap as the
reference node. A 3D graph is one sampled future: spatio-temporal edges
from the reference node to every candidate, carrying a drawn insertion
target and the candidate's insertion probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dynamic_env import (
    DIA,
    DiaFeatures,
    FEATURE_NAMES,
    RoadMap,
    SceneSnapshot,
    apply_regulatory_transform,
    dia_features,
    extract_dias,
    select_active_reference_point,
)
from .errors import DimensionMismatch, NonMonotonicTime, NoReferenceDia, OffCorridor
from .gmm import GmmParams
from .static_env import (
    DEFAULT_CORRIDOR_HALF_WIDTH,
    ReferencePoint,
    project_many,
    tangent_heading,
)

# Input scaling applied at the network boundary: distances, speeds,
# accelerations, angles. Raw magnitudes stay in the graphs themselves.
FEATURE_SCALES: Mapping[str, float] = {
    "l": 50.0,
    "theta": math.pi,
    "v_f": 15.0,
    "v_r": 15.0,
    "a_f": 5.0,
    "a_r": 5.0,
    "d_lon_f": 50.0,
    "d_lon_r": 50.0,
    "d_lat_f": 50.0,
    "d_lat_r": 50.0,
}


def feature_vector(feats: DiaFeatures, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    return np.array([getattr(feats, n) for n in names], dtype=np.float64)


def relative_node_feature(x_i, x_j) -> np.ndarray:
    """Pair feature of node j relative to node i: [x_j - x_i ; x_j].

    Accepts feature records or plain vectors; values stay in raw units.
    """
    vi = feature_vector(x_i) if isinstance(x_i, DiaFeatures) else np.asarray(x_i, dtype=np.float64)
    vj = feature_vector(x_j) if isinstance(x_j, DiaFeatures) else np.asarray(x_j, dtype=np.float64)
    if vi.shape != vj.shape:
        raise DimensionMismatch(f"feature shapes differ: {vi.shape} vs {vj.shape}")
    return np.concatenate([vj - vi, vj])


@dataclass(frozen=True)
class SemanticGraph2D:
    timestamp: float
    nodes: tuple[tuple[str, DiaFeatures], ...]
    reference_node: str
    rpt_act: ReferencePoint
    dias: tuple[DIA, ...] = ()

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(nid for nid, _ in self.nodes)

    @property
    def reference_index(self) -> int:
        return self.node_ids.index(self.reference_node)

    def features_by_id(self, node_id: str) -> DiaFeatures:
        for nid, f in self.nodes:
            if nid == node_id:
                return f
        raise KeyError(node_id)


@dataclass(frozen=True)
class Edge3D:
    i: str
    j: str
    t_i: float
    t_j: float
    y: tuple[float, float, float]
    w: float


@dataclass(frozen=True)
class SemanticGraph3D:
    base_time: float
    edges: tuple[Edge3D, ...]


def batch_dia_features(
    dias: Sequence[DIA],
    rpt_act: ReferencePoint,
    maps: RoadMap,
    *,
    w_max: float = DEFAULT_CORRIDOR_HALF_WIDTH,
) -> list[DiaFeatures]:
    """Same values as :func:`dia_features`, one projection pass per path."""
    out: list[DiaFeatures | None] = [None] * len(dias)
    by_path: dict[str, list[int]] = {}
    for i, d in enumerate(dias):
        by_path.setdefault(d.ref_path, []).append(i)
    for pid, idxs in by_path.items():
        path = maps.path(pid)
        pts = np.array(
            [dias[i].front.position for i in idxs]
            + [dias[i].rear.position for i in idxs]
            + [rpt_act.location]
        )
        s, d_lat, dist = project_many(path, pts)
        if np.any(dist[:-1] > w_max):
            bad = idxs[int(np.argmax(dist[:-1]) % len(idxs))]
            raise OffCorridor(f"boundary of {dias[bad].dia_id} off path {pid!r}")
        n = len(idxs)
        s_rpt = s[-1]
        for j, i in enumerate(idxs):
            dia = dias[i]
            d_lon_f = s_rpt - s[j]
            d_lon_r = s_rpt - s[n + j]
            center = float(np.clip(0.5 * (s[j] + s[n + j]), 0.0, path.length))
            out[i] = DiaFeatures(
                l=abs(d_lon_f - d_lon_r),
                theta=tangent_heading(path, center),
                v_f=dia.front.v,
                v_r=dia.rear.v,
                a_f=dia.front.a,
                a_r=dia.rear.a,
                d_lon_f=d_lon_f,
                d_lon_r=d_lon_r,
                d_lat_f=float(d_lat[j]),
                d_lat_r=float(d_lat[n + j]),
            )
    return out  # type: ignore[return-value]


def build_2dsg(
    scene: SceneSnapshot,
    ego: str,
    *,
    transform: bool = True,
    d_uo: float | None = None,
    d_tr: float | None = None,
) -> SemanticGraph2D:
    """Snapshot pipeline: regulatory transform, active point, extraction."""
    kw_sel = {} if d_uo is None else {"d_uo": d_uo}
    kw_tr = {} if d_tr is None else {"d_tr": d_tr}
    if transform:
        scene = apply_regulatory_transform(scene, ego, **kw_tr)
    rpt = select_active_reference_point(scene, ego, **kw_sel)
    dias = extract_dias(scene, ego, rpt)
    ego_path = scene.agent(ego).path_id
    reference = None
    for d in dias:
        if d.ref_path == ego_path:
            reference = d.dia_id
            break
    if reference is None:
        raise NoReferenceDia(f"no front insertion area for agent {ego!r}")
    feats = batch_dia_features(dias, rpt, scene.maps)
    nodes = tuple((d.dia_id, f) for d, f in zip(dias, feats))
    return SemanticGraph2D(
        timestamp=scene.timestamp,
        nodes=nodes,
        reference_node=reference,
        rpt_act=rpt,
        dias=tuple(dias),
    )


@dataclass(frozen=True, eq=False)
class GraphHistory:
    """Time-aligned feature stack for the current graph's nodes.

    Rows follow the newest graph's node order; nodes missing from an older
    frame are masked there and their hidden state starts from zero.
    """

    frames: tuple[SemanticGraph2D, ...]
    node_ids: tuple[str, ...]
    reference_index: int
    features: np.ndarray   # (T, K, F) raw feature values, zero where absent
    presence: np.ndarray   # (T, K) bool

    @property
    def current(self) -> SemanticGraph2D:
        return self.frames[-1]

    @property
    def base_time(self) -> float:
        return self.frames[-1].timestamp

    @property
    def reference_node(self) -> str:
        return self.node_ids[self.reference_index]


def history_from_graphs(
    graphs: Sequence[SemanticGraph2D], *, max_history: int = 2
) -> GraphHistory:
    """Align a time-ordered graph sequence on the newest frame's nodes."""
    if not graphs:
        raise NonMonotonicTime("empty graph sequence")
    graphs = list(graphs)[-max_history:]
    times = [g.timestamp for g in graphs]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise NonMonotonicTime(f"timestamps not strictly increasing: {times}")
    current = graphs[-1]
    ids = current.node_ids
    n_feat = len(FEATURE_NAMES)
    feats = np.zeros((len(graphs), len(ids), n_feat))
    present = np.zeros((len(graphs), len(ids)), dtype=bool)
    for t, g in enumerate(graphs):
        lookup = {nid: f for nid, f in g.nodes}
        for k, nid in enumerate(ids):
            if nid in lookup:
                feats[t, k] = feature_vector(lookup[nid])
                present[t, k] = True
    return GraphHistory(
        frames=tuple(graphs),
        node_ids=ids,
        reference_index=current.reference_index,
        features=feats,
        presence=present,
    )


def align_history(
    snapshots: Sequence[SceneSnapshot],
    ego: str,
    *,
    max_history: int = 2,
    **pipeline_kw,
) -> GraphHistory:
    graphs = [build_2dsg(s, ego, **pipeline_kw) for s in snapshots[-max_history:]]
    return history_from_graphs(graphs, max_history=max_history)


# ---------------------------------------------------------------------------
# 3D graph assembly


def assemble_3dsg(
    sg: SemanticGraph2D,
    edge_outputs: Mapping[str, tuple[GmmParams, float]],
    n_samples: int,
    rng_seed: int,
) -> list[SemanticGraph3D]:
    """Sample scene evolutions: one 3D graph per draw.

    Every candidate edge gets an insertion target drawn from its mixture;
    the time coordinate is clipped at "now" so edges never point backward.
    """
    missing = [nid for nid in sg.node_ids if nid not in edge_outputs]
    if missing:
        raise DimensionMismatch(f"edge outputs missing for candidates: {missing}")
    rng = np.random.default_rng(rng_seed)
    ref = sg.reference_node
    base = sg.timestamp
    draws: dict[str, np.ndarray] = {}
    for nid in sg.node_ids:
        gmm, _ = edge_outputs[nid]
        gmm.validate()
        draws[nid] = gmm.sample(rng, n_samples)
    out = []
    for k in range(n_samples):
        edges = []
        for nid in sg.node_ids:
            _, w = edge_outputs[nid]
            y = draws[nid][k]
            y_t = max(float(y[2]), 0.0)
            edges.append(
                Edge3D(
                    i=ref,
                    j=nid,
                    t_i=base,
                    t_j=base + y_t,
                    y=(float(y[0]), float(y[1]), y_t),
                    w=float(w),
                )
            )
        out.append(SemanticGraph3D(base_time=base, edges=tuple(edges)))
    return out


def graphs_to_json(graphs: Sequence[SemanticGraph3D]) -> str:
    """Documented export: per sample, a list of edge records."""
    payload = [
        [
            {
                "i": e.i,
                "j": e.j,
                "t_i": e.t_i,
                "t_j": e.t_j,
                "y": [e.y[0], e.y[1], e.y[2]],
                "w": e.w,
            }
            for e in g.edges
        ]
        for g in graphs
    ]
    return json.dumps(payload, sort_keys=True)
