"""Scene-graph data model, JSONL interchange, validation, statistics and DOT export."""
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import entropy

from src.errors import SceneDataError

logger = logging.getLogger(__name__)


def normalize_label(text):
    """Trim whitespace and lowercase an entity or predicate label."""
    if not isinstance(text, str):
        raise SceneDataError(f"label must be text, got {type(text).__name__}")
    return " ".join(text.split()).lower()


def decode_line(raw, line_no):
    """One JSONL line as text; undecodable bytes are reported with their line."""
    if not isinstance(raw, bytes):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SceneDataError(f"invalid UTF-8 ({exc.reason})", line=line_no) from exc


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    label: str


@dataclass(frozen=True)
class EdgeRecord:
    src: int
    dst: int
    predicate: str


@dataclass(frozen=True)
class SceneGraph:
    scene_id: str
    nodes: Tuple[NodeRecord, ...]
    edges: Tuple[EdgeRecord, ...]
    city: Optional[str] = None

    @property
    def node_count(self):
        return len(self.nodes)

    @property
    def edge_count(self):
        return len(self.edges)

    def node_index(self):
        """Map node_id to row position in the node list."""
        return {node.node_id: i for i, node in enumerate(self.nodes)}


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    distinct_node_labels: int
    distinct_predicates: int
    label_entropy: float


@dataclass
class ValidationReport:
    scene_id: str
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors


def make_graph(scene_id, nodes, edges, city=None):
    """Build a SceneGraph from plain (id, label) and (src, dst, predicate) tuples."""
    return SceneGraph(
        scene_id=str(scene_id),
        nodes=tuple(NodeRecord(int(i), normalize_label(label)) for i, label in nodes),
        edges=tuple(EdgeRecord(int(s), int(d), normalize_label(p)) for s, d, p in edges),
        city=city,
    )


def validate_graph(g):
    """Check SceneGraph invariants; self-loops and edgeless scenes only warn."""
    report = ValidationReport(scene_id=g.scene_id)
    if not g.nodes:
        report.errors.append("scene has no nodes")

    seen = set()
    for node in g.nodes:
        if isinstance(node.node_id, bool) or not isinstance(node.node_id, (int, np.integer)) or node.node_id < 0:
            report.errors.append(f"node id {node.node_id!r} is not a non-negative integer")
        elif node.node_id in seen:
            report.errors.append(f"duplicate node id {node.node_id}")
        seen.add(node.node_id)
        if not node.label or not node.label.strip():
            report.errors.append(f"node {node.node_id} has an empty label")

    for k, edge in enumerate(g.edges):
        for endpoint in (edge.src, edge.dst):
            if isinstance(endpoint, bool) or endpoint not in seen:
                report.errors.append(f"edge {k}: dangling endpoint {endpoint}")
        if not edge.predicate or not edge.predicate.strip():
            report.errors.append(f"edge {k}: empty predicate")
        if edge.src == edge.dst:
            report.warnings.append(f"edge {k}: self-loop on node {edge.src}")

    if g.nodes and not g.edges:
        report.warnings.append("scene has no edges")
    return report


def from_triplets(scene_id, triplets, city=None):
    """Build a scene from (subject, predicate, object, subject_instance, object_instance) tuples."""
    if not triplets:
        raise SceneDataError("cannot build a scene from an empty triplet list", scene_id=scene_id)

    ids = {}
    nodes = []
    edges = []

    def node_for(text, instance):
        key = (normalize_label(text), instance)
        if key not in ids:
            ids[key] = len(nodes)
            nodes.append(NodeRecord(ids[key], key[0]))
        return ids[key]

    for subject, predicate, obj, subject_instance, object_instance in triplets:
        src = node_for(subject, subject_instance)
        dst = node_for(obj, object_instance)
        edges.append(EdgeRecord(src, dst, normalize_label(predicate)))

    g = SceneGraph(scene_id=str(scene_id), nodes=tuple(nodes), edges=tuple(edges), city=city)
    report = validate_graph(g)
    if not report.ok:
        raise SceneDataError("; ".join(report.errors), scene_id=scene_id)
    return g


def _graph_from_record(record, line_no):
    if not isinstance(record, dict):
        raise SceneDataError("expected a JSON object", line=line_no)
    try:
        scene_id = record["scene_id"]
        node_items = record["nodes"]
        edge_items = record.get("edges", [])
    except KeyError as exc:
        raise SceneDataError(f"missing field {exc.args[0]!r}", line=line_no) from exc
    if not isinstance(scene_id, str) or not scene_id:
        raise SceneDataError("scene_id must be a non-empty string", line=line_no)

    try:
        nodes = tuple(NodeRecord(n["id"], normalize_label(n["label"])) for n in node_items)
        edges = tuple(
            EdgeRecord(e["src"], e["dst"], normalize_label(e["predicate"])) for e in edge_items
        )
    except (KeyError, TypeError) as exc:
        raise SceneDataError(f"scene {scene_id}: malformed node or edge ({exc})",
                             line=line_no, scene_id=scene_id) from exc

    city = record.get("city")
    return SceneGraph(scene_id=scene_id, nodes=nodes, edges=edges, city=city)


def parse_scene_jsonl(stream):
    """Parse a byte (or text) stream of scene JSONL into validated SceneGraphs."""
    graphs = []
    seen = set()
    for line_no, raw in enumerate(stream, start=1):
        line = decode_line(raw, line_no)
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneDataError(f"malformed JSON ({exc.msg})", line=line_no) from exc

        g = _graph_from_record(record, line_no)
        if g.scene_id in seen:
            raise SceneDataError(f"duplicate scene_id {g.scene_id!r}", line=line_no, scene_id=g.scene_id)
        seen.add(g.scene_id)

        report = validate_graph(g)
        if not report.ok:
            raise SceneDataError(f"scene {g.scene_id}: " + "; ".join(report.errors),
                                 line=line_no, scene_id=g.scene_id)
        for warning in report.warnings:
            logger.warning("scene %s: %s", g.scene_id, warning)
        graphs.append(g)

    logger.info("Parsed %d scenes", len(graphs))
    return graphs


def serialize_scene_jsonl(graphs):
    """Render scenes as JSONL text; parse_scene_jsonl inverts it."""
    lines = []
    for g in graphs:
        record = {"scene_id": g.scene_id}
        if g.city is not None:
            record["city"] = g.city
        record["nodes"] = [{"id": n.node_id, "label": n.label} for n in g.nodes]
        record["edges"] = [{"src": e.src, "dst": e.dst, "predicate": e.predicate} for e in g.edges]
        lines.append(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def graph_stats(g):
    """Count nodes, edges, label variety and node-label entropy (nats)."""
    labels = [n.label for n in g.nodes]
    _, counts = np.unique(labels, return_counts=True)
    label_entropy = float(entropy(counts)) if len(counts) > 1 else 0.0
    return GraphStats(
        node_count=len(g.nodes),
        edge_count=len(g.edges),
        distinct_node_labels=len(counts),
        distinct_predicates=len({e.predicate for e in g.edges}),
        label_entropy=label_entropy,
    )


def motifs(g):
    """Distinct (subject label, predicate, object label) keys present in a scene."""
    labels = {n.node_id: n.label for n in g.nodes}
    return {(labels[e.src], e.predicate, labels[e.dst]) for e in g.edges}


def repeated_relation_share(g):
    """Fraction of edges whose motif key already occurred earlier in the scene."""
    if not g.edges:
        return 0.0
    labels = {n.node_id: n.label for n in g.nodes}
    keys = [(labels[e.src], e.predicate, labels[e.dst]) for e in g.edges]
    return 1.0 - len(set(keys)) / len(keys)


def permute_graph(g, perm):
    """Relabel node ids by perm (old id -> perm[old]) and reorder nodes by the new ids."""
    mapping = {n.node_id: int(perm[i]) for i, n in enumerate(g.nodes)}
    nodes = sorted((NodeRecord(mapping[n.node_id], n.label) for n in g.nodes), key=lambda n: n.node_id)
    edges = tuple(EdgeRecord(mapping[e.src], mapping[e.dst], e.predicate) for e in g.edges)
    return SceneGraph(scene_id=g.scene_id, nodes=tuple(nodes), edges=edges, city=g.city)


def _quote(text):
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(g):
    """Render a scene as a DOT digraph thumbnail."""
    lines = [f"digraph {_quote(g.scene_id)} {{"]
    for node in sorted(g.nodes, key=lambda n: n.node_id):
        lines.append(f"  {node.node_id} [label={_quote(node.label)}];")
    for edge in g.edges:
        lines.append(f"  {edge.src} -> {edge.dst} [label={_quote(edge.predicate)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
