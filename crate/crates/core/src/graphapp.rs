//! Road graph, time-dependent edge weights, shortest routes and isochrones.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde_json::{json, Value};

use crate::geo::{GeoPoint, RoadSegment};
use crate::{Error, Result};

pub const SNAP_TOLERANCE_M: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub segment_id: String,
    pub length_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    pub nodes: Vec<GeoPoint>,
    pub edges: Vec<Edge>,
    out: Vec<Vec<usize>>,
    by_segment: BTreeMap<String, usize>,
}

impl RoadGraph {
    pub fn from_parts(nodes: Vec<GeoPoint>, edges: Vec<Edge>) -> Result<Self> {
        let mut out = vec![Vec::new(); nodes.len()];
        let mut by_segment = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            if e.from >= nodes.len() || e.to >= nodes.len() {
                return Err(Error::BadReference(format!(
                    "edge {} has a missing endpoint",
                    e.segment_id
                )));
            }
            if !(e.length_m > 0.0) {
                return Err(Error::domain(format!(
                    "segment {} has zero length",
                    e.segment_id
                )));
            }
            if by_segment.insert(e.segment_id.clone(), i).is_some() {
                return Err(Error::domain(format!(
                    "segment {} appears twice",
                    e.segment_id
                )));
            }
            out[e.from].push(i);
        }
        Ok(Self {
            nodes,
            edges,
            out,
            by_segment,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_of(&self, segment_id: &str) -> Option<usize> {
        self.by_segment.get(segment_id).copied()
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    pub fn check_node(&self, node: usize) -> Result<()> {
        if node < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::BadReference(format!(
                "node {node} does not exist (graph has {})",
                self.nodes.len()
            )))
        }
    }

    /// Weakly connected components, counted with a union-find.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            parent[a] = b;
        }
        (0..self.nodes.len())
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }
}

fn snap(nodes: &mut Vec<GeoPoint>, p: GeoPoint) -> usize {
    if let Some(i) = nodes
        .iter()
        .position(|n| n.distance_m(&p) <= SNAP_TOLERANCE_M)
    {
        return i;
    }
    nodes.push(p);
    nodes.len() - 1
}

/// One directed edge per segment; endpoints within the snap tolerance share a node.
pub fn build_graph(segments: &[RoadSegment]) -> Result<RoadGraph> {
    let mut nodes = Vec::new();
    let mut edges = Vec::with_capacity(segments.len());
    for s in segments {
        let length_m = crate::geo::polyline_length(&s.points);
        if !(length_m > 0.0) {
            return Err(Error::domain(format!("segment {} has zero length", s.id)));
        }
        let from = snap(&mut nodes, s.start());
        let to = snap(&mut nodes, s.end());
        edges.push(Edge {
            from,
            to,
            segment_id: s.id.clone(),
            length_m,
        });
    }
    RoadGraph::from_parts(nodes, edges)
}

/// Per-edge travel times for one (day, hour).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTimes {
    pub time_s: Vec<f64>,
    pub speed_kmh: Vec<f64>,
    /// Speed given to edges without a prediction: the mean over all predictions.
    pub fallback_kmh: f64,
    pub covered: usize,
    pub fallback_used: usize,
}

pub fn travel_time_s(length_m: f64, speed_kmh: f64) -> f64 {
    3.6 * length_m / speed_kmh
}

/// `predictions` holds the predicted speed per segment at the queried slot.
pub fn assign_speeds(graph: &RoadGraph, predictions: &BTreeMap<String, f64>) -> Result<EdgeTimes> {
    if predictions.is_empty() {
        return Err(Error::Config("no speed predictions for this slot".into()));
    }
    if let Some((id, v)) = predictions
        .iter()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::domain(format!("prediction for {id} is {v} km/h")));
    }
    let fallback_kmh = predictions.values().sum::<f64>() / predictions.len() as f64;
    let (mut covered, mut fallback_used) = (0, 0);
    let mut time_s = Vec::with_capacity(graph.edges.len());
    let mut speed_kmh = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let v = match predictions.get(&e.segment_id) {
            Some(v) => {
                covered += 1;
                *v
            }
            None => {
                fallback_used += 1;
                fallback_kmh
            }
        };
        speed_kmh.push(v);
        time_s.push(travel_time_s(e.length_m, v));
    }
    Ok(EdgeTimes {
        time_s,
        speed_kmh,
        fallback_kmh,
        covered,
        fallback_used,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    Length,
    Time(&'a EdgeTimes),
}

impl Metric<'_> {
    fn weight(&self, g: &RoadGraph, e: usize) -> f64 {
        match self {
            Metric::Length => g.edges[e].length_m,
            Metric::Time(t) => t.time_s[e],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub total_length_m: f64,
    /// Known when edge times were supplied.
    pub total_time_s: Option<f64>,
}

impl Route {
    pub fn from_edges(
        g: &RoadGraph,
        start: usize,
        edges: Vec<usize>,
        times: Option<&EdgeTimes>,
    ) -> Self {
        let mut nodes = vec![start];
        nodes.extend(edges.iter().map(|&e| g.edges[e].to));
        Self {
            total_length_m: edges.iter().map(|&e| g.edges[e].length_m).sum(),
            total_time_s: times.map(|t| edges.iter().map(|&e| t.time_s[e]).sum()),
            nodes,
            edges,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra: distance labels and the edge used to reach each node.
pub fn dijkstra(
    g: &RoadGraph,
    src: usize,
    metric: Metric<'_>,
) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    g.check_node(src)?;
    let mut dist = vec![f64::INFINITY; g.nodes.len()];
    let mut via = vec![None; g.nodes.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry(0.0, src));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &e in g.out_edges(u) {
            let v = g.edges[e].to;
            let nd = d + metric.weight(g, e);
            if nd < dist[v] {
                dist[v] = nd;
                via[v] = Some(e);
                heap.push(Entry(nd, v));
            }
        }
    }
    Ok((dist, via))
}

/// Minimal-weight route, or None when `dst` is unreachable.
pub fn shortest_path(
    g: &RoadGraph,
    src: usize,
    dst: usize,
    metric: Metric<'_>,
) -> Result<Option<Route>> {
    g.check_node(dst)?;
    let (dist, via) = dijkstra(g, src, metric)?;
    if dist[dst].is_infinite() {
        return Ok(None);
    }
    let mut edges = Vec::new();
    let mut at = dst;
    while at != src {
        let e = via[at].expect("reachable nodes have a predecessor");
        edges.push(e);
        at = g.edges[e].from;
    }
    edges.reverse();
    let times = match metric {
        Metric::Time(t) => Some(t),
        Metric::Length => None,
    };
    Ok(Some(Route::from_edges(g, src, edges, times)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsochroneLevel {
    pub budget_s: f64,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsochroneResult {
    pub source: usize,
    pub levels: Vec<IsochroneLevel>,
}

pub fn isochrone(
    g: &RoadGraph,
    src: usize,
    budgets_s: &[f64],
    times: &EdgeTimes,
) -> Result<IsochroneResult> {
    if budgets_s.iter().any(|b| !(*b >= 0.0)) || budgets_s.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(
            "budgets must be non-negative and strictly increasing",
        ));
    }
    let (dist, _) = dijkstra(g, src, Metric::Time(times))?;
    let levels = budgets_s
        .iter()
        .map(|&b| IsochroneLevel {
            budget_s: b,
            nodes: (0..dist.len()).filter(|&i| dist[i] <= b).collect(),
        })
        .collect();
    Ok(IsochroneResult {
        source: src,
        levels,
    })
}

fn coords(p: &GeoPoint) -> Value {
    json!([p.lon(), p.lat()])
}

pub fn route_geojson(g: &RoadGraph, route: &Route) -> Value {
    let segments: Vec<&str> = route
        .edges
        .iter()
        .map(|&e| g.edges[e].segment_id.as_str())
        .collect();
    json!({
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "geometry": {
                "type": "LineString",
                "coordinates": route.nodes.iter().map(|&n| coords(&g.nodes[n])).collect::<Vec<_>>(),
            },
            "properties": {
                "nodes": route.nodes,
                "segments": segments,
                "total_length_m": route.total_length_m,
                "total_time_s": route.total_time_s,
            },
        }],
    })
}

pub fn isochrone_geojson(g: &RoadGraph, iso: &IsochroneResult) -> Value {
    let features: Vec<Value> = iso
        .levels
        .iter()
        .map(|l| {
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "MultiPoint",
                    "coordinates": l.nodes.iter().map(|&n| coords(&g.nodes[n])).collect::<Vec<_>>(),
                },
                "properties": { "source": iso.source, "budget_s": l.budget_s, "nodes": l.nodes },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Reads back the route written by [`route_geojson`].
pub fn route_from_geojson(g: &RoadGraph, doc: &Value) -> Result<Route> {
    let props = &doc["features"][0]["properties"];
    let nodes: Vec<usize> = serde_json::from_value(props["nodes"].clone())?;
    let segments: Vec<String> = serde_json::from_value(props["segments"].clone())?;
    let edges = segments
        .iter()
        .map(|s| {
            g.edge_of(s)
                .ok_or_else(|| Error::BadReference(format!("segment {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let start = *nodes
        .first()
        .ok_or_else(|| Error::Format("route has no nodes".into()))?;
    let mut r = Route::from_edges(g, start, edges, None);
    if r.nodes != nodes {
        return Err(Error::Format("route nodes and segments disagree".into()));
    }
    r.total_time_s = props["total_time_s"].as_f64();
    Ok(r)
}
