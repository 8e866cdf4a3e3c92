//! C ABI over the dynaflow library.
//!
//! Every function returns a [`DfStatus`]. On failure the message is kept per
//! thread and can be read with [`df_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dynaflow::dataset::{Slot, SynthConfig, SynthWorld};
use dynaflow::geo::{self, GeoPoint};
use dynaflow::graphapp::{self, EdgeTimes, Metric, RoadGraph};
use dynaflow::model::{load_checkpoint, Checkpoint};
use dynaflow::Error;

/// Result of every call. The usage, missing-artifact and bad-reference codes match
/// the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    Failure = 1,
    Usage = 2,
    MissingArtifact = 3,
    BadReference = 4,
    NullPointer = 5,
    Domain = 6,
    NotFound = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Usage(_) | Error::Config(_) => DfStatus::Usage,
        Error::MissingArtifact(_) => DfStatus::MissingArtifact,
        Error::BadReference(_) => DfStatus::BadReference,
        Error::Domain(_) | Error::Bounds { .. } | Error::Shape(_) => DfStatus::Domain,
        _ => DfStatus::Failure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DfStatus, String)>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            DfStatus::Panic
        }
    }
}

fn lib<T>(r: dynaflow::Result<T>) -> Result<T, (DfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DfStatus, String) {
    (DfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DfStatus, String)> {
    // SAFETY: callers pass handles obtained from this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (DfStatus, String)> {
    // SAFETY: callers pass writable storage or null.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

fn slot(day: u8, hour: u8) -> Result<Slot, (DfStatus, String)> {
    lib(Slot::new(day, hour))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn df_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: buf has len bytes and n < len.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seconds needed to cover `length_m` at `speed_kmh`.
#[no_mangle]
pub extern "C" fn df_travel_time_s(length_m: f64, speed_kmh: f64) -> f64 {
    graphapp::travel_time_s(length_m, speed_kmh)
}

/// Slippy-map tile containing a point.
///
/// # Safety
/// `x` and `y` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_latlon_to_tile(
    lat: f64,
    lon: f64,
    zoom: u8,
    x: *mut u32,
    y: *mut u32,
) -> DfStatus {
    guard(|| {
        let (x, y) = unsafe { (out(x, "x")?, out(y, "y")?) };
        let t = lib(GeoPoint::new(lat, lon).and_then(|p| geo::latlon_to_tile(p, zoom)))?;
        *x = t.x;
        *y = t.y;
        Ok(())
    })
}

/// A generated synthetic city.
pub struct DfWorld(SynthWorld);

/// Generates a synthetic city with default settings apart from the arguments.
///
/// # Safety
/// `world` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_world_new(
    grid_n: usize,
    zoom: u8,
    seed: u64,
    asymmetry: f64,
    world: *mut *mut DfWorld,
) -> DfStatus {
    guard(|| {
        let slot_out = unsafe { out(world, "world")? };
        let w = lib(SynthWorld::generate(SynthConfig {
            grid_n,
            tile_zoom: zoom,
            seed,
            direction_asymmetry: asymmetry,
            ..SynthConfig::default()
        }))?;
        *slot_out = Box::into_raw(Box::new(DfWorld(w)));
        Ok(())
    })
}

/// # Safety
/// `world` must be null or come from [`df_world_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_world_free(world: *mut DfWorld) {
    if !world.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(world) });
    }
}

/// # Safety
/// `world` must be a live handle and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_world_segment_count(
    world: *const DfWorld,
    count: *mut usize,
) -> DfStatus {
    guard(|| {
        let (w, c) = unsafe { (deref(world, "world")?, out(count, "count")?) };
        *c = w.0.segments.len();
        Ok(())
    })
}

/// # Safety
/// `world` must be a live handle and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_world_tile_count(world: *const DfWorld, count: *mut usize) -> DfStatus {
    guard(|| {
        let (w, c) = unsafe { (deref(world, "world")?, out(count, "count")?) };
        *c = w.0.tiles.len();
        Ok(())
    })
}

/// Ground-truth speed of segment `index` at (day, hour), day 0 being Monday.
///
/// # Safety
/// `world` must be a live handle and `speed_kmh` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_world_speed(
    world: *const DfWorld,
    index: usize,
    day: u8,
    hour: u8,
    speed_kmh: *mut f64,
) -> DfStatus {
    guard(|| {
        let (w, v) = unsafe { (deref(world, "world")?, out(speed_kmh, "speed_kmh")?) };
        if index >= w.0.segments.len() {
            return Err((
                DfStatus::BadReference,
                format!("segment index {index} out of range"),
            ));
        }
        *v = w.0.speed_at(index, slot(day, hour)?);
        Ok(())
    })
}

/// A road graph with optional travel times for one slot.
pub struct DfGraph {
    graph: RoadGraph,
    times: Option<EdgeTimes>,
}

/// # Safety
/// `world` must be a live handle and `graph` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_graph_from_world(
    world: *const DfWorld,
    graph: *mut *mut DfGraph,
) -> DfStatus {
    guard(|| {
        let (w, g) = unsafe { (deref(world, "world")?, out(graph, "graph")?) };
        let built = lib(graphapp::build_graph(&w.0.segments))?;
        *g = Box::into_raw(Box::new(DfGraph {
            graph: built,
            times: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_graph_free(graph: *mut DfGraph) {
    if !graph.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// # Safety
/// `graph` must be a live handle; `nodes` and `edges` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_graph_size(
    graph: *const DfGraph,
    nodes: *mut usize,
    edges: *mut usize,
) -> DfStatus {
    guard(|| {
        let (g, n, e) = unsafe {
            (
                deref(graph, "graph")?,
                out(nodes, "nodes")?,
                out(edges, "edges")?,
            )
        };
        *n = g.graph.node_count();
        *e = g.graph.edges.len();
        Ok(())
    })
}

/// Sets travel times from the world's true speeds at (day, hour).
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn df_graph_use_world_speeds(
    graph: *mut DfGraph,
    world: *const DfWorld,
    day: u8,
    hour: u8,
) -> DfStatus {
    guard(|| {
        let (g, w) = unsafe { (out(graph, "graph")?, deref(world, "world")?) };
        let s = slot(day, hour)?;
        let preds: BTreeMap<String, f64> =
            w.0.segments
                .iter()
                .enumerate()
                .map(|(i, seg)| (seg.id.clone(), w.0.speed_at(i, s)))
                .collect();
        g.times = Some(lib(graphapp::assign_speeds(&g.graph, &preds))?);
        Ok(())
    })
}

/// Sets travel times from `n` (segment id, km/h) pairs; uncovered edges get the mean.
///
/// # Safety
/// `graph` must be live; `ids` and `speeds_kmh` must each hold `n` valid entries,
/// every id a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn df_graph_set_speeds(
    graph: *mut DfGraph,
    ids: *const *const c_char,
    speeds_kmh: *const f64,
    n: usize,
) -> DfStatus {
    guard(|| {
        let g = unsafe { out(graph, "graph")? };
        if n > 0 && (ids.is_null() || speeds_kmh.is_null()) {
            return Err(null("ids or speeds_kmh"));
        }
        let mut preds = BTreeMap::new();
        for i in 0..n {
            // SAFETY: the caller guarantees n entries.
            let (id, v) = unsafe { (*ids.add(i), *speeds_kmh.add(i)) };
            if id.is_null() {
                return Err(null("segment id"));
            }
            // SAFETY: NUL-terminated per the contract.
            let id = unsafe { CStr::from_ptr(id) }
                .to_str()
                .map_err(|_| (DfStatus::Usage, "segment id is not UTF-8".to_string()))?;
            preds.insert(id.to_owned(), v);
        }
        g.times = Some(lib(graphapp::assign_speeds(&g.graph, &preds))?);
        Ok(())
    })
}

fn times(g: &DfGraph) -> Result<&EdgeTimes, (DfStatus, String)> {
    g.times.as_ref().ok_or_else(|| {
        (
            DfStatus::Usage,
            "no speeds assigned to the graph".to_string(),
        )
    })
}

/// Shortest route by travel time (`by_time` non-zero) or by length. Returns
/// `DfStatus::NotFound` when `dst` is unreachable.
///
/// # Safety
/// `graph` must be live; `time_s`, `length_m` and `hops` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_graph_route(
    graph: *const DfGraph,
    src: usize,
    dst: usize,
    by_time: bool,
    time_s: *mut f64,
    length_m: *mut f64,
    hops: *mut usize,
) -> DfStatus {
    guard(|| {
        let g = unsafe { deref(graph, "graph")? };
        let (t_out, l_out, h_out) = unsafe {
            (
                out(time_s, "time_s")?,
                out(length_m, "length_m")?,
                out(hops, "hops")?,
            )
        };
        let t = times(g)?;
        let metric = if by_time {
            Metric::Time(t)
        } else {
            Metric::Length
        };
        let r = lib(graphapp::shortest_path(&g.graph, src, dst, metric))?.ok_or_else(|| {
            (
                DfStatus::NotFound,
                format!("node {dst} is unreachable from {src}"),
            )
        })?;
        let r = graphapp::Route::from_edges(&g.graph, src, r.edges, Some(t));
        *t_out = r.total_time_s.unwrap_or(f64::NAN);
        *l_out = r.total_length_m;
        *h_out = r.edges.len();
        Ok(())
    })
}

/// Number of nodes reachable from `src` within `budget_s` seconds.
///
/// # Safety
/// `graph` must be live and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_graph_reachable(
    graph: *const DfGraph,
    src: usize,
    budget_s: f64,
    count: *mut usize,
) -> DfStatus {
    guard(|| {
        let (g, c) = unsafe { (deref(graph, "graph")?, out(count, "count")?) };
        let iso = lib(graphapp::isochrone(&g.graph, src, &[budget_s], times(g)?))?;
        *c = iso.levels[0].nodes.len();
        Ok(())
    })
}

/// A loaded checkpoint.
pub struct DfCheckpoint(Checkpoint);

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `ckpt` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_load(
    path: *const c_char,
    ckpt: *mut *mut DfCheckpoint,
) -> DfStatus {
    guard(|| {
        let o = unsafe { out(ckpt, "ckpt")? };
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: NUL-terminated per the contract.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (DfStatus::Usage, "path is not UTF-8".to_string()))?;
        let c = lib(load_checkpoint(Path::new(p)))?;
        *o = Box::into_raw(Box::new(DfCheckpoint(c)));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be null or come from [`df_checkpoint_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_free(ckpt: *mut DfCheckpoint) {
    if !ckpt.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(ckpt) });
    }
}

/// Trainable scalar count of a network checkpoint; zero for an oracle.
///
/// # Safety
/// `ckpt` must be live and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_param_count(
    ckpt: *const DfCheckpoint,
    count: *mut usize,
) -> DfStatus {
    guard(|| {
        let (c, n) = unsafe { (deref(ckpt, "ckpt")?, out(count, "count")?) };
        *n = match &c.0 {
            Checkpoint::Network(m) => m
                .params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| p.value.len())
                .sum(),
            Checkpoint::Oracle(_) => 0,
        };
        Ok(())
    })
}
