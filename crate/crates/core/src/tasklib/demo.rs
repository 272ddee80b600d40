//! Demo task classes: shortest-route search, a synthetic face-detection
//! kernel and a record update.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::Rng;

use super::{DataStore, HookError, HookResult, RemotableTask};
use crate::codec::{self, Reader};
use crate::model::TaskClassId;

pub const FIND_ROUTE: &str = "demo/FindRoute";
pub const FACE_DETECT: &str = "demo/FaceDetect";
pub const UPDATE_INFO: &str = "demo/UpdateInfo";

pub fn all() -> Vec<Arc<dyn RemotableTask>> {
    vec![
        Arc::new(FindRoute::new()),
        Arc::new(FaceDetect::new()),
        Arc::new(UpdateInfo::new()),
    ]
}

fn class(id: &str) -> TaskClassId {
    id.parse().expect("static demo id")
}

fn hook_err(e: crate::error::Error) -> HookError {
    HookError(e.to_string())
}

// ---------------------------------------------------------------------------
// FindRoute

/// Undirected weighted graph with a source and destination node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteQuery {
    pub nodes: u32,
    pub source: u32,
    pub target: u32,
    pub edges: Vec<(u32, u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteResult {
    pub distance: u64,
    pub path: Vec<u32>,
}

const ROUTE_HEADER_BYTES: usize = 16;
const ROUTE_EDGE_BYTES: usize = 12;

impl RouteQuery {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(ROUTE_HEADER_BYTES + ROUTE_EDGE_BYTES * self.edges.len());
        codec::put_u32(&mut buf, self.nodes);
        codec::put_u32(&mut buf, self.source);
        codec::put_u32(&mut buf, self.target);
        codec::put_u32(&mut buf, self.edges.len() as u32);
        for &(u, v, w) in &self.edges {
            codec::put_u32(&mut buf, u);
            codec::put_u32(&mut buf, v);
            codec::put_u32(&mut buf, w);
        }
        buf
    }

    fn read(r: &mut Reader<'_>) -> crate::error::Result<Self> {
        let nodes = r.u32()?;
        let source = r.u32()?;
        let target = r.u32()?;
        let m = r.u32()? as usize;
        let mut edges = Vec::with_capacity(m.min(r.remaining() / ROUTE_EDGE_BYTES));
        for _ in 0..m {
            edges.push((r.u32()?, r.u32()?, r.u32()?));
        }
        Ok(RouteQuery {
            nodes,
            source,
            target,
            edges,
        })
    }

    /// Random connected graph whose encoding is close to `payload_bytes`.
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, payload_bytes: u64) -> Self {
        let edge_budget = (payload_bytes as usize).saturating_sub(ROUTE_HEADER_BYTES) / ROUTE_EDGE_BYTES;
        let nodes = (edge_budget / 4).clamp(5, 1 << 20) as u32;
        let m = edge_budget.max(nodes as usize - 1);
        let mut edges = Vec::with_capacity(m);
        // random spanning tree first so every node is reachable
        for v in 1..nodes {
            let u = rng.random_range(0..v);
            edges.push((u, v, rng.random_range(1..=100)));
        }
        while edges.len() < m {
            let u = rng.random_range(0..nodes);
            let v = rng.random_range(0..nodes);
            if u != v {
                edges.push((u, v, rng.random_range(1..=100)));
            }
        }
        let source = rng.random_range(0..nodes);
        let target = rng.random_range(0..nodes);
        RouteQuery {
            nodes,
            source,
            target,
            edges,
        }
    }
}

/// Dijkstra's algorithm over an undirected graph. Ties between equal
/// distances are settled by lower node index.
pub fn shortest_route(q: &RouteQuery) -> Option<RouteResult> {
    let n = q.nodes as usize;
    if q.source as usize >= n || q.target as usize >= n {
        return None;
    }
    let mut adj: Vec<Vec<(u32, u64)>> = vec![Vec::new(); n];
    for &(u, v, w) in &q.edges {
        if (u as usize) < n && (v as usize) < n {
            adj[u as usize].push((v, w as u64));
            adj[v as usize].push((u, w as u64));
        }
    }
    let mut dist = vec![u64::MAX; n];
    let mut prev = vec![u32::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[q.source as usize] = 0;
    heap.push(Reverse((0u64, q.source)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if d > dist[u as usize] {
            continue;
        }
        if u == q.target {
            break;
        }
        for &(v, w) in &adj[u as usize] {
            let nd = d + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                prev[v as usize] = u;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    if dist[q.target as usize] == u64::MAX {
        return None;
    }
    let mut path = vec![q.target];
    let mut cur = q.target;
    while cur != q.source {
        cur = prev[cur as usize];
        path.push(cur);
    }
    path.reverse();
    Some(RouteResult {
        distance: dist[q.target as usize],
        path,
    })
}

/// Shortest path between two graph nodes. State is the encoded
/// [`RouteQuery`]; execution appends the route.
#[derive(Debug)]
pub struct FindRoute {
    id: TaskClassId,
}

impl FindRoute {
    pub fn new() -> Self {
        FindRoute { id: class(FIND_ROUTE) }
    }

    /// Route appended by a finished execution, if any. `Some(None)` means the
    /// target was unreachable.
    pub fn decode_result(state: &[u8]) -> Option<Option<RouteResult>> {
        let mut r = Reader::new(state);
        RouteQuery::read(&mut r).ok()?;
        if r.remaining() == 0 {
            return None;
        }
        if r.u8().ok()? == 0 {
            return Some(None);
        }
        let distance = r.u64().ok()?;
        let k = r.u32().ok()? as usize;
        let mut path = Vec::with_capacity(k.min(r.remaining() / 4));
        for _ in 0..k {
            path.push(r.u32().ok()?);
        }
        Some(Some(RouteResult { distance, path }))
    }
}

impl Default for FindRoute {
    fn default() -> Self {
        FindRoute::new()
    }
}

impl RemotableTask for FindRoute {
    fn class_id(&self) -> &TaskClassId {
        &self.id
    }

    fn execution(&self, state: &mut Vec<u8>, _input: &[u8]) -> HookResult<Vec<u8>> {
        let mut r = Reader::new(state);
        let query = RouteQuery::read(&mut r).map_err(hook_err)?;
        if r.remaining() != 0 {
            return Err(HookError("route state already carries a result".into()));
        }
        match shortest_route(&query) {
            Some(route) => {
                codec::put_u8(state, 1);
                codec::put_u64(state, route.distance);
                codec::put_u32(state, route.path.len() as u32);
                for v in route.path {
                    codec::put_u32(state, v);
                }
            }
            None => codec::put_u8(state, 0),
        }
        Ok(Vec::new())
    }
}

// ---------------------------------------------------------------------------
// FaceDetect

const FACE_SAMPLES_PER_UNIT: usize = 16;

/// Deterministic filler bytes standing in for picture content.
pub fn synthetic_picture(seed: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 8);
    let mut x = seed;
    while out.len() < len {
        // splitmix64
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        out.extend_from_slice(&z.to_le_bytes());
    }
    out.truncate(len);
    out
}

/// Fixed-iteration arithmetic kernel standing in for face detection. Loads a
/// picture from the client store, reports face rectangles, and writes them
/// back under `faces/<picture>`.
#[derive(Debug)]
pub struct FaceDetect {
    id: TaskClassId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceRequest {
    pub picture_key: String,
    pub work_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceReport {
    pub faces: u32,
    pub digest: u64,
    pub notified: bool,
}

impl FaceRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        codec::put_str(&mut buf, &self.picture_key).expect("picture keys are short");
        codec::put_u64(&mut buf, self.work_units);
        buf
    }

    fn read(r: &mut Reader<'_>) -> crate::error::Result<Self> {
        Ok(FaceRequest {
            picture_key: r.str()?,
            work_units: r.u64()?,
        })
    }
}

pub fn faces_key(picture_key: &str) -> String {
    format!("faces/{picture_key}")
}

fn face_kernel(picture: &[u8], work_units: u64) -> (u32, u64) {
    let len = picture.len();
    let mut acc: u64 = 0xCBF2_9CE4_8422_2325;
    let mut idx = 0usize;
    for _ in 0..work_units {
        for _ in 0..FACE_SAMPLES_PER_UNIT {
            acc = (acc ^ picture[idx] as u64).wrapping_mul(0x0100_0000_01B3);
            idx = (idx + 4099) % len;
        }
        acc = acc.rotate_left(7);
    }
    ((acc % 5) as u32, acc)
}

impl FaceDetect {
    pub fn new() -> Self {
        FaceDetect { id: class(FACE_DETECT) }
    }

    pub fn decode_report(state: &[u8]) -> Option<FaceReport> {
        let mut r = Reader::new(state);
        FaceRequest::read(&mut r).ok()?;
        let faces = r.u32().ok()?;
        let digest = r.u64().ok()?;
        let notified = r.remaining() > 0 && r.u8().ok()? == 1;
        Some(FaceReport {
            faces,
            digest,
            notified,
        })
    }

    fn request(state: &[u8]) -> HookResult<FaceRequest> {
        FaceRequest::read(&mut Reader::new(state)).map_err(hook_err)
    }
}

impl Default for FaceDetect {
    fn default() -> Self {
        FaceDetect::new()
    }
}

impl RemotableTask for FaceDetect {
    fn class_id(&self) -> &TaskClassId {
        &self.id
    }

    fn loads_data(&self) -> bool {
        true
    }

    fn updates_data(&self) -> bool {
        true
    }

    fn load_data(&self, state: &[u8], store: &DataStore) -> HookResult<Vec<u8>> {
        let req = Self::request(state)?;
        store
            .get(&req.picture_key)
            .cloned()
            .ok_or_else(|| HookError(format!("picture `{}` not found", req.picture_key)))
    }

    fn execution(&self, state: &mut Vec<u8>, input: &[u8]) -> HookResult<Vec<u8>> {
        let req = Self::request(state)?;
        if input.is_empty() {
            return Err(HookError("empty picture".into()));
        }
        let (faces, digest) = face_kernel(input, req.work_units);
        codec::put_u32(state, faces);
        codec::put_u64(state, digest);
        let mut rects = Vec::with_capacity(faces as usize * 16);
        for i in 0..faces {
            let r = digest.rotate_left(i * 13);
            for shift in [0, 16, 32, 48] {
                codec::put_u32(&mut rects, ((r >> shift) & 0x3FF) as u32);
            }
        }
        Ok(rects)
    }

    fn update_data(&self, state: &[u8], output: &[u8], store: &mut DataStore) -> HookResult<()> {
        let req = Self::request(state)?;
        store.insert(faces_key(&req.picture_key), output.to_vec());
        Ok(())
    }

    fn post_execution(&self, state: &mut Vec<u8>) -> HookResult<()> {
        // notify the user
        codec::put_u8(state, 1);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// UpdateInfo

const CONN_OPEN: u8 = 0b001;
const WRITTEN: u8 = 0b010;
const NOTIFIED: u8 = 0b100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserInfo {
    pub name: String,
    pub phone: String,
    pub address: String,
    pub company: String,
    pub existing: bool,
}

impl UserInfo {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = vec![0u8];
        for s in [&self.name, &self.phone, &self.address, &self.company] {
            codec::put_str(&mut buf, s).expect("short field");
        }
        codec::put_u8(&mut buf, self.existing as u8);
        buf
    }
}

/// Saves user info to a database. Loads and updates no client data.
#[derive(Debug)]
pub struct UpdateInfo {
    id: TaskClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbOp {
    Insert,
    Update,
}

impl UpdateInfo {
    pub fn new() -> Self {
        UpdateInfo { id: class(UPDATE_INFO) }
    }

    /// Returns `(connection_open, written, notified, op)`.
    pub fn inspect(state: &[u8]) -> Option<(bool, bool, bool, Option<DbOp>)> {
        let flags = *state.first()?;
        let mut r = Reader::new(&state[1..]);
        for _ in 0..4 {
            r.str().ok()?;
        }
        r.u8().ok()?;
        let op = if r.remaining() > 0 {
            match r.u8().ok()? {
                0 => Some(DbOp::Insert),
                _ => Some(DbOp::Update),
            }
        } else {
            None
        };
        Some((flags & CONN_OPEN != 0, flags & WRITTEN != 0, flags & NOTIFIED != 0, op))
    }
}

impl Default for UpdateInfo {
    fn default() -> Self {
        UpdateInfo::new()
    }
}

impl RemotableTask for UpdateInfo {
    fn class_id(&self) -> &TaskClassId {
        &self.id
    }

    fn pre_execution(&self, state: &mut Vec<u8>) -> HookResult<()> {
        let flags = state.first_mut().ok_or_else(|| HookError("empty state".into()))?;
        *flags |= CONN_OPEN;
        Ok(())
    }

    fn execution(&self, state: &mut Vec<u8>, _input: &[u8]) -> HookResult<Vec<u8>> {
        if state.first().copied().unwrap_or(0) & CONN_OPEN == 0 {
            return Err(HookError("database connection is not open".into()));
        }
        let mut r = Reader::new(&state[1..]);
        for _ in 0..4 {
            r.str().map_err(hook_err)?;
        }
        let existing = r.u8().map_err(hook_err)? != 0;
        if r.remaining() != 0 {
            return Err(HookError("record already written".into()));
        }
        codec::put_u8(state, existing as u8);
        state[0] |= WRITTEN;
        Ok(Vec::new())
    }

    fn post_execution(&self, state: &mut Vec<u8>) -> HookResult<()> {
        let flags = state.first_mut().ok_or_else(|| HookError("empty state".into()))?;
        *flags = (*flags & !CONN_OPEN) | NOTIFIED;
        Ok(())
    }
}
