//! Client-side buffers for tasks waiting to be stolen.
//!
//! Tasks headed for a server are split by energy delay product into a heavy
//! buffer (H) and a light buffer (L). Servers pull work with steal
//! requests; the client never pushes. A high-performance server drains H
//! before touching L, a constrained server drains L before touching H, and
//! when every registered server is of one class they all take the oldest
//! tasks across both buffers.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PerfClass, TaskInstanceId};
use crate::profiler::TaskRecord;

pub const DEFAULT_STEAL_CAPACITY: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BufferKind {
    H,
    L,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealRequest {
    pub server_id: String,
    pub server_class: PerfClass,
    pub capacity: u32,
}

impl StealRequest {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::InvalidParameter("steal capacity must be >= 1".into()));
        }
        if self.server_class == PerfClass::Unclassified {
            return Err(Error::InvalidParameter(format!(
                "server `{}` has no performance class",
                self.server_id
            )));
        }
        Ok(())
    }
}

/// Whether both server classes are currently registered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetInfo {
    Mixed,
    SingleKind,
}

impl FleetInfo {
    pub fn from_classes<I: IntoIterator<Item = PerfClass>>(classes: I) -> Self {
        let (mut h, mut c) = (false, false);
        for class in classes {
            match class {
                PerfClass::H => h = true,
                PerfClass::C => c = true,
                PerfClass::Unclassified => {}
            }
        }
        if h && c {
            FleetInfo::Mixed
        } else {
            FleetInfo::SingleKind
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    id: TaskInstanceId,
    seq: u64,
}

/// Result of servicing one steal request, with the buffer state the policy
/// saw so that a trace auditor can re-check the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealGrant {
    pub tasks: Vec<(TaskInstanceId, BufferKind)>,
    pub fleet: FleetInfo,
    pub h_eligible_before: usize,
    pub l_eligible_before: usize,
}

impl StealGrant {
    pub fn ids(&self) -> Vec<TaskInstanceId> {
        self.tasks.iter().map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug)]
pub struct DualBuffer {
    h: VecDeque<Entry>,
    l: VecDeque<Entry>,
    edp_threshold_js: f64,
    next_seq: u64,
    queued: BTreeMap<TaskInstanceId, BufferKind>,
    in_transit: BTreeMap<TaskInstanceId, (BufferKind, u64)>,
}

impl DualBuffer {
    pub fn new(edp_threshold_js: f64) -> Result<Self> {
        let mut b = DualBuffer {
            h: VecDeque::new(),
            l: VecDeque::new(),
            edp_threshold_js: 1.0,
            next_seq: 0,
            queued: BTreeMap::new(),
            in_transit: BTreeMap::new(),
        };
        b.set_threshold(edp_threshold_js)?;
        Ok(b)
    }

    pub fn threshold(&self) -> f64 {
        self.edp_threshold_js
    }

    pub fn set_threshold(&mut self, edp_threshold_js: f64) -> Result<()> {
        if !(edp_threshold_js.is_finite() && edp_threshold_js > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "EDP threshold must be > 0, got {edp_threshold_js}"
            )));
        }
        self.edp_threshold_js = edp_threshold_js;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.h.len() + self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn buffer_len(&self, kind: BufferKind) -> usize {
        match kind {
            BufferKind::H => self.h.len(),
            BufferKind::L => self.l.len(),
        }
    }

    pub fn contains(&self, id: &TaskInstanceId) -> bool {
        self.queued.contains_key(id)
    }

    /// Ids in one buffer, head first.
    pub fn snapshot(&self, kind: BufferKind) -> Vec<TaskInstanceId> {
        let q = match kind {
            BufferKind::H => &self.h,
            BufferKind::L => &self.l,
        };
        q.iter().map(|e| e.id.clone()).collect()
    }

    /// Places a task in H when its EDP reaches the threshold, otherwise in L.
    pub fn enqueue_remotable(&mut self, id: TaskInstanceId, record: &TaskRecord) -> Result<BufferKind> {
        if self.queued.contains_key(&id) || self.in_transit.contains_key(&id) {
            return Err(Error::DuplicateTask(id.to_string()));
        }
        let kind = if record.edp() >= self.edp_threshold_js {
            BufferKind::H
        } else {
            BufferKind::L
        };
        let entry = Entry {
            id: id.clone(),
            seq: self.next_seq,
        };
        self.next_seq += 1;
        match kind {
            BufferKind::H => self.h.push_back(entry),
            BufferKind::L => self.l.push_back(entry),
        }
        self.queued.insert(id, kind);
        Ok(kind)
    }

    pub fn service_steal(&mut self, request: &StealRequest, fleet: FleetInfo) -> Result<StealGrant> {
        self.service_steal_filtered(request, fleet, |_| true)
    }

    /// Services a steal request, considering only tasks `eligible` for the
    /// requesting server. Granted tasks leave the buffers in one step and
    /// are held as in transit until confirmed or requeued.
    pub fn service_steal_filtered<F>(&mut self, request: &StealRequest, fleet: FleetInfo, eligible: F) -> Result<StealGrant>
    where
        F: Fn(&TaskInstanceId) -> bool,
    {
        request.validate()?;
        let cap = request.capacity as usize;
        let h_ok: Vec<u64> = self.h.iter().filter(|e| eligible(&e.id)).map(|e| e.seq).collect();
        let l_ok: Vec<u64> = self.l.iter().filter(|e| eligible(&e.id)).map(|e| e.seq).collect();

        let mut picks: Vec<(BufferKind, u64)> = Vec::with_capacity(cap);
        match fleet {
            FleetInfo::Mixed => {
                let (first, second) = match request.server_class {
                    PerfClass::C => ((BufferKind::L, &l_ok), (BufferKind::H, &h_ok)),
                    _ => ((BufferKind::H, &h_ok), (BufferKind::L, &l_ok)),
                };
                for (kind, seqs) in [first, second] {
                    for &seq in seqs.iter() {
                        if picks.len() == cap {
                            break;
                        }
                        picks.push((kind, seq));
                    }
                }
            }
            FleetInfo::SingleKind => {
                let (mut i, mut j) = (0, 0);
                while picks.len() < cap && (i < h_ok.len() || j < l_ok.len()) {
                    let take_h = match (h_ok.get(i), l_ok.get(j)) {
                        (Some(a), Some(b)) => a < b,
                        (Some(_), None) => true,
                        _ => false,
                    };
                    if take_h {
                        picks.push((BufferKind::H, h_ok[i]));
                        i += 1;
                    } else {
                        picks.push((BufferKind::L, l_ok[j]));
                        j += 1;
                    }
                }
            }
        }

        let mut tasks = Vec::with_capacity(picks.len());
        for (kind, seq) in picks {
            let q = match kind {
                BufferKind::H => &mut self.h,
                BufferKind::L => &mut self.l,
            };
            let pos = q.iter().position(|e| e.seq == seq).expect("picked from this buffer");
            let entry = q.remove(pos).expect("position is valid");
            self.queued.remove(&entry.id);
            self.in_transit.insert(entry.id.clone(), (kind, entry.seq));
            tasks.push((entry.id, kind));
        }
        Ok(StealGrant {
            tasks,
            fleet,
            h_eligible_before: h_ok.len(),
            l_eligible_before: l_ok.len(),
        })
    }

    /// Marks a stolen task as handed over; it can no longer be requeued.
    pub fn confirm_transferred(&mut self, id: &TaskInstanceId) -> Result<()> {
        self.in_transit
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Puts a stolen task whose transfer never started back at the head of
    /// its original buffer.
    pub fn requeue_failed(&mut self, id: &TaskInstanceId) -> Result<BufferKind> {
        let (kind, seq) = self
            .in_transit
            .remove(id)
            .ok_or_else(|| Error::NotFound(id.to_string()))?;
        let entry = Entry { id: id.clone(), seq };
        match kind {
            BufferKind::H => self.h.push_front(entry),
            BufferKind::L => self.l.push_front(entry),
        }
        self.queued.insert(id.clone(), kind);
        Ok(kind)
    }

    /// Removes the oldest queued task matching `pred` so the client can run
    /// it itself.
    pub fn take_local<F>(&mut self, pred: F) -> Option<(TaskInstanceId, BufferKind)>
    where
        F: Fn(&TaskInstanceId) -> bool,
    {
        let h = self.h.iter().position(|e| pred(&e.id));
        let l = self.l.iter().position(|e| pred(&e.id));
        let kind = match (h, l) {
            (Some(i), Some(j)) => {
                if self.h[i].seq < self.l[j].seq {
                    BufferKind::H
                } else {
                    BufferKind::L
                }
            }
            (Some(_), None) => BufferKind::H,
            (None, Some(_)) => BufferKind::L,
            (None, None) => return None,
        };
        let entry = match kind {
            BufferKind::H => self.h.remove(h.expect("found")),
            BufferKind::L => self.l.remove(l.expect("found")),
        }
        .expect("index in range");
        self.queued.remove(&entry.id);
        Some((entry.id, kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskProfile;
    use proptest::prelude::*;

    fn id(n: u64) -> TaskInstanceId {
        TaskInstanceId::new("app/T".parse().unwrap(), n)
    }

    fn rec_with_edp(edp: f64) -> TaskRecord {
        // T = 1 s so EDP == E
        TaskRecord {
            class_id: "app/T".parse().unwrap(),
            profile: TaskProfile::new(1.0, edp, 0).unwrap(),
            first_seen_s: 0.0,
            sample_count: 1,
        }
    }

    fn req(class: PerfClass, capacity: u32) -> StealRequest {
        StealRequest {
            server_id: "s".into(),
            server_class: class,
            capacity,
        }
    }

    #[test]
    fn placement_by_edp() {
        let mut b = DualBuffer::new(10.0).unwrap();
        assert_eq!(b.enqueue_remotable(id(1), &rec_with_edp(12.0)).unwrap(), BufferKind::H);
        assert_eq!(b.enqueue_remotable(id(2), &rec_with_edp(9.99)).unwrap(), BufferKind::L);
        assert_eq!(b.enqueue_remotable(id(3), &rec_with_edp(10.0)).unwrap(), BufferKind::H);
        assert!(matches!(
            b.enqueue_remotable(id(1), &rec_with_edp(1.0)),
            Err(Error::DuplicateTask(_))
        ));
        assert_eq!(b.snapshot(BufferKind::H), vec![id(1), id(3)]);
    }

    fn buffers(h: &[u64], l: &[u64]) -> DualBuffer {
        let mut b = DualBuffer::new(10.0).unwrap();
        let mut all: Vec<(u64, f64)> = h.iter().map(|&n| (n, 20.0)).chain(l.iter().map(|&n| (n, 1.0))).collect();
        all.sort_by_key(|x| x.0);
        for (n, edp) in all {
            b.enqueue_remotable(id(n), &rec_with_edp(edp)).unwrap();
        }
        b
    }

    #[test]
    fn h_server_drains_h_first() {
        let mut b = buffers(&[1, 2], &[3]);
        let g = b.service_steal(&req(PerfClass::H, 3), FleetInfo::Mixed).unwrap();
        assert_eq!(g.ids(), vec![id(1), id(2), id(3)]);
        assert!(b.is_empty());
    }

    #[test]
    fn c_server_takes_h_when_l_empty() {
        let mut b = buffers(&[1], &[]);
        let g = b.service_steal(&req(PerfClass::C, 1), FleetInfo::Mixed).unwrap();
        assert_eq!(g.ids(), vec![id(1)]);
    }

    #[test]
    fn c_server_prefers_l() {
        let mut b = buffers(&[1], &[2]);
        let g = b.service_steal(&req(PerfClass::C, 1), FleetInfo::Mixed).unwrap();
        assert_eq!(g.ids(), vec![id(2)]);
    }

    #[test]
    fn single_kind_fleet_takes_both_by_age() {
        let mut b = buffers(&[1], &[2]);
        let g = b.service_steal(&req(PerfClass::C, 2), FleetInfo::SingleKind).unwrap();
        assert_eq!(g.ids(), vec![id(1), id(2)]);
        let mut b = buffers(&[2, 4], &[1, 3]);
        let g = b.service_steal(&req(PerfClass::H, 3), FleetInfo::SingleKind).unwrap();
        assert_eq!(g.ids(), vec![id(1), id(2), id(3)]);
    }

    #[test]
    fn empty_buffers_give_empty_grant() {
        let mut b = DualBuffer::new(1.0).unwrap();
        let g = b.service_steal(&req(PerfClass::H, 4), FleetInfo::Mixed).unwrap();
        assert!(g.tasks.is_empty());
        assert!(b.service_steal(&req(PerfClass::H, 0), FleetInfo::Mixed).is_err());
    }

    #[test]
    fn eligibility_filter_skips_tasks() {
        let mut b = buffers(&[1, 2], &[3]);
        let g = b
            .service_steal_filtered(&req(PerfClass::H, 2), FleetInfo::Mixed, |t| t != &id(1))
            .unwrap();
        assert_eq!(g.ids(), vec![id(2), id(3)]);
        assert_eq!(g.h_eligible_before, 1);
        assert_eq!(b.snapshot(BufferKind::H), vec![id(1)]);
    }

    #[test]
    fn requeue_rules() {
        let mut b = buffers(&[1, 2], &[]);
        let g = b.service_steal(&req(PerfClass::H, 1), FleetInfo::Mixed).unwrap();
        assert_eq!(g.ids(), vec![id(1)]);
        assert_eq!(b.requeue_failed(&id(1)).unwrap(), BufferKind::H);
        assert_eq!(b.snapshot(BufferKind::H), vec![id(1), id(2)]);
        assert!(matches!(b.requeue_failed(&id(1)), Err(Error::NotFound(_))));

        b.service_steal(&req(PerfClass::H, 1), FleetInfo::Mixed).unwrap();
        b.confirm_transferred(&id(1)).unwrap();
        assert!(matches!(b.requeue_failed(&id(1)), Err(Error::NotFound(_))));
    }

    #[test]
    fn take_local_picks_oldest_match() {
        let mut b = buffers(&[2], &[1, 3]);
        assert_eq!(b.take_local(|_| true), Some((id(1), BufferKind::L)));
        assert_eq!(b.take_local(|t| t == &id(3)), Some((id(3), BufferKind::L)));
        assert_eq!(b.take_local(|_| false), None);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn fleet_info() {
        assert_eq!(FleetInfo::from_classes([PerfClass::H, PerfClass::C]), FleetInfo::Mixed);
        assert_eq!(FleetInfo::from_classes([PerfClass::C, PerfClass::C]), FleetInfo::SingleKind);
        assert_eq!(FleetInfo::from_classes([]), FleetInfo::SingleKind);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Enqueue(bool),
        Steal(bool, u32, bool),
        Requeue(usize),
        Confirm(usize),
        Local,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            any::<bool>().prop_map(Op::Enqueue),
            (any::<bool>(), 1u32..4, any::<bool>()).prop_map(|(h, c, m)| Op::Steal(h, c, m)),
            (0usize..8).prop_map(Op::Requeue),
            (0usize..8).prop_map(Op::Confirm),
            Just(Op::Local),
        ]
    }

    proptest! {
        // every enqueued task ends up in exactly one place, and grants obey
        // the buffer preference of the requesting class
        #[test]
        fn conservation_and_policy(ops in proptest::collection::vec(op(), 1..60)) {
            let mut b = DualBuffer::new(10.0).unwrap();
            let mut next = 0u64;
            let mut transit: Vec<TaskInstanceId> = Vec::new();
            let mut done = 0usize;
            for o in ops {
                match o {
                    Op::Enqueue(heavy) => {
                        b.enqueue_remotable(id(next), &rec_with_edp(if heavy { 20.0 } else { 1.0 })).unwrap();
                        next += 1;
                    }
                    Op::Steal(h, cap, mixed) => {
                        let class = if h { PerfClass::H } else { PerfClass::C };
                        let fleet = if mixed { FleetInfo::Mixed } else { FleetInfo::SingleKind };
                        let h_before = b.buffer_len(BufferKind::H);
                        let l_before = b.buffer_len(BufferKind::L);
                        let g = b.service_steal(&req(class, cap), fleet).unwrap();
                        prop_assert_eq!(g.tasks.len(), (cap as usize).min(h_before + l_before));
                        if mixed {
                            let (pref, pref_len) = if h { (BufferKind::H, h_before) } else { (BufferKind::L, l_before) };
                            let from_pref = g.tasks.iter().filter(|t| t.1 == pref).count();
                            if from_pref < g.tasks.len() {
                                prop_assert_eq!(from_pref, pref_len);
                            }
                        }
                        transit.extend(g.ids());
                    }
                    Op::Requeue(i) => {
                        if !transit.is_empty() {
                            let t = transit.remove(i % transit.len());
                            b.requeue_failed(&t).unwrap();
                        }
                    }
                    Op::Confirm(i) => {
                        if !transit.is_empty() {
                            let t = transit.remove(i % transit.len());
                            b.confirm_transferred(&t).unwrap();
                            done += 1;
                        }
                    }
                    Op::Local => {
                        if b.take_local(|_| true).is_some() {
                            done += 1;
                        }
                    }
                }
                prop_assert_eq!(b.len() + transit.len() + done, next as usize);
            }
        }
    }
}
