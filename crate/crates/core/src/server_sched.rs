//! Server-side queue ordered by highest response ratio next (HRRN), and
//! the workload test that decides when a server asks for more work.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskInstanceId;

pub const DEFAULT_LOW_WATERMARK: usize = 1;
pub const DEFAULT_STEAL_BACKOFF_S: f64 = 0.1;
pub const MAX_STEAL_BACKOFF_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrrnEntry {
    pub instance: TaskInstanceId,
    pub arrival_s: f64,
    pub est_run_s: f64,
}

/// `(waiting + estimated run time) / estimated run time`.
pub fn hrrn_priority(entry: &HrrnEntry, now_s: f64) -> Result<f64> {
    if !(entry.est_run_s.is_finite() && entry.est_run_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "estimated run time must be finite and > 0, got {}",
            entry.est_run_s
        )));
    }
    if now_s < entry.arrival_s {
        return Err(Error::InvalidParameter(format!(
            "now ({now_s}) is before arrival ({})",
            entry.arrival_s
        )));
    }
    Ok(((now_s - entry.arrival_s) + entry.est_run_s) / entry.est_run_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerQueueState {
    queue: Vec<HrrnEntry>,
    running: Option<TaskInstanceId>,
    pub low_watermark: usize,
}

impl ServerQueueState {
    pub fn new(low_watermark: usize) -> Self {
        ServerQueueState {
            queue: Vec::new(),
            running: None,
            low_watermark,
        }
    }

    pub fn queue(&self) -> &[HrrnEntry] {
        &self.queue
    }

    pub fn running(&self) -> Option<&TaskInstanceId> {
        self.running.as_ref()
    }

    pub fn load(&self) -> usize {
        self.queue.len() + usize::from(self.running.is_some())
    }

    pub fn push(&mut self, entry: HrrnEntry) -> Result<()> {
        if !(entry.est_run_s.is_finite() && entry.est_run_s > 0.0) {
            return Err(Error::InvalidParameter("estimated run time must be > 0".into()));
        }
        if self.running.as_ref() == Some(&entry.instance) || self.queue.iter().any(|e| e.instance == entry.instance) {
            return Err(Error::DuplicateTask(entry.instance.to_string()));
        }
        self.queue.push(entry);
        Ok(())
    }

    /// Removes and returns the queued entry with the highest response ratio.
    /// Ties go to the earlier arrival, then the smaller instance id.
    pub fn pick_next(&mut self, now_s: f64) -> Option<HrrnEntry> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.queue.iter().enumerate() {
            // entries arriving "after" now are treated as zero wait
            let p = hrrn_priority(e, now_s.max(e.arrival_s)).expect("entries are validated on push");
            let better = match best {
                None => true,
                Some((j, bp)) => {
                    let b = &self.queue[j];
                    p > bp
                        || (p == bp
                            && (e.arrival_s < b.arrival_s
                                || (e.arrival_s == b.arrival_s && e.instance < b.instance)))
                }
            };
            if better {
                best = Some((i, p));
            }
        }
        best.map(|(i, _)| self.queue.remove(i))
    }

    pub fn set_running(&mut self, id: Option<TaskInstanceId>) {
        self.running = id;
    }

    pub fn remove(&mut self, id: &TaskInstanceId) -> bool {
        let before = self.queue.len();
        self.queue.retain(|e| &e.instance != id);
        before != self.queue.len()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
        self.running = None;
    }

    /// True when the server's load is at or below its low watermark.
    pub fn should_steal(&self) -> bool {
        self.load() <= self.low_watermark
    }
}

/// Delay before re-asking a client that had nothing to give: starts at the
/// initial delay, doubles on each empty answer, capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StealBackoff {
    initial_s: f64,
    cap_s: f64,
    current_s: f64,
}

impl Default for StealBackoff {
    fn default() -> Self {
        StealBackoff::new(DEFAULT_STEAL_BACKOFF_S, MAX_STEAL_BACKOFF_S)
    }
}

impl StealBackoff {
    pub fn new(initial_s: f64, cap_s: f64) -> Self {
        StealBackoff {
            initial_s,
            cap_s,
            current_s: initial_s,
        }
    }

    pub fn next_delay(&mut self) -> f64 {
        let d = self.current_s;
        self.current_s = (self.current_s * 2.0).min(self.cap_s);
        d
    }

    pub fn reset(&mut self) {
        self.current_s = self.initial_s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(n: u64) -> TaskInstanceId {
        TaskInstanceId::new("app/T".parse().unwrap(), n)
    }

    fn entry(n: u64, arrival: f64, est: f64) -> HrrnEntry {
        HrrnEntry {
            instance: id(n),
            arrival_s: arrival,
            est_run_s: est,
        }
    }

    #[test]
    fn priority_examples() {
        assert_eq!(hrrn_priority(&entry(0, 0.0, 4.0), 0.0).unwrap(), 1.0);
        assert_eq!(hrrn_priority(&entry(0, 0.0, 4.0), 4.0).unwrap(), 2.0);
        assert_eq!(hrrn_priority(&entry(0, 1.0, 3.0), 10.0).unwrap(), 4.0);
        assert!(hrrn_priority(&entry(0, 0.0, 0.0), 1.0).is_err());
        assert!(hrrn_priority(&entry(0, 0.0, -1.0), 1.0).is_err());
        assert!(hrrn_priority(&entry(0, 2.0, 1.0), 1.0).is_err());
    }

    #[test]
    fn shorter_job_wins_on_equal_wait() {
        let mut s = ServerQueueState::new(1);
        s.push(entry(1, 0.0, 8.0)).unwrap();
        s.push(entry(2, 0.0, 2.0)).unwrap();
        assert_eq!(s.pick_next(1.0).unwrap().instance, id(2));
    }

    #[test]
    fn long_wait_beats_short_job() {
        // short job has waited 2 s on a 2 s estimate: ratio 2.
        // long job ratio (w + 8) / 8 reaches 2 at w = 8, where the earlier
        // arrival wins the tie.
        for (w, expect_long) in [(7.0, false), (8.0, true), (8.5, true), (20.0, true)] {
            let mut s = ServerQueueState::new(1);
            s.push(entry(1, 0.0, 8.0)).unwrap();
            s.push(entry(2, w - 2.0, 2.0)).unwrap();
            let picked = s.pick_next(w).unwrap().instance;
            assert_eq!(picked == id(1), expect_long, "w = {w}");
        }
    }

    #[test]
    fn empty_queue_and_ties() {
        let mut s = ServerQueueState::new(1);
        assert!(s.pick_next(0.0).is_none());
        s.push(entry(5, 1.0, 2.0)).unwrap();
        s.push(entry(3, 1.0, 2.0)).unwrap();
        s.push(entry(4, 0.5, 1.0)).unwrap();
        // at t=1.5: id4 = 1.5, ids 5 and 3 = 1.25
        assert_eq!(s.pick_next(1.5).unwrap().instance, id(4));
        assert_eq!(s.pick_next(1.5).unwrap().instance, id(3));
        assert!(matches!(s.push(entry(5, 2.0, 1.0)), Err(Error::DuplicateTask(_))));
    }

    #[test]
    fn should_steal_examples() {
        let mut s = ServerQueueState::new(1);
        assert!(s.should_steal());
        s.set_running(Some(id(1)));
        s.push(entry(2, 0.0, 1.0)).unwrap();
        assert!(!s.should_steal());
        let s = ServerQueueState::new(0);
        assert!(s.should_steal());
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = StealBackoff::default();
        let delays: Vec<f64> = (0..7).map(|_| b.next_delay()).collect();
        assert_eq!(delays, vec![0.1, 0.2, 0.4, 0.8, 1.6, 2.0, 2.0]);
        b.reset();
        assert_eq!(b.next_delay(), 0.1);
    }

    proptest! {
        #[test]
        fn adding_work_never_enables_stealing(wm in 0usize..4, n in 0usize..6, running in any::<bool>()) {
            let mut s = ServerQueueState::new(wm);
            if running { s.set_running(Some(id(999))); }
            for i in 0..n { s.push(entry(i as u64, 0.0, 1.0)).unwrap(); }
            let before = s.should_steal();
            s.push(entry(100, 0.0, 1.0)).unwrap();
            prop_assert!(!(s.should_steal() && !before));
        }

        #[test]
        fn priority_grows_without_bound(est in 0.01f64..1000.0, w in 0.0f64..1e6, dw in 0.001f64..100.0) {
            let e = entry(0, 0.0, est);
            let a = hrrn_priority(&e, w).unwrap();
            let b = hrrn_priority(&e, w + dw).unwrap();
            prop_assert!(a >= 1.0);
            prop_assert!(b > a);
        }
    }
}
