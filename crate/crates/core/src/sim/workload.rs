//! Turns a workload description into concrete task instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::Result;
use crate::model::{Clock, DeviceModel, TaskClassId, TaskInstanceId, TaskProfile};
use crate::profiler::ProfileStore;
use crate::tasklib::demo::{self, FaceRequest, RouteQuery, UserInfo};
use crate::tasklib::{DataStore, TaskInstance, TaskRegistry};

use super::config::{InterArrival, WorkloadItem};

#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub at_s: f64,
    pub instance: TaskInstance,
}

#[derive(Debug, Clone, Default)]
pub struct Workload {
    /// Ordered by arrival time.
    pub arrivals: Vec<Arrival>,
    /// Client data the tasks read, such as pictures.
    pub store: DataStore,
}

fn initial_state(class: &TaskClassId, seq: u64, payload: u64, work_units: u64, rng: &mut ChaCha8Rng, store: &mut DataStore) -> Vec<u8> {
    match class.to_string().as_str() {
        demo::FIND_ROUTE => RouteQuery::generate(rng, payload).encode(),
        demo::FACE_DETECT => {
            let key = format!("pic/{seq:04}");
            store.insert(key.clone(), demo::synthetic_picture(rng.random(), payload as usize));
            FaceRequest {
                picture_key: key,
                work_units,
            }
            .encode()
        }
        demo::UPDATE_INFO => {
            let pad = payload.saturating_sub(40) as usize;
            UserInfo {
                name: format!("user{seq}"),
                phone: format!("555-{:04}", rng.random_range(0..10_000u32)),
                address: "x".repeat(pad / 2),
                company: "y".repeat(pad - pad / 2),
                existing: rng.random_bool(0.5),
            }
            .encode()
        }
        _ => (0..payload).map(|_| rng.random()).collect(),
    }
}

/// Generates every task of the workload. Instances are numbered per class
/// from 1, in item order.
pub fn generate(items: &[WorkloadItem], seed: u64) -> Result<Workload> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs: BTreeMap<TaskClassId, u64> = BTreeMap::new();
    let mut out = Workload::default();
    for item in items {
        let mut t = item.start_s;
        for i in 0..item.count {
            if i > 0 {
                t += match item.inter_arrival {
                    InterArrival::Fixed { interval_s } => interval_s,
                    InterArrival::Exponential { mean_s } => Exp::new(1.0 / mean_s)
                        .map_err(|e| crate::error::Error::InvalidParameter(e.to_string()))?
                        .sample(&mut rng),
                };
            }
            let seq = seqs.entry(item.class_id.clone()).or_insert(0);
            *seq += 1;
            let payload = rng.random_range(item.payload_bytes.min..=item.payload_bytes.max);
            let work_units = rng.random_range(item.work_units.min..=item.work_units.max);
            let state = initial_state(&item.class_id, *seq, payload, work_units, &mut rng, &mut out.store);
            out.arrivals.push(Arrival {
                at_s: t,
                instance: TaskInstance {
                    id: TaskInstanceId::new(item.class_id.clone(), *seq),
                    initial_state: state,
                    work_units,
                },
            });
        }
    }
    // stable, so equal times keep item order
    out.arrivals.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    Ok(out)
}

/// Time a task takes on a device.
pub fn exec_time_s(work_units: u64, work_unit_s: f64, device: &DeviceModel) -> f64 {
    work_units as f64 * work_unit_s / device.cpu_score
}

/// Profiles each class that has no record yet from its first generated
/// instance, as if that instance had run once on the client.
pub fn warm_profiles(
    profiles: &mut ProfileStore,
    workload: &Workload,
    registry: &TaskRegistry,
    client: &DeviceModel,
    work_unit_s: f64,
) -> Result<()> {
    let clock = Clock::new();
    for a in &workload.arrivals {
        let class = &a.instance.id.class_id;
        if profiles.contains(class) {
            continue;
        }
        let task = registry.get(class)?;
        let mut state = a.instance.initial_state.clone();
        let mut bytes = state.len() as u64;
        if task.pre_execution(&mut state).is_ok() {
            if let Ok(input) = task.load_data(&state, &workload.store) {
                bytes += input.len() as u64;
            }
        }
        let t = exec_time_s(a.instance.work_units, work_unit_s, client);
        let profile = TaskProfile::new(t, client.power_active_w * t, bytes)?;
        profiles.profile_first_execution(class, profile, &clock)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::presets;

    #[test]
    fn fd50_has_fifty_pictures_under_200k() {
        let cfg = presets::preset("fd50").unwrap();
        let w = generate(&cfg.workload, cfg.seed).unwrap();
        assert_eq!(w.arrivals.len(), 50);
        assert_eq!(w.store.len(), 50);
        assert!(w.store.values().all(|p| p.len() <= 200_000 && p.len() >= 120_000));
        assert!(w.arrivals.windows(2).all(|p| p[0].at_s <= p[1].at_s));
        assert_eq!(w.arrivals[0].at_s, 0.0);
    }

    #[test]
    fn same_seed_same_workload() {
        let cfg = presets::preset("mixed_fleet").unwrap();
        let a = generate(&cfg.workload, 7).unwrap();
        let b = generate(&cfg.workload, 7).unwrap();
        let c = generate(&cfg.workload, 8).unwrap();
        assert_eq!(a.arrivals, b.arrivals);
        assert_ne!(a.arrivals, c.arrivals);
    }

    #[test]
    fn warm_up_profiles_every_class() {
        let cfg = presets::preset("mixed_fleet").unwrap();
        let w = generate(&cfg.workload, 3).unwrap();
        let reg = TaskRegistry::with_demo_tasks();
        let mut p = ProfileStore::new();
        warm_profiles(&mut p, &w, &reg, &cfg.client, cfg.work_unit_s).unwrap();
        assert_eq!(p.len(), 3);
        let fd = p.lookup(&demo::FACE_DETECT.parse().unwrap()).unwrap();
        // state plus the picture pulled from the store
        assert!(fd.profile.payload_bytes >= 60_000);
        let first_fd = w
            .arrivals
            .iter()
            .find(|a| a.instance.id.class_id.to_string() == demo::FACE_DETECT)
            .unwrap();
        let t = first_fd.instance.work_units as f64 * 0.001;
        assert_eq!(fd.profile.exec_time_local_s, t);
        assert_eq!(fd.profile.energy_local_j, 2.5 * t);
    }
}
