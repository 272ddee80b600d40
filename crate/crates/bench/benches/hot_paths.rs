use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use offload_core::optimizer::{decide, global_optimize_oracle, OffloadCosts, OptimizerConfig};
use offload_core::protocol::wire::Message;
use offload_core::server_sched::{HrrnEntry, ServerQueueState};
use offload_core::tasklib::demo::{shortest_route, RouteQuery};
use offload_core::tasklib::TaskStateBlob;
use offload_core::{TaskClassId, TaskInstanceId};

fn costs(i: u64) -> OffloadCosts {
    let f = (i % 7) as f64;
    OffloadCosts {
        e_exec_local_j: 2.0 + f,
        e_transfer_j: 0.5 + 0.3 * f,
        t_local_s: 1.0 + 0.1 * f,
        t_remote_s: 0.4,
        t_transfer_s: 0.2 + 0.05 * f,
    }
}

fn optimizer(c: &mut Criterion) {
    let cfg = OptimizerConfig::default();
    let one = costs(3);
    c.bench_function("decide", |b| b.iter(|| decide(black_box(&one), &cfg)));
    let set: Vec<_> = (0..12).map(costs).collect();
    c.bench_function("oracle_12_tasks", |b| b.iter(|| global_optimize_oracle(black_box(&set), &cfg).unwrap()));
}

fn hrrn(c: &mut Criterion) {
    let class = TaskClassId::new("bench", "job").unwrap();
    c.bench_function("hrrn_pick_next_64", |b| {
        b.iter(|| {
            let mut q = ServerQueueState::new(1);
            for i in 0..64u64 {
                q.push(HrrnEntry {
                    instance: TaskInstanceId::new(class.clone(), i),
                    arrival_s: i as f64 * 0.1,
                    est_run_s: 0.5 + (i % 5) as f64,
                })
                .unwrap();
            }
            while let Some(e) = q.pick_next(black_box(10.0)) {
                black_box(e);
            }
        })
    });
}

fn route(c: &mut Criterion) {
    let n = 400u32;
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n, 1 + i % 9));
        edges.push((i, (i * 7 + 3) % n, 5 + i % 13));
    }
    let q = RouteQuery {
        nodes: n,
        source: 0,
        target: n / 2,
        edges,
    };
    c.bench_function("shortest_route_400", |b| b.iter(|| shortest_route(black_box(&q))));
}

fn wire(c: &mut Criterion) {
    let msg = Message::TaskTransfer {
        instance: TaskInstanceId::new(TaskClassId::new("bench", "job").unwrap(), 9),
        est_local_s: 1.5,
        work_units: 1500,
        blob: TaskStateBlob::pending(vec![7; 20_000]),
    };
    let frame = msg.encode().unwrap();
    c.bench_function("wire_encode_20k", |b| b.iter(|| black_box(&msg).encode().unwrap()));
    c.bench_function("wire_decode_20k", |b| b.iter(|| Message::decode(black_box(&frame)).unwrap()));
}

criterion_group!(benches, optimizer, hrrn, route, wire);
criterion_main!(benches);
