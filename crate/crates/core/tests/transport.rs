use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use offload_core::protocol::tcp::{run_client, run_server, LiveClientOptions, LiveServerOptions};
use offload_core::sim::{build_client, build_server, presets, run_scenario_with, InterArrival, SimOptions, UniformRange};
use offload_core::tasklib::TaskRegistry;

/// Ten identical face-detection tasks, all present before the laptop
/// connects, stolen in one go.
pub fn ten_task_scenario() -> offload_core::sim::ScenarioConfig {
    let mut cfg = presets::preset("fd50").unwrap();
    cfg.name = "ten".into();
    let item = &mut cfg.workload[0];
    item.count = 10;
    item.payload_bytes = UniformRange::fixed(20_000);
    item.work_units = UniformRange::fixed(1500);
    item.inter_arrival = InterArrival::Fixed { interval_s: 0.0 };
    cfg.scheduler.steal_capacity = 10;
    cfg
}

#[test]
fn tcp_and_simulation_send_the_same_kinds_in_the_same_order() {
    let cfg = ten_task_scenario();
    let registry = Arc::new(TaskRegistry::with_demo_tasks());
    let sim = run_scenario_with(
        &cfg,
        SimOptions {
            registry: registry.clone(),
            ..SimOptions::default()
        },
    )
    .unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = build_server(&cfg, 0, registry.clone()).unwrap();
    let handle = thread::spawn(move || run_server(addr, server, &LiveServerOptions::default()).unwrap());
    let (client, arrivals) = build_client(&cfg, registry, None).unwrap();
    let workload = arrivals.into_iter().map(|a| (a.at_s, a.instance)).collect();
    let live = run_client(listener, client, workload, &LiveClientOptions::default()).unwrap();
    let server_report = handle.join().unwrap();

    assert_eq!(live.completions.len(), 10);
    assert!(live.completions.iter().all(|(_, c)| c.remote));
    assert_eq!(live.transcript_to("laptop"), sim.transcript("client", "laptop"));
    assert_eq!(server_report.transcript(), sim.transcript("laptop", "client"));

    // same results either way
    let mut a: Vec<_> = sim.completions.iter().map(|(_, c)| (c.id.clone(), c.blob.clone())).collect();
    let mut b: Vec<_> = live.completions.iter().map(|(_, c)| (c.id.clone(), c.blob.clone())).collect();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    assert_eq!(a, b);
}
