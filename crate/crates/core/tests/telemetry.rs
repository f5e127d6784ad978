mod common;

use std::thread::sleep;
use std::time::{Duration, Instant};

use common::{toy_dataset, toy_graph};
use edgefire::model::Model;
use edgefire::telemetry::probes::{PlatformAccel, PlatformPower, ProcessMemory};
use edgefire::telemetry::*;
use edgefire::train::{TrainConfig, Trainer};
use proptest::prelude::*;

fn memory_only() -> Vec<Box<dyn Probe>> {
    vec![Box::new(ProcessMemory::default())]
}

fn desk_probes() -> Vec<Box<dyn Probe>> {
    vec![
        Box::new(ProcessMemory::default()),
        Box::new(PlatformPower::from_file("/nonexistent/in_power0_input", 1e-3)),
        Box::new(PlatformAccel::from_file("/nonexistent/load", 0.1)),
    ]
}

#[test]
fn sample_rate_stays_within_jitter() {
    let mut s = Sampler::new(0.1, memory_only()).unwrap();
    s.start().unwrap();
    sleep(Duration::from_secs(3));
    let run = s.stop().unwrap();
    let n = run.samples.len();
    assert!((27..=33).contains(&n), "{n} samples");
    assert!(run.samples.windows(2).all(|w| w[0].t < w[1].t));
    assert!(run.samples.iter().all(|x| x.mem_gb > 0.0));
}

#[test]
fn sampler_lifecycle_errors() {
    assert!(matches!(Sampler::new(0.05, memory_only()), Err(TelemetryError::Interval(_))));
    assert!(matches!(Sampler::new(f64::NAN, memory_only()), Err(TelemetryError::Interval(_))));
    let power_only: Vec<Box<dyn Probe>> = vec![Box::new(PlatformPower::from_file("/x", 1.0))];
    assert!(matches!(Sampler::new(1.0, power_only), Err(TelemetryError::NoMemoryProbe)));

    assert!(matches!(Sampler::new(1.0, memory_only()).unwrap().stop(), Err(TelemetryError::NotStarted)));
    let mut s = Sampler::new(1.0, memory_only()).unwrap();
    s.start().unwrap();
    assert!(matches!(s.start(), Err(TelemetryError::AlreadyStarted)));
    let run = s.stop().unwrap();
    assert_eq!(run.samples.len(), 1);
    assert_eq!(run.probes, ["process_memory"]);
}

#[test]
fn absent_probes_leave_fields_empty() {
    let mut s = Sampler::new(0.1, desk_probes()).unwrap();
    s.start().unwrap();
    sleep(Duration::from_millis(450));
    let run = s.stop().unwrap();
    assert!(run.samples.len() >= 4);
    assert!(run.samples.iter().all(|x| x.util_pct.is_none() && x.power_w.is_none()));
    let agg = aggregate(&run).unwrap();
    assert_eq!((agg.avg_util_pct, agg.avg_power_w), (None, None));
    assert!(agg.epochs.iter().all(|e| e.avg_util_pct.is_none() && e.avg_power_w.is_none()));
    for line in run.samples_csv().lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some(""));
        assert_eq!(line.split(',').nth(3), Some(""));
    }
    assert!(!agg.to_csv().contains(",0.00,"));
}

#[test]
fn memory_rises_under_allocation() {
    let mut s = Sampler::new(0.1, memory_only()).unwrap();
    let signal = s.signal();
    s.start().unwrap();
    sleep(Duration::from_millis(350));
    signal.begin_epoch(1);
    let mut block = vec![0u8; 256 << 20];
    for i in (0..block.len()).step_by(4096) {
        block[i] = 1;
    }
    sleep(Duration::from_millis(350));
    signal.end_epoch(1);
    let run = s.stop().unwrap();
    assert_eq!(block.iter().step_by(4096).filter(|&&b| b == 1).count(), block.len() / 4096);
    drop(block);

    let agg = aggregate(&run).unwrap();
    let idle = agg.epochs.iter().find(|e| e.epoch == 0).unwrap();
    let busy = agg.epochs.iter().find(|e| e.epoch == 1).unwrap();
    assert!(busy.samples >= 2);
    assert!(busy.max_mem_gb >= idle.max_mem_gb);
    assert!(busy.max_mem_gb.unwrap() - idle.max_mem_gb.unwrap() > 0.2);
}

#[test]
fn training_run_reconciles_with_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy_dataset(dir.path(), 64, 3);
    let cfg = TrainConfig {
        epochs: 10,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::compile(&toy_graph(64), cfg.init_seed()).unwrap(), cfg)
        .unwrap()
        .with_checkpoints(&dir.path().join("ckpt"));

    let mut s = Sampler::new(0.1, desk_probes()).unwrap();
    let mut signal = s.signal();
    s.start().unwrap();
    let t0 = Instant::now();
    t.run(&dir.path().join("ds"), &m, &mut signal).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let run = s.stop().unwrap();

    let agg = aggregate(&run).unwrap();
    assert_eq!(run.spans.iter().map(|s| s.epoch).collect::<Vec<_>>(), (1..=10).collect::<Vec<u64>>());
    assert!((agg.epoch_seconds - wall).abs() / wall < 0.01, "{} vs {wall}", agg.epoch_seconds);
    assert!((agg.wall_seconds - wall).abs() / wall < 0.01);
    for e in 1..=10u64 {
        let n = run.samples.iter().filter(|s| s.epoch == e).count();
        let row = agg.epochs.iter().find(|r| r.epoch == e).unwrap();
        assert_eq!(row.samples, n);
        assert!(row.seconds.unwrap() > 0.0);
    }

    // recompute from the samples file and compare bytes
    let parsed = TelemetryRun {
        samples: TelemetryRun::parse_samples_csv(&run.samples_csv()).unwrap(),
        ..run.clone()
    };
    let again = aggregate(&parsed).unwrap();
    assert_eq!(again.to_csv(), agg.to_csv());
    assert_eq!(again.to_table(), agg.to_table());
    assert_eq!(aggregate(&run).unwrap().to_csv(), agg.to_csv());
}

#[test]
fn table_layout() {
    let run = TelemetryRun {
        samples: vec![Sample {
            t: 0.5,
            mem_gb: 0.9074,
            util_pct: None,
            power_w: Some(7.25),
            epoch: 1,
        }],
        spans: vec![EpochSpan {
            epoch: 1,
            start: 0.0,
            end: 2.0,
        }],
        ..TelemetryRun::default()
    };
    let agg = aggregate(&run).unwrap();
    assert_eq!(agg.avg_mem_gb, 0.9074);
    let table = agg.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("Epoch"));
    assert!(lines[2].contains("0.9074") && lines[2].contains("7.25") && lines[2].contains(" - "));
    assert!(lines[3].starts_with("all"));
    let width = lines[0].len();
    assert!(lines[1..].iter().all(|l| l.len() == width));
    assert_eq!(agg.to_csv().lines().nth(1), Some("1,1,0.9074,0.9074,,7.25,2.000"));
}

#[test]
fn comparison_copies_each_aggregate() {
    let mk = |mem: f64, secs: f64| TelemetryRun {
        samples: (0..4)
            .map(|k| Sample {
                t: k as f64,
                mem_gb: mem + k as f64 * 0.01,
                util_pct: None,
                power_w: None,
                epoch: 1 + k / 2,
            })
            .collect(),
        spans: vec![
            EpochSpan {
                epoch: 1,
                start: 0.0,
                end: secs,
            },
            EpochSpan {
                epoch: 2,
                start: secs,
                end: 2.0 * secs,
            },
        ],
        ..TelemetryRun::default()
    };
    let (a, b) = (aggregate(&mk(1.2, 30.0)).unwrap(), aggregate(&mk(0.9, 12.0)).unwrap());
    let runs = [
        RunSummary::new("xception", 20_809_001, Some(0.99), Some(0.98), Some(&a)),
        RunSummary::new("proposed", 11_114_793, Some(0.97), None, Some(&b)),
    ];
    let cmp = compare_runs(&runs);
    let text = cmp.to_text();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(cmp.rows()[0][0], "proposed");
    assert_eq!(cmp.rows()[1][0], "xception");
    assert_eq!(cmp.rows()[0][3], "-");
    assert_eq!(cmp.rows()[0][6], "-");
    for (row, agg) in cmp.rows().iter().zip([&b, &a]) {
        assert_eq!(row[4], format!("{:.3} s", agg.avg_epoch_seconds.unwrap()));
        assert_eq!(row[5], format!("{:.4} GB", agg.avg_mem_gb));
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    runs[0].save(&p).unwrap();
    assert_eq!(RunSummary::load(&p).unwrap(), runs[0]);
}

fn arb_run() -> impl Strategy<Value = TelemetryRun> {
    let sample = (0.01f64..64.0, proptest::option::of(0.0f64..100.0), proptest::option::of(0.0f64..30.0), 0u64..5);
    proptest::collection::vec(sample, 1..60).prop_map(|raw| {
        let mut epochs: Vec<u64> = raw.iter().map(|r| r.3).collect();
        epochs.sort();
        TelemetryRun {
            interval: 1.0,
            probes: vec!["process_memory".into()],
            samples: raw
                .iter()
                .zip(epochs)
                .enumerate()
                .map(|(i, (r, epoch))| Sample {
                    t: i as f64 * 0.37,
                    mem_gb: r.0,
                    util_pct: r.1,
                    power_w: r.2,
                    epoch,
                })
                .collect(),
            spans: Vec::new(),
        }
    })
}

proptest! {
    #[test]
    fn whole_run_average_is_sample_weighted(run in arb_run()) {
        let agg = aggregate(&run).unwrap();
        let total: usize = agg.epochs.iter().map(|e| e.samples).sum();
        prop_assert_eq!(total, run.samples.len());
        let weighted: f64 = agg.epochs.iter().map(|e| e.avg_mem_gb.unwrap() * e.samples as f64).sum::<f64>() / total as f64;
        prop_assert!((weighted - agg.avg_mem_gb).abs() <= 1e-9 * agg.avg_mem_gb.max(1.0));
        for e in &agg.epochs {
            prop_assert!(e.samples > 0);
            prop_assert!(e.max_mem_gb.unwrap() >= e.avg_mem_gb.unwrap() - 1e-12);
        }
        let util_n = run.samples.iter().filter(|s| s.util_pct.is_some()).count();
        prop_assert_eq!(agg.avg_util_pct.is_some(), util_n > 0);
    }

    #[test]
    fn samples_csv_round_trips(run in arb_run()) {
        let csv = run.samples_csv();
        prop_assert_eq!(&TelemetryRun::parse_samples_csv(&csv).unwrap(), &run.samples);
        let re = TelemetryRun { samples: TelemetryRun::parse_samples_csv(&csv).unwrap(), ..run.clone() };
        prop_assert_eq!(aggregate(&re).unwrap().to_csv(), aggregate(&run).unwrap().to_csv());
    }
}

#[test]
fn samples_csv_rejects_garbage() {
    assert!(matches!(TelemetryRun::parse_samples_csv("a,b\n"), Err(TelemetryError::Parse { line: 1, .. })));
    let bad = format!("{SAMPLES_HEADER}\n0.1,1.0,,,1\n0.2,x,,,1\n");
    assert!(matches!(TelemetryRun::parse_samples_csv(&bad), Err(TelemetryError::Parse { line: 3, .. })));
}
