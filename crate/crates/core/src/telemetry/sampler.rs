use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::probes::{Probe, Quantity};
use super::{EpochSpan, Result, Sample, TelemetryError, TelemetryRun, MIN_INTERVAL};
use crate::train::{EpochRecord, TrainObserver};

/// Shared clock and epoch marker. Cloning is cheap; setting the epoch is
/// a single atomic store, so it never holds up a training step.
#[derive(Clone)]
pub struct EpochSignal {
    epoch: Arc<AtomicU64>,
    clock: Instant,
    spans: Arc<Mutex<Vec<EpochSpan>>>,
}

impl EpochSignal {
    fn new() -> Self {
        Self {
            epoch: Arc::new(AtomicU64::new(0)),
            clock: Instant::now(),
            spans: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Seconds since the sampler was created.
    pub fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Relaxed)
    }

    pub fn begin_epoch(&self, epoch: u64) {
        let t = self.now();
        self.epoch.store(epoch, Ordering::Relaxed);
        self.spans.lock().expect("span lock").push(EpochSpan { epoch, start: t, end: t });
    }

    pub fn end_epoch(&self, epoch: u64) {
        let t = self.now();
        if let Some(s) = self.spans.lock().expect("span lock").iter_mut().rev().find(|s| s.epoch == epoch) {
            s.end = t;
        }
    }
}

impl TrainObserver for EpochSignal {
    fn epoch_started(&mut self, epoch: u64) {
        self.begin_epoch(epoch);
    }

    fn epoch_finished(&mut self, row: &EpochRecord) {
        self.end_epoch(row.epoch);
    }
}

/// One reading of every probe. Skipped when memory is unreadable or the
/// clock has not advanced.
fn read_sample(probes: &mut [Box<dyn Probe>], signal: &EpochSignal, last_t: &mut f64) -> Option<Sample> {
    let (mut mem, mut util, mut power) = (None, None, None);
    for p in probes.iter_mut() {
        let slot = match p.quantity() {
            Quantity::MemoryGb => &mut mem,
            Quantity::UtilPct => &mut util,
            Quantity::PowerW => &mut power,
        };
        if slot.is_none() {
            *slot = p.read();
        }
    }
    let t = signal.now();
    let mem_gb = mem?;
    if t <= *last_t {
        return None;
    }
    *last_t = t;
    Some(Sample {
        t,
        mem_gb,
        util_pct: util,
        power_w: power,
        epoch: signal.epoch(),
    })
}

struct Running {
    stop: Arc<(Mutex<bool>, Condvar)>,
    worker: JoinHandle<()>,
    rx: Receiver<Sample>,
}

/// Background sampler. Probes are read on the sampler thread only.
pub struct Sampler {
    interval: Duration,
    probes: Option<Vec<Box<dyn Probe>>>,
    names: Vec<String>,
    signal: EpochSignal,
    running: Option<Running>,
}

impl Sampler {
    pub fn new(interval_secs: f64, probes: Vec<Box<dyn Probe>>) -> Result<Self> {
        if !(interval_secs >= MIN_INTERVAL) || !interval_secs.is_finite() {
            return Err(TelemetryError::Interval(interval_secs));
        }
        if !probes.iter().any(|p| p.quantity() == Quantity::MemoryGb) {
            return Err(TelemetryError::NoMemoryProbe);
        }
        Ok(Self {
            interval: Duration::from_secs_f64(interval_secs),
            names: probes.iter().map(|p| p.name().to_string()).collect(),
            probes: Some(probes),
            signal: EpochSignal::new(),
            running: None,
        })
    }

    pub fn signal(&self) -> EpochSignal {
        self.signal.clone()
    }

    /// Starts sampling: one sample before returning, then one per interval
    /// on a fixed schedule.
    pub fn start(&mut self) -> Result<()> {
        let mut probes = self.probes.take().ok_or(TelemetryError::AlreadyStarted)?;
        let (tx, rx) = channel();
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let (stop2, signal, interval) = (stop.clone(), self.signal.clone(), self.interval);
        let first = signal.clock.elapsed();
        let mut last_t = f64::NEG_INFINITY;
        if let Some(s) = read_sample(&mut probes, &signal, &mut last_t) {
            let _ = tx.send(s);
        }
        let worker = std::thread::spawn(move || {
            for k in 1u32.. {
                let due = first + interval * k;
                {
                    let (lock, cv) = &*stop2;
                    let mut stopped = lock.lock().expect("stop lock");
                    loop {
                        if *stopped {
                            return;
                        }
                        let now = signal.clock.elapsed();
                        if now >= due {
                            break;
                        }
                        stopped = cv.wait_timeout(stopped, due - now).expect("stop lock").0;
                    }
                }
                if let Some(s) = read_sample(&mut probes, &signal, &mut last_t) {
                    if tx.send(s).is_err() {
                        return;
                    }
                }
            }
        });
        self.running = Some(Running { stop, worker, rx });
        Ok(())
    }

    /// Stops the thread and returns everything sampled.
    pub fn stop(mut self) -> Result<TelemetryRun> {
        let Running { stop, worker, rx } = self.running.take().ok_or(TelemetryError::NotStarted)?;
        {
            let (lock, cv) = &*stop;
            *lock.lock().expect("stop lock") = true;
            cv.notify_all();
        }
        worker.join().map_err(|_| TelemetryError::SamplerPanicked)?;
        let samples: Vec<Sample> = rx.try_iter().collect();
        let spans = self.signal.spans.lock().expect("span lock").clone();
        Ok(TelemetryRun {
            interval: self.interval.as_secs_f64(),
            probes: self.names.clone(),
            samples,
            spans,
        })
    }
}
