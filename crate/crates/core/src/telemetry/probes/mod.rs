//! Resource probes. Each reads one quantity; platform probes that find
//! nothing to read return `None` instead of failing.

mod platform;

use std::fs;
use std::path::PathBuf;

pub use platform::{PlatformAccel, PlatformPower};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    /// Resident memory, GiB.
    MemoryGb,
    /// Accelerator utilization, percent.
    UtilPct,
    /// Power draw, watts.
    PowerW,
}

pub trait Probe: Send {
    fn name(&self) -> &'static str;

    fn quantity(&self) -> Quantity;

    fn read(&mut self) -> Option<f64>;
}

/// Resident set size of this process from `/proc/self/status`.
pub struct ProcessMemory {
    path: PathBuf,
}

impl Default for ProcessMemory {
    fn default() -> Self {
        Self {
            path: PathBuf::from("/proc/self/status"),
        }
    }
}

/// `VmRSS` in GiB from a `/proc/<pid>/status` body.
pub fn parse_vm_rss(status: &str) -> Option<f64> {
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let mut parts = line["VmRSS:".len()..].split_whitespace();
    let value: f64 = parts.next()?.parse().ok()?;
    let scale = match parts.next().unwrap_or("kB") {
        "kB" => 1024.0,
        "mB" | "MB" => 1024.0 * 1024.0,
        "B" => 1.0,
        _ => return None,
    };
    Some(value * scale / (1u64 << 30) as f64)
}

impl Probe for ProcessMemory {
    fn name(&self) -> &'static str {
        "process_memory"
    }

    fn quantity(&self) -> Quantity {
        Quantity::MemoryGb
    }

    fn read(&mut self) -> Option<f64> {
        parse_vm_rss(&fs::read_to_string(&self.path).ok()?).filter(|&g| g > 0.0)
    }
}

type Factory = Box<dyn Fn() -> Box<dyn Probe> + Send + Sync>;

/// Probe constructors by name.
pub struct ProbeRegistry {
    entries: Vec<(&'static str, Factory)>,
}

impl Default for ProbeRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("process_memory", Box::new(|| Box::new(ProcessMemory::default())));
        r.register("platform_power", Box::new(|| Box::new(PlatformPower::detect())));
        r.register("platform_accel", Box::new(|| Box::new(PlatformAccel::detect())));
        r
    }
}

impl ProbeRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds `factory` under `name`, replacing an existing entry.
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str) -> Option<Box<dyn Probe>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, f)| f())
    }

    /// Every registered probe.
    pub fn build_all(&self) -> Vec<Box<dyn Probe>> {
        self.entries.iter().map(|(_, f)| f()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vm_rss_parsing() {
        let s = "Name:\tx\nVmPeak:\t  9 kB\nVmRSS:\t  1048576 kB\nThreads: 1\n";
        assert_eq!(parse_vm_rss(s), Some(1.0));
        assert_eq!(parse_vm_rss("Name: x\n"), None);
        assert_eq!(parse_vm_rss("VmRSS: lots kB\n"), None);
    }

    #[test]
    fn memory_probe_reads_this_process() {
        let g = ProcessMemory::default().read().expect("linux /proc");
        assert!(g > 0.0 && g < 1024.0);
    }

    #[test]
    fn registry_defaults() {
        let r = ProbeRegistry::default();
        assert_eq!(r.names(), ["process_memory", "platform_power", "platform_accel"]);
        assert_eq!(r.build("platform_power").unwrap().quantity(), Quantity::PowerW);
        assert!(r.build("gpu_temp").is_none());
    }
}
