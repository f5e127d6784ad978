use std::fs;
use std::path::{Path, PathBuf};

use super::{Probe, Quantity};

/// Jetson-style INA3221 total-input power rails, milliwatts.
const POWER_FILES: &[&str] = &[
    "/sys/bus/i2c/drivers/ina3221x/7-0040/iio:device0/in_power0_input",
    "/sys/bus/i2c/drivers/ina3221x/0-0040/iio:device0/in_power0_input",
    "/sys/bus/i2c/drivers/ina3221/7-0040/hwmon/hwmon0/in1_input",
];

/// Jetson GPU load, per mille.
const ACCEL_FILES: &[&str] = &["/sys/devices/gpu.0/load", "/sys/devices/platform/gpu.0/load"];

fn read_number(path: &Path) -> Option<f64> {
    fs::read_to_string(path).ok()?.trim().parse().ok()
}

fn first_readable(candidates: &[&str]) -> Option<PathBuf> {
    candidates.iter().map(PathBuf::from).find(|p| read_number(p).is_some())
}

/// Board power from a sysfs counter; absent when no counter is found.
pub struct PlatformPower {
    source: Option<PathBuf>,
    /// Multiplier from the file's unit to watts.
    scale: f64,
}

impl PlatformPower {
    pub fn detect() -> Self {
        Self {
            source: first_readable(POWER_FILES),
            scale: 1e-3,
        }
    }

    pub fn from_file(path: impl Into<PathBuf>, scale: f64) -> Self {
        Self {
            source: Some(path.into()),
            scale,
        }
    }

    pub fn available(&self) -> bool {
        self.source.is_some()
    }
}

impl Probe for PlatformPower {
    fn name(&self) -> &'static str {
        "platform_power"
    }

    fn quantity(&self) -> Quantity {
        Quantity::PowerW
    }

    fn read(&mut self) -> Option<f64> {
        Some(read_number(self.source.as_ref()?)? * self.scale)
    }
}

/// Accelerator utilization from a sysfs load file; absent when none exists.
pub struct PlatformAccel {
    source: Option<PathBuf>,
    /// Multiplier from the file's unit to percent.
    scale: f64,
}

impl PlatformAccel {
    pub fn detect() -> Self {
        Self {
            source: first_readable(ACCEL_FILES),
            scale: 0.1,
        }
    }

    pub fn from_file(path: impl Into<PathBuf>, scale: f64) -> Self {
        Self {
            source: Some(path.into()),
            scale,
        }
    }

    pub fn available(&self) -> bool {
        self.source.is_some()
    }
}

impl Probe for PlatformAccel {
    fn name(&self) -> &'static str {
        "platform_accel"
    }

    fn quantity(&self) -> Quantity {
        Quantity::UtilPct
    }

    fn read(&mut self) -> Option<f64> {
        Some(read_number(self.source.as_ref()?)? * self.scale)
    }
}
