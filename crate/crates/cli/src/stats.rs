use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

/// Totals for one `run`. Every packet lands in exactly one of permitted,
/// denied or non_classifiable.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub packets: u64,
    pub permitted: u64,
    pub denied: u64,
    pub non_classifiable: u64,
    pub cycles_min: Option<u32>,
    pub cycles_avg: Option<f64>,
    pub cycles_max: Option<u32>,
    #[serde(skip)]
    cycles_total: u64,
}

impl RunStats {
    pub fn record_verdict(&mut self, permit: bool, cycles: u32) {
        self.packets += 1;
        if permit {
            self.permitted += 1;
        } else {
            self.denied += 1;
        }
        self.cycles_total += u64::from(cycles);
        self.cycles_min = Some(self.cycles_min.map_or(cycles, |m| m.min(cycles)));
        self.cycles_max = Some(self.cycles_max.map_or(cycles, |m| m.max(cycles)));
        let classified = self.permitted + self.denied;
        self.cycles_avg = Some(self.cycles_total as f64 / classified as f64);
    }

    pub fn record_non_classifiable(&mut self) {
        self.packets += 1;
        self.non_classifiable += 1;
    }
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# packets {}", self.packets)?;
        writeln!(f, "# permitted {}", self.permitted)?;
        writeln!(f, "# denied {}", self.denied)?;
        writeln!(f, "# non_classifiable {}", self.non_classifiable)?;
        match (self.cycles_min, self.cycles_avg, self.cycles_max) {
            (Some(min), Some(avg), Some(max)) => {
                writeln!(f, "# cycles min {min} avg {avg:.2} max {max}")
            }
            _ => writeln!(f, "# cycles min - avg - max -"),
        }
    }
}

/// Count of classifications per cycle count.
#[derive(Debug, Default)]
pub struct Histogram(pub BTreeMap<u32, u64>);

impl Histogram {
    pub fn add(&mut self, cycles: u32) {
        *self.0.entry(cycles).or_default() += 1;
    }

    /// Most frequent cycle count; ties go to the smaller count.
    pub fn mode(&self) -> Option<u32> {
        self.0
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
    }
}
