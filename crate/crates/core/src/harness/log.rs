use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Column names of the per-step loss record, in CSV order.
pub const LOSS_COLUMNS: [&str; 6] = ["src", "scc", "hdce", "gan_g", "gan_d", "total"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based index of the step that produced the row.
    pub step: u64,
    pub src: f64,
    pub scc: f64,
    pub hdce: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
    /// Wall-clock duration of the step in milliseconds.
    pub wall_ms: f64,
}

impl LogRow {
    pub fn losses(&self) -> [f64; 6] {
        [self.src, self.scc, self.hdce, self.gan_g, self.gan_d, self.total]
    }

    /// Every field except the wall time, bit for bit.
    pub fn same_values(&self, other: &LogRow) -> bool {
        self.step == other.step
            && self
                .losses()
                .iter()
                .zip(other.losses())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Append-only per-step record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn same_values(&self, other: &RunLog) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
    }

    pub fn header() -> String {
        format!("step,{},wall_ms", LOSS_COLUMNS.join(","))
    }

    /// Floats are written in shortest round-trip form, so parsing the CSV
    /// back gives the same bits.
    pub fn to_csv(&self) -> String {
        let mut s = Self::header();
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}", r.step);
            for v in r.losses() {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", r.wall_ms);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != Self::header() {
            return Err(Error::Validation {
                field: "header".into(),
                detail: format!("expected `{}`, got `{header}`", Self::header()),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |detail: String| Error::Validation {
                field: format!("line {}", i + 2),
                detail,
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(bad(format!("expected 8 columns, got {}", cols.len())));
            }
            let step = cols[0].trim().parse::<u64>().map_err(|e| bad(e.to_string()))?;
            let mut v = [0.0; 7];
            for (slot, c) in v.iter_mut().zip(&cols[1..]) {
                *slot = c.trim().parse::<f64>().map_err(|e| bad(format!("{c}: {e}")))?;
            }
            rows.push(LogRow {
                step,
                src: v[0],
                scc: v[1],
                hdce: v[2],
                gan_g: v[3],
                gan_d: v[4],
                total: v[5],
                wall_ms: v[6],
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut log = RunLog::default();
        log.push(LogRow {
            step: 1,
            src: 0.1 + 0.2,
            scc: -1e-300,
            hdce: 3.0,
            gan_g: std::f64::consts::LN_2,
            gan_d: 1.0 / 3.0,
            total: 7.25,
            wall_ms: 12.5,
        });
        let back = RunLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(RunLog::from_csv("a,b\n1,2\n").is_err());
    }
}
