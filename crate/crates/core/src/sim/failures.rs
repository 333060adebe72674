use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    #[default]
    Crash,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Crash => "crash",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub t: f64,
    pub node: u32,
    #[serde(default)]
    pub kind: FailureKind,
}

/// Failure events in non-decreasing time order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureTrace {
    pub events: Vec<FailureEvent>,
}

impl FailureTrace {
    pub fn new(events: Vec<FailureEvent>, nodes: u32) -> Result<Self> {
        for pair in events.windows(2) {
            if pair[1].t < pair[0].t {
                return Err(Error::invalid(format!("failure trace goes back in time at t={}", pair[1].t)));
            }
        }
        if let Some(e) = events.iter().find(|e| e.node >= nodes) {
            return Err(Error::invalid(format!("failure trace names node {} but the cluster has {nodes}", e.node)));
        }
        if let Some(e) = events.iter().find(|e| !(e.t >= 0.0) || !e.t.is_finite()) {
            return Err(Error::invalid(format!("failure time {} is not a finite non-negative number", e.t)));
        }
        Ok(FailureTrace { events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Mean gap between events measured from time zero, as trace MTBF.
    pub fn mean_gap(&self) -> Option<f64> {
        self.events.last().map(|e| e.t / self.events.len() as f64)
    }

    /// Parses `t_seconds,node_id,kind` rows after a header line.
    pub fn read_csv<R: BufRead>(reader: R, nodes: u32) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().transpose().map_err(io)?.unwrap_or_default();
        if header.trim() != "t_seconds,node_id,kind" {
            return Err(Error::invalid(format!("failure trace header must be `t_seconds,node_id,kind`, got `{header}`")));
        }
        let mut events = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let row = n + 2;
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::invalid(format!("failure trace line {row}: expected 3 columns")));
            }
            let t = cols[0].parse().map_err(|_| Error::invalid(format!("failure trace line {row}: bad time `{}`", cols[0])))?;
            let node = cols[1].parse().map_err(|_| Error::invalid(format!("failure trace line {row}: bad node `{}`", cols[1])))?;
            let kind = match cols[2] {
                "crash" => FailureKind::Crash,
                other => return Err(Error::invalid(format!("failure trace line {row}: unknown kind `{other}`"))),
            };
            events.push(FailureEvent { t, node, kind });
        }
        FailureTrace::new(events, nodes)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_seconds,node_id,kind").map_err(io)?;
        for e in &self.events {
            writeln!(w, "{},{},{}", e.t, e.node, e.kind.as_str()).map_err(io)?;
        }
        Ok(())
    }
}

fn io(e: std::io::Error) -> Error {
    Error::invalid(format!("failure trace I/O: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureProcess {
    /// Exponential inter-arrival times with mean `mtbf` seconds and a
    /// uniformly random victim node.
    Poisson { mtbf: f64 },
    Trace(FailureTrace),
}

/// Failure events within `[0, horizon)`. Trace events past the horizon are
/// dropped with a warning.
pub fn inject_failures<R: Rng + ?Sized>(process: &FailureProcess, horizon: f64, nodes: u32, rng: &mut R) -> Result<FailureTrace> {
    match process {
        FailureProcess::Poisson { mtbf } => {
            if !(*mtbf > 0.0) {
                return Err(Error::Config(format!("mtbf must be positive, got {mtbf}")));
            }
            let gap = Exp::new(1.0 / mtbf).map_err(|e| Error::invalid(e.to_string()))?;
            let mut t = 0.0;
            let mut events = Vec::new();
            loop {
                t += gap.sample(rng);
                if t >= horizon {
                    break;
                }
                events.push(FailureEvent { t, node: rng.random_range(0..nodes.max(1)), kind: FailureKind::Crash });
            }
            Ok(FailureTrace { events })
        }
        FailureProcess::Trace(trace) => {
            let kept: Vec<FailureEvent> = trace.events.iter().copied().filter(|e| e.t < horizon).collect();
            if kept.len() < trace.len() {
                log::warn!("dropped {} failure events beyond the {horizon} s horizon", trace.len() - kept.len());
            }
            FailureTrace::new(kept, nodes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poisson_count_matches_rate() {
        let runs = 1000;
        let total: usize = (0..runs)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                inject_failures(&FailureProcess::Poisson { mtbf: 600.0 }, 6.0 * 3600.0, 12, &mut rng).unwrap().len()
            })
            .sum();
        let mean = total as f64 / runs as f64;
        assert!((mean - 36.0).abs() < 3.0 * 6.0 / (runs as f64).sqrt(), "{mean}");
    }

    #[test]
    fn trace_is_verbatim_and_clipped() {
        let events = vec![
            FailureEvent { t: 1.0, node: 0, kind: FailureKind::Crash },
            FailureEvent { t: 5.0, node: 3, kind: FailureKind::Crash },
        ];
        let p = FailureProcess::Trace(FailureTrace::new(events.clone(), 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_failures(&p, 10.0, 4, &mut rng).unwrap().events, events);
        assert_eq!(inject_failures(&p, 2.0, 4, &mut rng).unwrap().len(), 1);
        let empty = FailureProcess::Trace(FailureTrace::default());
        assert!(inject_failures(&empty, 10.0, 4, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let t = FailureTrace::new(vec![FailureEvent { t: 12.5, node: 2, kind: FailureKind::Crash }], 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FailureTrace::read_csv(&buf[..], 3).unwrap(), t);
    }

    #[test]
    fn bad_traces_rejected() {
        assert!(FailureTrace::read_csv(&b"time,node\n"[..], 3).is_err());
        assert!(FailureTrace::read_csv(&b"t_seconds,node_id,kind\n1,9,crash\n"[..], 3).is_err());
        assert!(FailureTrace::read_csv(&b"t_seconds,node_id,kind\n5,0,crash\n1,0,crash\n"[..], 3).is_err());
        assert!(FailureTrace::read_csv(&b"t_seconds,node_id,kind\n5,0,hang\n"[..], 3).is_err());
    }
}
