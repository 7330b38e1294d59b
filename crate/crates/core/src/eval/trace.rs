use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub iter: usize,
    pub frechet: f64,
    pub alignment: f64,
    pub coverage: usize,
    /// Training wall time accumulated up to this point.
    pub wall_ms: f64,
}

/// Metrics at successive checkpoints of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub run_id: String,
    pub seed: u64,
    pub points: Vec<MetricPoint>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run_id: String,
    seed: u64,
}

impl MetricTrace {
    pub fn new(run_id: impl Into<String>, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, p: MetricPoint) -> Result<(), EvalError> {
        if let Some(last) = self.points.last() {
            if p.iter <= last.iter {
                return Err(EvalError::Input(format!("iteration {} does not follow {}", p.iter, last.iter)));
            }
        }
        if !(p.frechet.is_finite() && p.alignment.is_finite() && p.wall_ms.is_finite()) {
            return Err(EvalError::Input(format!("non-finite metric at iteration {}", p.iter)));
        }
        self.points.push(p);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricPoint> {
        self.points.last()
    }

    /// Lowest Fréchet value after iteration 0.
    pub fn best_frechet(&self) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.iter > 0)
            .map(|p| p.frechet)
            .min_by(f64::total_cmp)
    }

    /// A header line `{run_id, seed}` followed by one JSON record per point.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            run_id: self.run_id.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("serializable") + "\n";
        for p in &self.points {
            out += &(serde_json::to_string(p).expect("serializable") + "\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_err = |e: serde_json::Error| EvalError::Input(format!("bad trace line: {e}"));
        let header: Header = serde_json::from_str(lines.next().ok_or(EvalError::Input("empty trace".into()))?)
            .map_err(parse_err)?;
        let mut trace = Self::new(header.run_id, header.seed);
        for l in lines {
            trace.push(serde_json::from_str(l).map_err(parse_err)?)?;
        }
        Ok(trace)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,frechet,alignment,coverage,wall_ms\n");
        for p in &self.points {
            out += &format!("{},{},{},{},{}\n", p.iter, p.frechet, p.alignment, p.coverage, p.wall_ms);
        }
        out
    }

    /// SHA-256 over the seed and the deterministic metric values. Wall time
    /// is excluded because it varies between identical runs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in &self.points {
            h.update((p.iter as u64).to_le_bytes());
            h.update(p.frechet.to_bits().to_le_bytes());
            h.update(p.alignment.to_bits().to_le_bytes());
            h.update((p.coverage as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
