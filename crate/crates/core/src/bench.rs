//! Prefill/decode throughput over a grid of engine configurations.

use crate::memory::NumaMode;
use crate::model::{EngineConfig, Model, RuntimeError, WeightFile};
use crate::scheduler::SyncMode;

pub const CSV_HEADER: &str = "threads,numa_mode,tp,sync,prefill_tps,decode_tps";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub threads: usize,
    pub numa_mode: NumaMode,
    pub tp: usize,
    pub sync: SyncMode,
    pub prefill_tps: f64,
    pub decode_tps: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3}",
            self.threads,
            self.numa_mode.as_str(),
            self.tp,
            self.sync.as_str(),
            self.prefill_tps,
            self.decode_tps
        )
    }
}

/// Mean throughput over `runs` generations of `n_gen` tokens.
pub fn run_case(
    wf: &WeightFile,
    engine: EngineConfig,
    prompt: &[u32],
    n_gen: usize,
    runs: usize,
) -> Result<BenchRow, RuntimeError> {
    let mut model = Model::new(wf, engine.clone())?;
    let (mut prefill, mut decode) = (0.0, 0.0);
    let runs = runs.max(1);
    for _ in 0..runs {
        let g = model.generate_timed(prompt, n_gen)?;
        prefill += prompt.len() as f64 / g.prefill.as_secs_f64().max(1e-9);
        decode += if g.decode_steps == 0 {
            0.0
        } else {
            g.decode_steps as f64 / g.decode.as_secs_f64().max(1e-9)
        };
    }
    Ok(BenchRow {
        threads: engine.threads,
        numa_mode: engine.numa_mode,
        tp: engine.tp,
        sync: engine.sync,
        prefill_tps: prefill / runs as f64,
        decode_tps: decode / runs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_model, ModelConfig, ToyWeights};

    #[test]
    fn row_matches_header() {
        let wf = toy_model(&ModelConfig::toy(), ToyWeights::Random, 0);
        let row = run_case(&wf, EngineConfig::default(), &[1, 2, 3], 4, 2).unwrap();
        assert!(row.prefill_tps > 0.0 && row.decode_tps > 0.0);
        let line = row.csv();
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
        assert!(line.starts_with("1,emulated,1,a,"));
    }
}
