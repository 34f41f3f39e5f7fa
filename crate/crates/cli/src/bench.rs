//! `hetreg bench`: per-step cost of each loss at several target dimensions.

use std::path::Path;
use std::time::Instant;

use hetreg_core::datasets::gen_multivariate;
use hetreg_core::linalg::eig_call_count;
use hetreg_core::losses::{gather_rows, Batch, LossKind, Supervision};
use hetreg_core::mlp::{Activation, MlpConfig};
use hetreg_core::optim::AdamW;
use hetreg_core::train::{training_step, StepProbe, TrainSpec};

use crate::alloc::AllocProbe;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 50,
            steps: 200,
            batch: 64,
            hidden_layers: 2,
            hidden_width: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub loss_kind: String,
    pub dim: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub peak_bytes: u64,
    /// Eigendecomposition/square-root calls during the timed steps.
    pub eig_calls: u64,
    pub steps: usize,
}

pub const MAX_DIM: usize = 64;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `opts.steps` optimisation steps after `opts.warmup` untimed ones.
/// Labels come from the generator's ground truth and are prepared before
/// the clock starts.
pub fn bench_one(dim: usize, loss: LossKind, opts: &BenchOptions) -> CliResult<BenchRecord> {
    if dim > MAX_DIM {
        return Err(CliError::Usage(format!("bench dimensions are capped at {MAX_DIM}, got {dim}")));
    }
    let rows = (opts.batch * 4).max(2 * dim);
    let ds = gen_multivariate(dim, rows, opts.seed)?;
    let labels = Supervision::from_ground_truth(ds.ground_truth.as_ref().expect("generator sets ground truth"))?;
    let template = MlpConfig {
        input_dim: dim,
        output_dim: dim,
        hidden_layers: opts.hidden_layers,
        hidden_width: opts.hidden_width,
        activation: Activation::Elu,
    };
    let mut spec = TrainSpec::new(loss, template, dim);
    spec.seed = opts.seed;
    spec.lr = 1e-4;
    let mut model = spec.init_model()?;
    let mut opt = AdamW::new(spec.lr);
    let batches: Vec<Batch> = (0..rows / opts.batch.max(1))
        .map(|b| {
            let idx: Vec<usize> = (b * opts.batch..(b + 1) * opts.batch).collect();
            Batch {
                x: gather_rows(&ds.inputs, &idx),
                y: gather_rows(&ds.targets, &idx),
                labels: loss.needs_labels().then(|| labels.gather(&idx)),
            }
        })
        .collect();
    let mut times = Vec::with_capacity(opts.steps);
    let mut probe = AllocProbe::default();
    let mut peak = 0;
    let mut eig = 0;
    for s in 0..opts.warmup + opts.steps {
        let batch = &batches[s % batches.len()];
        let timed = s >= opts.warmup;
        let before = eig_call_count();
        if timed {
            probe.begin();
        }
        let t0 = Instant::now();
        let value = training_step(&mut model, &mut opt, Some(loss), batch)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if timed {
            peak = peak.max(probe.end());
            eig += eig_call_count() - before;
            times.push(ms);
        }
        if value.is_none() {
            return Err(hetreg_core::Error::NonFinite { epoch: 0, step: s }.into());
        }
    }
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len().max(1) as f64;
    Ok(BenchRecord {
        loss_kind: loss.label(),
        dim,
        median_ms: median(&mut times),
        mean_ms: mean,
        std_ms: var.sqrt(),
        peak_bytes: peak,
        eig_calls: eig,
        steps: opts.steps,
    })
}

/// One record per (dim, loss), dims outermost. Runs sequentially so timings
/// and allocation peaks are not disturbed by other work.
pub fn cmd_bench(dims: &[usize], losses: &[LossKind], opts: &BenchOptions) -> CliResult<Vec<BenchRecord>> {
    if opts.steps < 1 {
        return Err(CliError::Usage("bench needs at least one timed step".into()));
    }
    let mut out = Vec::with_capacity(dims.len() * losses.len());
    for &d in dims {
        for &l in losses {
            out.push(bench_one(d, l, opts)?);
        }
    }
    Ok(out)
}

pub const BENCH_HEADER: &str = "loss_kind,dim,median_ms,mean_ms,std_ms,peak_bytes,eig_calls,steps";

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{},{},{}\n",
            r.loss_kind, r.dim, r.median_ms, r.mean_ms, r.std_ms, r.peak_bytes, r.eig_calls, r.steps
        ));
    }
    s
}

pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> CliResult<()> {
    std::fs::write(path, bench_csv(records)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn one_row_per_dim_and_loss_without_eig_calls() {
        let opts = BenchOptions {
            warmup: 2,
            steps: 3,
            batch: 8,
            hidden_layers: 1,
            hidden_width: 4,
            seed: 1,
        };
        let losses = LossKind::all();
        let recs = cmd_bench(&[2, 3], &losses, &opts).unwrap();
        assert_eq!(recs.len(), 2 * losses.len());
        assert!(recs.iter().all(|r| r.eig_calls == 0 && r.steps == 3 && r.median_ms >= 0.0));
        assert_eq!(bench_csv(&recs).lines().count(), 1 + recs.len());
        assert!(cmd_bench(&[65], &losses, &opts).is_err());
    }
}
