//! `hetreg train`: every [[loss]] table × every repetition, in parallel.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use hetreg_core::datasets::{
    feature_split, gen_bivariate_p1, gen_multivariate, gen_sinusoid, load_csv, multivariate_samples, standardize,
    train_test_split, RegressionDataset, SINUSOID_SAMPLES,
};
use hetreg_core::losses::{LossKind, Supervision};
use hetreg_core::pseudolabel::pseudo_labels;
use hetreg_core::train::{
    fit_bivariate, train, trajectory_csv_string, Divergence, Labels, MetricsLog, MetricsRecord, Schedule,
    StepProbe, TrainOptions, TrainSpec,
};

use crate::alloc::AllocProbe;

use crate::config::{Fraction, LabelSource, LoadedConfig, ScenarioConfig};
use crate::error::{CliError, CliResult};
use crate::plot::{self, Panel};

const DEFAULT_TEST_FRACTION: f64 = 0.2;
const DEFAULT_TARGET_FRACTION: f64 = 0.25;
const DEFAULT_BIVARIATE_SAMPLES: usize = 1000;

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub table: usize,
    pub rep: usize,
    pub loss: String,
    pub schedule: String,
    pub metrics_path: PathBuf,
    pub trajectory_path: Option<PathBuf>,
    pub last: Option<MetricsRecord>,
    pub divergence: Option<Divergence>,
    pub eig_calls: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub runs: Vec<RunSummary>,
    pub summary_path: PathBuf,
}

impl TrainReport {
    pub fn diverged(&self) -> usize {
        self.runs.iter().filter(|r| r.divergence.is_some()).count()
    }
}

/// Train and evaluation data for one repetition, plus cached labels.
struct Prepared {
    train: RegressionDataset,
    eval: RegressionDataset,
    pseudo: BTreeMap<usize, Supervision>,
    truth: Option<Supervision>,
}

fn split_fraction(f: Option<Fraction>) -> f64 {
    f.map_or(DEFAULT_TEST_FRACTION, |f| f.0)
}

fn load_scenario(cfg: &LoadedConfig, seed: u64) -> CliResult<(RegressionDataset, RegressionDataset)> {
    Ok(match &cfg.config.scenario {
        ScenarioConfig::Sinusoid {
            variant,
            samples,
            test_fraction,
        } => {
            let n = samples.map_or(SINUSOID_SAMPLES, |s| s.get());
            train_test_split(&gen_sinusoid(*variant, n, seed)?, split_fraction(*test_fraction), seed)
        }
        ScenarioConfig::Multivariate {
            dim,
            samples,
            test_fraction,
        } => {
            let n = samples.map_or(multivariate_samples(*dim), |s| s.get());
            train_test_split(&gen_multivariate(*dim, n, seed)?, split_fraction(*test_fraction), seed)
        }
        ScenarioConfig::Csv {
            path,
            has_header,
            target_fraction,
            test_fraction,
            standardize: z,
        } => {
            let table = load_csv::<f64>(&cfg.resolve(path), *has_header)?;
            let frac = target_fraction.map_or(DEFAULT_TARGET_FRACTION, |f| f.0);
            let ds = feature_split(&table, 1.0 - frac, seed)?;
            let (tr, te) = train_test_split(&ds, split_fraction(*test_fraction), seed);
            if *z {
                let (tr, st) = standardize(&tr);
                let te = RegressionDataset::new(st.inputs.apply(&te.inputs), st.targets.apply(&te.targets))?;
                (tr, te)
            } else {
                (tr, te)
            }
        }
        ScenarioConfig::BivariateP1 { .. } => unreachable!("bivariate runs are handled separately"),
    })
}

fn label_kind(spec: &TrainSpec) -> Option<LossKind> {
    if spec.loss.needs_labels() {
        return Some(spec.loss);
    }
    match spec.schedule {
        Schedule::Hybrid { then, .. } if then.needs_labels() => Some(then),
        _ => None,
    }
}

enum Source {
    Pseudo(usize),
    Truth,
}

fn source_for(cfg: &LoadedConfig, spec: &TrainSpec, has_truth: bool, table: usize) -> CliResult<Option<Source>> {
    let Some(kind) = label_kind(spec) else { return Ok(None) };
    let src = match cfg.config.label_source {
        LabelSource::Pseudo => Source::Pseudo(spec.pseudo_k()),
        LabelSource::GroundTruth if has_truth => Source::Truth,
        LabelSource::GroundTruth => {
            let offset = cfg.config.losses[table].span().start;
            let (line, col) = crate::config::line_col(&cfg.text, offset);
            return Err(CliError::Config {
                path: cfg.path.clone(),
                line,
                col,
                message: "label_source = \"ground_truth\" but the scenario has no ground truth".into(),
            });
        }
        LabelSource::Auto if kind == LossKind::KlCalibrated && has_truth => Source::Truth,
        LabelSource::Auto => Source::Pseudo(spec.pseudo_k()),
    };
    Ok(Some(src))
}

fn prepare(cfg: &LoadedConfig, rep: usize) -> CliResult<(Prepared, Vec<TrainSpec>)> {
    let seed = cfg.config.seed + rep as u64;
    let (train_ds, eval) = load_scenario(cfg, seed)?;
    let specs = (0..cfg.config.losses.len())
        .map(|i| cfg.train_spec_for(i, rep, train_ds.input_dim(), train_ds.target_dim()))
        .collect::<CliResult<Vec<_>>>()?;
    let has_truth = train_ds.ground_truth.is_some();
    let mut pseudo = BTreeMap::new();
    let mut want_truth = false;
    for (i, spec) in specs.iter().enumerate() {
        match source_for(cfg, spec, has_truth, i)? {
            Some(Source::Pseudo(k)) if !pseudo.contains_key(&k) => {
                let labels = pseudo_labels(&train_ds, k.min(train_ds.len()))?;
                pseudo.insert(k, Supervision::from_pseudo_labels(&labels)?);
            }
            Some(Source::Truth) => want_truth = true,
            _ => {}
        }
    }
    let truth = match (&train_ds.ground_truth, want_truth) {
        (Some(gt), true) => Some(Supervision::from_ground_truth(gt)?),
        _ => None,
    };
    Ok((
        Prepared {
            train: train_ds,
            eval,
            pseudo,
            truth,
        },
        specs,
    ))
}

fn file_stem(table: usize, spec: &TrainSpec, rep: usize) -> String {
    format!(
        "{table:02}_{}_{}_r{rep}",
        spec.loss.label(),
        spec.schedule.label().replace(':', "-")
    )
}

fn metric_panels(log: &MetricsLog) -> Vec<Panel<'static>> {
    let col = |f: fn(&MetricsRecord) -> f64| log.records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    vec![
        Panel {
            title: "mse",
            series: vec![("mse", col(|r| r.mse))],
        },
        Panel {
            title: "nll",
            series: vec![("nll", col(|r| r.nll))],
        },
        Panel {
            title: "kl / w2",
            series: vec![("kl", col(|r| r.kl)), ("w2", col(|r| r.w2))],
        },
    ]
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_one(cfg: &LoadedConfig, out: &Path, prep: &Prepared, table: usize, spec: &TrainSpec, rep: usize) -> CliResult<RunSummary> {
    let labels = match source_for(cfg, spec, prep.train.ground_truth.is_some(), table)? {
        Some(Source::Pseudo(k)) => Labels::Given(&prep.pseudo[&k]),
        Some(Source::Truth) => Labels::Given(prep.truth.as_ref().expect("prepared")),
        None => Labels::None,
    };
    let mut probe = cfg.config.timing.then(AllocProbe::default);
    let outcome = train(
        &prep.train,
        labels,
        spec,
        TrainOptions {
            eval: Some(&prep.eval),
            record_timing: cfg.config.timing,
            probe: probe.as_mut().map(|p| p as &mut dyn StepProbe),
            ..Default::default()
        },
    )?;
    let stem = file_stem(table, spec, rep);
    let metrics_path = out.join(format!("{stem}.csv"));
    outcome.log.write_csv(&metrics_path)?;
    if cfg.config.plots {
        plot::write(&metric_panels(&outcome.log), &out.join(format!("{stem}.svg")))?;
    }
    Ok(RunSummary {
        table,
        rep,
        loss: spec.loss.label(),
        schedule: spec.schedule.label(),
        metrics_path,
        trajectory_path: None,
        last: outcome.log.last().cloned(),
        divergence: outcome.divergence,
        eig_calls: outcome.train_eig_calls,
    })
}

fn run_bivariate(cfg: &LoadedConfig, out: &Path, table: usize, rep: usize) -> CliResult<RunSummary> {
    let spec = cfg.train_spec(table, rep)?;
    let n = match cfg.config.scenario {
        ScenarioConfig::BivariateP1 { samples } => samples.map_or(DEFAULT_BIVARIATE_SAMPLES, |s| s.get()),
        _ => unreachable!(),
    };
    let problem = gen_bivariate_p1(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let samples = problem.sample(n, &mut rng);
    let fit = fit_bivariate(&problem, &samples, spec.loss, spec.lr, spec.epochs, spec.seed)?;
    let stem = file_stem(table, &spec, rep);
    let metrics_path = out.join(format!("{stem}.csv"));
    fit.log.write_csv(&metrics_path)?;
    let trajectory_path = out.join(format!("{stem}_trajectory.csv"));
    write_text(&trajectory_path, &trajectory_csv_string(&fit.trajectory))?;
    if cfg.config.plots {
        let pts = |f: fn(&hetreg_core::train::TrajectoryPoint) -> f64| {
            fit.trajectory.iter().map(|p| (p.step as f64, f(p))).collect::<Vec<_>>()
        };
        plot::write(
            &[
                Panel {
                    title: "mean",
                    series: vec![("mu0", pts(|p| p.mean[0])), ("mu1", pts(|p| p.mean[1]))],
                },
                Panel {
                    title: "covariance",
                    series: vec![
                        ("c00", pts(|p| p.cov[0])),
                        ("c01", pts(|p| p.cov[1])),
                        ("c11", pts(|p| p.cov[2])),
                    ],
                },
                Panel {
                    title: "distance to target",
                    series: vec![("kl", pts(|p| p.kl)), ("w2", pts(|p| p.w2))],
                },
            ],
            &out.join(format!("{stem}_trajectory.svg")),
        )?;
    }
    Ok(RunSummary {
        table,
        rep,
        loss: spec.loss.label(),
        schedule: spec.schedule.label(),
        metrics_path,
        trajectory_path: Some(trajectory_path),
        last: fit.log.last().cloned(),
        divergence: fit.divergence,
        eig_calls: fit.train_eig_calls,
    })
}

fn summary_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from("table,rep,loss_kind,schedule,mse,nll,kl,w2,diverged_epoch\n");
    for r in runs {
        let (mse, nll, kl, w2) = r.last.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |m| {
            (m.mse, m.nll, m.kl, m.w2)
        });
        let fmt = |v: f64| if v.is_nan() { "NaN".to_string() } else { format!("{v:?}") };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.table,
            r.rep,
            r.loss,
            r.schedule,
            fmt(mse),
            fmt(nll),
            fmt(kl),
            fmt(w2),
            r.divergence.map_or(0, |d| d.epoch)
        ));
    }
    s
}

/// Runs everything the config asks for. Output files are written even for
/// runs that diverge; the caller decides how to report that.
pub fn cmd_train(cfg: &LoadedConfig) -> CliResult<TrainReport> {
    let out = cfg.resolve(&cfg.config.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let reps = cfg.config.repetitions.get();
    let tables = cfg.config.losses.len();
    let jobs: Vec<(usize, usize)> = (0..reps).flat_map(|r| (0..tables).map(move |t| (r, t))).collect();

    let runs: Vec<RunSummary> = if cfg.is_bivariate() {
        jobs.par_iter()
            .map(|&(rep, table)| run_bivariate(cfg, &out, table, rep))
            .collect::<CliResult<_>>()?
    } else {
        let mut runs = Vec::with_capacity(jobs.len());
        for rep in 0..reps {
            let (prep, specs) = prepare(cfg, rep)?;
            let batch: Vec<RunSummary> = specs
                .par_iter()
                .enumerate()
                .map(|(table, spec)| run_one(cfg, &out, &prep, table, spec, rep))
                .collect::<CliResult<_>>()?;
            runs.extend(batch);
        }
        runs
    };
    let summary_path = out.join("summary.csv");
    write_text(&summary_path, &summary_csv(&runs))?;
    Ok(TrainReport { runs, summary_path })
}
