//! Experiment driver: training runs, IDP sweeps and latency benchmarks.

mod config;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{validate_grid, ExperimentConfig, OutputConfig, ProfilesConfig, SweepConfig};

use crate::data::{self, save_checkpoint, Dataset};
use crate::error::{IdpError, Result};
use crate::layers::Pass;
use crate::networks::Model;
use crate::tensor::Tensor;
use crate::training::{evaluate, train_multi, EpochLog};

pub const SWEEP_HEADER: &str = "network,profile_kind,profile_index,idp_percent,accuracy,macs,wall_ms";
pub const LOG_HEADER: &str = "profile,epoch,lr,loss,train_accuracy";

/// One point of an accuracy-versus-IDP curve. `profile_index` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub network: String,
    pub profile_kind: String,
    pub profile_index: usize,
    pub idp_percent: f64,
    pub accuracy: f64,
    pub macs: u64,
    pub wall_ms: Option<f64>,
}

impl SweepRecord {
    pub fn csv_row(&self) -> String {
        let wall = self.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.6},{},{}",
            self.network, self.profile_kind, self.profile_index, self.idp_percent, self.accuracy, self.macs, wall
        )
    }
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn log_row(row: &EpochLog) -> String {
    format!("{},{},{},{:.6},{:.6}", row.profile + 1, row.epoch + 1, row.lr, row.loss, row.train_accuracy)
}

/// Train and test splits as configured, subsets applied.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = data::load(cfg.dataset, &cfg.data_dir, cfg.train_subset)?;
    let test = match cfg.test_subset {
        Some(n) => test.subset(n),
        None => test,
    };
    Ok((train, test))
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = Model::new(cfg.network_spec()?, cfg.ranges()?, &mut rng)?;
    model.clamp = cfg.profiles.clamp;
    Ok(model)
}

pub struct TrainRun {
    pub model: Model<f32>,
    pub history: Vec<EpochLog>,
}

/// Builds and trains the configured model. With `out`, the directory receives
/// `config.toml` (every setting), `train_log.csv` and `model.ckpt`; the
/// checkpoint is rewritten after every epoch and once more when training ends.
pub fn train_experiment(cfg: &ExperimentConfig, train: &Dataset, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let mut model = build_model(cfg)?;
    let mut log_file = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| IdpError::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, cfg.to_toml()).map_err(|e| IdpError::io(&path, e))?;
        let path = dir.join("train_log.csv");
        let mut f = fs::File::create(&path).map_err(|e| IdpError::io(&path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| IdpError::io(&path, e))?;
        log_file = Some((f, path));
    }
    let ckpt = out.map(|d| d.join("model.ckpt"));
    let mut on_epoch = |row: &EpochLog, m: &Model<f32>| -> Result<()> {
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", log_row(row)).map_err(|e| IdpError::io(&*path, e))?;
        }
        if let Some(c) = &ckpt {
            save_checkpoint(m, Some(&cfg.train), c)?;
        }
        Ok(())
    };
    let history = train_multi(&mut model, train, std::slice::from_ref(&cfg.train), &mut on_epoch)?;
    if let Some(c) = &ckpt {
        save_checkpoint(&model, Some(&cfg.train), c)?;
    }
    Ok(TrainRun { model, history })
}

/// Evaluates `model` at each IDP percentage in `grid`. Each point runs on the
/// profile whose range holds it, or on every profile with `all_profiles`.
/// Rows are ordered by profile, then IDP.
pub fn sweep(model: &mut Model<f32>, test: &Dataset, grid: &[f64], all_profiles: bool, timing: bool) -> Result<Vec<SweepRecord>> {
    validate_grid(grid)?;
    let mut rows = Vec::new();
    for &g in grid {
        let p = g / 100.0;
        let profiles: Vec<usize> = if all_profiles {
            (0..model.profiles()).collect()
        } else {
            vec![model.select_profile(p)?]
        };
        for s in profiles {
            let t = Instant::now();
            let accuracy = evaluate(model, test, p, Some(s))?;
            let wall = t.elapsed().as_secs_f64() * 1e3;
            rows.push(SweepRecord {
                network: model.spec.name.clone(),
                profile_kind: model.spec.profile.to_string(),
                profile_index: s + 1,
                idp_percent: g,
                accuracy,
                macs: model.count_macs(p, s)?,
                wall_ms: timing.then_some(wall),
            });
        }
    }
    rows.sort_by(|a, b| a.profile_index.cmp(&b.profile_index).then(a.idp_percent.total_cmp(&b.idp_percent)));
    Ok(rows)
}

/// Forward latency and MAC count at `p` against the full network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub idp_percent: f64,
    pub profile_index: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub macs: u64,
    pub macs_full: u64,
    pub mac_ratio: f64,
    pub median_ms: f64,
    pub median_ms_full: f64,
    pub wall_ratio: f64,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "idp {}% (profile {}), batch {}, {} repetitions\n\
             macs/sample      {:>14} vs {:>14} full  ratio {:.4}\n\
             median forward   {:>11.3} ms vs {:>11.3} ms full  ratio {:.4}\n",
            self.idp_percent,
            self.profile_index,
            self.batch,
            self.repetitions,
            self.macs,
            self.macs_full,
            self.mac_ratio,
            self.median_ms,
            self.median_ms_full,
            self.wall_ratio
        )
    }
}

fn median_forward_ms(model: &mut Model<f32>, x: &Tensor<f32>, p: f64, profile: usize, reps: usize) -> Result<f64> {
    model.forward(x, p, profile, &mut Pass::eval(profile))?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        model.forward(x, p, profile, &mut Pass::eval(profile))?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) })
}

pub fn bench(model: &mut Model<f32>, x: &Tensor<f32>, p: f64, repetitions: usize) -> Result<BenchReport> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(IdpError::argument(format!("IDP fraction {p} is outside (0, 1]")));
    }
    let reps = repetitions.max(1);
    let (s, s_full) = (model.select_profile(p)?, model.select_profile(1.0)?);
    let macs = model.count_macs(p, s)?;
    let macs_full = model.count_macs(1.0, s_full)?;
    let median_ms = median_forward_ms(model, x, p, s, reps)?;
    let median_ms_full = median_forward_ms(model, x, 1.0, s_full, reps)?;
    Ok(BenchReport {
        idp_percent: p * 100.0,
        profile_index: s + 1,
        batch: x.shape()[0],
        repetitions: reps,
        macs,
        macs_full,
        mac_ratio: macs as f64 / macs_full as f64,
        median_ms,
        median_ms_full,
        wall_ratio: median_ms / median_ms_full,
    })
}
