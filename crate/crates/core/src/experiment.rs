//! Complete runs: training with on-disk outputs, checkpoint evaluation and
//! the eight-way ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bwfpn::NeckKind;
use crate::config::RunConfig;
use crate::detector::checkpoint;
use crate::detector::flops::model_flops;
use crate::detector::train::{checkpoint_state, evaluate_model, metrics_csv, METRICS_HEADER};
use crate::detector::{train, Detector, EpochMetrics, HeadKind};
use crate::error::{Error, Result};
use crate::losses::{LossState, LossVariant};
use crate::nn::ParamStore;

pub const METRICS_NAME: &str = "metrics.csv";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const RUNNING_MEAN_RECORD: &str = "loss.running_mean";

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub gflops: f64,
    pub store: ParamStore,
    pub loss_state: LossState,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// Trains `cfg` and writes the resolved config, `metrics.csv` (rewritten
/// after every epoch) and the final checkpoint into `cfg.out_dir`.
pub fn train_run(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let train_set = cfg.train_set()?;
    let val_set = cfg.val_set()?;
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, cfg.model.clone())?;
    let mut state = cfg.loss_state();
    let metrics_path = out.join(METRICS_NAME);
    fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let mut write_err = None;
    train(&model, &mut store, &mut state, &train_set, &val_set, &cfg.train, |row| {
        rows.push(row.clone());
        if let Err(e) = fs::write(&metrics_path, metrics_csv(&rows)) {
            write_err.get_or_insert(e);
        }
        on_epoch(row);
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ckpt_state = checkpoint_state(&state);
    checkpoint::save(&out.join(CHECKPOINT_NAME), &store, &[(RUNNING_MEAN_RECORD, ckpt_state.running_mean)])?;
    Ok(RunOutcome { metrics: rows, gflops: model_flops(&model).gflops(), store, loss_state: state, out_dir: out })
}

/// Loads a checkpoint written by [`train_run`] and scores the validation set
/// of `cfg`. With the training config this reproduces the last metrics row.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<EpochMetrics> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, cfg.model.clone())?;
    let extra = checkpoint::load_into(path, &mut store)?;
    let mut state = cfg.loss_state().eval();
    match extra.iter().find(|r| r.name == RUNNING_MEAN_RECORD) {
        Some(r) if r.values.len() == 1 => state.running_mean = r.values[0] as f64,
        Some(_) => return Err(Error::Format { path: path.to_path_buf(), msg: "malformed running mean record".into() }),
        None if state.variant.uses_running_mean() => {
            return Err(Error::Format { path: path.to_path_buf(), msg: "running mean record missing".into() })
        }
        None => {}
    }
    if let Some(r) = extra.iter().find(|r| r.name != RUNNING_MEAN_RECORD) {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("unexpected record `{}`", r.name) });
    }
    let (loss, ev) = evaluate_model(&model, &store, &state, &cfg.val_set()?, &cfg.train)?;
    Ok(EpochMetrics {
        epoch: cfg.train.epochs,
        loss,
        precision: ev.precision,
        recall: ev.recall,
        map50: ev.map50,
        map5095: ev.map5095,
    })
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub dahead: bool,
    pub bwfpn: bool,
    pub wiou: bool,
}

impl Variant {
    /// Table order: baseline, each component alone, each pair, all three.
    pub const ALL: [Variant; 8] = [
        Variant { dahead: false, bwfpn: false, wiou: false },
        Variant { dahead: true, bwfpn: false, wiou: false },
        Variant { dahead: false, bwfpn: true, wiou: false },
        Variant { dahead: false, bwfpn: false, wiou: true },
        Variant { dahead: true, bwfpn: true, wiou: false },
        Variant { dahead: true, bwfpn: false, wiou: true },
        Variant { dahead: false, bwfpn: true, wiou: true },
        Variant { dahead: true, bwfpn: true, wiou: true },
    ];
    pub const BASELINE: Variant = Variant::ALL[0];
    pub const FULL: Variant = Variant::ALL[7];

    pub fn name(self) -> String {
        let parts: Vec<&str> = [(self.dahead, "dahead"), (self.bwfpn, "bwfpn"), (self.wiou, "wiou")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("_")
        }
    }

    /// `base` with this variant's head, neck and loss, seeded with `seed`
    /// for both initialisation and batch order, writing to `out_dir`.
    pub fn apply(self, base: &RunConfig, seed: u64, out_dir: PathBuf) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.head = if self.dahead { HeadKind::DaHead } else { HeadKind::Plain };
        cfg.model.neck = if self.bwfpn { NeckKind::Bwfpn } else { NeckKind::Fpn };
        cfg.loss.variant = if self.wiou { LossVariant::Wiou3 } else { LossVariant::Ciou };
        cfg.model.init_seed = seed;
        cfg.train.seed = seed;
        cfg.out_dir = out_dir;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: EpochMetrics,
    pub gflops: f64,
}

pub const ABLATION_HEADER: &str = "dahead,bwfpn,wiou,precision,recall,map50,map5095,gflops";
pub const RUNS_HEADER: &str = "dahead,bwfpn,wiou,seed,precision,recall,map50,map5095,gflops,median_map5095";
pub const ABLATION_NAME: &str = "ablation.csv";
pub const RUNS_NAME: &str = "ablation_runs.csv";

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn flag(b: bool) -> u8 {
    b as u8
}

/// Per-variant medians over seeds, one row per variant in table order.
pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for v in Variant::ALL {
        let own: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
        if own.is_empty() {
            continue;
        }
        let m = |f: fn(&EpochMetrics) -> f64| median(&own.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            flag(v.dahead),
            flag(v.bwfpn),
            flag(v.wiou),
            m(|e| e.precision),
            m(|e| e.recall),
            m(|e| e.map50),
            m(|e| e.map5095),
            own[0].gflops
        ));
    }
    s
}

/// Every run, with the median mAP@[.5:.95] of its variant repeated per row.
pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    for r in runs {
        let same: Vec<f64> = runs.iter().filter(|o| o.variant == r.variant).map(|o| o.metrics.map5095).collect();
        let v = r.variant;
        let e = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            flag(v.dahead),
            flag(v.bwfpn),
            flag(v.wiou),
            r.seed,
            e.precision,
            e.recall,
            e.map50,
            e.map5095,
            r.gflops,
            median(&same)
        ));
    }
    s
}

/// Trains every variant for every seed under `out_dir/<variant>_seed<s>/`
/// and writes both ablation tables into `out_dir`.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: &Path,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    fs::create_dir_all(out_dir)?;
    base.write_resolved(out_dir)?;
    let mut runs = Vec::new();
    for &v in variants {
        for &seed in seeds {
            let cfg = v.apply(base, seed, out_dir.join(format!("{}_seed{seed}", v.name())));
            let outcome = train_run(&cfg, |_| {})?;
            let metrics = outcome.last().cloned().ok_or_else(|| Error::invalid("ablation runs need epochs >= 1"))?;
            let run = AblationRun { variant: v, seed, metrics, gflops: outcome.gflops };
            on_run(&run);
            runs.push(run);
        }
    }
    fs::write(out_dir.join(ABLATION_NAME), ablation_csv(&runs))?;
    fs::write(out_dir.join(RUNS_NAME), runs_csv(&runs))?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::parse(
            "input_size = 32\nimage_size = 32\nstem_width = 4\nstage_widths = 4,8,8,8\nchannels = 8\n\
             head_blocks = 1\nhead_samples = 1\nmax_targets = 2\nhat_size = 6,8\nperson_width = 5,7\n\
             person_height = 10,14\ntrain_count = 8\nval_count = 4\nepochs = 2\nbatch_size = 4\n",
        )
        .unwrap();
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn variant_names_and_configs() {
        let names: Vec<String> = Variant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(names[0], "baseline");
        assert_eq!(names[7], "dahead_bwfpn_wiou");
        let cfg = Variant::FULL.apply(&RunConfig::default(), 7, "x".into());
        assert_eq!((cfg.model.head, cfg.model.neck, cfg.loss.variant), (HeadKind::DaHead, NeckKind::Bwfpn, LossVariant::Wiou3));
        assert_eq!((cfg.model.init_seed, cfg.train.seed), (7, 7));
        let cfg = Variant::BASELINE.apply(&RunConfig::default(), 7, "x".into());
        assert_eq!((cfg.model.head, cfg.model.neck, cfg.loss.variant), (HeadKind::Plain, NeckKind::Fpn, LossVariant::Ciou));
    }

    #[test]
    fn eval_reproduces_the_last_training_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = train_run(&cfg, |_| {}).unwrap();
        let csv = fs::read_to_string(dir.path().join(METRICS_NAME)).unwrap();
        assert_eq!(csv, metrics_csv(&out.metrics));
        let row = evaluate_checkpoint(&cfg, &dir.path().join(CHECKPOINT_NAME)).unwrap();
        assert_eq!(row.csv_row(), out.last().unwrap().csv_row());
        assert_eq!(RunConfig::load(&dir.path().join(crate::config::RESOLVED_NAME)).unwrap(), cfg);
    }

    #[test]
    fn ablation_tables_have_the_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny(dir.path());
        base.train.epochs = 1;
        let runs = ablate(&base, &Variant::ALL, &[1, 2], dir.path(), |_| {}).unwrap();
        assert_eq!(runs.len(), 16);
        let table = fs::read_to_string(dir.path().join(ABLATION_NAME)).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines.len(), 9);
        let per_run = fs::read_to_string(dir.path().join(RUNS_NAME)).unwrap();
        assert_eq!(per_run.lines().count(), 17);
        // the loss choice never changes the architecture
        let gflops = |i: usize| lines[i].rsplit(',').next().unwrap().to_string();
        assert_eq!(gflops(1), gflops(4));
        assert_eq!(gflops(2), gflops(6));
        assert_eq!(gflops(3), gflops(7));
        assert_eq!(gflops(5), gflops(8));
        assert!(dir.path().join("dahead_seed2").join(CHECKPOINT_NAME).exists());

        // the baseline cell equals a direct run with the same seed
        let direct_dir = tempfile::tempdir().unwrap();
        let direct = Variant::BASELINE.apply(&base, 1, direct_dir.path().to_path_buf());
        train_run(&direct, |_| {}).unwrap();
        assert_eq!(
            fs::read(direct_dir.path().join(METRICS_NAME)).unwrap(),
            fs::read(dir.path().join("baseline_seed1").join(METRICS_NAME)).unwrap()
        );
    }
}
