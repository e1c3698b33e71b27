//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! unknown keys are rejected. [`RunConfig::to_text`] writes every key, so
//! the resolved file reproduces the run when read back.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bwfpn::NeckKind;
use crate::detector::{Activation, Dataset, HeadKind, ModelConfig, SceneSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{LossState, LossVariant};

pub const RESOLVED_NAME: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenes: SceneSpec,
    /// Box loss and its constants; the running mean always starts at 1.
    pub loss: LossState,
    pub train_count: usize,
    pub val_count: usize,
    /// First generator index of the validation scenes.
    pub val_start: u64,
    /// Datasets on disk replace the generated ones when set.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scenes: SceneSpec::default(),
            loss: LossState::new(LossVariant::Wiou3),
            train_count: 300,
            val_count: 60,
            val_start: 100_000,
            train_dir: None,
            val_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse::<usize>(s.trim())).collect()
}

fn parse_pair(v: &str) -> std::result::Result<(usize, usize), String> {
    match parse_list(v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(format!("expected `lo,hi`, got `{v}`")),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format { path: path.to_path_buf(), msg: format!("cannot read config: {e}") })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, msg: format!("expected `key = value`, got `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config { line, msg: format!("key `{key}` set twice") });
            }
            match cfg.set(key, value) {
                Ok(true) => seen.push(key.to_string()),
                Ok(false) => return Err(Error::UnknownKey(key.to_string())),
                Err(msg) => return Err(Error::Config { line, msg: format!("{key}: {msg}") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one key; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        let (m, t, s, l) = (&mut self.model, &mut self.train, &mut self.scenes, &mut self.loss);
        match key {
            "input_size" => m.input_size = parse(v)?,
            "stem_width" => m.stem_width = parse(v)?,
            "stage_widths" => m.stage_widths = parse_list(v)?,
            "num_levels" => m.num_levels = parse(v)?,
            "channels" => m.channels = parse(v)?,
            "neck" => m.neck = parse::<NeckKind>(v)?,
            "neck_layers" => m.neck_layers = parse(v)?,
            "head" => m.head = parse::<HeadKind>(v)?,
            "head_blocks" => m.head_blocks = parse(v)?,
            "head_samples" => m.head_samples = parse(v)?,
            "head_reduction" => m.head_reduction = parse(v)?,
            "sppf" => m.sppf = parse(v)?,
            "norm_groups" => m.norm_groups = parse(v)?,
            "activation" => m.activation = parse::<Activation>(v)?,
            "init_seed" => m.init_seed = parse(v)?,
            "batch_size" => t.batch_size = parse(v)?,
            "epochs" => t.epochs = parse(v)?,
            "lr" => t.lr = parse(v)?,
            "lr_final" => t.lr_final = parse(v)?,
            "momentum" => t.momentum = parse(v)?,
            "weight_decay" => t.weight_decay = parse(v)?,
            "train_seed" => t.seed = parse(v)?,
            "lambda_box" => t.lambda_box = parse(v)?,
            "lambda_cls" => t.lambda_cls = parse(v)?,
            "conf_thresh" => t.conf_thresh = parse(v)?,
            "nms_iou" => t.nms_iou = parse(v)?,
            "eval_conf_thresh" => t.eval_conf_thresh = parse(v)?,
            "grad_clip" => t.grad_clip = parse(v)?,
            "augment" => t.augment = parse(v)?,
            "max_shift" => t.max_shift = parse(v)?,
            "loss" => l.variant = parse::<LossVariant>(v)?,
            "loss_momentum" => l.momentum = parse(v)?,
            "wiou_gamma" => l.gamma = parse(v)?,
            "wiou_alpha" => l.alpha = parse(v)?,
            "wiou_delta" => l.delta = parse(v)?,
            "scene_seed" => s.seed = parse(v)?,
            "image_size" => s.image_size = parse(v)?,
            "min_targets" => s.min_targets = parse(v)?,
            "max_targets" => s.max_targets = parse(v)?,
            "hat_size" => s.hat_size = parse_pair(v)?,
            "person_width" => s.person_width = parse_pair(v)?,
            "person_height" => s.person_height = parse_pair(v)?,
            "overlap_prob" => s.overlap_prob = parse(v)?,
            "max_occlusion" => s.max_occlusion = parse(v)?,
            "max_distractors" => s.max_distractors = parse(v)?,
            "noise" => s.noise = parse(v)?,
            "train_count" => self.train_count = parse(v)?,
            "val_count" => self.val_count = parse(v)?,
            "val_start" => self.val_start = parse(v)?,
            "train_dir" => self.train_dir = parse_path(v),
            "val_dir" => self.val_dir = parse_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, s, l) = (&self.model, &self.train, &self.scenes, &self.loss);
        vec![
            ("input_size", m.input_size.to_string()),
            ("stem_width", m.stem_width.to_string()),
            ("stage_widths", join(&m.stage_widths)),
            ("num_levels", m.num_levels.to_string()),
            ("channels", m.channels.to_string()),
            ("neck", m.neck.to_string()),
            ("neck_layers", m.neck_layers.to_string()),
            ("head", m.head.to_string()),
            ("head_blocks", m.head_blocks.to_string()),
            ("head_samples", m.head_samples.to_string()),
            ("head_reduction", m.head_reduction.to_string()),
            ("sppf", m.sppf.to_string()),
            ("norm_groups", m.norm_groups.to_string()),
            ("activation", m.activation.to_string()),
            ("init_seed", m.init_seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_final", t.lr_final.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("train_seed", t.seed.to_string()),
            ("lambda_box", t.lambda_box.to_string()),
            ("lambda_cls", t.lambda_cls.to_string()),
            ("conf_thresh", t.conf_thresh.to_string()),
            ("nms_iou", t.nms_iou.to_string()),
            ("eval_conf_thresh", t.eval_conf_thresh.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("augment", t.augment.to_string()),
            ("max_shift", t.max_shift.to_string()),
            ("loss", l.variant.to_string()),
            ("loss_momentum", l.momentum.to_string()),
            ("wiou_gamma", l.gamma.to_string()),
            ("wiou_alpha", l.alpha.to_string()),
            ("wiou_delta", l.delta.to_string()),
            ("scene_seed", s.seed.to_string()),
            ("image_size", s.image_size.to_string()),
            ("min_targets", s.min_targets.to_string()),
            ("max_targets", s.max_targets.to_string()),
            ("hat_size", join(&[s.hat_size.0, s.hat_size.1])),
            ("person_width", join(&[s.person_width.0, s.person_width.1])),
            ("person_height", join(&[s.person_height.0, s.person_height.1])),
            ("overlap_prob", s.overlap_prob.to_string()),
            ("max_occlusion", s.max_occlusion.to_string()),
            ("max_distractors", s.max_distractors.to_string()),
            ("noise", s.noise.to_string()),
            ("train_count", self.train_count.to_string()),
            ("val_count", self.val_count.to_string()),
            ("val_start", self.val_start.to_string()),
            ("train_dir", path_text(&self.train_dir)),
            ("val_dir", path_text(&self.val_dir)),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scenes.validate()?;
        if self.train_dir.is_none() && self.train_count == 0 {
            return Err(Error::invalid("train_count must be positive"));
        }
        if self.scenes.image_size != self.model.input_size && (self.train_dir.is_none() || self.val_dir.is_none()) {
            return Err(Error::invalid(format!(
                "image_size {} differs from input_size {}",
                self.scenes.image_size, self.model.input_size
            )));
        }
        if !(self.loss.momentum > 0.0 && self.loss.momentum <= 1.0) {
            return Err(Error::invalid(format!("loss_momentum {} outside (0, 1]", self.loss.momentum)));
        }
        Ok(())
    }

    /// A fresh loss state with this config's constants.
    pub fn loss_state(&self) -> LossState {
        LossState { running_mean: 1.0, training: true, ..self.loss.clone() }
    }

    pub fn train_set(&self) -> Result<Dataset> {
        match &self.train_dir {
            Some(dir) => Dataset::load(dir),
            None => Ok(Dataset::synthetic(&self.scenes, 0, self.train_count)),
        }
    }

    pub fn val_set(&self) -> Result<Dataset> {
        match &self.val_dir {
            Some(dir) => Dataset::load(dir),
            None => Ok(Dataset::synthetic(&self.scenes, self.val_start, self.val_count)),
        }
    }

    /// Writes the resolved config into `dir`, creating it.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "# small run\nepochs = 3  # short\nlr = 0.005\nneck = fpn\nhead = plain\nloss = ciou\n\
                    stage_widths = 8,8,16,16\nhat_size = 6,9\ntrain_dir = data/train\nactivation = silu\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.model.neck, NeckKind::Fpn);
        assert_eq!(cfg.loss.variant, LossVariant::Ciou);
        assert_eq!(cfg.scenes.hat_size, (6, 9));
        assert_eq!(cfg.train_dir, Some(PathBuf::from("data/train")));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("epochs = 2\nepohcs = 3\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "epohcs"), "{err}");
    }

    #[test]
    fn bad_lines_report_their_number() {
        for (text, want) in [("epochs = 2\nlr 0.1\n", 2), ("\n\nlr = fast\n", 3), ("lr = 1\nlr = 2\n", 2)] {
            match RunConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("input_size = 48\nimage_size = 48\n").is_err());
        assert!(RunConfig::parse("input_size = 128\n").is_err());
        assert!(RunConfig::parse("loss = l2\n").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            assert_eq!(cfg.set(k, &v), Ok(true), "{k}");
        }
    }

    #[test]
    fn resolved_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = RunConfig::default().write_resolved(&dir.path().join("a/b")).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }
}
