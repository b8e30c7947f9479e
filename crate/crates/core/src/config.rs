//! Experiment configuration as flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected. [`TrainConfig::to_kv`] writes every key in a fixed order, so the
//! text (and its hash) identifies a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::distill::{FaForm, FaLossConfig, FaLossKind, GramScale};
use crate::error::{CoreError, Result};
use crate::student::StudentConfig;
use crate::teacher::FsrcnnBranchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Teacher,
    Student,
    Distill,
}

/// Resolution of the clear image the teacher sees during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resolution {
    /// Half-size clear image.
    Lr,
    /// Full-size clear image.
    Hr,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = CoreError;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    other => Err(CoreError::Config(format!("unknown {} {other:?}", $what))),
                }
            }
        }
    };
}

keyword_enum!(Phase, "phase", Phase::Teacher => "teacher", Phase::Student => "student", Phase::Distill => "distill");
keyword_enum!(Resolution, "resolution", Resolution::Lr => "lr", Resolution::Hr => "hr");

/// Size of a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DataConfig {
    pub n: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 200,
            width: 128,
            height: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Stop as soon as a training step's loss falls below this; 0 disables.
    pub target_loss: f64,
    pub fa: FaLossConfig,
    pub resolution: Resolution,
    pub student: StudentConfig,
    pub teacher: FsrcnnBranchConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Distill,
            teacher_epochs: 20,
            student_epochs: 200,
            batch_size: 2,
            lr0: 1e-5,
            lr_decay: 0.98,
            lr_decay_every: 10,
            clip_norm: 5.0,
            seed: 0,
            max_steps: 0,
            target_loss: 0.0,
            fa: FaLossConfig::default(),
            resolution: Resolution::Hr,
            student: StudentConfig::default(),
            teacher: FsrcnnBranchConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Epoch count of the network trained in this phase.
    pub fn epochs(&self) -> usize {
        match self.phase {
            Phase::Teacher => self.teacher_epochs,
            Phase::Student | Phase::Distill => self.student_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("teacher_epochs", self.teacher_epochs),
            ("student_epochs", self.student_epochs),
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("{k} must be positive")));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(CoreError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CoreError::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.target_loss >= 0.0) {
            return Err(CoreError::Config("target_loss must be non-negative".into()));
        }
        self.fa.validate()?;
        self.student.validate()?;
        self.teacher.validate()?;
        if self.student.teacher_tap_channels != self.teacher.tap_channels() {
            return Err(CoreError::Config(format!(
                "student adapters project to {:?} but the teacher taps have {:?} channels",
                self.student.teacher_tap_channels,
                self.teacher.tap_channels()
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "phase" => self.phase = v.parse()?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "student_epochs" => self.student_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "target_loss" => self.target_loss = parse(key, v)?,
            "fa_loss" => self.fa.kind = v.parse::<FaLossKind>()?,
            "w_fa" => self.fa.w_fa = parse(key, v)?,
            "pool_factor" => self.fa.pool_factor = parse(key, v)?,
            "fa_form" => self.fa.form = v.parse::<FaForm>()?,
            "gram_scale" => self.fa.gram_scale = v.parse::<GramScale>()?,
            "resolution" => self.resolution = v.parse()?,
            "student.width" => self.student.width = parse(key, v)?,
            "student.outer_blocks" => self.student.outer_blocks = parse(key, v)?,
            "student.inner_blocks" => self.student.inner_blocks = parse(key, v)?,
            "student.reduction" => self.student.reduction = parse(key, v)?,
            "teacher.d" => self.teacher.d = parse(key, v)?,
            "teacher.s" => self.teacher.s = parse(key, v)?,
            "teacher.m" => self.teacher.m = parse(key, v)?,
            "teacher.scale" => self.teacher.scale = parse(key, v)?,
            "teacher.dsc" => self.teacher.use_dsc = parse(key, v)?,
            "data.n" => self.data.n = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            other => return Err(CoreError::Config(format!("unknown config key {other:?}"))),
        }
        // Adapter widths follow the teacher unless the two are set apart on
        // purpose, which the format cannot express.
        self.student.teacher_tap_channels = self.teacher.tap_channels().to_vec();
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Every key in fixed order; parsing the result gives back `self`.
    pub fn to_kv(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("phase", self.phase.to_string()),
            ("teacher_epochs", self.teacher_epochs.to_string()),
            ("student_epochs", self.student_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", format!("{:e}", self.lr0)),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("target_loss", format!("{:e}", self.target_loss)),
            ("fa_loss", self.fa.kind.to_string()),
            ("w_fa", self.fa.w_fa.to_string()),
            ("pool_factor", self.fa.pool_factor.to_string()),
            ("fa_form", self.fa.form.to_string()),
            ("gram_scale", self.fa.gram_scale.to_string()),
            ("resolution", self.resolution.to_string()),
            ("student.width", self.student.width.to_string()),
            ("student.outer_blocks", self.student.outer_blocks.to_string()),
            ("student.inner_blocks", self.student.inner_blocks.to_string()),
            ("student.reduction", self.student.reduction.to_string()),
            ("teacher.d", self.teacher.d.to_string()),
            ("teacher.s", self.teacher.s.to_string()),
            ("teacher.m", self.teacher.m.to_string()),
            ("teacher.scale", self.teacher.scale.to_string()),
            ("teacher.dsc", self.teacher.use_dsc.to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.width", self.data.width.to_string()),
            ("data.height", self.data.height.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_kv`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.teacher_epochs, c.student_epochs), (2, 20, 200));
        assert_eq!(c.lr0, 1e-5);
        assert_eq!(c.fa.w_fa, 0.25);
        assert_eq!(c.resolution, Resolution::Hr);
        c.validate().unwrap();
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nfa_loss = kl\nw_fa=0.5\n\nresolution = lr\ngram_scale = mean\nteacher.dsc = true\nlr0 = 3e-4\n")
            .unwrap();
        assert_eq!(c.fa.kind, FaLossKind::Kl);
        let back = TrainConfig::parse_text(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse_text("bogus = 1").is_err());
        assert!(TrainConfig::parse_text("batch_size = 0").is_err());
        assert!(TrainConfig::parse_text("lr_decay = 1.5").is_err());
        assert!(TrainConfig::parse_text("no equals sign").is_err());
        assert!(TrainConfig::parse_text("w_fa = -1").is_err());
    }
}
