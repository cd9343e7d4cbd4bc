//! Line-oriented experiment configuration: `[section]` headers and
//! `key = value` lines, `#` comments.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! [`ExperimentConfig::to_text`] writes every key, and parsing its output
//! gives back the same configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use cotrain_core::data::{AugmentSpec, SynthSpec};
use cotrain_core::schedule::RampConfig;
use cotrain_core::trainer::{CoTrainConfig, Method};

use crate::error::{CliError, CliResult};

/// Grid of an `ablate` run. Empty `views` or `labeled_ratios` fall back to
/// the single value of the `[train]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct AblateSpec {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub views: Vec<usize>,
    pub labeled_ratios: Vec<f64>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dct, Method::Independent, Method::JsdOnly],
            seeds: vec![1, 2, 3],
            views: Vec::new(),
            labeled_ratios: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: CoTrainConfig,
    pub synth: SynthSpec,
    pub out_dir: PathBuf,
    /// Dataset written by `gen-data`; when unset the dataset is generated in memory.
    pub data_dir: Option<PathBuf>,
    /// Epochs between checkpoints; the final models are always saved.
    pub checkpoint_every: u32,
    pub ablate: AblateSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: CoTrainConfig::default(),
            synth: SynthSpec::default(),
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            checkpoint_every: 10,
            ablate: AblateSpec::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Ramp endpoints collected while parsing; the ramp is checked once all keys are read.
#[derive(Clone, Copy)]
struct RampParts {
    lambda_max: f64,
    t_ini: u32,
    t_end: u32,
}

impl From<RampConfig> for RampParts {
    fn from(r: RampConfig) -> Self {
        Self { lambda_max: r.lambda_max(), t_ini: r.t_ini(), t_end: r.t_end() }
    }
}

struct Builder {
    cfg: ExperimentConfig,
    augment_enabled: bool,
    augment: AugmentSpec,
    cot: RampParts,
    div: RampParts,
}

impl Builder {
    fn new() -> Self {
        let cfg = ExperimentConfig::default();
        Self {
            augment_enabled: cfg.train.augment.is_some(),
            augment: cfg.train.augment.unwrap_or_default(),
            cot: cfg.train.cot_ramp.into(),
            div: cfg.train.div_ramp.into(),
            cfg,
        }
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let c = &mut self.cfg;
        let t = &mut c.train;
        let s = &mut c.synth;
        match (section, key) {
            ("experiment", "out_dir") => c.out_dir = PathBuf::from(v),
            ("experiment", "data_dir") => c.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("experiment", "checkpoint_every") => c.checkpoint_every = parse(v)?,

            ("data", "image_size") => s.image_size = parse(v)?,
            ("data", "num_classes") => s.num_classes = parse(v)?,
            ("data", "num_images") => s.num_images = parse(v)?,
            ("data", "num_val") => s.num_val = parse(v)?,
            ("data", "noise_sigma") => s.noise_sigma = parse(v)?,
            ("data", "contrast_jitter") => s.contrast_jitter = parse(v)?,
            ("data", "bias_field") => s.bias_field = parse(v)?,
            ("data", "max_distractors") => s.max_distractors = parse(v)?,
            ("data", "scale_min") => s.scale_min = parse(v)?,
            ("data", "scale_max") => s.scale_max = parse(v)?,
            ("data", "max_tilt_deg") => s.max_tilt_deg = parse(v)?,
            ("data", "seed") => s.seed = parse(v)?,

            ("augment", "enabled") => self.augment_enabled = parse(v)?,
            ("augment", "max_rotation_deg") => self.augment.max_rotation_deg = parse(v)?,
            ("augment", "flip_prob") => self.augment.flip_prob = parse(v)?,
            ("augment", "crop_min") => self.augment.crop_min = parse(v)?,
            ("augment", "crop_max") => self.augment.crop_max = parse(v)?,

            ("model", "base_width") => t.model.base_width = parse(v)?,
            ("model", "depth") => t.model.depth = parse(v)?,
            ("model", "dropout_rate") => t.model.dropout_rate = parse(v)?,

            ("train", "method") => t.method = v.parse().map_err(|e: cotrain_core::Error| e.to_string())?,
            ("train", "views") => t.views = parse(v)?,
            ("train", "batch_size") => t.batch_size = parse(v)?,
            ("train", "epochs") => t.epochs = parse(v)?,
            ("train", "iters_per_epoch") => t.iters_per_epoch = if v == "auto" { None } else { Some(parse(v)?) },
            ("train", "labeled_ratio") => t.labeled_ratio = parse(v)?,
            ("train", "seed") => t.seed = parse(v)?,
            ("train", "lr_decay_every") => t.lr_decay_every = parse(v)?,
            ("train", "lr_decay_factor") => t.lr_decay_factor = parse(v)?,
            ("train", "ema_alpha") => t.ema_alpha = parse(v)?,
            ("train", "pseudo_alpha_start") => t.pseudo_alpha_start = parse(v)?,
            ("train", "pseudo_alpha_end") => t.pseudo_alpha_end = parse(v)?,

            ("optimizer", "lr") => t.adam.lr = parse(v)?,
            ("optimizer", "beta1") => t.adam.beta1 = parse(v)?,
            ("optimizer", "beta2") => t.adam.beta2 = parse(v)?,
            ("optimizer", "epsilon") => t.adam.epsilon = parse(v)?,
            ("optimizer", "weight_decay") => t.adam.weight_decay = parse(v)?,

            ("ramp", "cot_lambda_max") => self.cot.lambda_max = parse(v)?,
            ("ramp", "cot_t_ini") => self.cot.t_ini = parse(v)?,
            ("ramp", "cot_t_end") => self.cot.t_end = parse(v)?,
            ("ramp", "div_lambda_max") => self.div.lambda_max = parse(v)?,
            ("ramp", "div_t_ini") => self.div.t_ini = parse(v)?,
            ("ramp", "div_t_end") => self.div.t_end = parse(v)?,

            ("adversarial", "eps_fgsm") => t.adv.eps_fgsm = parse(v)?,
            ("adversarial", "eps_vat") => t.adv.eps_vat = parse(v)?,
            ("adversarial", "xi") => t.adv.xi = parse(v)?,
            ("adversarial", "n_power") => t.adv.n_power = parse(v)?,

            ("probe", "eps") => t.probe_eps = parse_list(v)?,
            ("probe", "epochs") => t.probe_epochs = parse(v)?,
            ("probe", "labeled_ratio") => t.probe_labeled_ratio = parse(v)?,
            ("probe", "reference_epochs") => t.reference_epochs = parse(v)?,

            ("ablate", "methods") => {
                c.ablate.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(|m| m.parse().map_err(|e: cotrain_core::Error| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            ("ablate", "seeds") => c.ablate.seeds = parse_list(v)?,
            ("ablate", "views") => c.ablate.views = parse_list(v)?,
            ("ablate", "labeled_ratios") => c.ablate.labeled_ratios = parse_list(v)?,

            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    fn finish(mut self, lines: &HashMap<(String, String), usize>) -> CliResult<ExperimentConfig> {
        let line_of = |section: &str, key: &str| lines.get(&(section.to_string(), key.to_string())).copied();
        for (name, parts) in [("cot", self.cot), ("div", self.div)] {
            let ramp = RampConfig::new(parts.lambda_max, parts.t_ini, parts.t_end).map_err(|e| CliError::Config {
                line: line_of("ramp", &format!("{name}_t_end")).or(line_of("ramp", &format!("{name}_t_ini"))),
                message: format!("{name} ramp: {e}"),
            })?;
            if name == "cot" {
                self.cfg.train.cot_ramp = ramp;
            } else {
                self.cfg.train.div_ramp = ramp;
            }
        }
        self.cfg.train.augment = self.augment_enabled.then_some(self.augment);
        self.cfg.train.model.num_classes = self.cfg.synth.num_classes;
        self.cfg.validate()?;
        Ok(self.cfg)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut b = Builder::new();
        let mut section: Option<String> = None;
        let mut lines = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| CliError::Config { line: Some(line), message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header {content:?}")))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| err(format!("key {key:?} before any [section]")))?;
            if lines.insert((sec.to_string(), key.to_string()), line).is_some() {
                return Err(err(format!("duplicate key {key:?} in section [{sec}]")));
            }
            b.set(sec, key, value).map_err(err)?;
        }
        b.finish(&lines)
    }

    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    /// Cross-field checks on top of the per-module validation.
    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let bad = |message: String| Err(CliError::Config { line: None, message });
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.train.model.num_classes != self.synth.num_classes {
            return bad("model and data disagree on the number of classes".into());
        }
        let factor = 1usize << self.train.model.depth;
        if !self.synth.image_size.is_multiple_of(factor) {
            return bad(format!("image_size {} is not divisible by 2^depth = {factor}", self.synth.image_size));
        }
        if self.ablate.methods.contains(&Method::DivProbe) {
            return bad("div_probe is run by the probe subcommand, not ablate".into());
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let aug = t.augment.unwrap_or_default();
        let mut o = String::new();
        let mut section = |name: &str, keys: Vec<(&str, String)>| {
            let _ = writeln!(o, "[{name}]");
            for (k, v) in keys {
                let _ = writeln!(o, "{k} = {v}");
            }
            o.push('\n');
        };
        section(
            "experiment",
            vec![
                ("out_dir", self.out_dir.display().to_string()),
                ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
                ("checkpoint_every", self.checkpoint_every.to_string()),
            ],
        );
        section(
            "data",
            vec![
                ("image_size", s.image_size.to_string()),
                ("num_classes", s.num_classes.to_string()),
                ("num_images", s.num_images.to_string()),
                ("num_val", s.num_val.to_string()),
                ("noise_sigma", s.noise_sigma.to_string()),
                ("contrast_jitter", s.contrast_jitter.to_string()),
                ("bias_field", s.bias_field.to_string()),
                ("max_distractors", s.max_distractors.to_string()),
                ("scale_min", s.scale_min.to_string()),
                ("scale_max", s.scale_max.to_string()),
                ("max_tilt_deg", s.max_tilt_deg.to_string()),
                ("seed", s.seed.to_string()),
            ],
        );
        section(
            "augment",
            vec![
                ("enabled", t.augment.is_some().to_string()),
                ("max_rotation_deg", aug.max_rotation_deg.to_string()),
                ("flip_prob", aug.flip_prob.to_string()),
                ("crop_min", aug.crop_min.to_string()),
                ("crop_max", aug.crop_max.to_string()),
            ],
        );
        section(
            "model",
            vec![
                ("base_width", t.model.base_width.to_string()),
                ("depth", t.model.depth.to_string()),
                ("dropout_rate", t.model.dropout_rate.to_string()),
            ],
        );
        section(
            "train",
            vec![
                ("method", t.method.to_string()),
                ("views", t.views.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("epochs", t.epochs.to_string()),
                ("iters_per_epoch", t.iters_per_epoch.map_or("auto".into(), |n| n.to_string())),
                ("labeled_ratio", t.labeled_ratio.to_string()),
                ("seed", t.seed.to_string()),
                ("lr_decay_every", t.lr_decay_every.to_string()),
                ("lr_decay_factor", t.lr_decay_factor.to_string()),
                ("ema_alpha", t.ema_alpha.to_string()),
                ("pseudo_alpha_start", t.pseudo_alpha_start.to_string()),
                ("pseudo_alpha_end", t.pseudo_alpha_end.to_string()),
            ],
        );
        section(
            "optimizer",
            vec![
                ("lr", t.adam.lr.to_string()),
                ("beta1", t.adam.beta1.to_string()),
                ("beta2", t.adam.beta2.to_string()),
                ("epsilon", t.adam.epsilon.to_string()),
                ("weight_decay", t.adam.weight_decay.to_string()),
            ],
        );
        section(
            "ramp",
            vec![
                ("cot_lambda_max", t.cot_ramp.lambda_max().to_string()),
                ("cot_t_ini", t.cot_ramp.t_ini().to_string()),
                ("cot_t_end", t.cot_ramp.t_end().to_string()),
                ("div_lambda_max", t.div_ramp.lambda_max().to_string()),
                ("div_t_ini", t.div_ramp.t_ini().to_string()),
                ("div_t_end", t.div_ramp.t_end().to_string()),
            ],
        );
        section(
            "adversarial",
            vec![
                ("eps_fgsm", t.adv.eps_fgsm.to_string()),
                ("eps_vat", t.adv.eps_vat.to_string()),
                ("xi", t.adv.xi.to_string()),
                ("n_power", t.adv.n_power.to_string()),
            ],
        );
        section(
            "probe",
            vec![
                ("eps", join(&t.probe_eps)),
                ("epochs", t.probe_epochs.to_string()),
                ("labeled_ratio", t.probe_labeled_ratio.to_string()),
                ("reference_epochs", t.reference_epochs.to_string()),
            ],
        );
        section(
            "ablate",
            vec![
                ("methods", join(&self.ablate.methods)),
                ("seeds", join(&self.ablate.seeds)),
                ("views", join(&self.ablate.views)),
                ("labeled_ratios", join(&self.ablate.labeled_ratios)),
            ],
        );
        o.pop();
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let text = ExperimentConfig::default().to_text();
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.to_text(), text);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::parse(
            "[train]\nmethod = jsd_only # comment\niters_per_epoch = 7\n[probe]\neps = 0.1, 0.2\n[augment]\nenabled = false\n",
        )
        .unwrap();
        assert_eq!(cfg.train.method, Method::JsdOnly);
        assert_eq!(cfg.train.iters_per_epoch, Some(7));
        assert_eq!(cfg.train.probe_eps, vec![0.1, 0.2]);
        assert!(cfg.train.augment.is_none());
    }

    fn line_of(text: &str) -> Option<usize> {
        match ExperimentConfig::parse(text) {
            Err(CliError::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_cite_the_line() {
        assert_eq!(line_of("[train]\nepochs = 3\nbogus = 1\n"), Some(3));
        assert_eq!(line_of("[train]\n\nepochs = many\n"), Some(3));
        assert_eq!(line_of("[train]\nepochs\n"), Some(2));
        assert_eq!(line_of("epochs = 3\n"), Some(1));
        assert_eq!(line_of("[nowhere]\nepochs = 3\n"), Some(2));
        assert_eq!(line_of("[train]\nseed = 1\nseed = 2\n"), Some(3));
        assert_eq!(line_of("[ramp]\ncot_t_ini = 9\ncot_t_end = 4\n"), Some(3));
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        assert!(matches!(ExperimentConfig::parse("[train]\nlabeled_ratio = 0\n"), Err(CliError::Core(_))));
        assert!(matches!(
            ExperimentConfig::parse("[data]\nimage_size = 36\n"),
            Err(CliError::Config { line: None, .. })
        ));
    }
}
