//! Run configuration: one TOML file drives data generation, training,
//! attacks and evaluation. Every field has a default, so an empty file is
//! the default run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use segattack::attacks::{AttackConfig, Mode, Transform};
use segattack::models::{default_zoo, ModelSpec, TrainConfig};
use segattack::synthdata::SceneSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            seed: 2024,
            train_size: 400,
            eval_size: 100,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub spec: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub source: String,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Attack whose budget and weights parameterize the ablation grid.
    pub ablation_base: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            source: "A".into(),
            targets: vec!["B".into(), "C".into()],
            seeds: (1..=10).collect(),
            output_dir: PathBuf::from("runs/default"),
            ablation_base: "two_stage".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub experiment: ExperimentSection,
    pub models: Vec<ModelEntry>,
    pub attacks: Vec<AttackConfig>,
}

pub fn default_attacks() -> Vec<AttackConfig> {
    let mut out = vec![AttackConfig::pgd(), AttackConfig::segpgd(), AttackConfig::two_stage()];
    for (prefix, t) in [
        ("mi", Transform::Momentum),
        ("ti", Transform::Translation),
        ("ni", Transform::Nesterov),
    ] {
        out.push(
            AttackConfig::pgd()
                .with_transform(t)
                .with_mode(&format!("{prefix}_pgd"), Mode::Pgd),
        );
        out.push(
            AttackConfig::two_stage()
                .with_transform(t)
                .with_mode(&format!("{prefix}_two_stage"), Mode::TwoStage),
        );
    }
    out
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let models = default_zoo(scene.channels, scene.num_classes)
            .into_iter()
            .map(|spec| ModelEntry {
                spec,
                train: TrainConfig::default(),
            })
            .collect();
        Self {
            dataset: DatasetSection {
                scene,
                ..DatasetSection::default()
            },
            experiment: ExperimentSection::default(),
            models,
            attacks: default_attacks(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Pretty TOML. Every float in the config is an `f32`, so floats are
    /// written in their shortest `f32` form instead of the widened `f64`.
    pub fn to_toml(&self) -> Result<String> {
        fn shorten(v: &mut toml::Value) {
            match v {
                toml::Value::Float(f) => {
                    if let Ok(short) = (*f as f32).to_string().parse::<f64>() {
                        *f = short;
                    }
                }
                toml::Value::Array(a) => a.iter_mut().for_each(shorten),
                toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| shorten(v)),
                _ => {}
            }
        }
        let mut value = toml::Value::try_from(self)?;
        shorten(&mut value);
        Ok(toml::to_string_pretty(&value)?)
    }

    pub fn model_names(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.spec.name.as_str()).collect()
    }

    pub fn model(&self, name: &str) -> Result<&ModelEntry> {
        match self.models.iter().find(|m| m.spec.name == name) {
            Some(m) => Ok(m),
            None => bail!(
                "unknown model {name:?}; known models: {}",
                self.model_names().join(", ")
            ),
        }
    }

    pub fn attack(&self, name: &str) -> Result<&AttackConfig> {
        match self.attacks.iter().find(|a| a.name == name) {
            Some(a) => Ok(a),
            None => {
                let known: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
                bail!("unknown attack {name:?}; known attacks: {}", known.join(", "))
            }
        }
    }

    /// `--seed` replaces the dataset seed and every model's training seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        for m in &mut self.models {
            m.train.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.scene.validate().context("dataset.scene")?;
        ensure!(d.train_size > 0 && d.eval_size > 0, "dataset sizes must be positive");

        ensure!(!self.models.is_empty(), "config lists no models");
        let mut names = HashSet::new();
        for m in &self.models {
            let name = &m.spec.name;
            ensure!(names.insert(name.as_str()), "model name {name:?} appears twice");
            m.spec.validate().with_context(|| format!("model {name}"))?;
            m.train.validate().with_context(|| format!("model {name} training"))?;
            ensure!(
                m.spec.input_channels == d.scene.channels && m.spec.num_classes() == d.scene.num_classes,
                "model {name} maps {} channels to {} classes but the dataset has {} and {}",
                m.spec.input_channels,
                m.spec.num_classes(),
                d.scene.channels,
                d.scene.num_classes
            );
        }

        let mut attacks = HashSet::new();
        for a in &self.attacks {
            ensure!(
                attacks.insert(a.name.as_str()),
                "attack name {:?} appears twice",
                a.name
            );
            a.validate()?;
        }

        let e = &self.experiment;
        self.model(&e.source).context("experiment.source")?;
        ensure!(!e.targets.is_empty(), "experiment.targets is empty");
        for t in &e.targets {
            self.model(t).context("experiment.targets")?;
        }
        ensure!(!e.seeds.is_empty(), "experiment.seeds is empty");
        if !self.attacks.is_empty() {
            self.attack(&e.ablation_base).context("experiment.ablation_base")?;
        }
        Ok(())
    }
}

/// Where each artifact of a run lives under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.tsd")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data").join("eval.tsd")
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.root.join("models").join(format!("{model}.ckpt"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn attack_dir(&self, attack: &str, index: usize) -> PathBuf {
        self.root.join("attacks").join(format!("{attack}_{index}"))
    }
}
