//! Experiment configuration: a versioned TOML document, strictly parsed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mima_core::adapt::AdaptMethod;
use mima_core::diffusion::{Arch, NoiseSchedule, SamplerKind, ScheduleConfig};
use mima_core::immunize::ImmunizeConfig;
use mima_core::metrics::SimilarityMetric;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Immunization methods compared against the unprotected model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mima,
    Jt,
    Cp,
    Sequential,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mima, Method::Jt, Method::Cp, Method::Sequential];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mima => "mima",
            Method::Jt => "jt",
            Method::Cp => "cp",
            Method::Sequential => "sequential",
        }
    }
}

/// Synthetic concepts and embeddings shared by every group of a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Concepts groups pick their targets and others from. The pre-trained
    /// model never sees them.
    pub concept_pool: usize,
    /// Concepts the pre-trained model is trained on.
    pub generic_concepts: usize,
    /// Independent regularization embeddings `N'` appended to `C_reg`.
    pub reg_embeddings: usize,
    pub pool_radius: f64,
    pub generic_radius: f64,
    pub concept_std: f64,
    pub samples_per_concept: usize,
    #[serde(default = "default_embedding_std")]
    pub embedding_std: f64,
    /// Upper bound on the cosine between two concept embeddings.
    #[serde(default = "default_max_cosine")]
    pub max_cosine: f64,
    #[serde(default = "default_resample_limit")]
    pub resample_limit: usize,
}

fn default_embedding_std() -> f64 {
    1.0
}

fn default_max_cosine() -> f64 {
    0.5
}

fn default_resample_limit() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Attack steps at which generations are scored; 0 is the unattacked model.
    pub checkpoints: Vec<usize>,
    pub sample_count: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    /// Size of the reference batch drawn from each concept's distribution.
    pub reference_count: usize,
    pub metrics: Vec<SimilarityMetric>,
}

/// Named concept set: indices into the concept pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptGroup {
    pub name: String,
    pub targets: Vec<usize>,
    #[serde(default)]
    pub others: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub workers: usize,
    pub methods: Vec<Method>,
    pub arch: Arch,
    pub schedule: ScheduleConfig,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub immunize: ImmunizeConfig,
    pub attacks: Vec<AdaptMethod>,
    pub evaluation: EvalConfig,
    pub groups: Vec<ConceptGroup>,
}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(key, message()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            CliError::config(key, e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("serializing config: {e}")))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Pool indices of a group, targets first.
    pub fn group_concepts(group: &ConceptGroup) -> Vec<usize> {
        group.targets.iter().chain(&group.others).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, "schema_version", || {
            format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)
        })?;
        check(!self.name.trim().is_empty(), "name", || "must not be empty".into())?;
        check(!self.seeds.is_empty(), "seeds", || "at least one seed is required".into())?;
        check(
            self.seeds.iter().collect::<BTreeSet<_>>().len() == self.seeds.len(),
            "seeds",
            || "seeds must be distinct".into(),
        )?;
        check(
            self.methods.iter().collect::<BTreeSet<_>>().len() == self.methods.len(),
            "methods",
            || "methods must be distinct".into(),
        )?;
        self.arch
            .validate()
            .map_err(|e| CliError::config("arch", e.to_string()))?;
        NoiseSchedule::linear(&self.schedule).map_err(|e| CliError::config("schedule", e.to_string()))?;

        let w = &self.world;
        check(w.concept_pool >= 1, "world.concept_pool", || "must be >= 1".into())?;
        check(w.generic_concepts >= 1, "world.generic_concepts", || "must be >= 1".into())?;
        check(w.reg_embeddings >= 1, "world.reg_embeddings", || "must be >= 1".into())?;
        for (key, v) in [
            ("world.pool_radius", w.pool_radius),
            ("world.generic_radius", w.generic_radius),
            ("world.concept_std", w.concept_std),
            ("world.embedding_std", w.embedding_std),
        ] {
            check(positive(v), key, || format!("must be finite and > 0, got {v}"))?;
        }
        check(w.max_cosine > -1.0 && w.max_cosine <= 1.0, "world.max_cosine", || {
            format!("must lie in (-1, 1], got {}", w.max_cosine)
        })?;
        check(w.samples_per_concept >= 1, "world.samples_per_concept", || "must be >= 1".into())?;
        check(w.resample_limit >= 1, "world.resample_limit", || "must be >= 1".into())?;

        let p = &self.pretrain;
        check(p.lr >= 0.0 && p.lr.is_finite(), "pretrain.lr", || format!("must be finite and >= 0, got {}", p.lr))?;
        check(p.batch_size >= 1, "pretrain.batch_size", || "must be >= 1".into())?;

        self.immunize
            .validate()
            .map_err(|e| CliError::config("immunize", e.to_string()))?;
        let sig = self.arch.signature();
        for (key, subset) in [
            ("immunize.lower_subset", &self.immunize.lower_subset),
            ("immunize.upper_subset", &self.immunize.upper_subset),
        ] {
            subset.mask(&sig).map_err(|e| CliError::config(key, e.to_string()))?;
        }

        check(!self.attacks.is_empty(), "attacks", || "at least one attack is required".into())?;
        let mut kinds = BTreeSet::new();
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate()
                .map_err(|e| CliError::config(format!("attacks[{i}]"), e.to_string()))?;
            check(kinds.insert(a.kind.name()), &format!("attacks[{i}].kind"), || {
                format!("attack `{}` listed twice", a.kind.name())
            })?;
        }

        let e = &self.evaluation;
        check(!e.checkpoints.is_empty(), "evaluation.checkpoints", || "at least one checkpoint is required".into())?;
        check(e.checkpoints.windows(2).all(|p| p[0] < p[1]), "evaluation.checkpoints", || {
            "must be strictly increasing".into()
        })?;
        let last = *e.checkpoints.last().expect("nonempty");
        for (i, a) in self.attacks.iter().enumerate() {
            check(last <= a.steps, &format!("attacks[{i}].steps"), || {
                format!("last checkpoint {last} exceeds {} steps", a.steps)
            })?;
        }
        check(e.sample_count >= 1, "evaluation.sample_count", || "must be >= 1".into())?;
        check(e.reference_count >= 1, "evaluation.reference_count", || "must be >= 1".into())?;
        check(!e.metrics.is_empty(), "evaluation.metrics", || "at least one metric is required".into())?;
        let mut names = BTreeSet::new();
        for (i, m) in e.metrics.iter().enumerate() {
            m.build(self.arch.data_dim)
                .map_err(|err| CliError::config(format!("evaluation.metrics[{i}]"), err.to_string()))?;
            check(names.insert(m.kind.name()), &format!("evaluation.metrics[{i}].kind"), || {
                format!("metric `{}` listed twice", m.kind.name())
            })?;
        }

        check(!self.groups.is_empty(), "groups", || "at least one concept group is required".into())?;
        let mut group_names = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            let key = |f: &str| format!("groups[{i}].{f}");
            check(
                !g.name.is_empty() && g.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'),
                &key("name"),
                || format!("`{}` must be nonempty ASCII alphanumeric or `_`", g.name),
            )?;
            check(group_names.insert(&g.name), &key("name"), || format!("duplicate group `{}`", g.name))?;
            check(!g.targets.is_empty(), &key("targets"), || "at least one target is required".into())?;
            let all = Self::group_concepts(g);
            check(all.iter().collect::<BTreeSet<_>>().len() == all.len(), &key("targets"), || {
                "targets and others must be distinct".into()
            })?;
            if let Some(bad) = all.iter().find(|&&c| c >= w.concept_pool) {
                return Err(CliError::config(
                    key("targets"),
                    format!("concept {bad} is outside the pool of {}", w.concept_pool),
                ));
            }
        }
        Ok(())
    }
}
