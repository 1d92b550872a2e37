//! TOML run configuration. A file names a base `profile` (`desk` or `full`)
//! and overrides any subset of its keys; unknown keys are rejected.

use std::path::{Path, PathBuf};

use sage_core::geometry::PoseDistribution;
use sage_core::losses::LossWeights;
use sage_core::model::{Ablation, Model, ModelConfig};
use sage_core::optim::AdamConfig;
use sage_core::training::{ScheduleEntry, TrainConfig};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{read, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylizerKind {
    Edge,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub stage1: Vec<ScheduleEntry>,
    pub stage2: Vec<ScheduleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory of photos with masks; synthetic faces when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photos: Option<PathBuf>,
    /// Directory of drawings with masks for stage 2; produced by the stylizer
    /// from the photos when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawings: Option<PathBuf>,
    pub synthetic_count: usize,
    pub stylizer: StylizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Run directory receiving checkpoints, logs and the manifest.
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_name: Option<String>,
    pub model: ModelConfig,
    pub poses: PoseDistribution,
    pub losses: LossWeights,
    pub adam: AdamConfig,
    pub ablation: Ablation,
    pub stages: Stages,
    pub data: DataConfig,
}

/// Keys that may appear in a file although the base profile leaves them unset.
const OPTIONAL_KEYS: [&str; 3] = ["style_name", "data.photos", "data.drawings"];

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let t1 = match profile {
            Profile::Desk => TrainConfig::desk(1),
            Profile::Full => TrainConfig::full(1),
        };
        Self {
            profile,
            seed: t1.seed,
            output: PathBuf::from(match profile {
                Profile::Desk => "runs/desk",
                Profile::Full => "runs/full",
            }),
            style_name: None,
            poses: t1.model.projector.poses,
            model: t1.model,
            losses: t1.losses,
            adam: t1.adam,
            ablation: t1.ablation,
            stages: Stages {
                stage1: t1.schedule.clone(),
                stage2: t1.schedule,
            },
            data: DataConfig {
                photos: None,
                drawings: None,
                synthetic_count: 64,
                stylizer: StylizerKind::Edge,
            },
        }
    }

    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("profile: {e}")))?,
        };
        let mut merged = toml::Table::try_from(Self::profile(profile)).expect("profile serializes");
        merge(&mut merged, user, "")?;
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        cfg.output = abs(&cfg.output);
        cfg.data.photos = cfg.data.photos.as_deref().map(abs);
        cfg.data.drawings = cfg.data.drawings.as_deref().map(abs);
        cfg.model.projector.poses = cfg.poses;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = read(path).map_err(|_| Error::Config(format!("cannot read config file {}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Config(format!("{} is not utf-8", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml(text, base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let mut model = self.model.clone();
        model.projector.poses = self.poses;
        TrainConfig {
            stage,
            schedule: if stage == 1 { self.stages.stage1.clone() } else { self.stages.stage2.clone() },
            losses: self.losses,
            adam: self.adam,
            seed: self.seed,
            model,
            ablation: self.ablation,
        }
    }

    /// Largest decoded image side reached by either stage.
    pub fn max_image_resolution(&self) -> usize {
        self.stages
            .stage1
            .iter()
            .chain(&self.stages.stage2)
            .map(|e| Model::image_resolution(e.render_resolution))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.poses.validate()?;
        for stage in [1, 2] {
            self.train_config(stage).validate()?;
        }
        if self.data.photos.is_none() && self.data.synthetic_count == 0 {
            return Err(Error::Config("data.synthetic_count must be positive without data.photos".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}

/// Git blob object id of `bytes` (`sha1("blob <len>\0" ++ bytes)`).
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_profile() {
        let c = RunConfig::from_toml("", Path::new("/base")).unwrap();
        let mut want = RunConfig::profile(Profile::Desk);
        want.output = PathBuf::from("/base/runs/desk");
        assert_eq!(c, want);
        assert_eq!(c.train_config(1), TrainConfig::desk(1));
    }

    #[test]
    fn overrides_merge_and_typos_fail() {
        let text = r#"
            seed = 9
            [model.projector]
            n_samples = 8
            [poses]
            yaw_spread = 0.1
            [data]
            photos = "faces"
        "#;
        let c = RunConfig::from_toml(text, Path::new("/r")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.projector.n_samples, 8);
        assert_eq!(c.model.projector.d_z, ModelConfig::desk().projector.d_z);
        assert_eq!(c.train_config(2).model.projector.poses.yaw_spread, 0.1);
        assert_eq!(c.data.photos.as_deref(), Some(Path::new("/r/faces")));
        let err = RunConfig::from_toml("[model.projector]\nn_sample = 3\n", Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("model.projector.n_sample"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::profile(Profile::Full);
        let mut abs = c.clone();
        abs.output = PathBuf::from("/x/runs/full");
        let text = toml::to_string(&abs).unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("/elsewhere")).unwrap(), abs);
    }

    #[test]
    fn content_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(content_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(content_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }
}
