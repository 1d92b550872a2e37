#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sage_core::adversaries::DiscConfig;
use sage_core::model::ModelConfig;
use sage_core::training::{stage1_init, stage2_init, Checkpoint, ScheduleEntry, TrainConfig};

/// A model small enough that one generation takes milliseconds; images are 16x16.
pub fn tiny_config(stage: u8, steps: u64) -> TrainConfig {
    let mut m = ModelConfig::desk();
    m.projector.d_z = 8;
    m.projector.d_s = 8;
    m.projector.mapping_hidden = 8;
    m.projector.film_layers = 2;
    m.projector.film_hidden = 8;
    m.projector.feature_channels = 4;
    m.projector.n_samples = 4;
    m.decoder.channels = vec![4, 4, 4];
    m.translator.channels = vec![4, 4, 4, 4, 4];
    m.translator.spade_hidden = 4;
    m.disc = DiscConfig {
        base_channels: 2,
        max_channels: 4,
        max_resolution: 16,
    };
    TrainConfig {
        stage,
        schedule: vec![ScheduleEntry {
            render_resolution: 2,
            g_lr: 1e-3,
            d_lr: 1e-3,
            batch_size: 2,
            steps,
        }],
        model: m,
        seed: 3,
        ..TrainConfig::desk(stage)
    }
}

/// Untrained stage-2 checkpoint (translator attached) built from `seed`.
pub fn tiny_stage2(seed: u64) -> Checkpoint {
    let c1 = TrainConfig {
        seed,
        ..tiny_config(1, 0)
    };
    let (_, s1) = stage1_init(&c1).unwrap();
    let c2 = TrainConfig {
        seed,
        ..tiny_config(2, 0)
    };
    stage2_init(&s1, &c2).unwrap().1
}

pub fn tiny_stage1(seed: u64) -> Checkpoint {
    let c1 = TrainConfig {
        seed,
        ..tiny_config(1, 0)
    };
    stage1_init(&c1).unwrap().1
}

/// Saves `ck` as `{root}/{id}/stage{S}/step{N}` and returns the step directory.
pub fn save_under(root: &Path, id: &str, ck: &Checkpoint, style: Option<&str>) -> PathBuf {
    let dir = sage::checkpoint::step_dir(&root.join(id), ck.stage, ck.step);
    sage::checkpoint::save(&dir, ck, style).unwrap();
    dir
}

/// TOML for a run of the tiny model, `steps` per stage, 4 synthetic faces.
pub fn tiny_toml(output: &Path, steps: u64) -> String {
    format!(
        r#"seed = 5
output = "{out}"

[model.projector]
d_z = 8
d_s = 8
mapping_hidden = 8
film_layers = 2
film_hidden = 8
feature_channels = 4
n_samples = 4

[model.decoder]
channels = [4, 4, 4]

[model.translator]
channels = [4, 4, 4, 4, 4]
spade_hidden = 4

[model.disc]
base_channels = 2
max_channels = 4
max_resolution = 16

[[stages.stage1]]
render_resolution = 2
g_lr = 0.001
d_lr = 0.001
batch_size = 2
steps = {steps}

[[stages.stage2]]
render_resolution = 2
g_lr = 0.001
d_lr = 0.001
batch_size = 2
steps = {steps}

[data]
synthetic_count = 4
"#,
        out = output.display()
    )
}
