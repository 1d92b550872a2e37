//! Two-stage adversarial training with a progressive resolution schedule.
//!
//! Stage 1 learns photos and semantic maps (`D_s`, `D_I`, reprojection
//! loss). Stage 2 freezes the projector, attaches a fresh translator and
//! drawing discriminator, keeps the semantic discriminator, and learns
//! drawings. The end-to-end variant trains every module on drawings from
//! scratch.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversaries::DiscRole;
use crate::data::{Batch, BatchOrder, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{sample_viewpoint, CameraPose};
use crate::graph::{Graph, Trainable, Var};
use crate::labels::simplex_error;
use crate::losses::{self, LossWeights, ReconInputs};
use crate::model::{Ablation, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::projector::{ProjectMode, Projection, Projector};
use crate::tensor::Tensor;
use crate::translator::Translator;

pub const CHECKPOINT_VERSION: u32 = 1;

fn without_translator(a: Ablation) -> Ablation {
    Ablation {
        use_translator: false,
        use_spade: false,
        ..a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Volume-render side; decoded images are eight times larger.
    pub render_resolution: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub batch_size: usize,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub schedule: Vec<ScheduleEntry>,
    pub losses: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full(1)
    }
}

impl TrainConfig {
    /// 64² → 128² → 256² images.
    pub fn full(stage: u8) -> Self {
        let e = |r, g_lr, d_lr, batch_size| ScheduleEntry {
            render_resolution: r,
            g_lr,
            d_lr,
            batch_size,
            steps: 50_000,
        };
        Self {
            stage,
            schedule: alloc::vec![e(8, 6e-5, 2e-4, 36), e(16, 5e-5, 2e-4, 24), e(32, 3e-5, 1e-4, 24)],
            losses: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            model: ModelConfig::full(),
            ablation: Ablation::default(),
        }
    }

    /// 16² renders (128² images), batch 4, 200 steps.
    pub fn desk(stage: u8) -> Self {
        Self {
            schedule: alloc::vec![ScheduleEntry {
                render_resolution: 16,
                g_lr: 6e-5,
                d_lr: 2e-4,
                batch_size: 4,
                steps: 200,
            }],
            model: ModelConfig::desk(),
            ..Self::full(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("empty resolution schedule".into()));
        }
        for (i, e) in self.schedule.iter().enumerate() {
            if !e.render_resolution.is_power_of_two() {
                return Err(Error::Config(format!("schedule[{i}]: resolution {} is not a power of two", e.render_resolution)));
            }
            if !(e.g_lr > 0.0 && e.d_lr > 0.0) {
                return Err(Error::Config(format!("schedule[{i}]: learning rates must be positive")));
            }
            if e.batch_size == 0 {
                return Err(Error::Config(format!("schedule[{i}]: batch_size must be at least 1")));
            }
            let img = Model::image_resolution(e.render_resolution);
            if img > self.model.disc.max_resolution {
                return Err(Error::Config(format!(
                    "schedule[{i}]: {img}px images exceed the discriminator's {}px",
                    self.model.disc.max_resolution
                )));
            }
            if self.ablation.use_translator && img % self.model.translator.granularity() != 0 {
                return Err(Error::Config(format!("schedule[{i}]: {img}px images do not fit the translator")));
            }
        }
        self.losses.validate()?;
        self.adam.validate()?;
        self.ablation.validate()?;
        self.model.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.iter().map(|e| e.steps).sum()
    }

    /// Schedule entry in force at global step `t`.
    pub fn entry_at(&self, t: u64) -> (usize, &ScheduleEntry) {
        let mut end = 0;
        for (i, e) in self.schedule.iter().enumerate() {
            end += e.steps;
            if t < end {
                return (i, e);
            }
        }
        let last = self.schedule.len() - 1;
        (last, &self.schedule[last])
    }
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: u8,
    /// Steps completed within this stage.
    pub step: u64,
    /// Schedule entries completed.
    pub phase: usize,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub g_opt: Adam,
    pub d_opt: Adam,
    /// Parameters that this stage never updates.
    pub frozen: Vec<String>,
}

impl Checkpoint {
    /// The architecture of the stored parameters. Stage-1 checkpoints carry
    /// no translator.
    pub fn model(&self) -> Result<Model> {
        let ablation = if self.stage == 1 { without_translator(self.config.ablation) } else { self.config.ablation };
        Model::attach(self.config.model.clone(), ablation, &self.params)
    }

    /// Render resolution of the most recent schedule entry reached.
    pub fn render_resolution(&self) -> usize {
        self.config.entry_at(self.step.saturating_sub(1)).1.render_resolution
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub phase: usize,
    pub render_resolution: usize,
    pub losses: Vec<(&'static str, f64)>,
    /// Worst per-pixel simplex deviation of the generated semantic maps.
    pub simplex_error: f64,
    /// Mean per-pixel standard deviation of the generated outputs across the batch.
    pub output_std: f64,
    pub empty_mask: bool,
}

pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) {}
    /// Called after every completed schedule entry.
    fn on_phase_end(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

impl<F: FnMut(&StepRecord)> Observer for F {
    fn on_step(&mut self, record: &StepRecord) {
        self(record)
    }
}

#[derive(Clone, Debug)]
struct Phase {
    stage: u8,
    g_prefixes: Vec<&'static str>,
    second: DiscRole,
    drawings: bool,
    recon: bool,
    train_projection: bool,
}

impl Phase {
    fn stage1() -> Self {
        Phase {
            stage: 1,
            g_prefixes: alloc::vec![Projector::PREFIX, "decoder."],
            second: DiscRole::Image,
            drawings: false,
            recon: true,
            train_projection: true,
        }
    }

    fn stage2() -> Self {
        Phase {
            stage: 2,
            g_prefixes: alloc::vec!["decoder.", Translator::PREFIX],
            second: DiscRole::Drawing,
            drawings: true,
            recon: false,
            train_projection: false,
        }
    }

    fn end_to_end() -> Self {
        Phase {
            stage: 2,
            g_prefixes: alloc::vec![Projector::PREFIX, "decoder.", Translator::PREFIX],
            second: DiscRole::Drawing,
            drawings: true,
            recon: true,
            train_projection: true,
        }
    }

    fn d_prefixes(&self) -> Vec<String> {
        alloc::vec![
            format!("{}.", DiscRole::Semantic.prefix()),
            format!("{}.", self.second.prefix())
        ]
    }
}

fn step_rng(seed: u64, stage: u8, t: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ t.wrapping_mul(0xD129_0C5B_3E2A_4F17));
    r.set_stream(0x100 + stage as u64);
    r
}

struct GenOut {
    projection: Projection,
    semantics: Var,
    output: Var,
}

fn generate(
    model: &Model,
    phase: &Phase,
    g: &mut Graph,
    z: &Tensor,
    poses: &[CameraPose],
    render: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GenOut> {
    let gen = &model.generator;
    let zv = g.constant(z.clone());
    let style = gen.projector.mapping(g, zv)?;
    let mode = if phase.train_projection { ProjectMode::Train(rng) } else { ProjectMode::Eval };
    let projection = gen.projector.project(g, &style, poses, (render, render), mode)?;
    let (_, semantics, image) = gen.decode(g, projection.features, projection.w_s)?;
    let output = if phase.drawings { gen.draw(g, image, semantics)? } else { image };
    Ok(GenOut {
        projection,
        semantics,
        output,
    })
}

fn finite(step: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            name: name.to_string(),
            value: v,
        })
    }
}

fn batch_std(x: &Tensor) -> f64 {
    let s = x.shape();
    let b = s[0];
    let n = x.numel() / b;
    if b < 2 {
        return 0.0;
    }
    let d = x.data();
    let mut acc = 0.0;
    for i in 0..n {
        let mean = (0..b).map(|k| d[k * n + i]).sum::<f64>() / b as f64;
        let var = (0..b).map(|k| (d[k * n + i] - mean).powi(2)).sum::<f64>() / b as f64;
        acc += libm::sqrt(var);
    }
    acc / n as f64
}

fn train_step(
    model: &Model,
    phase: &Phase,
    ckpt: &mut Checkpoint,
    real: &Batch,
    entry: &ScheduleEntry,
    t: u64,
) -> Result<StepRecord> {
    let cfg = ckpt.config.clone();
    let w = cfg.losses;
    let b = entry.batch_size;
    let r = entry.render_resolution;
    let mut rng = step_rng(cfg.seed, phase.stage, t);
    let z = model.sample_latents(&mut rng, b);
    let poses = (0..b)
        .map(|_| sample_viewpoint(&mut rng, &model.cfg.projector.poses))
        .collect::<Result<Vec<_>>>()?;
    let d_s = &model.d_semantic;
    let d_o = model.discriminator(phase.second);

    // One generator pass serves both updates: its detached outputs are the
    // discriminator's fakes, and the generator loss is taken against the
    // discriminators after their update.
    let prefixes: Vec<String> = phase.g_prefixes.iter().map(|p| p.to_string()).collect();
    let mut updated = ckpt.params.clone();
    let mut g = Graph::new(&ckpt.params, Trainable::Prefixes(prefixes));
    let out = generate(model, phase, &mut g, &z, &poses, r, &mut rng)?;
    let fake_sem = g.value(out.semantics).clone();
    let fake_out = g.value(out.output).clone();

    let (ds_loss, do_loss, d_grads) = {
        let mut gd = Graph::new(&ckpt.params, Trainable::Prefixes(phase.d_prefixes()));
        let ls = losses::discriminator_loss(&mut gd, d_s, &real.semantics, &fake_sem, w.lambda1)?;
        let lo = losses::discriminator_loss(&mut gd, d_o, &real.images, &fake_out, w.lambda1)?;
        let total = gd.add(ls.total, lo.total);
        let (vs, vo) = (gd.value(ls.total).item(), gd.value(lo.total).item());
        finite(t, "d_semantic", vs)?;
        finite(t, "d_output", vo)?;
        (ls, lo, gd.backward(total).params())
    };
    ckpt.d_opt.step(&mut updated, &d_grads, entry.d_lr, t)?;

    g.switch_store(&updated);
    let sem_err = simplex_error(&fake_sem);
    let out_std = batch_std(&fake_out);
    let gl = if phase.stage == 2 && !phase.recon {
        losses::stage2_g_loss(&mut g, d_s, d_o, out.semantics, out.output)?
    } else {
        let mask = out.projection.mask.clone();
        let recon = match (phase.recon, out.projection.i_warp, mask.as_ref()) {
            (true, Some(warped), Some(mask)) => Some(ReconInputs {
                primary: out.projection.rgb_pri,
                warped,
                mask,
            }),
            _ => None,
        };
        losses::stage1_g_loss(&mut g, d_s, d_o, out.semantics, out.output, recon, &w)?
    };
    finite(t, "g_total", g.value(gl.total).item())?;
    let g_grads = g.backward(gl.total).params();
    drop(g);
    ckpt.params = updated;
    ckpt.g_opt.step(&mut ckpt.params, &g_grads, entry.g_lr, t)?;
    if let Some((name, _)) = ckpt.params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: t,
            name: name.clone(),
            value: f64::NAN,
        });
    }
    let out_name = if phase.drawings { "d_drawing" } else { "d_image" };
    Ok(StepRecord {
        stage: phase.stage,
        step: t,
        phase: cfg.entry_at(t).0,
        render_resolution: r,
        losses: alloc::vec![
            ("d_semantic", ds_loss.adversarial),
            (out_name, do_loss.adversarial),
            ("r1_semantic", ds_loss.r1),
            (if phase.drawings { "r1_drawing" } else { "r1_image" }, do_loss.r1),
            ("g_adv_semantic", gl.adv_semantic),
            (if phase.drawings { "g_adv_drawing" } else { "g_adv_image" }, gl.adv_image),
            ("reconstruction", gl.reconstruction),
        ],
        simplex_error: sem_err,
        output_std: out_std,
        empty_mask: gl.empty_mask,
    })
}

fn run(model: &Model, phase: &Phase, ckpt: &mut Checkpoint, data: &Dataset, obs: &mut dyn Observer) -> Result<()> {
    let cfg = ckpt.config.clone();
    let mut order = BatchOrder::new(data.len(), cfg.seed ^ (phase.stage as u64) << 56)?;
    for t in 0..ckpt.step {
        order.next_batch(cfg.entry_at(t).1.batch_size);
    }
    let mut end = 0;
    for (pi, entry) in cfg.schedule.iter().enumerate() {
        end += entry.steps;
        if ckpt.step >= end && pi < ckpt.phase {
            continue;
        }
        let img = Model::image_resolution(entry.render_resolution);
        while ckpt.step < end {
            let t = ckpt.step;
            let idx = order.next_batch(entry.batch_size);
            let batch = data.batch(&idx, (img, img))?;
            let rec = train_step(model, phase, ckpt, &batch, entry, t)?;
            ckpt.step = t + 1;
            obs.on_step(&rec);
        }
        ckpt.phase = pi + 1;
        obs.on_phase_end(ckpt)?;
    }
    Ok(())
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset has no records".into()));
    }
    Ok(())
}

/// Initial state of a stage-1 run (what a zero-step run returns).
pub fn stage1_init(config: &TrainConfig) -> Result<(Model, Checkpoint)> {
    config.validate()?;
    if config.stage != 1 || config.ablation.end_to_end {
        return Err(Error::Config("stage-1 training needs stage = 1 without end_to_end".into()));
    }
    let (model, mut params) = Model::init(config.model.clone(), config.ablation, config.seed)?;
    params.retain(|n| !n.starts_with(Translator::PREFIX) && !n.starts_with("disc.drawing."));
    Ok((
        model,
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: 1,
            step: 0,
            phase: 0,
            config: config.clone(),
            params,
            g_opt: Adam::new(config.adam),
            d_opt: Adam::new(config.adam),
            frozen: Vec::new(),
        },
    ))
}

/// Stage 1 on photos with masks; `resume` continues a partial stage-1 run.
pub fn train_stage1(
    config: &TrainConfig,
    photos: &Dataset,
    resume: Option<Checkpoint>,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    check_data(photos)?;
    let (model, mut ckpt) = stage1_init(config)?;
    if let Some(r) = resume {
        if r.stage != 1 {
            return Err(Error::Config("can only resume stage 1 from a stage-1 checkpoint".into()));
        }
        r.model()?;
        ckpt = Checkpoint {
            config: config.clone(),
            ..r
        };
    }
    run(&model, &Phase::stage1(), &mut ckpt, photos, obs)?;
    Ok(ckpt)
}

/// Initial stage-2 state built from a stage-1 checkpoint.
pub fn stage2_init(stage1: &Checkpoint, config: &TrainConfig) -> Result<(Model, Checkpoint)> {
    config.validate()?;
    if config.stage != 2 || config.ablation.end_to_end {
        return Err(Error::Config("stage-2 training needs stage = 2 without end_to_end".into()));
    }
    if stage1.stage != 1 {
        return Err(Error::Config(format!("stage 2 needs a stage-1 checkpoint, got stage {}", stage1.stage)));
    }
    let (model, fresh) = Model::init(config.model.clone(), config.ablation, config.seed ^ 0x5EED_0002)?;
    let mut params = stage1.params.clone();
    params.retain(|n| !n.starts_with("disc.image."));
    params.copy_prefix_from(&fresh, Translator::PREFIX);
    params.copy_prefix_from(&fresh, "disc.drawing.");
    let model = Model::attach(model.cfg.clone(), config.ablation, &params)?;
    let mut g_opt = stage1.g_opt.clone();
    g_opt.config = config.adam;
    g_opt.retain(|n| n.starts_with("decoder."));
    let mut d_opt = stage1.d_opt.clone();
    d_opt.config = config.adam;
    d_opt.retain(|n| n.starts_with("disc.semantic."));
    let frozen = params.names().filter(|n| n.starts_with(Projector::PREFIX)).cloned().collect();
    Ok((
        model,
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: 2,
            step: 0,
            phase: 0,
            config: config.clone(),
            params,
            g_opt,
            d_opt,
            frozen,
        },
    ))
}

/// Stage 2 on drawings with masks. The projector (mapping network included)
/// is frozen.
pub fn train_stage2(
    stage1: &Checkpoint,
    config: &TrainConfig,
    drawings: &Dataset,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    check_data(drawings)?;
    let (model, mut ckpt) = stage2_init(stage1, config)?;
    run(&model, &Phase::stage2(), &mut ckpt, drawings, obs)?;
    Ok(ckpt)
}

/// All modules trained jointly on drawings from scratch.
pub fn train_end_to_end(config: &TrainConfig, drawings: &Dataset, obs: &mut dyn Observer) -> Result<Checkpoint> {
    check_data(drawings)?;
    config.validate()?;
    if !config.ablation.end_to_end {
        return Err(Error::Config("train_end_to_end needs ablation.end_to_end".into()));
    }
    let (model, mut params) = Model::init(config.model.clone(), config.ablation, config.seed)?;
    params.retain(|n| !n.starts_with("disc.image."));
    let mut ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        stage: 2,
        step: 0,
        phase: 0,
        config: config.clone(),
        params,
        g_opt: Adam::new(config.adam),
        d_opt: Adam::new(config.adam),
        frozen: Vec::new(),
    };
    run(&model, &Phase::end_to_end(), &mut ckpt, drawings, obs)?;
    Ok(ckpt)
}

/// Trains one ablation variant to a drawing model. Two-stage variants reuse
/// `stage1` when given (it must come from the same model configuration) and
/// otherwise train stage 1 on `photos` with `config.schedule`.
pub fn run_ablation(
    config: &TrainConfig,
    photos: &Dataset,
    drawings: &Dataset,
    stage1: Option<&Checkpoint>,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    if config.ablation.end_to_end {
        let c = TrainConfig {
            stage: 2,
            ..config.clone()
        };
        return train_end_to_end(&c, drawings, obs);
    }
    let s1 = match stage1 {
        Some(c) => c.clone(),
        None => {
            let c1 = TrainConfig {
                stage: 1,
                ..config.clone()
            };
            train_stage1(&c1, photos, None, obs)?
        }
    };
    let c2 = TrainConfig {
        stage: 2,
        ..config.clone()
    };
    train_stage2(&s1, &c2, drawings, obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversaries::DiscConfig;
    use crate::data::{augment_dataset, synthetic_faces, EdgeStylizer};

    pub(crate) fn tiny_config(stage: u8, steps: u64) -> TrainConfig {
        let mut m = ModelConfig::desk();
        m.projector.d_z = 8;
        m.projector.d_s = 8;
        m.projector.mapping_hidden = 8;
        m.projector.film_layers = 2;
        m.projector.film_hidden = 8;
        m.projector.feature_channels = 4;
        m.projector.n_samples = 4;
        m.decoder.channels = alloc::vec![4, 4, 4];
        m.translator.channels = alloc::vec![4, 4, 4, 4, 4];
        m.translator.spade_hidden = 4;
        m.disc = DiscConfig {
            base_channels: 2,
            max_channels: 4,
            max_resolution: 16,
        };
        TrainConfig {
            stage,
            schedule: alloc::vec![ScheduleEntry {
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

    fn photos() -> Dataset {
        synthetic_faces(5, (16, 16), 1)
    }

    #[test]
    fn config_validation() {
        TrainConfig::full(1).validate().unwrap();
        TrainConfig::desk(2).validate().unwrap();
        let mut c = TrainConfig::desk(1);
        c.schedule[0].render_resolution = 12;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(1);
        c.schedule[0].g_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(1);
        c.schedule[0].batch_size = 0;
        assert!(c.validate().is_err());
        assert!(TrainConfig { stage: 3, ..TrainConfig::desk(1) }.validate().is_err());
    }

    #[test]
    fn full_profile_carries_published_constants() {
        let c = TrainConfig::full(1);
        let s: Vec<_> = c
            .schedule
            .iter()
            .map(|e| (Model::image_resolution(e.render_resolution), e.g_lr, e.d_lr, e.batch_size))
            .collect();
        assert_eq!(s, [(64, 6e-5, 2e-4, 36), (128, 5e-5, 2e-4, 24), (256, 3e-5, 1e-4, 24)]);
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.0, 0.9));
        assert_eq!((c.losses.lambda1, c.losses.lambda2, c.losses.lambda3), (0.1, 1.0, 0.25));
    }

    #[test]
    fn zero_step_run_returns_initialisation() {
        let c = tiny_config(1, 0);
        let ck = train_stage1(&c, &photos(), None, &mut NoObserver).unwrap();
        let (_, init) = stage1_init(&c).unwrap();
        assert!(ck.params.diff(&init.params).is_empty());
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let c = tiny_config(1, 1);
        assert!(matches!(
            train_stage1(&c, &Dataset::default(), None, &mut NoObserver),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn stage1_is_deterministic_and_finite() {
        let c = tiny_config(1, 3);
        let mut recs = Vec::new();
        let a = train_stage1(&c, &photos(), None, &mut |r: &StepRecord| recs.push(r.clone())).unwrap();
        let b = train_stage1(&c, &photos(), None, &mut NoObserver).unwrap();
        assert!(a.params.diff(&b.params).is_empty());
        assert!(a.params.all_finite());
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert!(r.losses.iter().all(|(_, v)| v.is_finite()));
            assert!(r.simplex_error < 1e-5);
        }
        let (_, init) = stage1_init(&c).unwrap();
        let changed = a.params.diff(&init.params);
        assert!(changed.iter().any(|n| n.starts_with("projector.")));
        assert!(changed.iter().any(|n| n.starts_with("disc.image.")));
        assert!(a.params.names().all(|n| !n.starts_with("translator.") && !n.starts_with("disc.drawing.")));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = train_stage1(&tiny_config(1, 4), &photos(), None, &mut NoObserver).unwrap();
        let half = train_stage1(&tiny_config(1, 2), &photos(), None, &mut NoObserver).unwrap();
        let resumed = train_stage1(&tiny_config(1, 4), &photos(), Some(half), &mut NoObserver).unwrap();
        assert!(full.params.diff(&resumed.params).is_empty());
    }

    #[test]
    fn update_leak_test() {
        let c = tiny_config(1, 0);
        let (model, ck) = stage1_init(&c).unwrap();
        let data = photos();
        let batch = data.batch(&[0, 1], (16, 16)).unwrap();
        let phase = Phase::stage1();
        let mut rng = step_rng(0, 1, 0);
        let z = model.sample_latents(&mut rng, 2);
        let poses = [CameraPose::frontal(), CameraPose::frontal()];
        // D objective: only discriminator parameters receive gradients
        let mut g = Graph::new(&ck.params, Trainable::Prefixes(phase.d_prefixes()));
        let fake = {
            let mut gi = Graph::inference(&ck.params);
            let o = generate(&model, &phase, &mut gi, &z, &poses, 2, &mut rng).unwrap();
            gi.value(o.output).clone()
        };
        let l = losses::discriminator_loss(&mut g, &model.d_image, &batch.images, &fake, 0.1).unwrap();
        let grads = g.backward(l.total).params();
        assert!(!grads.is_empty() && grads.keys().all(|n| n.starts_with("disc.")));
        // G objective: only generator parameters
        let prefixes: Vec<String> = phase.g_prefixes.iter().map(|p| p.to_string()).collect();
        let mut g = Graph::new(&ck.params, Trainable::Prefixes(prefixes));
        let o = generate(&model, &phase, &mut g, &z, &poses, 2, &mut rng).unwrap();
        let gl = losses::stage1_g_loss(&mut g, &model.d_semantic, &model.d_image, o.semantics, o.output, None, &c.losses)
            .unwrap();
        let grads = g.backward(gl.total).params();
        assert!(grads.keys().any(|n| n.starts_with("projector.")));
        assert!(grads.keys().all(|n| !n.starts_with("disc.")));
    }

    #[test]
    fn stage2_freezes_projector() {
        let s1 = train_stage1(&tiny_config(1, 2), &photos(), None, &mut NoObserver).unwrap();
        let (drawings, _) = augment_dataset(&photos(), &EdgeStylizer::default());
        let s2 = train_stage2(&s1, &tiny_config(2, 3), &drawings, &mut NoObserver).unwrap();
        for (n, t) in s1.params.with_prefix("projector.") {
            assert_eq!(t.bits(), s2.params.get(n).unwrap().bits(), "{n}");
        }
        assert!(s2.g_opt.names().chain(s2.d_opt.names()).all(|n| !n.starts_with("projector.")));
        assert!(s2.params.names().all(|n| !n.starts_with("disc.image.")));
        assert!(s2.frozen.iter().all(|n| n.starts_with("projector.")));
        assert_eq!(s2.frozen.len(), s1.params.with_prefix("projector.").count());
        let changed = s2.params.diff(&s1.params);
        assert!(changed.iter().any(|n| n.starts_with("translator.")));
        assert!(s2.model().is_ok());
        assert!(train_stage2(&s2, &tiny_config(2, 1), &drawings, &mut NoObserver).is_err());
    }

    #[test]
    fn phase_boundaries_do_not_touch_parameters() {
        let mut c = tiny_config(1, 2);
        let mut second = c.schedule[0];
        second.render_resolution = 1;
        second.steps = 0;
        c.model.translator.channels = alloc::vec![1, 1, 1, 1, 1];
        c.ablation.use_translator = false;
        c.ablation.use_spade = false;
        c.schedule.push(second);
        struct Snap(Vec<ParamStore>);
        impl Observer for Snap {
            fn on_phase_end(&mut self, ck: &Checkpoint) -> Result<()> {
                self.0.push(ck.params.clone());
                Ok(())
            }
        }
        let mut s = Snap(Vec::new());
        train_stage1(&c, &photos(), None, &mut s).unwrap();
        assert_eq!(s.0.len(), 2);
        assert!(s.0[0].diff(&s.0[1]).is_empty());
    }

    #[test]
    fn ablation_rows_each_run_a_step() {
        let (drawings, _) = augment_dataset(&photos(), &EdgeStylizer::default());
        let s1 = train_stage1(&tiny_config(1, 1), &photos(), None, &mut NoObserver).unwrap();
        for (name, ab) in Ablation::table_rows() {
            let c = TrainConfig {
                ablation: ab,
                ..tiny_config(2, 1)
            };
            let ck = run_ablation(&c, &photos(), &drawings, Some(&s1), &mut NoObserver).unwrap();
            assert_eq!(ck.step, 1, "{name}");
            assert!(ck.params.all_finite());
            assert_eq!(ck.params.names().any(|n| n.contains(".spade.")), ab.use_spade, "{name}");
            assert_eq!(ck.params.names().any(|n| n.starts_with("translator.")), ab.use_translator, "{name}");
            if ab.end_to_end {
                assert!(ck.frozen.is_empty());
                // trained from scratch: the projector differs from the stage-1 one
                let p = "projector.film.0.weight";
                assert_ne!(ck.params.get(p).unwrap(), s1.params.get(p).unwrap());
            } else {
                assert!(!ck.frozen.is_empty());
            }
        }
    }
}
