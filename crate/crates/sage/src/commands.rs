//! Implementations behind the `sage` subcommands.

use std::path::{Path, PathBuf};

use sage_core::applications::{identity_interpolate, semantic_edit, style_transfer, EditOp};
use sage_core::data::{augment_dataset, synthetic_faces, AugmentManifest, Dataset, EdgeStylizer, IdentityStylizer, Stylizer};
use sage_core::geometry::{CameraPose, PoseDistribution};
use sage_core::labels::argmax_channels;
use sage_core::metrics::{self, default_embedder, per_view_curve, Pairing, SwdConfig, ViewRow};
use sage_core::model::{Ablation, Model};
use sage_core::training::{self, Checkpoint, Observer, StepRecord};
use sage_core::Tensor;

use crate::checkpoint::{self, step_dir, Loaded};
use crate::config::{RunConfig, StylizerKind};
use crate::dataset;
use crate::error::{read, Error, Result};
use crate::imageio;
use crate::manifest::RunManifest;
use crate::report::{self, LossLog, MetricReport};

pub fn deterministic_from_env() -> bool {
    std::env::var("SAGE_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

// ----- train -------------------------------------------------------------------

pub struct TrainArgs {
    pub config: PathBuf,
    pub stage: u8,
    pub resume: Option<PathBuf>,
    pub ablation: Option<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub run_dir: PathBuf,
    pub last: Option<StepRecord>,
}

struct TrainObserver {
    log: LossLog,
    run: PathBuf,
    style: Option<String>,
}

impl Observer for TrainObserver {
    fn on_step(&mut self, r: &StepRecord) {
        self.log.on_step(r);
    }

    fn on_phase_end(&mut self, ck: &Checkpoint) -> sage_core::Result<()> {
        checkpoint::save(&step_dir(&self.run, ck.stage, ck.step), ck, self.style.as_deref())
            .map_err(|e| sage_core::Error::Argument(format!("checkpoint save failed: {e}")))
    }
}

pub fn stylizer(kind: StylizerKind) -> Box<dyn Stylizer> {
    match kind {
        StylizerKind::Edge => Box::new(EdgeStylizer::default()),
        StylizerKind::Identity => Box::new(IdentityStylizer),
    }
}

pub fn photos(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.photos {
        Some(dir) => dataset::load(dir),
        None => {
            let r = cfg.max_image_resolution();
            Ok(synthetic_faces(cfg.data.synthetic_count, (r, r), cfg.seed))
        }
    }
}

/// Stage-2 drawings: the configured directory, or the photos passed through
/// the stylizer (written to `{run}/augmented`).
pub fn drawings(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.data.drawings {
        return dataset::load(dir);
    }
    let (data, manifest) = augment_dataset(&photos(cfg)?, stylizer(cfg.data.stylizer).as_ref());
    let dir = cfg.output.join("augmented");
    dataset::save(&dir, &data)?;
    report::write_json(&dir.join("augment_manifest.json"), &manifest)?;
    if data.is_empty() {
        return Err(Error::Config("the stylizer produced no drawings".into()));
    }
    Ok(data)
}

pub fn train(args: &TrainArgs, argv: Vec<String>) -> Result<TrainOutcome> {
    let (mut cfg, bytes) = RunConfig::load(&args.config)?;
    if let Some(flags) = &args.ablation {
        cfg.ablation = Ablation::parse(flags)?;
        cfg.validate()?;
    }
    if !(1..=2).contains(&args.stage) {
        return Err(Error::Config(format!("--stage must be 1 or 2, got {}", args.stage)));
    }
    let end_to_end = cfg.ablation.end_to_end;
    if args.stage == 1 && end_to_end {
        return Err(Error::Config("the end_to_end ablation trains in a single run; use --stage 2".into()));
    }
    if args.stage == 2 && args.resume.is_none() && !end_to_end {
        return Err(Error::Config("stage 2 needs --resume with a stage-1 checkpoint (or --ablation end_to_end)".into()));
    }
    let resume = args.resume.as_deref().map(|p| checkpoint::load(&checkpoint::resolve(p)?)).transpose()?;
    let stage_dir = cfg.output.join(format!("stage{}", args.stage));
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("train", argv, cfg.seed, &stage_dir).with_config(&args.config, &bytes)
    }
    .write()?;
    let mut obs = TrainObserver {
        log: LossLog::create(&stage_dir.join("losses.csv"))?,
        run: cfg.output.clone(),
        style: cfg.style_name.clone(),
    };
    let tc = cfg.train_config(args.stage);
    let ckpt = match (args.stage, end_to_end) {
        (1, _) => training::train_stage1(&tc, &photos(&cfg)?, resume, &mut obs)?,
        (_, true) => {
            if resume.is_some() {
                return Err(Error::Config("the end_to_end ablation never loads a stage-1 checkpoint".into()));
            }
            training::train_end_to_end(&tc, &drawings(&cfg)?, &mut obs)?
        }
        (_, false) => training::train_stage2(resume.as_ref().expect("checked above"), &tc, &drawings(&cfg)?, &mut obs)?,
    };
    let dir = step_dir(&cfg.output, ckpt.stage, ckpt.step);
    checkpoint::save(&dir, &ckpt, cfg.style_name.as_deref())?;
    let last = obs.log.last.clone();
    obs.log.finish()?;
    Ok(TrainOutcome {
        checkpoint: dir,
        run_dir: cfg.output,
        last,
    })
}

// ----- generate ------------------------------------------------------------------

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub seed: u64,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub count: usize,
    pub out: PathBuf,
    pub emit_photo: bool,
    pub emit_mask: bool,
}

fn poses_of(loaded: &Loaded) -> PoseDistribution {
    loaded.meta.config.model.projector.poses
}

pub fn checked_pose(dist: &PoseDistribution, yaw: f64, pitch: f64) -> Result<CameraPose> {
    if !dist.in_bounds(yaw, pitch) {
        return Err(Error::Config(format!(
            "pose (yaw {yaw}, pitch {pitch}) outside yaw {:?} / pitch {:?}",
            dist.yaw_bounds, dist.pitch_bounds
        )));
    }
    Ok(dist.center().with_angles(yaw, pitch))
}

/// Poses of a generate call: the requested pose for a single view, otherwise
/// `count` yaws evenly spread over the bounds.
pub fn view_poses(dist: &PoseDistribution, yaw: Option<f64>, pitch: Option<f64>, count: usize) -> Result<Vec<CameraPose>> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let pitch = pitch.unwrap_or(dist.pitch_mean);
    if count == 1 {
        return Ok(vec![checked_pose(dist, yaw.unwrap_or(dist.yaw_mean), pitch)?]);
    }
    if yaw.is_some() {
        return Err(Error::Config("--yaw only applies to --count 1".into()));
    }
    checked_pose(dist, dist.yaw_mean, pitch)?;
    Ok(dist.yaw_sweep(count).into_iter().map(|p| p.with_angles(p.yaw, pitch)).collect())
}

fn labels_of(semantics: &Tensor) -> (Vec<u8>, usize, usize) {
    let s = semantics.shape();
    (argmax_channels(&semantics.select(0)), s[2], s[3])
}

pub fn generate(args: &GenerateArgs, argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(&args.ckpt)?;
    let poses = view_poses(&poses_of(&loaded), args.yaw, args.pitch, args.count)?;
    let z = loaded.model.latent_for_seed(args.seed);
    let render = loaded.render_resolution();
    let mut written = Vec::new();
    // One forward pass per view keeps every file independent of --count.
    for (view, pose) in poses.iter().enumerate() {
        let g = loaded.model.generate(&loaded.params, &z, &[*pose], render)?;
        let stem = format!("{}_{view}", args.seed);
        let path = args.out.join(format!("{stem}.png"));
        imageio::save_rgb(&path, &g.drawing.select(0))?;
        written.push(path);
        if args.emit_photo {
            let p = args.out.join(format!("{stem}_photo.png"));
            imageio::save_rgb(&p, &g.image.select(0))?;
            written.push(p);
        }
        if args.emit_mask {
            let (labels, h, w) = labels_of(&g.semantics);
            let p = args.out.join(format!("{stem}_mask.png"));
            imageio::save_labels(&p, &labels, h, w)?;
            written.push(p);
        }
    }
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("generate", argv, args.seed, &args.out)
    }
    .write()?;
    Ok(written)
}

// ----- applications ----------------------------------------------------------------

pub struct EditArgs {
    pub ckpt: PathBuf,
    pub seed: u64,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub edits: PathBuf,
    pub out: PathBuf,
}

pub fn parse_edits(bytes: &[u8], path: &Path) -> Result<Vec<EditOp>> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn edit(args: &EditArgs, argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(&args.ckpt)?;
    let edits = parse_edits(&read(&args.edits)?, &args.edits)?;
    let pose = view_poses(&poses_of(&loaded), args.yaw, args.pitch, 1)?[0];
    let z = loaded.model.latent_for_seed(args.seed);
    let r = semantic_edit(&loaded.model, &loaded.params, &z, &pose, loaded.render_resolution(), &edits)?;
    let mut out = Vec::new();
    for (name, t) in [("original.png", &r.drawing_original), ("edited.png", &r.drawing_edited)] {
        let p = args.out.join(name);
        imageio::save_rgb(&p, &t.select(0))?;
        out.push(p);
    }
    for (name, s) in [("mask_original.png", &r.semantics_original), ("mask_edited.png", &r.semantics_edited)] {
        let (labels, h, w) = labels_of(s);
        let p = args.out.join(name);
        imageio::save_labels(&p, &labels, h, w)?;
        out.push(p);
    }
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("edit", argv, args.seed, &args.out)
    }
    .write()?;
    Ok(out)
}

pub struct TransferArgs {
    pub content: PathBuf,
    pub style: PathBuf,
    pub content_seed: u64,
    pub style_seed: u64,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub out: PathBuf,
}

pub fn transfer(args: &TransferArgs, argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let a = Loaded::open(&args.content)?;
    let b = Loaded::open(&args.style)?;
    let pose = view_poses(&poses_of(&a), args.yaw, args.pitch, 1)?[0];
    let z1 = a.model.latent_for_seed(args.content_seed);
    let z2 = b.model.latent_for_seed(args.style_seed);
    let t = style_transfer((&a.model, &a.params), (&b.model, &b.params), &z1, &z2, &pose, a.render_resolution())?;
    let drawing = args.out.join("transfer.png");
    imageio::save_rgb(&drawing, &t.drawing.select(0))?;
    let photo = args.out.join("transfer_photo.png");
    imageio::save_rgb(&photo, &t.image.select(0))?;
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("transfer", argv, args.content_seed, &args.out)
    }
    .write()?;
    Ok(vec![drawing, photo])
}

pub struct InterpolateArgs {
    pub ckpt: PathBuf,
    pub seeds: (u64, u64),
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub steps: usize,
    pub out: PathBuf,
}

pub fn interpolate(args: &InterpolateArgs, argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(&args.ckpt)?;
    let dist = poses_of(&loaded);
    let x1 = checked_pose(&dist, args.from.0, args.from.1)?;
    let x2 = checked_pose(&dist, args.to.0, args.to.1)?;
    let z1 = loaded.model.latent_for_seed(args.seeds.0);
    let z2 = loaded.model.latent_for_seed(args.seeds.1);
    let frames = identity_interpolate(&loaded.model, &loaded.params, &z1, &z2, &x1, &x2, args.steps, loaded.render_resolution())?;
    let mut out = Vec::new();
    for (k, f) in frames.iter().enumerate() {
        let p = args.out.join(format!("frame_{k:03}.png"));
        imageio::save_rgb(&p, &f.select(0))?;
        out.push(p);
    }
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("interpolate", argv, args.seeds.0, &args.out)
    }
    .write()?;
    Ok(out)
}

// ----- metrics ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MetricKind {
    Fid,
    Sifid,
    Swd,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Fid => "fid",
            MetricKind::Sifid => "sifid",
            MetricKind::Swd => "swd",
        }
    }
}

pub struct MetricsArgs {
    pub gen: PathBuf,
    pub real: PathBuf,
    pub metric: MetricKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let files = dataset::png_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    files.iter().map(|p| imageio::load_rgb(p)).collect()
}

pub fn metrics(args: &MetricsArgs) -> Result<MetricReport> {
    let gen = load_images(&args.gen)?;
    let real = load_images(&args.real)?;
    let emb = default_embedder();
    let (value, embedder_id) = match args.metric {
        MetricKind::Fid => (metrics::fid(&gen, &real, emb.as_ref())?, emb.id()),
        MetricKind::Sifid => (metrics::sifid(&gen, &real, emb.as_ref(), Pairing::Index)?, emb.id()),
        MetricKind::Swd => {
            let cfg = SwdConfig {
                seed: args.seed,
                ..SwdConfig::default()
            };
            (metrics::sliced_wasserstein(&gen, &real, &cfg)?.value, "laplacian-patch-7x7".to_string())
        }
    };
    let report = MetricReport {
        metric: args.metric.name().into(),
        value,
        n_gen: gen.len(),
        n_real: real.len(),
        embedder_id,
        seed: args.seed,
    };
    let out = args.out.clone().unwrap_or_else(|| args.gen.join(format!("metrics_{}.json", args.metric.name())));
    report::write_json(&out, &report)?;
    Ok(report)
}

pub struct CurveArgs {
    pub ckpt: PathBuf,
    pub real: PathBuf,
    pub views: usize,
    pub samples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// SIFID per view over `samples` fixed latents; written as CSV.
pub fn curve(args: &CurveArgs) -> Result<Vec<ViewRow>> {
    let loaded = Loaded::open(&args.ckpt)?;
    let real = load_images(&args.real)?;
    let poses = view_poses(&poses_of(&loaded), None, None, args.views)?;
    let z = latents(&loaded.model, args.seed, args.samples)?;
    let emb = default_embedder();
    let rows = per_view_curve(&loaded.model, &loaded.params, &z, &poses, loaded.render_resolution(), &real, emb.as_ref(), Pairing::Index)?;
    report::write_view_rows(&args.out, &rows)?;
    Ok(rows)
}

/// Latents for seeds `seed, seed + 1, ...`.
pub fn latents(model: &Model, seed: u64, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let rows: Vec<Tensor> = (0..n as u64).map(|i| model.latent_for_seed(seed + i).select(0)).collect();
    Ok(Tensor::stack(&rows)?)
}

// ----- augment ----------------------------------------------------------------------

pub struct AugmentArgs {
    pub photos: Option<PathBuf>,
    pub synthetic: usize,
    pub resolution: usize,
    pub seed: u64,
    pub stylizer: StylizerKind,
    pub out: PathBuf,
}

pub fn augment(args: &AugmentArgs, argv: Vec<String>) -> Result<AugmentManifest> {
    let photos = match &args.photos {
        Some(dir) => dataset::load(dir)?,
        None if args.synthetic > 0 => synthetic_faces(args.synthetic, (args.resolution, args.resolution), args.seed),
        None => return Err(Error::Config("give --photos DIR or --synthetic N".into())),
    };
    let (data, manifest) = augment_dataset(&photos, stylizer(args.stylizer).as_ref());
    dataset::save(&args.out, &data)?;
    report::write_json(&args.out.join("augment_manifest.json"), &manifest)?;
    RunManifest {
        deterministic: deterministic_from_env(),
        ..RunManifest::new("augment", argv, args.seed, &args.out)
    }
    .write()?;
    Ok(manifest)
}
