//! On-disk checkpoints: `{run}/stage{S}/step{N}/` holding `params.bin`,
//! `optim.bin` and `meta.json`.
//!
//! Both binary files are `magic | format version (u32) | body | sha256(all
//! preceding bytes)`, little-endian throughout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sage_core::model::Model;
use sage_core::optim::{Adam, AdamConfig, Moments};
use sage_core::training::{Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use sage_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read, write, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"SAGEPRM\0";
const OPTIM_MAGIC: &[u8; 8] = b"SAGEOPT\0";
const DIGEST: usize = 32;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub checkpoint_version: u32,
    pub stage: u8,
    pub step: u64,
    pub phase: usize,
    pub config: TrainConfig,
    pub frozen: Vec<String>,
    pub g_adam: AdamConfig,
    pub d_adam: AdamConfig,
    pub param_count: usize,
    pub params_sha256: String,
    pub optim_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_name: Option<String>,
}

pub fn step_dir(run: &Path, stage: u8, step: u64) -> PathBuf {
    run.join(format!("stage{stage}")).join(format!("step{step}"))
}

// ----- binary encoding -------------------------------------------------------

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let d = Sha256::digest(&self.0);
        self.0.extend_from_slice(&d);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks magic, digest and version, returning a reader over the body.
    fn open(bytes: &'a [u8], magic: &[u8; 8], path: &'a Path) -> Result<Self> {
        let integrity = |reason: &str| Error::Integrity {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < magic.len() + 4 + DIGEST {
            return Err(integrity("file is truncated"));
        }
        if &bytes[..8] != magic {
            return Err(integrity("bad magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("sha256 mismatch"));
        }
        let found = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(Reader { buf: body, pos: 12, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "name is not utf-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut w = Writer::new(PARAMS_MAGIC);
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.str(name);
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    w.finish()
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader::open(bytes, PARAMS_MAGIC, path)?;
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))?;
        store.insert(name, t);
    }
    r.end()?;
    Ok(store)
}

fn encode_adam(w: &mut Writer, opt: &Adam) {
    w.u32(opt.state.len() as u32);
    for (name, m) in &opt.state {
        w.str(name);
        w.u64(m.step);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
}

fn decode_adam(r: &mut Reader, config: AdamConfig) -> Result<Adam> {
    let mut state = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() {
            return Err(Error::format(r.path, format!("moment lengths differ for `{name}`")));
        }
        state.insert(name, Moments { step, m, v });
    }
    Ok(Adam { config, state })
}

pub fn encode_optim(g: &Adam, d: &Adam) -> Vec<u8> {
    let mut w = Writer::new(OPTIM_MAGIC);
    encode_adam(&mut w, g);
    encode_adam(&mut w, d);
    w.finish()
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ----- save / load -----------------------------------------------------------

/// Writes `ckpt` into `dir` (created if needed).
pub fn save(dir: &Path, ckpt: &Checkpoint, style_name: Option<&str>) -> Result<()> {
    let params = encode_params(&ckpt.params);
    let optim = encode_optim(&ckpt.g_opt, &ckpt.d_opt);
    let meta = Meta {
        format_version: FORMAT_VERSION,
        checkpoint_version: ckpt.version,
        stage: ckpt.stage,
        step: ckpt.step,
        phase: ckpt.phase,
        config: ckpt.config.clone(),
        frozen: ckpt.frozen.clone(),
        g_adam: ckpt.g_opt.config,
        d_adam: ckpt.d_opt.config,
        param_count: ckpt.params.len(),
        params_sha256: sha_hex(&params),
        optim_sha256: sha_hex(&optim),
        style_name: style_name.map(str::to_owned),
    };
    write(&dir.join(PARAMS_FILE), &params)?;
    write(&dir.join(OPTIM_FILE), &optim)?;
    let mut json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    json.push(b'\n');
    write(&dir.join(META_FILE), &json)
}

pub fn load_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let meta: Meta = serde_json::from_slice(&read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if meta.checkpoint_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path,
            found: meta.checkpoint_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(meta)
}

fn check_digest(path: &Path, bytes: &[u8], want: &str) -> Result<()> {
    if sha_hex(bytes) != want {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: "content does not match the digest recorded in meta.json".into(),
        });
    }
    Ok(())
}

/// Loads parameters and metadata only; enough for inference.
pub fn load_params(dir: &Path) -> Result<(Meta, ParamStore)> {
    let meta = load_meta(dir)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = read(&path)?;
    let params = decode_params(&bytes, &path)?;
    check_digest(&path, &bytes, &meta.params_sha256)?;
    if params.len() != meta.param_count {
        return Err(Error::Integrity {
            path,
            reason: format!("{} tensors, meta.json records {}", params.len(), meta.param_count),
        });
    }
    Ok((meta, params))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let (meta, params) = load_params(dir)?;
    let path = dir.join(OPTIM_FILE);
    let bytes = read(&path)?;
    let mut r = Reader::open(&bytes, OPTIM_MAGIC, &path)?;
    let g_opt = decode_adam(&mut r, meta.g_adam)?;
    let d_opt = decode_adam(&mut r, meta.d_adam)?;
    r.end()?;
    check_digest(&path, &bytes, &meta.optim_sha256)?;
    Ok(Checkpoint {
        version: meta.checkpoint_version,
        stage: meta.stage,
        step: meta.step,
        phase: meta.phase,
        config: meta.config,
        params,
        g_opt,
        d_opt,
        frozen: meta.frozen,
    })
}

/// A loaded model ready for inference.
pub struct Loaded {
    pub dir: PathBuf,
    pub meta: Meta,
    pub model: Model,
    pub params: ParamStore,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let dir = resolve(path)?;
        let (meta, params) = load_params(&dir)?;
        let ckpt_view = Checkpoint {
            version: meta.checkpoint_version,
            stage: meta.stage,
            step: meta.step,
            phase: meta.phase,
            config: meta.config.clone(),
            params,
            g_opt: Adam::default(),
            d_opt: Adam::default(),
            frozen: Vec::new(),
        };
        let model = ckpt_view.model()?;
        Ok(Loaded {
            dir,
            meta,
            model,
            params: ckpt_view.params,
        })
    }

    /// Render resolution of the last schedule entry the checkpoint reached.
    pub fn render_resolution(&self) -> usize {
        self.meta.config.entry_at(self.meta.step.saturating_sub(1)).1.render_resolution
    }

    pub fn image_resolution(&self) -> usize {
        Model::image_resolution(self.render_resolution())
    }
}

fn numbered(dir: &Path, prefix: &str) -> Result<Vec<(u64, PathBuf)>> {
    let rd = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix(prefix)).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().is_dir() {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Accepts a step directory, a stage directory (latest step) or a run
/// directory (latest step of the highest stage).
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(META_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    if let Some((_, p)) = numbered(path, "step")?.pop() {
        return resolve(&p);
    }
    for (_, stage) in numbered(path, "stage")?.into_iter().rev() {
        if let Some((_, p)) = numbered(&stage, "step")?.pop() {
            return resolve(&p);
        }
    }
    Err(Error::Config(format!("no checkpoint found at {}", path.display())))
}
