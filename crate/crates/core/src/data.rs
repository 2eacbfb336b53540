//! Feature files, pair manifests, the synthetic pair generator and the toy
//! featurizers for raw captions and point clouds.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::afr::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const RMFT_MAGIC: [u8; 4] = *b"RMFT";
pub const RMFT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

// ---------------------------------------------------------------------------
// RMFT feature files

pub fn features_to_bytes(tokens: &Tensor<f32>) -> Result<Vec<u8>> {
    if tokens.ndim() != 2 {
        return Err(Error::Shape(format!(
            "feature files hold matrices, got {:?}",
            tokens.shape()
        )));
    }
    if !tokens.is_finite() {
        return Err(Error::NonFinite("refusing to write non-finite features".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * tokens.len());
    out.extend_from_slice(&RMFT_MAGIC);
    out.extend_from_slice(&RMFT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tokens.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(tokens.cols() as u32).to_le_bytes());
    for v in tokens.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} bytes is shorter than the 16-byte header", bytes.len()),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != RMFT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: RMFT_MAGIC,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RMFT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: RMFT_VERSION,
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = 4 * rows as u64 * cols as u64;
    let got = (bytes.len() - 16) as u64;
    if got != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            got,
        });
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: element {i} of the payload is {}",
            path.display(),
            data[i]
        )));
    }
    Tensor::new(vec![rows, cols], data)
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let bytes = features_to_bytes(&seq.tokens)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_features(path: &Path, id: &str, modality: Modality) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let tokens = features_from_bytes(path, &bytes)?;
    FeatureSequence::new(id, modality, tokens)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub text_feature_path: String,
    pub point_feature_path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub format_version: u32,
    pub entries: Vec<PairEntry>,
    /// How the archive was produced (generator settings, featurizer seed).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub source: serde_json::Value,
}

impl PairManifest {
    pub fn new(entries: Vec<PairEntry>, source: serde_json::Value) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            entries,
            source,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: PairManifest =
            serde_json::from_str(text).map_err(|e| Error::Manifest(format!("malformed: {e}")))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "format version {} is not supported (this build reads {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Unique ids and existing feature files under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id `{}`", e.id)));
            }
            for p in [&e.text_feature_path, &e.point_feature_path] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry `{}` references missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One matched text / point-cloud pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub text: FeatureSequence,
    pub point: FeatureSequence,
}

/// A manifest together with the directory its paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: PairManifest,
}

impl Dataset {
    /// Loads `manifest.json` from a directory (or a manifest file directly)
    /// and checks referential integrity.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::io(format!("reading manifest {}", file.display()), e))?;
        let manifest = PairManifest::from_json(&text)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&root)?;
        Ok(Self { root, manifest })
    }

    /// Reads every pair of `split` in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<Pair>> {
        let mut out = Vec::new();
        for e in self.manifest.entries.iter().filter(|e| e.split == split) {
            let text = read_features(&self.root.join(&e.text_feature_path), &e.id, Modality::Text)?;
            let point = read_features(
                &self.root.join(&e.point_feature_path),
                &e.id,
                Modality::PointCloud,
            )?;
            out.push(Pair {
                id: e.id.clone(),
                text,
                point,
            });
        }
        if let Some(first) = out.first() {
            let (wt, wp) = (first.text.width(), first.point.width());
            for p in &out {
                if p.text.width() != wt || p.point.width() != wp {
                    return Err(Error::Manifest(format!(
                        "pair `{}` has feature widths {}/{}, expected {wt}/{wp}",
                        p.id,
                        p.text.width(),
                        p.point.width()
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Text and point feature widths, taken from the first entry.
    pub fn widths(&self) -> Result<(usize, usize)> {
        let e = self
            .manifest
            .entries
            .first()
            .ok_or_else(|| Error::Manifest("manifest has no entries".into()))?;
        let t = read_features(&self.root.join(&e.text_feature_path), &e.id, Modality::Text)?;
        let p = read_features(&self.root.join(&e.point_feature_path), &e.id, Modality::PointCloud)?;
        Ok((t.width(), p.width()))
    }
}

/// Writes `pairs` as RMFT files plus a manifest into `out`.
pub fn write_dataset(
    out: &Path,
    pairs: &[(Pair, Split, Option<String>)],
    source: serde_json::Value,
) -> Result<PairManifest> {
    for sub in ["text", "point"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for (pair, split, caption) in pairs {
        let tp = format!("text/{}.rmft", pair.id);
        let pp = format!("point/{}.rmft", pair.id);
        write_features(&pair.text, &out.join(&tp))?;
        write_features(&pair.point, &out.join(&pp))?;
        entries.push(PairEntry {
            id: pair.id.clone(),
            text_feature_path: tp,
            point_feature_path: pp,
            split: *split,
            caption: caption.clone(),
        });
    }
    let manifest = PairManifest::new(entries, source);
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic pairs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub text_len: (usize, usize),
    pub point_len: (usize, usize),
    pub text_width: usize,
    pub point_width: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            text_len: (8, 16),
            point_len: (32, 64),
            text_width: 32,
            point_width: 32,
            latent_dim: 8,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 2 {
            return Err(Error::Argument(format!("need at least 2 pairs, got {}", self.pairs)));
        }
        for (name, (lo, hi)) in [("text length", self.text_len), ("point length", self.point_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::Argument(format!("invalid {name} range {lo}..={hi}")));
            }
        }
        if self.text_width == 0 || self.point_width == 0 || self.latent_dim == 0 {
            return Err(Error::Argument("widths and latent dimension must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Split of pair `i` out of `n`: the last `n/10` are test, the `n/10`
/// before them validation, the rest training.
pub fn split_of(i: usize, n: usize) -> Split {
    let tenth = n / 10;
    if i >= n - tenth {
        Split::Test
    } else if i >= n - 2 * tenth {
        Split::Val
    } else {
        Split::Train
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f32> {
    (0..rows * cols)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect()
}

/// Pairs sharing a latent code: every token of either side is its modality's
/// fixed linear image of the pair's latent plus independent Gaussian noise.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<(Pair, Split)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;
    let scale = 1.0 / (l as f64).sqrt();
    let w_t = gaussian_matrix(&mut rng, cfg.text_width, l, scale);
    let w_p = gaussian_matrix(&mut rng, cfg.point_width, l, scale);
    let image = |w: &[f32], width: usize, z: &[f32]| -> Vec<f32> {
        (0..width)
            .map(|r| w[r * l..(r + 1) * l].iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut out = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let z: Vec<f32> = gaussian_matrix(&mut rng, l, 1, 1.0);
        let mean_t = image(&w_t, cfg.text_width, &z);
        let mean_p = image(&w_p, cfg.point_width, &z);
        let st = rng.gen_range(cfg.text_len.0..=cfg.text_len.1);
        let sp = rng.gen_range(cfg.point_len.0..=cfg.point_len.1);
        let mut tokens = |s: usize, mean: &[f32]| -> Tensor<f32> {
            let noise = gaussian_matrix(&mut rng, s, mean.len(), cfg.noise);
            let data = noise
                .iter()
                .enumerate()
                .map(|(k, n)| mean[k % mean.len()] + n)
                .collect();
            Tensor::new(vec![s, mean.len()], data).expect("token shape")
        };
        let text = tokens(st, &mean_t);
        let point = tokens(sp, &mean_p);
        let id = format!("pair{i:05}");
        out.push((
            Pair {
                text: FeatureSequence::new(id.clone(), Modality::Text, text)?,
                point: FeatureSequence::new(id.clone(), Modality::PointCloud, point)?,
                id,
            },
            split_of(i, cfg.pairs),
        ));
    }
    Ok(out)
}

/// Generates a synthetic archive into `out` and returns its manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<PairManifest> {
    let pairs = synthesize(cfg)?;
    let rows: Vec<(Pair, Split, Option<String>)> =
        pairs.into_iter().map(|(p, s)| (p, s, None)).collect();
    let source = serde_json::json!({ "generator": "synthetic", "settings": cfg });
    write_dataset(out, &rows, source)
}

// ---------------------------------------------------------------------------
// Toy featurizers

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased words, split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One row per token; a token's row is a Gaussian vector seeded by the token
/// hash and `seed`, so repeated tokens give identical rows.
pub fn featurize_text(text: &str, width: usize, seed: u64) -> Result<FeatureSequence> {
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::Argument("cannot featurize empty text".into()));
    }
    if width == 0 {
        return Err(Error::Argument("text feature width must be positive".into()));
    }
    let std = 1.0 / (width as f64).sqrt();
    let mut data = Vec::with_capacity(words.len() * width);
    for w in &words {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()) ^ seed);
        data.extend(gaussian_matrix(&mut rng, 1, width, std));
    }
    FeatureSequence::new(
        "text",
        Modality::Text,
        Tensor::new(vec![words.len(), width], data)?,
    )
}

/// A point with optional colour (components in 0..=1 or 0..=255).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub xyz: [f32; 3],
    pub rgb: Option<[f32; 3]>,
}

/// Uniform sampling with replacement to `n_sample` points, then a fixed
/// seeded linear map of `(x, y, z, r, g, b)` (colour zero when absent).
pub fn featurize_pointcloud(
    points: &[CloudPoint],
    width: usize,
    n_sample: usize,
    seed: u64,
) -> Result<FeatureSequence> {
    if points.is_empty() {
        return Err(Error::Argument("point cloud has no points".into()));
    }
    if width == 0 || n_sample == 0 {
        return Err(Error::Argument("point feature width and sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = gaussian_matrix(&mut rng, 6, width, 1.0 / 6f64.sqrt());
    let colour_scale = if points
        .iter()
        .filter_map(|p| p.rgb)
        .flatten()
        .any(|c| c > 1.0)
    {
        1.0 / 255.0
    } else {
        1.0
    };
    let mut data = Vec::with_capacity(n_sample * width);
    for _ in 0..n_sample {
        let p = points[rng.gen_range(0..points.len())];
        let rgb = p.rgb.unwrap_or([0.0; 3]);
        let v = [
            p.xyz[0],
            p.xyz[1],
            p.xyz[2],
            rgb[0] * colour_scale,
            rgb[1] * colour_scale,
            rgb[2] * colour_scale,
        ];
        for c in 0..width {
            data.push((0..6).map(|k| v[k] * proj[k * width + c]).sum());
        }
    }
    FeatureSequence::new(
        "point",
        Modality::PointCloud,
        Tensor::new(vec![n_sample, width], data)?,
    )
}

fn parse_floats(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<f32>> {
    fields
        .iter()
        .map(|f| {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("`{f}` is not a number"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("non-finite value `{f}`"),
                })
            }
        })
        .collect()
}

fn point_from(path: &Path, line: usize, v: &[f32]) -> Result<CloudPoint> {
    match v.len() {
        3 => Ok(CloudPoint {
            xyz: [v[0], v[1], v[2]],
            rgb: None,
        }),
        n if n >= 6 => Ok(CloudPoint {
            xyz: [v[0], v[1], v[2]],
            rgb: Some([v[3], v[4], v[5]]),
        }),
        n => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("expected 3 or 6 values, found {n}"),
        }),
    }
}

/// Whitespace-separated `x y z [r g b]` per line; `#` starts a comment.
pub fn parse_xyz(path: &Path, text: &str) -> Result<Vec<CloudPoint>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|f| !f.is_empty())
            .collect();
        let v = parse_floats(path, i + 1, &fields)?;
        out.push(point_from(path, i + 1, &v)?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            reason: "no points found".into(),
        });
    }
    Ok(out)
}

/// ASCII PLY with a `vertex` element carrying `x y z` and optionally
/// `red green blue`. Other elements are skipped.
pub fn parse_ply(path: &Path, text: &str) -> Result<Vec<CloudPoint>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing `ply` signature".into())),
    }
    // (name, count, properties)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    let mut header_end = None;
    for (i, raw) in lines.by_ref() {
        let words: Vec<&str> = raw.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", fmt, _] => {
                return Err(err(i + 1, format!("`{fmt}` PLY is not supported, only ascii")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let n = count
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => match elements.last_mut() {
                Some(e) => e.2.push("<list>".into()),
                None => return Err(err(i + 1, "property before any element".into())),
            },
            ["property", _, name] => match elements.last_mut() {
                Some(e) => e.2.push(name.to_string()),
                None => return Err(err(i + 1, "property before any element".into())),
            },
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => return Err(err(i + 1, format!("unrecognized header line `{}`", raw.trim()))),
        }
    }
    let header_end = header_end.ok_or_else(|| err(text.lines().count(), "missing end_header".into()))?;
    if !ascii {
        return Err(err(header_end, "missing `format ascii 1.0` line".into()));
    }
    let col = |props: &[String], n: &str| props.iter().position(|p| p == n);
    let mut out = Vec::new();
    let mut found_vertex = false;
    for (name, count, props) in &elements {
        let is_vertex = name == "vertex";
        let idx = if is_vertex {
            found_vertex = true;
            let xyz = ["x", "y", "z"].map(|n| col(props, n));
            if xyz.iter().any(Option::is_none) {
                return Err(err(header_end, "vertex element lacks x, y or z".into()));
            }
            let rgb = ["red", "green", "blue"].map(|n| col(props, n));
            Some((xyz.map(Option::unwrap), rgb))
        } else {
            None
        };
        for _ in 0..*count {
            let (i, raw) = lines
                .next()
                .ok_or_else(|| err(text.lines().count(), format!("file ends inside `{name}` data")))?;
            let Some((xyz, rgb)) = idx else { continue };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() < props.len() {
                return Err(err(
                    i + 1,
                    format!("expected {} values, found {}", props.len(), fields.len()),
                ));
            }
            let v = parse_floats(path, i + 1, &fields[..props.len()])?;
            let colour = if rgb.iter().all(Option::is_some) {
                Some(rgb.map(|c| v[c.unwrap()]))
            } else {
                None
            };
            out.push(CloudPoint {
                xyz: xyz.map(|c| v[c]),
                rgb: colour,
            });
        }
    }
    if !found_vertex || out.is_empty() {
        return Err(err(header_end, "no vertex data".into()));
    }
    Ok(out)
}

/// Reads an ASCII `.ply` or whitespace `.xyz`/`.txt` cloud.
pub fn read_point_cloud(path: &Path) -> Result<Vec<CloudPoint>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let is_ply = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ply"))
        .unwrap_or(false)
        || text.starts_with("ply");
    if is_ply {
        parse_ply(path, &text)
    } else {
        parse_xyz(path, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmft_size_and_round_trip() {
        let t = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.25 - 1.0);
        let bytes = features_to_bytes(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(features_from_bytes(Path::new("m"), &bytes).unwrap(), t);
    }

    #[test]
    fn rmft_errors_are_distinct() {
        let t = Tensor::from_fn(&[2, 2], |i| i as f32);
        let good = features_to_bytes(&t).unwrap();
        let mut magic = good.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(features_from_bytes(Path::new("m"), &magic), Err(Error::BadMagic { .. })));
        let mut ver = good.clone();
        ver[4] = 2;
        assert!(matches!(
            features_from_bytes(Path::new("m"), &ver),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            features_from_bytes(Path::new("m"), &good[..good.len() - 1]),
            Err(Error::PayloadLength { .. })
        ));
        let mut nan = good;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(features_from_bytes(Path::new("m"), &nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn split_counts() {
        for (n, want) in [(200, [160, 20, 20]), (100, [80, 10, 10]), (9, [9, 0, 0])] {
            let mut c = [0; 3];
            for i in 0..n {
                c[Split::ALL.iter().position(|s| *s == split_of(i, n)).unwrap()] += 1;
            }
            assert_eq!(c, want, "n={n}");
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_in_range() {
        let cfg = SyntheticConfig {
            pairs: 12,
            ..Default::default()
        };
        let a = synthesize(&cfg).unwrap();
        assert_eq!(a, synthesize(&cfg).unwrap());
        for (p, _) in &a {
            assert!((8..=16).contains(&p.text.len()));
            assert!((32..=64).contains(&p.point.len()));
            assert_eq!(p.text.width(), 32);
        }
        let other = synthesize(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synthesize_rejects_bad_ranges() {
        for cfg in [
            SyntheticConfig { pairs: 1, ..Default::default() },
            SyntheticConfig { text_len: (5, 4), ..Default::default() },
            SyntheticConfig { noise: -0.1, ..Default::default() },
        ] {
            assert!(matches!(synthesize(&cfg), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn text_featurizer_basics() {
        let f = featurize_text("a b a", 8, 3).unwrap();
        assert_eq!(f.tokens.row(0), f.tokens.row(2));
        assert_ne!(f.tokens.row(0), f.tokens.row(1));
        assert_eq!(featurize_text("blue and white porcelain", 8, 0).unwrap().len(), 4);
        assert_eq!(featurize_text("Blue, and white!", 8, 0).unwrap().len(), 3);
        assert_eq!(featurize_text("x y", 8, 9).unwrap(), featurize_text("x y", 8, 9).unwrap());
        assert!(matches!(featurize_text("  ,. ", 8, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn point_featurizer_basics() {
        let one = [CloudPoint { xyz: [0.5, -1.0, 2.0], rgb: None }];
        let f = featurize_pointcloud(&one, 6, 10, 0).unwrap();
        assert_eq!(f.len(), 10);
        for i in 1..10 {
            assert_eq!(f.tokens.row(i), f.tokens.row(0));
        }
        let origin = [CloudPoint { xyz: [0.0; 3], rgb: None }];
        let z = featurize_pointcloud(&origin, 6, 2, 4).unwrap();
        assert!(z.tokens.data().iter().all(|v| *v == 0.0));
        assert!(featurize_pointcloud(&[], 6, 2, 4).is_err());
    }

    #[test]
    fn xyz_parsing_reports_lines() {
        let p = Path::new("c.xyz");
        let pts = parse_xyz(p, "# header\n0 0 0\n1 2 3 255 0 0\n\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].rgb, Some([255.0, 0.0, 0.0]));
        match parse_xyz(p, "0 0 0\n1 two 3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_xyz(p, "0 0 0\n1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ply_parsing() {
        let p = Path::new("c.ply");
        let text = "ply\nformat ascii 1.0\ncomment toy\nelement vertex 2\nproperty float x\n\
                    property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n\
                    property uchar blue\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0 10 20 30\n1 1 1 0 0 0\n3 0 1 1\n";
        let pts = parse_ply(p, text).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].rgb, Some([10.0, 20.0, 30.0]));
        let bad = text.replace("1 1 1 0 0 0", "1 1 x 0 0 0");
        match parse_ply(p, &bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 15),
            other => panic!("{other:?}"),
        }
        let binary = text.replace("format ascii 1.0", "format binary_little_endian 1.0");
        assert!(matches!(parse_ply(p, &binary), Err(Error::Parse { line: 2, .. })));
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                     property float z\nend_header\n0 0 0\n";
        assert!(parse_ply(p, short).is_err());
    }
}
