//! Synthetic articulated-shape dataset generation with ground-truth dense
//! correspondences, plus point-cloud file I/O and the dataset manifest.
//!
//! Identities are chains of capsule links with per-identity random lengths.
//! Surface points are sampled once on the canonical (zero joint angle) shape
//! and then rigidly skinned per link, with linear blending near joints, so
//! the ground-truth correspondence of frame point `i` is canonical point `i`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

/// One point cloud with optional per-point correspondence ids and part
/// labels. Coordinates are stored row-major `[N, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<f64>,
    pub corr: Option<Vec<usize>>,
    pub part: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [
            self.points[i * 3],
            self.points[i * 3 + 1],
            self.points[i * 3 + 2],
        ]
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.len() {
            for c in 0..3 {
                lo[c] = lo[c].min(self.points[i * 3 + c]);
                hi[c] = hi[c].max(self.points[i * 3 + c]);
            }
        }
        (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
    }
}

/// One shape identity: skeleton parameters plus the canonical cloud.
#[derive(Debug, Clone)]
pub struct Identity {
    pub id: String,
    pub link_lengths: Vec<f64>,
    pub radius: f64,
    /// Blend half-width of the linear skinning near joints.
    pub blend: f64,
    pub canonical: PointCloud,
}

/// One observed frame of one identity at one time step.
#[derive(Debug, Clone)]
pub struct Frame {
    pub sequence: String,
    pub index: usize,
    pub angles: Vec<f64>,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub identity: String,
    pub split: Split,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub identities: Vec<Identity>,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn identity(&self, id: &str) -> Option<&Identity> {
        self.identities.iter().find(|i| i.id == id)
    }

    pub fn identity_index(&self, id: &str) -> Option<usize> {
        self.identities.iter().position(|i| i.id == id)
    }

    /// Total frame count across all sequences, in manifest order. Frame `f`
    /// of sequence `s` gets the global pose-code slot
    /// `sum(len of earlier sequences) + f`.
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn frame_offset(&self, seq_index: usize) -> usize {
        self.sequences[..seq_index]
            .iter()
            .map(|s| s.frames.len())
            .sum()
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = (usize, &Sequence)> {
        self.sequences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Train)
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub identities: usize,
    pub links: usize,
    pub seqs_per_identity: usize,
    pub heldout_seqs_per_identity: usize,
    pub frames_per_seq: usize,
    pub points: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub blend: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            identities: 3,
            links: 3,
            seqs_per_identity: 2,
            heldout_seqs_per_identity: 0,
            frames_per_seq: 20,
            points: 512,
            amplitude: 0.6,
            noise: 0.0,
            blend: 0.05,
            seed: 7,
        }
    }
}

/// Pose an identity's canonical cloud with the given joint angles (one angle
/// per joint, `links - 1` joints, rotations about the x-axis). Point order
/// and count are preserved, so correspondence is by index.
pub fn pose_identity(identity: &Identity, angles: &[f64]) -> Vec<f64> {
    pose_points(
        &identity.canonical.points,
        &identity.link_lengths,
        identity.blend,
        angles,
    )
}

fn pose_points(points: &[f64], link_lengths: &[f64], blend: f64, angles: &[f64]) -> Vec<f64> {
    let links = link_lengths.len();
    assert_eq!(angles.len(), links - 1);
    // Joint heights along z in the canonical configuration.
    let mut joints = Vec::with_capacity(links);
    let mut z = 0.0;
    for &len in link_lengths {
        joints.push(z);
        z += len;
    }
    let total = z;
    // Cumulative rigid transform per link: T_j(p) applies the rotations of
    // joints 1..=j from the root down.
    // T_0 = identity; T_j(p) = T_{j-1}(R_j (p - c_j) + c_j).
    let mut rot = vec![[1.0f64, 0.0, 0.0, 1.0]; links]; // 2x2 in (y, z)
    let mut trans = vec![[0.0f64; 2]; links];
    for j in 1..links {
        let (s, c) = angles[j - 1].sin_cos();
        let rj = [c, -s, s, c];
        let cj = [0.0, joints[j]];
        // compose: T_j = T_{j-1} . (rotate about c_j)
        let prev_r = rot[j - 1];
        let prev_t = trans[j - 1];
        let r = [
            prev_r[0] * rj[0] + prev_r[1] * rj[2],
            prev_r[0] * rj[1] + prev_r[1] * rj[3],
            prev_r[2] * rj[0] + prev_r[3] * rj[2],
            prev_r[2] * rj[1] + prev_r[3] * rj[3],
        ];
        // T_j(p) = prev_r (rj (p - c_j) + c_j) + prev_t
        let inner = [
            cj[0] - (rj[0] * cj[0] + rj[1] * cj[1]),
            cj[1] - (rj[2] * cj[0] + rj[3] * cj[1]),
        ];
        let t = [
            prev_r[0] * inner[0] + prev_r[1] * inner[1] + prev_t[0],
            prev_r[2] * inner[0] + prev_r[3] * inner[1] + prev_t[1],
        ];
        rot[j] = r;
        trans[j] = t;
    }
    let apply = |j: usize, y: f64, zz: f64| -> [f64; 2] {
        [
            rot[j][0] * y + rot[j][1] * zz + trans[j][0],
            rot[j][2] * y + rot[j][3] * zz + trans[j][1],
        ]
    };
    let n = points.len() / 3;
    let mut out = Vec::with_capacity(points.len());
    for i in 0..n {
        let (x, y, zz) = (points[i * 3], points[i * 3 + 1], points[i * 3 + 2]);
        // Owning link by canonical height, clamped to the chain.
        let zc = zz.clamp(0.0, total - 1e-12);
        let mut link = links - 1;
        for j in 0..links {
            if zc < joints[j] + link_lengths[j] {
                link = j;
                break;
            }
        }
        // Linear blend with the neighbor across the nearest joint when
        // within the blend half-width.
        let mut pos = apply(link, y, zz);
        if blend > 0.0 {
            if link + 1 < links {
                let d = joints[link + 1] - zc;
                if d < blend {
                    let w = 0.5 * (1.0 - d / blend);
                    let other = apply(link + 1, y, zz);
                    pos = [
                        (1.0 - w) * pos[0] + w * other[0],
                        (1.0 - w) * pos[1] + w * other[1],
                    ];
                }
            }
            if link > 0 {
                let d = zc - joints[link];
                if d < blend {
                    let w = 0.5 * (1.0 - d / blend);
                    let other = apply(link - 1, y, zz);
                    pos = [
                        (1.0 - w) * pos[0] + w * other[0],
                        (1.0 - w) * pos[1] + w * other[1],
                    ];
                }
            }
        }
        out.push(x);
        out.push(pos[0]);
        out.push(pos[1]);
    }
    out
}

fn sample_canonical(
    link_lengths: &[f64],
    radius: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let total: f64 = link_lengths.iter().sum();
    let mut joints = Vec::with_capacity(link_lengths.len());
    let mut z = 0.0;
    for &len in link_lengths {
        joints.push(z);
        z += len;
    }
    let mut points = Vec::with_capacity(n * 3);
    let mut part = Vec::with_capacity(n);
    for _ in 0..n {
        let zz = rng.gen_range(0.0..total);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut link = link_lengths.len() - 1;
        for j in 0..link_lengths.len() {
            if zz < joints[j] + link_lengths[j] {
                link = j;
                break;
            }
        }
        points.push(radius * phi.cos());
        points.push(radius * phi.sin());
        points.push(zz);
        part.push(link);
    }
    let corr = (0..n).collect();
    PointCloud {
        points,
        corr: Some(corr),
        part: Some(part),
    }
}

/// Generate a full synthetic dataset: identities are k-link capsule chains,
/// sequences follow smooth seeded joint-angle trajectories, and every frame
/// carries exact correspondences to the canonical cloud by point index.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset, DataError> {
    if spec.links < 2 {
        return Err(DataError::InvalidSpec(format!(
            "need at least 2 links, got {}",
            spec.links
        )));
    }
    if spec.amplitude >= std::f64::consts::PI {
        return Err(DataError::InvalidSpec(format!(
            "motion amplitude {} must be below pi",
            spec.amplitude
        )));
    }
    if spec.identities == 0 || spec.frames_per_seq == 0 || spec.points == 0 {
        return Err(DataError::InvalidSpec(
            "identities, frames and points must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut identities = Vec::with_capacity(spec.identities);
    for c in 0..spec.identities {
        let link_lengths: Vec<f64> = (0..spec.links).map(|_| rng.gen_range(0.25..0.55)).collect();
        let radius = rng.gen_range(0.05..0.1);
        let canonical = sample_canonical(&link_lengths, radius, spec.points, &mut rng);
        identities.push(Identity {
            id: format!("I{c}"),
            link_lengths,
            radius,
            blend: spec.blend,
            canonical,
        });
    }
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).unwrap())
    } else {
        None
    };
    let mut sequences = Vec::new();
    for identity in &identities {
        let per_identity = spec.seqs_per_identity + spec.heldout_seqs_per_identity;
        for s in 0..per_identity {
            let split = if s < spec.seqs_per_identity {
                Split::Train
            } else {
                Split::Heldout
            };
            let seq_id = format!("{}_S{s}", identity.id);
            let joints = spec.links - 1;
            let freqs: Vec<f64> = (0..joints).map(|_| rng.gen_range(0.5..1.5)).collect();
            let phases: Vec<f64> = (0..joints)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            let mut frames = Vec::with_capacity(spec.frames_per_seq);
            for f in 0..spec.frames_per_seq {
                let t = f as f64 / spec.frames_per_seq as f64;
                let angles: Vec<f64> = (0..joints)
                    .map(|j| {
                        spec.amplitude * (std::f64::consts::TAU * freqs[j] * t + phases[j]).sin()
                    })
                    .collect();
                let mut points = pose_identity(identity, &angles);
                if let Some(dist) = &noise {
                    for v in &mut points {
                        *v += dist.sample(&mut rng);
                    }
                }
                frames.push(Frame {
                    sequence: seq_id.clone(),
                    index: f,
                    angles,
                    cloud: PointCloud {
                        points,
                        corr: identity.canonical.corr.clone(),
                        part: identity.canonical.part.clone(),
                    },
                });
            }
            sequences.push(Sequence {
                id: seq_id,
                identity: identity.id.clone(),
                split,
                frames,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        identities,
        sequences,
    })
}

/// Uniform sample of `n` point indices without replacement, deterministic per
/// seed (partial Fisher-Yates).
pub fn sample_points(cloud_len: usize, n: usize, seed: u64) -> Vec<usize> {
    assert!(n <= cloud_len, "cannot sample {n} from {cloud_len} points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..cloud_len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..cloud_len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

// ---------------------------------------------------------------------------
// Cloud file format: UTF-8 text.
//   line 1: `GNPM-PC 1`
//   line 2: `N <count> COLS x y z [corr] [part]`
//   then one point per line, space-separated decimal.
// ---------------------------------------------------------------------------

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    let mut out = String::new();
    let mut cols = "x y z".to_string();
    if cloud.corr.is_some() {
        cols.push_str(" corr");
    }
    if cloud.part.is_some() {
        cols.push_str(" part");
    }
    let _ = writeln!(out, "GNPM-PC 1");
    let _ = writeln!(out, "N {} COLS {cols}", cloud.len());
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(corr) = &cloud.corr {
            let _ = write!(out, " {}", corr[i]);
        }
        if let Some(part) = &cloud.part {
            let _ = write!(out, " {}", part[i]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |line: usize, msg: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    if header.trim_end() != "GNPM-PC 1" {
        return Err(err(1, format!("bad magic line {header:?}")));
    }
    let (_, meta) = lines
        .next()
        .ok_or_else(|| err(2, "missing header".into()))?;
    let toks: Vec<&str> = meta.split_whitespace().collect();
    if toks.len() < 5 || toks[0] != "N" || toks[2] != "COLS" {
        return Err(err(2, format!("bad header {meta:?}")));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| err(2, format!("bad count {:?}", toks[1])))?;
    let cols = &toks[3..];
    if cols[..3] != ["x", "y", "z"] {
        return Err(err(
            2,
            format!("expected columns to start with x y z, got {cols:?}"),
        ));
    }
    let has_corr = cols.contains(&"corr");
    let has_part = cols.contains(&"part");
    let expect_cols = 3 + has_corr as usize + has_part as usize;
    let mut points = Vec::with_capacity(n * 3);
    let mut corr = if has_corr {
        Some(Vec::with_capacity(n))
    } else {
        None
    };
    let mut part = if has_part {
        Some(Vec::with_capacity(n))
    } else {
        None
    };
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != expect_cols {
            return Err(err(
                lineno + 1,
                format!("expected {expect_cols} columns, got {}", toks.len()),
            ));
        }
        for t in &toks[..3] {
            let v: f64 = t
                .parse()
                .map_err(|_| err(lineno + 1, format!("bad number {t:?}")))?;
            points.push(v);
        }
        let mut next = 3;
        if let Some(c) = &mut corr {
            let v: usize = toks[next]
                .parse()
                .map_err(|_| err(lineno + 1, format!("bad corr id {:?}", toks[next])))?;
            c.push(v);
            next += 1;
        }
        if let Some(p) = &mut part {
            let v: usize = toks[next]
                .parse()
                .map_err(|_| err(lineno + 1, format!("bad part label {:?}", toks[next])))?;
            p.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(err(0, format!("header declared {n} points, found {rows}")));
    }
    Ok(PointCloud { points, corr, part })
}

// ---------------------------------------------------------------------------
// Dataset directory layout + manifest.
// ---------------------------------------------------------------------------

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.parse().ok()).collect()
}

/// Write the dataset as a directory: `manifest.txt`, one cloud file per
/// canonical identity, one per frame.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    let io_err = |p: &Path, source| DataError::Io {
        path: p.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir.join("identities")).map_err(|e| io_err(dir, e))?;
    let mut m = String::new();
    let _ = writeln!(m, "GNPM-MANIFEST 1");
    let s = &ds.spec;
    let _ = writeln!(
        m,
        "generator identities={} links={} seqs={} heldout_seqs={} frames={} points={} amplitude={} noise={} blend={} seed={}",
        s.identities, s.links, s.seqs_per_identity, s.heldout_seqs_per_identity,
        s.frames_per_seq, s.points, s.amplitude, s.noise, s.blend, s.seed
    );
    for identity in &ds.identities {
        let rel = format!("identities/{}.pc", identity.id);
        save_cloud(&dir.join(&rel), &identity.canonical)?;
        let _ = writeln!(
            m,
            "identity id={} canonical={} links={} radius={} blend={}",
            identity.id,
            rel,
            join_f64(&identity.link_lengths),
            identity.radius,
            identity.blend
        );
    }
    for seq in &ds.sequences {
        let split = match seq.split {
            Split::Train => "train",
            Split::Heldout => "heldout",
        };
        let _ = writeln!(
            m,
            "sequence id={} identity={} split={split}",
            seq.id, seq.identity
        );
        let seq_dir = dir.join("seqs").join(&seq.id);
        fs::create_dir_all(&seq_dir).map_err(|e| io_err(&seq_dir, e))?;
        for frame in &seq.frames {
            let rel = format!("seqs/{}/frame_{:03}.pc", seq.id, frame.index);
            save_cloud(&dir.join(&rel), &frame.cloud)?;
            let _ = writeln!(
                m,
                "frame seq={} f={} file={} angles={}",
                seq.id,
                frame.index,
                rel,
                join_f64(&frame.angles)
            );
        }
    }
    fs::write(dir.join("manifest.txt"), m).map_err(|e| io_err(&dir.join("manifest.txt"), e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|source| DataError::Io {
        path: manifest.clone(),
        source,
    })?;
    let err = |line: usize, msg: String| DataError::Parse {
        path: manifest.clone(),
        line,
        msg,
    };
    let kv = |tok: &str| -> Option<(String, String)> {
        tok.split_once('=')
            .map(|(k, v)| (k.to_string(), v.to_string()))
    };
    let mut spec = GeneratorSpec::default();
    let mut identities: Vec<Identity> = Vec::new();
    let mut sequences: Vec<Sequence> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if lineno == 0 {
            if line != "GNPM-MANIFEST 1" {
                return Err(err(1, format!("bad magic {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap();
        let fields: Vec<(String, String)> = toks.filter_map(kv).collect();
        let get = |key: &str| -> Result<String, DataError> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| err(lineno + 1, format!("missing field {key}")))
        };
        match kind {
            "generator" => {
                spec = GeneratorSpec {
                    identities: get("identities")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad identities".into()))?,
                    links: get("links")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad links".into()))?,
                    seqs_per_identity: get("seqs")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad seqs".into()))?,
                    heldout_seqs_per_identity: get("heldout_seqs")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad heldout_seqs".into()))?,
                    frames_per_seq: get("frames")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad frames".into()))?,
                    points: get("points")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad points".into()))?,
                    amplitude: get("amplitude")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad amplitude".into()))?,
                    noise: get("noise")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad noise".into()))?,
                    blend: get("blend")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad blend".into()))?,
                    seed: get("seed")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad seed".into()))?,
                };
            }
            "identity" => {
                let canonical = load_cloud(&dir.join(get("canonical")?))?;
                identities.push(Identity {
                    id: get("id")?,
                    link_lengths: parse_f64_list(&get("links")?)
                        .ok_or_else(|| err(lineno + 1, "bad link list".into()))?,
                    radius: get("radius")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad radius".into()))?,
                    blend: get("blend")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad blend".into()))?,
                    canonical,
                });
            }
            "sequence" => {
                let split = match get("split")?.as_str() {
                    "train" => Split::Train,
                    "heldout" => Split::Heldout,
                    other => return Err(err(lineno + 1, format!("bad split {other:?}"))),
                };
                sequences.push(Sequence {
                    id: get("id")?,
                    identity: get("identity")?,
                    split,
                    frames: Vec::new(),
                });
            }
            "frame" => {
                let seq_id = get("seq")?;
                let seq = sequences
                    .iter_mut()
                    .find(|s| s.id == seq_id)
                    .ok_or_else(|| err(lineno + 1, format!("unknown sequence {seq_id}")))?;
                let cloud = load_cloud(&dir.join(get("file")?))?;
                seq.frames.push(Frame {
                    sequence: seq_id,
                    index: get("f")?
                        .parse()
                        .map_err(|_| err(lineno + 1, "bad frame index".into()))?,
                    angles: parse_f64_list(&get("angles")?)
                        .ok_or_else(|| err(lineno + 1, "bad angle list".into()))?,
                    cloud,
                });
            }
            other => return Err(err(lineno + 1, format!("unknown record {other:?}"))),
        }
    }
    // Referential integrity: every sequence's identity must exist with a
    // canonical cloud.
    for seq in &sequences {
        if !identities.iter().any(|i| i.id == seq.identity) {
            return Err(err(
                0,
                format!(
                    "sequence {} references unknown identity {}",
                    seq.id, seq.identity
                ),
            ));
        }
    }
    Ok(Dataset {
        spec,
        identities,
        sequences,
    })
}
