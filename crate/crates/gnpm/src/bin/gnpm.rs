//! Command-line surface tying the modules together: data generation,
//! training, test-time fitting, evaluation, latent applications, the k-NN
//! benchmark, and the gradient-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gnpm::checkpoint::Checkpoint;
use gnpm::config::{Precision, TrainConfig};
use gnpm::data;
use gnpm::eval;
use gnpm::gradcheck;
use gnpm::knn;
use gnpm::losses::LOSS_LOG_HEADER;
use gnpm::optim::{self, FitOptions};
use gnpm::tensor::Scalar;

// Training allocates and frees per-step tape buffers at a rate that makes
// glibc malloc trim pages back to the kernel constantly; mimalloc avoids
// that churn.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "gnpm",
    version,
    about = "Deformation-field point-cloud correspondence models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic articulated dataset.
    GenData {
        /// TOML generator spec; omit for defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path; the loss log lands next to it as
        /// `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count; 0 writes a checkpoint with
        /// untouched initialized parameters.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the supervised variant on ground-truth correspondences.
        #[arg(long)]
        supervised: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Fit latent codes to held-out sequences with frozen weights.
    Fit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding the sequences to fit.
        #[arg(long)]
        seq: PathBuf,
        /// Output codes file (checkpoint container).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fitted codes: EPE, Chamfer-l2, correspondence accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Codes file produced by `fit`; omit to evaluate training
        /// sequences with their trained codes.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Re-pose one identity's canonical cloud with another frame's pose code.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Identity whose canonical cloud and shape code are used.
        #[arg(long)]
        shape_id: String,
        /// Global training-frame index whose pose code is applied.
        #[arg(long)]
        pose_frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the interpolation of two frames' pose codes.
    Interp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shape_id: String,
        /// Global training-frame indices to interpolate between.
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unsupervised part segmentation of one frame.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sequence id and frame index.
        #[arg(long)]
        seq: String,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 7)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output label file, one label per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark the k-NN kernels.
    BenchKnn {
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        block: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("GNPM_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(0) => {}
            Ok(t) => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global();
            }
            Err(_) => {
                eprintln!("error: GNPM_THREADS must be a non-negative integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn ckpt_config(ck: &Checkpoint) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    optim::config_from_checkpoint(ck)
        .ok_or_else(|| "checkpoint carries no readable config snapshot".into())
}

fn sampled_frame<E: Scalar>(cloud: &data::PointCloud, n: usize, seed: u64) -> (Vec<E>, Vec<usize>) {
    let n = n.min(cloud.len());
    let idx = data::sample_points(cloud.len(), n, seed);
    let mut pts = Vec::with_capacity(n * 3);
    for &i in &idx {
        let p = cloud.point(i);
        for c in p {
            pts.push(E::from_f64(c));
        }
    }
    (pts, idx)
}

fn run(cmd: Cmd) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let gspec: data::GeneratorSpec = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
                None => data::GeneratorSpec::default(),
            };
            let ds = data::generate(&gspec)?;
            std::fs::create_dir_all(&out)?;
            data::save_dataset(&out, &ds)?;
            println!(
                "wrote {} identities, {} sequences, {} frames to {}",
                ds.identities.len(),
                ds.sequences.len(),
                ds.total_frames(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            config,
            data: data_dir,
            out,
            epochs,
            supervised,
            quiet,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let ds = data::load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(cfg, &ds, &out, supervised, !quiet),
                Precision::F64 => cmd_train::<f64>(cfg, &ds, &out, supervised, !quiet),
            }
        }
        Cmd::Fit { ckpt, seq, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ckpt_config(&ck)?;
            let ds = data::load_dataset(&seq)?;
            match cfg.precision {
                Precision::F32 => cmd_fit::<f32>(&cfg, &ck, &ds, &out),
                Precision::F64 => cmd_fit::<f64>(&cfg, &ck, &ds, &out),
            }
        }
        Cmd::Eval {
            ckpt,
            data: data_dir,
            codes,
            report,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ckpt_config(&ck)?;
            let ds = data::load_dataset(&data_dir)?;
            let codes = codes.map(|p| Checkpoint::load(&p)).transpose()?;
            match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&cfg, &ck, &ds, codes.as_ref(), &report, &ckpt),
                Precision::F64 => cmd_eval::<f64>(&cfg, &ck, &ds, codes.as_ref(), &report, &ckpt),
            }
        }
        Cmd::Transfer {
            ckpt,
            data: data_dir,
            shape_id,
            pose_frame,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ckpt_config(&ck)?;
            let ds = data::load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => cmd_transfer::<f32>(&cfg, &ck, &ds, &shape_id, pose_frame, &out),
                Precision::F64 => cmd_transfer::<f64>(&cfg, &ck, &ds, &shape_id, pose_frame, &out),
            }
        }
        Cmd::Interp {
            ckpt,
            data: data_dir,
            shape_id,
            a,
            b,
            t,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ckpt_config(&ck)?;
            let ds = data::load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => cmd_interp::<f32>(&cfg, &ck, &ds, &shape_id, a, b, t, &out),
                Precision::F64 => cmd_interp::<f64>(&cfg, &ck, &ds, &shape_id, a, b, t, &out),
            }
        }
        Cmd::Segment {
            ckpt,
            data: data_dir,
            seq,
            frame,
            clusters,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ckpt_config(&ck)?;
            let ds = data::load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => {
                    cmd_segment::<f32>(&cfg, &ck, &ds, &seq, frame, clusters, seed, &out)
                }
                Precision::F64 => {
                    cmd_segment::<f64>(&cfg, &ck, &ds, &seq, frame, clusters, seed, &out)
                }
            }
        }
        Cmd::BenchKnn {
            n,
            d,
            k,
            block,
            out,
        } => {
            let rows = knn::bench(n, d, k, block, 0, 3)?;
            let mut csv = String::from(knn::BENCH_HEADER);
            csv.push('\n');
            for r in &rows {
                println!("{}", r.csv_row());
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            if let Some(p) = out {
                std::fs::write(p, csv)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck {
            instances,
            samples,
            seed,
        } => {
            let mut failed = false;
            for report in gradcheck::run_suite(instances, samples, seed) {
                let status = if report.pass() { "pass" } else { "FAIL" };
                println!(
                    "{status} {} max_rel_err {:.3e} ({} instances x {} samples)",
                    report.name, report.max_rel_err, report.instances, report.samples
                );
                failed |= !report.pass();
            }
            Ok(if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn cmd_train<E: Scalar>(
    cfg: TrainConfig,
    ds: &data::Dataset,
    out: &Path,
    supervised: bool,
    verbose: bool,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    if supervised {
        let mut state = optim::SupervisedState::<E>::new(cfg.clone(), ds)?;
        let losses = optim::train_supervised_epochs(&mut state, ds, cfg.epochs)?;
        let mut ck = Checkpoint::new();
        ck.push_scalar_u64("meta.epoch", state.epoch as u64);
        ck.push_scalar_u64("meta.supervised", 1);
        if let Ok(s) = toml::to_string(&cfg) {
            ck.push_bytes("meta.config", s.as_bytes());
        }
        for p in state.model.params() {
            ck.push::<E>(&p.name, &p.shape, &p.values);
        }
        for p in [&state.bank.shape_codes, &state.bank.pose_codes] {
            ck.push::<E>(&p.name, &p.shape, &p.values);
        }
        ck.save(out)?;
        let mut csv = String::from("step,reco\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", i + 1, l));
        }
        std::fs::write(loss_log_path(out), csv)?;
        if verbose {
            println!(
                "supervised training done: {} steps, final reco {:.6e}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
    } else {
        let (state, log) = optim::train::<E>(cfg, ds, verbose)?;
        state.save(out)?;
        let mut csv = String::from(LOSS_LOG_HEADER);
        csv.push('\n');
        for row in &log {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        std::fs::write(loss_log_path(out), csv)?;
    }
    println!("wrote checkpoint {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".loss.csv");
    PathBuf::from(s)
}

/// Fit held-out sequences; falls back to all sequences when the dataset has
/// no held-out split.
fn cmd_fit<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    ds: &data::Dataset,
    out: &Path,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (model, bank) = optim::load_model_bank::<E>(cfg, ck)?;
    let weights = cfg.loss_weights();
    let opts = FitOptions {
        iters: cfg.fit_iters,
        lr: cfg.fit_lr,
        lr_decay_factor: cfg.lr_decay_factor,
        lr_decay_every: cfg.fit_lr_decay_every,
    };
    let heldout: Vec<&data::Sequence> = ds
        .sequences
        .iter()
        .filter(|s| s.split == data::Split::Heldout)
        .collect();
    let targets: Vec<&data::Sequence> = if heldout.is_empty() {
        ds.sequences.iter().collect()
    } else {
        heldout
    };
    let mut out_ck = Checkpoint::new();
    for (si, seq) in targets.iter().enumerate() {
        let n = cfg.points_per_frame;
        let frames: Vec<Vec<E>> = seq
            .frames
            .iter()
            .enumerate()
            .map(|(f, fr)| sampled_frame::<E>(&fr.cloud, n, cfg.seed ^ ((si * 1000 + f) as u64)).0)
            .collect();
        let n_used = frames.first().map_or(0, |f| f.len() / 3);
        let fitted = optim::fit_sequence(
            &model,
            &frames,
            n_used,
            &bank.mean_shape_code(),
            &bank.mean_pose_code(),
            &weights,
            &opts,
        )?;
        out_ck.push::<E>(
            &format!("fit.{}.shape", seq.id),
            &[fitted.shape_code.len()],
            &fitted.shape_code,
        );
        for (f, pc) in fitted.pose_codes.iter().enumerate() {
            out_ck.push::<E>(&format!("fit.{}.pose.{f}", seq.id), &[pc.len()], pc);
        }
        let final_objs: Vec<f64> = fitted
            .traces
            .iter()
            .map(|t| t.last().copied().unwrap_or(f64::NAN))
            .collect();
        println!(
            "fit {}: {} frames, final objective mean {:.6e}",
            seq.id,
            seq.frames.len(),
            final_objs.iter().sum::<f64>() / final_objs.len().max(1) as f64
        );
    }
    out_ck.save(out)?;
    println!("wrote codes {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    ds: &data::Dataset,
    codes: Option<&Checkpoint>,
    report_path: &Path,
    ckpt_path: &Path,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (model, bank) = optim::load_model_bank::<E>(cfg, ck)?;
    let mut rows = Vec::new();
    for (seq_idx, seq) in ds.sequences.iter().enumerate() {
        // Codes come either from the fit output or from the trained bank.
        let get_codes = |f: usize| -> Option<(Vec<E>, Vec<E>)> {
            if let Some(cds) = codes {
                let s = cds.get(&format!("fit.{}.shape", seq.id))?.values::<E>();
                let p = cds.get(&format!("fit.{}.pose.{f}", seq.id))?.values::<E>();
                Some((s, p))
            } else {
                if seq.split != data::Split::Train {
                    return None;
                }
                let c = ds.identity_index(&seq.identity)?;
                let slot = optim::pose_slot(ds, seq_idx, f);
                Some((bank.shape_code(c).to_vec(), bank.pose_code(slot).to_vec()))
            }
        };
        let Some((shape_code, pose_key)) = get_codes(0) else {
            continue;
        };
        let identity = ds
            .identity(&seq.identity)
            .ok_or_else(|| format!("unknown identity {}", seq.identity))?;
        let radius = eval::default_accuracy_radius(identity.canonical.bbox_diagonal());
        let key = &seq.frames[0];
        let n = cfg.points_per_frame.min(key.cloud.len());
        let (key_pts, key_idx) = sampled_frame::<E>(&key.cloud, n, cfg.seed ^ 0xE7A1);
        for (f, frame) in seq.frames.iter().enumerate() {
            let Some((_, pose_f)) = get_codes(f) else {
                continue;
            };
            let pred = eval::reconstruct_from_keyframe(
                &model,
                &key_pts,
                n,
                &shape_code,
                &pose_key,
                &pose_f,
            )?;
            let predf: Vec<f64> = pred.iter().map(|&v| v.to_f64()).collect();
            // GT positions of the keyframe-sampled points in frame f, via
            // shared correspondence ids.
            let gt: Vec<f64> = match (&key.cloud.corr, &frame.cloud.corr) {
                (Some(kc), Some(fc)) => {
                    let mut pos = vec![0usize; fc.len()];
                    for (i, &c) in fc.iter().enumerate() {
                        pos[c] = i;
                    }
                    key_idx
                        .iter()
                        .flat_map(|&i| {
                            let j = pos[kc[i]];
                            frame.cloud.point(j)
                        })
                        .collect()
                }
                _ => continue,
            };
            let keyf: Vec<f64> = key_idx.iter().flat_map(|&i| key.cloud.point(i)).collect();
            let pred_deform: Vec<f64> = predf.iter().zip(&keyf).map(|(a, b)| a - b).collect();
            let gt_deform: Vec<f64> = gt.iter().zip(&keyf).map(|(a, b)| a - b).collect();
            let frame_all: Vec<f64> = frame.cloud.points.clone();
            rows.push(eval::FrameMetrics {
                sequence: seq.id.clone(),
                frame: f,
                epe: eval::epe(&pred_deform, &gt_deform)?,
                chamfer: eval::chamfer_l2(&predf, &frame_all)?,
                corr_accuracy: eval::correspondence_accuracy(&predf, &gt, radius)?,
            });
        }
    }
    let report = eval::MetricReport {
        checkpoint_id: ckpt_path.display().to_string(),
        dataset_id: "dataset".into(),
        seed: cfg.seed,
        rows,
    };
    std::fs::write(report_path, report.to_csv())?;
    println!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

fn cmd_transfer<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    ds: &data::Dataset,
    shape_id: &str,
    pose_frame: usize,
    out: &Path,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (model, bank) = optim::load_model_bank::<E>(cfg, ck)?;
    let c = ds
        .identity_index(shape_id)
        .ok_or_else(|| format!("unknown identity {shape_id}"))?;
    let identity = &ds.identities[c];
    let n = identity.canonical.len();
    let canon: Vec<E> = identity
        .canonical
        .points
        .iter()
        .map(|&v| E::from_f64(v))
        .collect();
    let posed = eval::transfer(
        &model,
        &canon,
        n,
        bank.shape_code(c),
        bank.pose_code(pose_frame),
    )?;
    let cloud = data::PointCloud {
        points: posed.iter().map(|&v| v.to_f64()).collect(),
        corr: identity.canonical.corr.clone(),
        part: identity.canonical.part.clone(),
    };
    data::save_cloud(out, &cloud)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_interp<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    ds: &data::Dataset,
    shape_id: &str,
    a: usize,
    b: usize,
    t: f64,
    out: &Path,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(format!("interpolation factor {t} outside [0, 1]").into());
    }
    let (model, bank) = optim::load_model_bank::<E>(cfg, ck)?;
    let c = ds
        .identity_index(shape_id)
        .ok_or_else(|| format!("unknown identity {shape_id}"))?;
    let identity = &ds.identities[c];
    let code = eval::interpolate(bank.pose_code(a), bank.pose_code(b), t);
    let canon: Vec<E> = identity
        .canonical
        .points
        .iter()
        .map(|&v| E::from_f64(v))
        .collect();
    let posed = eval::transfer(
        &model,
        &canon,
        identity.canonical.len(),
        bank.shape_code(c),
        &code,
    )?;
    let cloud = data::PointCloud {
        points: posed.iter().map(|&v| v.to_f64()).collect(),
        corr: identity.canonical.corr.clone(),
        part: identity.canonical.part.clone(),
    };
    data::save_cloud(out, &cloud)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_segment<E: Scalar>(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    ds: &data::Dataset,
    seq_id: &str,
    frame: usize,
    clusters: usize,
    seed: u64,
    out: &Path,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (model, bank) = optim::load_model_bank::<E>(cfg, ck)?;
    let (seq_idx, seq) = ds
        .sequences
        .iter()
        .enumerate()
        .find(|(_, s)| s.id == seq_id)
        .ok_or_else(|| format!("unknown sequence {seq_id}"))?;
    let fr = seq
        .frames
        .get(frame)
        .ok_or_else(|| format!("sequence {seq_id} has no frame {frame}"))?;
    let c = ds
        .identity_index(&seq.identity)
        .ok_or_else(|| format!("unknown identity {}", seq.identity))?;
    let n = cfg.points_per_frame.min(fr.cloud.len());
    let (pts, idx) = sampled_frame::<E>(&fr.cloud, n, seed);
    let slot = if seq.split == data::Split::Train {
        optim::pose_slot(ds, seq_idx, frame)
    } else {
        0
    };
    let labels = eval::segment_parts(
        &model,
        &pts,
        n,
        bank.shape_code(c),
        bank.pose_code(slot.min(bank.frames() - 1)),
        clusters,
        seed,
    )?;
    let mut text = String::new();
    for (&i, &l) in idx.iter().zip(labels.iter()) {
        text.push_str(&format!("{i} {l}\n"));
    }
    std::fs::write(out, text)?;
    if let Some(part) = &fr.cloud.part {
        let gt: Vec<usize> = idx.iter().map(|&i| part[i]).collect();
        println!("purity {:.4}", eval::purity(&labels, &gt));
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
