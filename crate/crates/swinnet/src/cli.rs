//! Command-line front end: train, infer, eval, complexity, selfcheck.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 numeric failure,
//! 4 checkpoint mismatch, 5 evaluation pairing error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::complexity;
use crate::dataio::{
    load_checkpoint, load_gray, load_sample, save_checkpoint, save_mask_png, DatasetManifest,
    Plane,
};
use crate::error::{Error, Result};
use crate::metrics::{pr_curve, pr_curve_csv, MetricsReport};
use crate::model::{Ablation, ModelConfig, Scale, SwinNet};
use crate::nn::ParamVisit;
use crate::train::{
    load_model_tensors, model_tensors, train_loop, RawSample, TrainConfig, DEFAULT_EPOCHS,
    DEFAULT_LR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Toy,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Toy => Scale::Toy,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    /// drop the edge branch
    NoEdge,
    /// bypass cross-modality re-calibration
    Dem,
    /// skip top-down aggregation
    FuseOnly,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Ablation {
        match a {
            AblateArg::NoEdge => Ablation::NoEdge,
            AblateArg::Dem => Ablation::Dem,
            AblateArg::FuseOnly => Ablation::FuseOnly,
        }
    }
}

/// Everything a run needs; may be loaded from a JSON file with `--config`
/// and overridden by flags. A resolved copy is written into the run
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub augment: bool,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            seed: 0,
            epochs: DEFAULT_EPOCHS,
            batch_size: 3,
            lr0: DEFAULT_LR,
            augment: true,
            checkpoint_every: 50,
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct CommonOpts {
    /// JSON run configuration; flags override individual fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// model scale
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    /// ablation variant
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
    /// RNG seed for initialization, shuffling, and augmentation
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonOpts {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.scale {
            rc.model.scale = s.into();
            if rc.model.scale == Scale::Toy && self.config.is_none() {
                rc.batch_size = 2;
            }
        }
        if let Some(a) = self.ablate {
            rc.model.ablation = a.into();
        }
        if let Some(s) = self.seed {
            rc.seed = s;
        }
        Ok(rc)
    }
}

#[derive(Parser, Debug)]
#[command(name = "swinnet", version, about = "cross-modality salient object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a model on a dataset manifest
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// dataset manifest (JSON array of {id, rgb, aux, gt})
        #[arg(long)]
        data: PathBuf,
        /// run directory for logs, checkpoints, and the resolved config
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// disable data augmentation
        #[arg(long)]
        no_augment: bool,
    },
    /// Produce saliency maps for a manifest with a trained checkpoint
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against manifest ground truth
    Eval {
        /// directory of predicted maps named <id>.png
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// optional report directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter and MAC accounting
    Complexity {
        #[command(flatten)]
        common: CommonOpts,
        /// include the ablation table
        #[arg(long)]
        ablations: bool,
    },
    /// Run fast internal consistency checks
    Selfcheck,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_threads_env() -> Result<()> {
    if let Ok(v) = std::env::var("SWINNET_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::invalid(format!("SWINNET_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::invalid("SWINNET_THREADS must be positive"));
        }
        if n > 1 {
            eprintln!("note: compute is single-threaded; SWINNET_THREADS={n} has no effect");
        }
    }
    Ok(())
}

fn load_raw_dataset(manifest: &DatasetManifest) -> Result<Vec<RawSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(RawSample {
                id: e.id.clone(),
                rgb: crate::dataio::load_rgb(&e.rgb)?,
                aux: load_gray(&e.aux)?,
                gt: load_gray(&e.gt)?,
            })
        })
        .collect()
}

fn write_resolved_config(dir: &Path, rc: &RunConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(rc).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("config.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

fn cmd_train(
    common: &CommonOpts,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    no_augment: bool,
) -> Result<()> {
    let mut rc = common.resolve()?;
    if let Some(e) = epochs {
        rc.epochs = e;
    }
    if let Some(b) = batch {
        rc.batch_size = b;
    }
    if let Some(l) = lr {
        rc.lr0 = l;
    }
    if no_augment {
        rc.augment = false;
    }
    ensure_dir(out)?;
    write_resolved_config(out, &rc)?;

    let manifest = DatasetManifest::load(data)?;
    if manifest.is_empty() {
        return Err(Error::invalid("dataset manifest is empty"));
    }
    let raw = load_raw_dataset(&manifest)?;
    let mut model = SwinNet::<f32>::new(&rc.model, rc.seed)?;
    let tc = TrainConfig {
        epochs: rc.epochs,
        batch_size: rc.batch_size,
        lr0: rc.lr0,
        seed: rc.seed,
        augment: rc.augment,
        checkpoint_every: rc.checkpoint_every,
    };
    let log_path = out.join("train.log");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let last = train_loop(&mut model, &rc.model, &raw, &tc, Some(out), &mut log)?;
    let final_path = out.join("model.swnt");
    save_checkpoint(&final_path, &rc.model, &model_tensors(&mut model))?;
    println!(
        "trained {} epochs, final loss {:.6} (saliency {:.6}, edge {:.6})",
        rc.epochs, last.total, last.l_s, last.l_e
    );
    println!("weights: {}", final_path.display());
    Ok(())
}

/// Restore a model from a checkpoint bound to `cfg`.
pub fn restore_model(path: &Path, cfg: &ModelConfig, seed: u64) -> Result<SwinNet<f32>> {
    let tensors = load_checkpoint(path, cfg)?;
    let mut model = SwinNet::<f32>::new(cfg, seed)?;
    load_model_tensors(&mut model, &tensors)?;
    Ok(model)
}

fn cmd_infer(common: &CommonOpts, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let rc = common.resolve()?;
    let mut model = restore_model(checkpoint, &rc.model, rc.seed)?;
    let size = rc.model.backbone().img_size;
    ensure_dir(out)?;
    write_resolved_config(out, &rc)?;
    let manifest = DatasetManifest::load(data)?;
    for entry in &manifest.entries {
        let sample = load_sample(entry, size)?;
        let (rgb, aux, _, _) = crate::dataio::batch_tensors(&[&sample])?;
        let result = model.forward(&rgb, &aux, false)?;
        let probs: Vec<f64> = result
            .s_logits
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x as f64).exp()))
            .collect();
        let plane = Plane::new(size, size, probs)?;
        save_mask_png(&out.join(format!("{}.png", entry.id)), &plane)?;
    }
    println!("wrote {} saliency maps to {}", manifest.len(), out.display());
    Ok(())
}

fn cmd_eval(pred_dir: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    if manifest.is_empty() {
        return Err(Error::EvalPairing("dataset manifest is empty".into()));
    }
    let mut preds: Vec<Vec<f64>> = Vec::new();
    let mut gts: Vec<Vec<f64>> = Vec::new();
    let mut extent: Option<(usize, usize)> = None;
    for entry in &manifest.entries {
        let ppath = pred_dir.join(format!("{}.png", entry.id));
        if !ppath.exists() {
            return Err(Error::EvalPairing(format!(
                "no prediction for sample {:?} (expected {})",
                entry.id,
                ppath.display()
            )));
        }
        let pred = load_gray(&ppath)?;
        let gt = load_gray(&entry.gt)?.resize_nearest(pred.h, pred.w);
        let gt_bin: Vec<f64> = gt.data.iter().map(|&v| (v >= 0.5) as u8 as f64).collect();
        match extent {
            None => extent = Some((pred.h, pred.w)),
            Some(e) if e != (pred.h, pred.w) => {
                return Err(Error::EvalPairing(format!(
                    "prediction {:?} is {}x{} but earlier maps were {}x{}",
                    entry.id, pred.h, pred.w, e.0, e.1
                )));
            }
            _ => {}
        }
        preds.push(pred.data);
        gts.push(gt_bin);
    }
    let (h, w) = extent.expect("nonempty");
    let pairs: Vec<(&[f64], &[f64])> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    let report = MetricsReport::evaluate(&pairs, h, w)?;
    let curve = pr_curve(&pairs, h, w)?;
    print!("{}", report.table());
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let mpath = dir.join("metrics.txt");
        std::fs::write(&mpath, report.key_values()).map_err(|e| Error::io(mpath, e))?;
        let cpath = dir.join("pr_curve.csv");
        std::fs::write(&cpath, pr_curve_csv(&curve)).map_err(|e| Error::io(cpath, e))?;
        println!("reports in {}", dir.display());
    }
    Ok(())
}

fn cmd_complexity(common: &CommonOpts, ablations: bool) -> Result<()> {
    let rc = common.resolve()?;
    print!("{}", complexity::report(&rc.model).table());
    if ablations {
        println!();
        print!("{}", complexity::ablation_table(rc.model.scale));
    }
    Ok(())
}

fn cmd_selfcheck() -> Result<()> {
    use crate::tensor::{grad_check, ops, Tensor};

    // gradient engine on a small composite
    let x = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -0.7, 1.1, 0.0, 0.5, -1.2])?;
    let err = grad_check(
        |t| {
            let s = ops::sigmoid(t)?;
            let g = ops::gelu(&s)?;
            ops::sum_all(&ops::mul(&g, &g)?)
        },
        &x,
        1e-5,
    )?;
    if err > 1e-4 {
        return Err(Error::numeric(format!("gradient self-check error {err}")));
    }
    println!("gradcheck ok (max rel err {err:.2e})");

    // toy model forward shape and determinism
    let cfg = ModelConfig::toy();
    let mut model = SwinNet::<f32>::new(&cfg, 0)?;
    let img = Tensor::<f32>::full(&[1, 3, 96, 96], 0.1);
    let a = model.forward(&img, &img, false)?;
    let b = model.forward(&img, &img, false)?;
    if a.s_logits.shape() != [1, 1, 96, 96] || a.s_logits.data() != b.s_logits.data() {
        return Err(Error::numeric("toy forward not deterministic"));
    }
    println!("toy forward ok ({} parameters)", model.param_count());

    // checkpoint roundtrip
    let dir = std::env::temp_dir().join(format!("swinnet-selfcheck-{}", std::process::id()));
    ensure_dir(&dir)?;
    let path = dir.join("w.swnt");
    let snap = model_tensors(&mut model);
    save_checkpoint(&path, &cfg, &snap)?;
    let back = load_checkpoint(&path, &cfg)?;
    let ok = back == snap;
    let _ = std::fs::remove_dir_all(&dir);
    if !ok {
        return Err(Error::Format("checkpoint roundtrip mismatch".into()));
    }
    println!("checkpoint roundtrip ok");
    println!("selfcheck passed");
    Ok(())
}

/// Entry point used by the binary; maps errors to process exit codes.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success exits
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = check_threads_env() {
        eprintln!("error: {e}");
        return 2;
    }
    let result = match &cli.cmd {
        Cmd::Train {
            common,
            data,
            out,
            epochs,
            batch,
            lr,
            no_augment,
        } => cmd_train(common, data, out, *epochs, *batch, *lr, *no_augment),
        Cmd::Infer {
            common,
            checkpoint,
            data,
            out,
        } => cmd_infer(common, checkpoint, data, out),
        Cmd::Eval { pred, data, out } => cmd_eval(pred, data, out.as_deref()),
        Cmd::Complexity { common, ablations } => cmd_complexity(common, *ablations),
        Cmd::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 3,
                Error::CheckpointMismatch(_) => 4,
                Error::EvalPairing(_) => 5,
                _ => 2,
            }
        }
    }
}

/// Convenience for tests: run with string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("swinnet").chain(args.iter().copied()))
}

#[allow(dead_code)]
fn _assert_send<T: Send>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["bogus-subcommand"]), 2);
        assert_eq!(run_args(&["train"]), 2); // missing required flags
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_args(&["--help"]), 0);
    }

    #[test]
    fn complexity_runs() {
        assert_eq!(run_args(&["complexity", "--scale", "full", "--ablations"]), 0);
    }

    #[test]
    fn eval_missing_prediction_exits_5() {
        let dir = tempdir().unwrap();
        // build a manifest with a gt image but no prediction
        let gt = Plane::constant(8, 8, 1.0);
        save_mask_png(&dir.path().join("gt.png"), &gt).unwrap();
        let manifest = dir.path().join("data.json");
        std::fs::write(
            &manifest,
            r#"[{"id":"s1","rgb":"gt.png","aux":"gt.png","gt":"gt.png"}]"#,
        )
        .unwrap();
        let pred_dir = dir.path().join("preds");
        std::fs::create_dir(&pred_dir).unwrap();
        let code = run_args(&[
            "eval",
            "--pred",
            pred_dir.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
        ]);
        assert_eq!(code, 5);
    }

    #[test]
    fn eval_scores_matching_predictions() {
        let dir = tempdir().unwrap();
        let gt = Plane::new(8, 8, (0..64).map(|i| (i % 2) as f64).collect()).unwrap();
        save_mask_png(&dir.path().join("gt.png"), &gt).unwrap();
        let manifest = dir.path().join("data.json");
        std::fs::write(
            &manifest,
            r#"[{"id":"s1","rgb":"gt.png","aux":"gt.png","gt":"gt.png"}]"#,
        )
        .unwrap();
        let pred_dir = dir.path().join("preds");
        std::fs::create_dir(&pred_dir).unwrap();
        save_mask_png(&pred_dir.join("s1.png"), &gt).unwrap();
        let out = dir.path().join("report");
        let code = run_args(&[
            "eval",
            "--pred",
            pred_dir.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
        assert!(metrics.contains("mae 0.000000"), "{metrics}");
        let csv = std::fs::read_to_string(out.join("pr_curve.csv")).unwrap();
        assert_eq!(csv.lines().count(), 256);
    }

    #[test]
    fn config_file_resolution_and_overrides() {
        let dir = tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        let rc = RunConfig {
            model: ModelConfig::toy(),
            seed: 9,
            epochs: 3,
            batch_size: 2,
            lr0: 1e-4,
            augment: false,
            checkpoint_every: 10,
        };
        std::fs::write(&cfg_path, serde_json::to_string(&rc).unwrap()).unwrap();
        let common = CommonOpts {
            config: Some(cfg_path),
            scale: None,
            ablate: Some(AblateArg::NoEdge),
            seed: Some(123),
        };
        let resolved = common.resolve().unwrap();
        assert_eq!(resolved.model.scale, Scale::Toy);
        assert_eq!(resolved.model.ablation, Ablation::NoEdge);
        assert_eq!(resolved.seed, 123);
        assert_eq!(resolved.epochs, 3);
    }

    #[test]
    fn threads_env_is_validated() {
        // run in-process with the env var set: invalid value is a usage error
        std::env::set_var("SWINNET_THREADS", "zero");
        assert_eq!(run_args(&["complexity", "--scale", "toy"]), 2);
        std::env::set_var("SWINNET_THREADS", "1");
        assert_eq!(run_args(&["complexity", "--scale", "toy"]), 0);
        std::env::remove_var("SWINNET_THREADS");
    }
}
