//! `scd`: geometry-guided change detection for unaligned image pairs.

mod imageio;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scd_core::bundle::{load_bundle, write_field, write_occlusion, PairBundle};
use scd_core::geometry::correspondence_field;
use scd_core::illumination::{preprocess_pair, MethodChoice};
use scd_core::metrics::{aggregate, mask_gt_outside_overlap, score, PairReport};
use scd_core::occlusion::occlusion_mask;
use scd_core::pipeline::{run_detect, PipelineConfig, PipelineError};
use scd_core::synthetic::{generate_scene, EditKind, SceneSpec};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: arguments, config, bundle contents.
    #[error("{0}")]
    Invalid(String),
    /// A processing stage or an output write failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Failed(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "scd", version, about = "Training-free scene change detection for unaligned image pairs")]
struct Cli {
    /// JSON pipeline configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write every intermediate tensor under <out>/intermediates.
    #[arg(long, global = true)]
    dump_intermediates: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correspondence fields and occlusion masks for both directions.
    Priors {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        occ: OcclusionFlags,
    },
    /// Illumination gap report and optional normalisation of an image pair.
    Preprocess {
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        /// auto, none, retinex or color-transfer.
        #[arg(long)]
        method: Option<MethodChoice>,
        #[arg(long)]
        sigma_frac: Option<f32>,
        /// Output image format.
        #[arg(long, value_enum, default_value_t = Format::Png)]
        format: Format,
    },
    /// Full change detection on a bundle.
    Detect {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        occ: OcclusionFlags,
        #[arg(long)]
        rho_overlap: Option<f32>,
        #[arg(long)]
        theta_sem: Option<f32>,
        #[arg(long)]
        rho_max: Option<f32>,
        /// Keep occluded pixels in the proposals.
        #[arg(long)]
        no_occlusion_filtering: bool,
    },
    /// Render a synthetic bundle with ground truth.
    Synth {
        /// Scene description (JSON).
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of `<id>.npy` predictions.
        #[arg(long)]
        pred_dir: PathBuf,
        /// Directory of `<id>.npy` ground truth, with optional
        /// `<id>.overlap.npy` and `<id>.meta.json`.
        #[arg(long)]
        gt_dir: PathBuf,
        /// Meta key to group results by.
        #[arg(long)]
        group_by: Option<String>,
    },
}

#[derive(Args)]
struct OcclusionFlags {
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    kappa: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Npy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    PlaneAndBox,
    Recolor,
    Insert,
    Unchanged,
    OcclusionProbe,
}

impl Preset {
    fn spec(self, seed: u64) -> SceneSpec {
        match self {
            Preset::PlaneAndBox => SceneSpec::plane_and_box(seed),
            Preset::Recolor => SceneSpec::detection(seed, EditKind::Recolor),
            Preset::Insert => SceneSpec::detection(seed, EditKind::Insert),
            Preset::Unchanged => SceneSpec::detection(seed, EditKind::None),
            Preset::OcclusionProbe => SceneSpec::occlusion_probe(seed),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out.ok_or_else(|| CliError::Invalid("--out is required".into()))?;
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn bundle(path: &Path) -> Result<PairBundle, CliError> {
    load_bundle(path).map_err(|e| CliError::Invalid(e.to_string()))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => read_json::<PipelineConfig>(path)?,
        None => PipelineConfig::default(),
    };
    cfg.dump_intermediates |= cli.dump_intermediates;
    let out = cli.out.as_deref();

    match cli.command {
        Command::Priors { bundle: path, occ } => {
            set(&mut cfg.alpha, occ.alpha);
            set(&mut cfg.kappa, occ.kappa);
            cfg.validate()?;
            let b = bundle(&path)?;
            let dir = out_dir(out)?;
            let camera = |v: &scd_core::bundle::ViewData| v.camera().map_err(|e| CliError::Invalid(e.to_string()));
            let (c1, c2) = (camera(&b.view_1)?, camera(&b.view_2)?);
            let views = [(1, &b.view_1.depth, &c1, &b.view_2.depth, &c2), (2, &b.view_2.depth, &c2, &b.view_1.depth, &c1)];
            for (i, depth, src, other, dst) in views {
                let field = correspondence_field(depth, src, dst).map_err(|e| CliError::Failed(e.to_string()))?;
                let occ = occlusion_mask(&field, other, cfg.occlusion_params())
                    .map_err(|e| CliError::Failed(e.to_string()))?;
                write_field(&field, &dir, &format!("field_{i}")).map_err(|e| CliError::Failed(e.to_string()))?;
                write_occlusion(&occ, &dir, &format!("occlusion_{i}")).map_err(|e| CliError::Failed(e.to_string()))?;
                println!(
                    "view {i}: overlap {} px, occluded {} px, tau {:.4}",
                    field.overlap_count(),
                    occ.count(),
                    occ.tau
                );
            }
        }
        Command::Preprocess { img1, img2, method, sigma_frac, format } => {
            set(&mut cfg.illumination, method);
            set(&mut cfg.sigma_frac, sigma_frac);
            cfg.validate()?;
            let (a, b) = (imageio::load_rgb(&img1)?, imageio::load_rgb(&img2)?);
            let (pa, pb, report) = preprocess_pair(&a, &b, cfg.illumination, cfg.sigma_frac)
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            let dir = out_dir(out)?;
            let ext = match format {
                Format::Png => "png",
                Format::Npy => "npy",
            };
            imageio::save_rgb(&pa, &dir.join(format!("image_1.{ext}")))?;
            imageio::save_rgb(&pb, &dir.join(format!("image_2.{ext}")))?;
            write_json(&report, &dir.join("illumination.json"))?;
            println!(
                "gray gap {:.4}, hist gap {:.4}, triggered {}, method {:?}",
                report.gray_gap, report.hist_gap, report.triggered, report.method
            );
        }
        Command::Detect { bundle: path, occ, rho_overlap, theta_sem, rho_max, no_occlusion_filtering } => {
            set(&mut cfg.alpha, occ.alpha);
            set(&mut cfg.kappa, occ.kappa);
            set(&mut cfg.rho_overlap, rho_overlap);
            set(&mut cfg.theta_sem, theta_sem);
            set(&mut cfg.rho_max, rho_max);
            cfg.occlusion_filtering &= !no_occlusion_filtering;
            cfg.validate()?;
            let b = bundle(&path)?;
            let dir = out_dir(out)?;
            let det = run_detect(&b, &cfg)?;
            imageio::save_mask(&det.final_mask.mask, &dir.join("change_mask.npy"))?;
            imageio::save_rgb(&imageio::overlay(&b.view_1.image, &det.final_mask.mask), &dir.join("overlay.png"))?;
            let summary = det.summary();
            write_json(&summary, &dir.join("summary.json"))?;
            if cfg.dump_intermediates {
                det.dump(dir.join("intermediates"))?;
            }
            println!("changed pixels: {}", summary.changed_pixels);
        }
        Command::Synth { spec, preset, seed } => {
            let spec = match (spec, preset) {
                (Some(path), _) => read_json::<SceneSpec>(&path)?,
                (None, Some(p)) => p.spec(seed),
                (None, None) => return Err(CliError::Invalid("one of --spec or --preset is required".into())),
            };
            let dir = out_dir(out)?;
            let scene = generate_scene(&spec).map_err(|e| CliError::Invalid(e.to_string()))?;
            let manifest = scene.write(&dir).map_err(|e| CliError::Failed(e.to_string()))?;
            println!("{}", manifest.display());
        }
        Command::Eval { pred_dir, gt_dir, group_by } => {
            let report = evaluate(&pred_dir, &gt_dir, group_by)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
                write_json(&report, &dir.join("eval.json"))?;
            }
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    group_by: Option<String>,
) -> Result<scd_core::metrics::EvalReport, CliError> {
    let listing = fs::read_dir(pred_dir).map_err(|e| CliError::Invalid(format!("{}: {e}", pred_dir.display())))?;
    let mut ids: Vec<String> = listing
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".npy").map(str::to_string))
        .collect();
    ids.sort();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let pred = imageio::load_mask(&pred_dir.join(format!("{id}.npy")))?;
        let mut gt = imageio::load_mask(&gt_dir.join(format!("{id}.npy")))?;
        let overlap_path = gt_dir.join(format!("{id}.overlap.npy"));
        if overlap_path.exists() {
            let overlap = imageio::load_mask(&overlap_path)?;
            gt = mask_gt_outside_overlap(&gt, &overlap).map_err(|e| CliError::Invalid(format!("{id}: {e}")))?;
        }
        let region = ndarray::Array2::from_elem(gt.dim(), true);
        let s = score(&pred, &gt, &region).map_err(|e| CliError::Invalid(format!("{id}: {e}")))?;
        let group = match &group_by {
            Some(key) => group_of(&gt_dir.join(format!("{id}.meta.json")), key)?,
            None => String::new(),
        };
        reports.push(PairReport { id, group, score: s });
    }
    aggregate(reports, group_by).map_err(|e| CliError::Invalid(e.to_string()))
}

fn group_of(meta_path: &Path, key: &str) -> Result<String, CliError> {
    if !meta_path.exists() {
        return Ok("-".into());
    }
    let meta: serde_json::Value = read_json(meta_path)?;
    Ok(match meta.get(key) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Null) | None => "-".into(),
        Some(other) => other.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
