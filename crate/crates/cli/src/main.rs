use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use quadfit::dataset::{self, WeightSemantics, DEFAULT_VAL_RATIO};
use quadfit::error::{from_json_str, read_json, write_json};
use quadfit::fitter::{self, FitConfig, FitObservation, FitResult};
use quadfit::losses::{make_toy_prior, PriorDistribution, DEFAULT_BATCH_SIZE};
use quadfit::metrics::{self, EvalConfig, InstanceData, InstanceMetrics, Normalizer};
use quadfit::model::{make_toy_template, pose_mesh, write_obj, ModelTemplate, ToyConfig};
use quadfit::synth::io::{
    read_manifest, read_mask_png, resolve, write_depth_pfm, write_manifest, write_mask_png,
    write_rgb_png, ManifestEntry,
};
use quadfit::synth::{
    cycle_consistency, emit_annotation, keypoint_visibility, make_gait_library, rasterize,
    sample_scenes, AnnotationPaths, AnnotationRecord, CameraRecord, ConditionImages, FilterVerdict,
    PoseLibrary, SceneConfig, SceneSample, DEFAULT_IOU_THRESHOLD, UNCERTAIN_IOU,
};
use quadfit::{Error, Result};

const TEMPLATE_FILE: &str = "template.json";
const PRIOR_FILE: &str = "prior.json";
const POSES_FILE: &str = "poses.json";
const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "quadfit",
    version,
    about = "Quadruped body model fitting and synthetic data tools"
)]
struct Cli {
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch commands.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file overriding the defaults; see `Settings`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the toy template, its prior and a gait pose library to a model directory.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw scenes and write them as a JSON list.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render masks and depth maps for sampled scenes and write annotation records.
    Rasterize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset id written into every record and manifest line.
        #[arg(long, default_value = "CtrlAni3D")]
        source: String,
    },
    /// Compare each record's mask with a segmented candidate and sort records by IoU.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory holding candidate masks named like the records' masks.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to every record of a manifest.
    Fit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ignore 3D keypoints stored in the records.
        #[arg(long)]
        no_3d: bool,
    },
    /// Score predicted records against ground-truth records, paired by manifest line.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Model directory; enables PA-MPVPE when both sides carry parameters.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-instance CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        normalizer: Option<NormalizerArg>,
    },
    /// Weight the sources of a manifest, split them and draw training batches.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source weight override, `ID=WEIGHT`; repeatable.
        #[arg(long = "weight", value_parser = parse_weight)]
        weights: Vec<(String, f64)>,
        #[arg(long, default_value_t = 0)]
        batches: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormalizerArg {
    Bbox,
    Hth,
}

fn parse_weight(s: &str) -> std::result::Result<(String, f64), String> {
    let (id, w) = s.split_once('=').ok_or("expected ID=WEIGHT")?;
    let w: f64 = w.parse().map_err(|e| format!("bad weight {w}: {e}"))?;
    Ok((id.to_string(), w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FilterSettings {
    threshold: f64,
    uncertain: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            threshold: DEFAULT_IOU_THRESHOLD,
            uncertain: UNCERTAIN_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetSettings {
    val_ratio: f64,
    semantics: WeightSemantics,
    weights: BTreeMap<String, f64>,
    batch_size: usize,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            val_ratio: DEFAULT_VAL_RATIO,
            semantics: WeightSemantics::PerRecord,
            weights: dataset::DEFAULT_WEIGHTS
                .iter()
                .map(|(k, w)| (k.to_string(), *w))
                .collect(),
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// Everything tunable from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    toy: ToyConfig,
    prior_sigma: f64,
    gait_poses: usize,
    scene: SceneConfig,
    fit: FitConfig,
    eval: EvalConfig,
    filter: FilterSettings,
    dataset: DatasetSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            toy: ToyConfig::default(),
            prior_sigma: 0.3,
            gait_poses: 64,
            scene: SceneConfig::default(),
            fit: FitConfig::default(),
            eval: EvalConfig::default(),
            filter: FilterSettings::default(),
            dataset: DatasetSettings::default(),
        }
    }
}

/// A run that finished but could not process every item.
struct Partial(usize);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUADFIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Partial(n))) => {
            eprintln!("error: {n} item(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<Option<Partial>> {
    let mut settings = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            from_json_str::<Settings>(&text)?
        }
        None => Settings::default(),
    };
    if let Some(s) = cli.seed {
        settings.toy.seed = s;
    }
    let seed = cli.seed.unwrap_or(0);
    let threads = cli.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    eprintln!(
        "resolved config: {}",
        serde_json::json!({ "seed": seed, "threads": rayon::current_num_threads(), "settings": settings })
    );
    match cli.command {
        Command::MakeToy { out } => make_toy(&settings, &out),
        Command::Sample { model, n, out } => sample(&settings, seed, &model, n, &out),
        Command::Rasterize {
            model,
            input,
            out,
            source,
        } => cmd_rasterize(&model, &input, &out, &source),
        Command::Filter {
            input,
            candidates,
            out,
        } => filter(&settings, &input, &candidates, &out),
        Command::Fit {
            model,
            input,
            out,
            no_3d,
        } => fit(&settings, &model, &input, &out, no_3d),
        Command::Eval {
            pred,
            gt,
            model,
            out,
            csv,
            normalizer,
        } => {
            if let Some(n) = normalizer {
                settings.eval.normalizer = match n {
                    NormalizerArg::Bbox => Normalizer::BboxMaxSide,
                    NormalizerArg::Hth => Normalizer::Hth,
                };
            }
            eval(
                &settings,
                &pred,
                &gt,
                model.as_deref(),
                &out,
                csv.as_deref(),
            )
        }
        Command::Aggregate {
            input,
            out,
            weights,
            batches,
        } => {
            settings.dataset.weights.extend(weights);
            aggregate(&settings, seed, &input, &out, batches)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn load_model(dir: &Path) -> Result<(ModelTemplate, PriorDistribution)> {
    let template = ModelTemplate::load(dir.join(TEMPLATE_FILE))?;
    let prior = PriorDistribution::load(dir.join(PRIOR_FILE))?;
    Ok((template, prior))
}

fn make_toy(settings: &Settings, out: &Path) -> Result<Option<Partial>> {
    create_dir(out)?;
    let template = make_toy_template(&settings.toy)?;
    let prior = make_toy_prior(template.n_beta(), template.n_joints(), settings.prior_sigma)?;
    let library = make_gait_library(template.n_joints(), settings.gait_poses, settings.toy.seed)?;
    template.save(out.join(TEMPLATE_FILE))?;
    prior.save(out.join(PRIOR_FILE))?;
    library.save(out.join(POSES_FILE))?;
    write_obj(
        out.join("template.obj"),
        template.rest_vertices(),
        template.faces(),
    )?;
    info!(
        "toy template: {} vertices, {} faces, {} joints",
        template.n_vertices(),
        template.n_faces(),
        template.n_joints()
    );
    Ok(None)
}

fn sample(
    settings: &Settings,
    seed: u64,
    model: &Path,
    n: usize,
    out: &Path,
) -> Result<Option<Partial>> {
    let (_, prior) = load_model(model)?;
    let library = PoseLibrary::load(model.join(POSES_FILE))?;
    let scenes = sample_scenes(seed, n, &prior, &library, &settings.scene)?;
    write_json(out, &scenes)?;
    Ok(None)
}

/// Gray shading by depth, nearer is brighter; stands in for the generated photo.
fn depth_preview(images: &ConditionImages) -> image::RgbImage {
    let finite: Vec<f32> = images
        .depth
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .collect();
    let lo = finite.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = finite.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    image::RgbImage::from_fn(images.width, images.height, |x, y| {
        let d = images.depth_at(x, y);
        if d.is_finite() {
            let g = (255.0 - 160.0 * (d - lo) / span) as u8;
            image::Rgb([g, g, g])
        } else {
            image::Rgb([0, 0, 0])
        }
    })
}

fn rasterize_one(
    template: &ModelTemplate,
    scene: &SceneSample,
    out: &Path,
    stem: &str,
    source: &str,
) -> Result<()> {
    let posed = pose_mesh(template, &scene.params)?;
    let images = rasterize(&posed.vertices, template.faces(), &scene.camera)?;
    let visibility = keypoint_visibility(&posed.keypoints3d, &scene.camera, &images, None)?;
    let paths = AnnotationPaths {
        image: format!("{stem}.png"),
        mask: Some(format!("{stem}_mask.png")),
        depth: Some(format!("{stem}_depth.pfm")),
    };
    let record = emit_annotation(scene, &posed, &images, &visibility, &paths, source)?;
    write_rgb_png(out.join(&paths.image), &depth_preview(&images))?;
    write_mask_png(out.join(paths.mask.as_ref().unwrap()), &images.mask())?;
    write_depth_pfm(out.join(paths.depth.as_ref().unwrap()), &images)?;
    record.save(out.join(format!("{stem}.json")))
}

fn cmd_rasterize(model: &Path, input: &Path, out: &Path, source: &str) -> Result<Option<Partial>> {
    let (template, _) = load_model(model)?;
    let scenes: Vec<SceneSample> = read_json(input)?;
    create_dir(out)?;
    let results: Vec<(String, Result<()>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let stem = format!("{i:06}");
            let r = rasterize_one(&template, scene, out, &stem, source);
            (stem, r)
        })
        .collect();
    let mut entries = Vec::new();
    let mut failed = 0;
    for (stem, r) in results {
        match r {
            Ok(()) => entries.push(ManifestEntry {
                record: format!("{stem}.json"),
                source: source.into(),
            }),
            Err(e) if e.is_io() => return Err(e),
            Err(e) => {
                warn!("scene {stem}: {e}");
                failed += 1;
            }
        }
    }
    write_manifest(out.join(MANIFEST_FILE), &entries)?;
    Ok((failed > 0).then_some(Partial(failed)))
}

#[derive(Serialize)]
struct FilterLine {
    record: String,
    iou: f64,
    verdict: FilterVerdict,
}

fn filter(
    settings: &Settings,
    input: &Path,
    candidates: &Path,
    out: &Path,
) -> Result<Option<Partial>> {
    let fs_ = &settings.filter;
    let entries = read_manifest(input)?;
    let checked: Vec<Result<(ManifestEntry, FilterLine)>> = entries
        .par_iter()
        .map(|entry| {
            let path = resolve(input, &entry.record);
            let record = AnnotationRecord::load(&path)?;
            let mask_name = record
                .mask
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{} has no mask", path.display())))?;
            let conditioned = read_mask_png(resolve(&path, mask_name))?;
            let file_name = Path::new(mask_name).file_name().unwrap_or_default();
            let candidate = read_mask_png(candidates.join(file_name))?;
            let check = cycle_consistency(&conditioned, &candidate, fs_.threshold)?;
            let abs = absolute(&path)?.to_string_lossy().into_owned();
            Ok((
                ManifestEntry {
                    record: abs.clone(),
                    source: entry.source.clone(),
                },
                FilterLine {
                    record: abs,
                    iou: check.iou,
                    verdict: check.verdict(fs_.uncertain),
                },
            ))
        })
        .collect();
    create_dir(out)?;
    let (mut accepted, mut uncertain, mut rejected, mut lines) =
        (Vec::new(), Vec::new(), Vec::new(), String::new());
    let mut failed = 0;
    for (entry, r) in entries.iter().zip(checked) {
        match r {
            Ok((e, line)) => {
                match line.verdict {
                    FilterVerdict::Accept => accepted.push(e),
                    FilterVerdict::Uncertain => uncertain.push(e),
                    FilterVerdict::Reject => rejected.push(e),
                }
                lines.push_str(&serde_json::to_string(&line).expect("filter line serializes"));
                lines.push('\n');
            }
            Err(e) => {
                warn!("{}: {e}", entry.record);
                failed += 1;
            }
        }
    }
    write_manifest(out.join("accepted.jsonl"), &accepted)?;
    write_manifest(out.join("uncertain.jsonl"), &uncertain)?;
    write_manifest(out.join("rejected.jsonl"), &rejected)?;
    let report = out.join("filter.jsonl");
    fs::write(&report, lines).map_err(|e| Error::Io {
        path: report,
        source: e,
    })?;
    eprintln!(
        "accepted {}, uncertain {}, rejected {}, failed {failed}",
        accepted.len(),
        uncertain.len(),
        rejected.len()
    );
    Ok((failed > 0).then_some(Partial(failed)))
}

/// The fitted model rendered back into record form, for `eval`.
fn prediction_record(
    template: &ModelTemplate,
    gt: &AnnotationRecord,
    gt_path: &Path,
    fit: &FitResult,
) -> Result<AnnotationRecord> {
    let posed = pose_mesh(template, &fit.params)?;
    let mut camera = gt.camera.to_camera();
    camera.translation = fit.camera_translation;
    let keypoints2d = camera
        .project(&posed.keypoints3d)
        .iter()
        .zip(gt.visibility())
        .map(|(p, v)| {
            let vis = v && p.in_front && camera.contains_pixel(&p.pixel);
            if p.in_front {
                [p.pixel.x, p.pixel.y, vis as u8 as f64]
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .collect();
    let record = AnnotationRecord {
        image: absolute(&resolve(gt_path, &gt.image))?
            .to_string_lossy()
            .into_owned(),
        species: gt.species.clone(),
        family: gt.family.clone(),
        beta: Some(fit.params.beta.clone()),
        theta: Some(fit.params.theta_flat()),
        gamma: Some(fit.params.gamma.into()),
        camera: CameraRecord::from_camera(&camera),
        keypoints3d: Some(posed.keypoints3d.iter().map(|k| (*k).into()).collect()),
        keypoints2d,
        bbox: gt.bbox,
        mask: None,
        depth: None,
        source: gt.source.clone(),
        pose_source: None,
    };
    record.validate()?;
    Ok(record)
}

fn fit(
    settings: &Settings,
    model: &Path,
    input: &Path,
    out: &Path,
    no_3d: bool,
) -> Result<Option<Partial>> {
    settings.fit.validate()?;
    let (template, prior) = load_model(model)?;
    let entries = read_manifest(input)?;
    let mut records = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = resolve(input, &e.record);
        records.push((AnnotationRecord::load(&path)?, path));
    }
    let observations: Vec<FitObservation> = records
        .iter()
        .map(|(r, _)| {
            let mut o = FitObservation::from_record(r);
            if no_3d {
                o.keypoints3d = None;
            }
            o
        })
        .collect();
    let results = fitter::batch_fit(&observations, &template, &prior, &settings.fit);
    create_dir(out)?;
    let (mut manifest, mut inputs) = (Vec::new(), Vec::new());
    let mut failed = 0;
    for (i, (result, (record, path))) in results.into_iter().zip(&records).enumerate() {
        let stem = format!("{i:06}");
        let written = result.and_then(|fit| {
            let pred = prediction_record(&template, record, path, &fit)?;
            write_json(&out.join(format!("{stem}.fit.json")), &fit)?;
            pred.save(out.join(format!("{stem}.json")))?;
            info!(
                "{stem}: objective {:.6e}, restart {}",
                fit.report.total, fit.restart
            );
            Ok(())
        });
        match written {
            Ok(()) => {
                manifest.push(ManifestEntry {
                    record: format!("{stem}.json"),
                    source: entries[i].source.clone(),
                });
                inputs.push(ManifestEntry {
                    record: absolute(path)?.to_string_lossy().into_owned(),
                    source: entries[i].source.clone(),
                });
            }
            Err(e) if e.is_io() => return Err(e),
            Err(e) => {
                warn!("{}: {e}", entries[i].record);
                failed += 1;
            }
        }
    }
    write_manifest(out.join(MANIFEST_FILE), &manifest)?;
    // Ground truth for the fitted items, line-aligned with the predictions.
    write_manifest(out.join("inputs.jsonl"), &inputs)?;
    Ok((failed > 0).then_some(Partial(failed)))
}

fn load_records(manifest: &Path) -> Result<Vec<(String, AnnotationRecord)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok((
                e.record.clone(),
                AnnotationRecord::load(resolve(manifest, &e.record))?,
            ))
        })
        .collect()
}

fn vertices_of(
    template: Option<&ModelTemplate>,
    r: &AnnotationRecord,
) -> Result<Option<Vec<nalgebra::Vector3<f64>>>> {
    match (template, r.params()?) {
        (Some(t), Some(p)) => Ok(Some(pose_mesh(t, &p)?.vertices)),
        _ => Ok(None),
    }
}

fn evaluate_pair(
    settings: &Settings,
    template: Option<&ModelTemplate>,
    pred: &AnnotationRecord,
    gt: &AnnotationRecord,
) -> Result<InstanceMetrics> {
    let missing = |w: &str| Error::Validation(format!("{w} record has no 3D keypoints"));
    let p3 = pred.keypoints3d().ok_or_else(|| missing("predicted"))?;
    let g3 = gt.keypoints3d().ok_or_else(|| missing("ground-truth"))?;
    let (pv, gv) = (vertices_of(template, pred)?, vertices_of(template, gt)?);
    let (p2, g2) = (pred.keypoints2d(), gt.keypoints2d());
    metrics::evaluate_instance(
        &InstanceData {
            keypoints3d: &p3,
            vertices: pv.as_deref(),
            keypoints2d: &p2,
        },
        &InstanceData {
            keypoints3d: &g3,
            vertices: gv.as_deref(),
            keypoints2d: &g2,
        },
        &gt.visibility(),
        &settings.eval,
    )
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn eval(
    settings: &Settings,
    pred: &Path,
    gt: &Path,
    model: Option<&Path>,
    out: &Path,
    csv: Option<&Path>,
) -> Result<Option<Partial>> {
    let template = model
        .map(|m| ModelTemplate::load(m.join(TEMPLATE_FILE)))
        .transpose()?;
    let preds = load_records(pred)?;
    let gts = load_records(gt)?;
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} ground-truth records",
            preds.len(),
            gts.len()
        )));
    }
    let results: Vec<Result<InstanceMetrics>> = preds
        .par_iter()
        .zip(&gts)
        .map(|((_, p), (_, g))| evaluate_pair(settings, template.as_ref(), p, g))
        .collect();
    let mut ok = Vec::new();
    let mut rows = String::from("index,record,pa_mpjpe,pa_mpvpe,pck_hth,pck_010,pck_015,auc\n");
    let mut failed = 0;
    for (i, (r, (name, _))) in results.into_iter().zip(&gts).enumerate() {
        match r {
            Ok(m) => {
                rows.push_str(&format!(
                    "{i},{name},{},{},{},{},{},{}\n",
                    m.pa_mpjpe,
                    opt(m.pa_mpvpe),
                    opt(m.pck_hth),
                    m.pck_010,
                    m.pck_015,
                    m.auc
                ));
                ok.push(m);
            }
            Err(e) => {
                warn!("pair {i} ({name}): {e}");
                failed += 1;
            }
        }
    }
    let report = metrics::aggregate_metrics(&ok)?;
    write_json(out, &report)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if let Some(csv) = csv {
        fs::write(csv, rows).map_err(|e| Error::Io {
            path: csv.to_path_buf(),
            source: e,
        })?;
    }
    Ok((failed > 0).then_some(Partial(failed)))
}

#[derive(Serialize)]
struct BatchItem<'a> {
    record: String,
    source: &'a str,
    family: &'a str,
}

fn aggregate(
    settings: &Settings,
    seed: u64,
    input: &Path,
    out: &Path,
    batches: usize,
) -> Result<Option<Partial>> {
    let ds = &settings.dataset;
    let sources = dataset::load_sources(input, &ds.weights)?;
    let agg = dataset::aggregate(sources, ds.semantics)?;
    let split = dataset::split(&agg, ds.val_ratio, seed)?;
    create_dir(out)?;
    let table = agg.table();
    write_json(&out.join("sources.json"), &table)?;
    let path_of = |i: usize| -> Result<String> {
        let p = agg
            .path(i)
            .expect("records loaded from a manifest have paths");
        Ok(absolute(p)?.to_string_lossy().into_owned())
    };
    for (name, side) in [("train.jsonl", &split.train), ("val.jsonl", &split.val)] {
        let entries = side
            .iter()
            .map(|i| {
                Ok(ManifestEntry {
                    record: path_of(*i)?,
                    source: agg.record(*i).0.id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_manifest(out.join(name), &entries)?;
    }
    if batches > 0 {
        let sampler = dataset::BatchSampler::new(&agg, &split.train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for _ in 0..batches {
            let batch = sampler
                .batch(&mut rng, ds.batch_size)
                .into_iter()
                .map(|i| {
                    let (src, rec) = agg.record(i);
                    Ok(BatchItem {
                        record: path_of(i)?,
                        source: &src.id,
                        family: &rec.family,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            text.push_str(&serde_json::to_string(&batch).expect("batch serializes"));
            text.push('\n');
        }
        let p = out.join("batches.jsonl");
        fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?;
    }
    for row in &table {
        eprintln!(
            "{:<16} {:>6} records  weight {:<5} total probability {:.4}",
            row.id, row.n_records, row.weight, row.total_probability
        );
    }
    eprintln!("train {}, val {}", split.train.len(), split.val.len());
    Ok(None)
}
