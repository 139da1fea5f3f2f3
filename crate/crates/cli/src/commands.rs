use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use handcraft_core::fixtures::{synthetic_case, write_case, FixtureSpec};
use handcraft_core::geometry::KeypointSet;
use handcraft_core::metrics::{
    masked_psnr, masked_ssim, read_jsonl, ClassifierRecord, HandPoseRecord, MetricsError,
    MetricsReport,
};
use handcraft_core::pipeline::{ablation_tsv, misalignment_study, path_component};
use handcraft_core::protocol::{read_json, validate_pose_file, write_json, ProtocolError};
use handcraft_core::raster::{load_rgb_png, RasterError};
use handcraft_core::templates::{bundled, load_library, write_library, TemplateError};
use handcraft_core::{
    build_control_bundle, random_select, silhouette_consistent_select, AblationConfig, Backend,
    BinaryMask, Pipeline, PipelineConfig, PipelineError, RestorationJob, SelectionMode,
    SimilarityTransform, StubBackend, SubprocessBackend, TemplateLibrary,
};

use crate::{
    AblateArgs, ConfigArgs, EvaluateArgs, ExportArgs, FixtureArgs, InputArgs, MakeControlArgs,
    MisalignArgs, RestoreArgs, Select, SelectArgs,
};

pub const IO: u8 = 1;
pub const INVALID: u8 = 2;
pub const DEGENERATE: u8 = 3;
pub const BACKEND: u8 = 4;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type Outcome = Result<(), Failure>;

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: INVALID,
        error: anyhow!("{msg}"),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: IO,
        error: anyhow!("{}: {e}", path.display()),
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_degenerate_geometry() {
            DEGENERATE
        } else if e.is_backend_failure() {
            BACKEND
        } else if matches!(
            e,
            PipelineError::Io { .. } | PipelineError::Protocol(ProtocolError::Io { .. })
        ) {
            IO
        } else {
            INVALID
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure { code: INVALID, error: e.into() }
            }
        }
    )*};
}
invalid_from!(ProtocolError, TemplateError, RasterError, MetricsError);

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_json_out<T: Serialize>(path: &Path, value: &T) -> Outcome {
    write_json(path, value).map_err(|e| io_failure(path, e))
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn library(path: Option<&Path>) -> Result<TemplateLibrary, Failure> {
    match path {
        Some(p) => {
            require_file(p, "template manifest")?;
            Ok(load_library(p)?)
        }
        None => Ok(bundled::library()),
    }
}

/// The configuration file (or defaults) with flag overrides applied.
fn pipeline_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut config: PipelineConfig = match &args.config {
        Some(p) => {
            require_file(p, "config file")?;
            read_json(p)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        if let SelectionMode::Random { seed: s } = &mut config.selection_mode {
            *s = seed;
        }
    }
    if let Some(scales) = &args.scales {
        config.scale_factors = scales.clone();
    }
    if let Some(t) = args.threshold {
        config.malformed_threshold = t;
    }
    config.force_all |= args.force_all;
    for name in &args.ablate {
        config.ablation.disable(name)?;
    }
    match args.select {
        Some(Select::Silhouette) => config.selection_mode = SelectionMode::SilhouetteConsistent,
        Some(Select::Random) => config.selection_mode = SelectionMode::Random { seed: config.seed },
        None => {}
    }
    config.validate()?;
    Ok(config)
}

fn load_job(input: &InputArgs, config: PipelineConfig) -> Result<RestorationJob, Failure> {
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf, Failure> {
        let p = p.clone().ok_or_else(|| invalid(format!("--{flag} is required")))?;
        require_file(&p, flag)?;
        Ok(p)
    };
    let image = need(&input.image, "image")?;
    let pose = need(&input.pose, "pose")?;
    let detections = need(&input.detections, "detections")?;
    let silhouette = match &input.silhouette {
        Some(s) => Some(need(&Some(s.clone()), "silhouette")?),
        None => None,
    };
    check_selection(&config, silhouette.is_some())?;
    Ok(RestorationJob::load(
        &image,
        &pose,
        &detections,
        silhouette.as_deref(),
        config,
    )?)
}

fn check_selection(config: &PipelineConfig, has_silhouette: bool) -> Outcome {
    if config.selection_mode == SelectionMode::SilhouetteConsistent && !has_silhouette {
        return Err(invalid("silhouette selection needs --silhouette"));
    }
    Ok(())
}

fn backend(path: &Option<PathBuf>) -> Result<Box<dyn Backend>, Failure> {
    match path {
        Some(p) => {
            require_file(p, "backend")?;
            Ok(Box::new(SubprocessBackend::new(p)))
        }
        None => Ok(Box::new(StubBackend)),
    }
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    image_id: String,
    hand_id: String,
    template_id: String,
    mirrored: bool,
    selection_score: Option<f64>,
    prompt: String,
    transform: SimilarityTransform<f64>,
    ablation: AblationConfig,
    control_image: String,
    control_mask: String,
    mask_pixels: usize,
}

pub fn make_control(a: MakeControlArgs) -> Outcome {
    let config = pipeline_config(&a.config)?;
    let lib = library(a.config.templates.as_deref())?;
    let job = load_job(&a.input, config)?;
    let hands = match &a.hand {
        Some(h) => vec![h.clone()],
        None => job.eligible_hands(),
    };
    if hands.is_empty() {
        return Err(invalid("no eligible hands; pass --hand or --force-all"));
    }
    create_dir(&a.out)?;
    let pipeline = Pipeline::new(&lib, &StubBackend, &a.out);
    for (i, hand) in hands.iter().enumerate() {
        let (selection, template) = pipeline.select_template(&job, hand, i)?;
        let bundle = build_control_bundle(&job, hand, template)?;
        let stem = path_component(hand);
        let control = format!("{stem}.control.png");
        let mask = format!("{stem}.mask.png");
        bundle
            .control_image
            .save_png(&a.out.join(&control))
            .map_err(|e| io_failure(&a.out.join(&control), e))?;
        bundle
            .control_mask
            .save_png(&a.out.join(&mask))
            .map_err(|e| io_failure(&a.out.join(&mask), e))?;
        let file = BundleFile {
            image_id: job.image_id().to_string(),
            hand_id: hand.clone(),
            template_id: bundle.template_id.clone(),
            mirrored: selection.mirrored,
            selection_score: selection.score,
            prompt: bundle.prompt.clone(),
            transform: bundle.transform,
            ablation: job.config.ablation,
            control_image: control,
            control_mask: mask,
            mask_pixels: bundle.control_mask.count(),
        };
        let path = a.out.join(format!("{stem}.bundle.json"));
        write_json_out(&path, &file)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// One entry of a jobs file; relative paths resolve against the file's
/// directory.
#[derive(Serialize, Deserialize, Clone)]
pub struct JobEntry {
    pub image: PathBuf,
    pub pose: PathBuf,
    pub detections: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
pub struct JobsFile {
    pub jobs: Vec<JobEntry>,
}

fn load_jobs(path: &Path, config: &PipelineConfig) -> Result<Vec<RestorationJob>, Failure> {
    require_file(path, "jobs file")?;
    let file: JobsFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if file.jobs.is_empty() {
        return Err(invalid(format!("{} lists no jobs", path.display())));
    }
    file.jobs
        .iter()
        .map(|j| {
            let input = InputArgs {
                image: Some(base.join(&j.image)),
                pose: Some(base.join(&j.pose)),
                detections: Some(base.join(&j.detections)),
                silhouette: j.silhouette.as_ref().map(|s| base.join(s)),
            };
            load_job(&input, config.clone())
        })
        .collect()
}

pub fn restore(a: RestoreArgs) -> Outcome {
    let config = pipeline_config(&a.config)?;
    let lib = library(a.config.templates.as_deref())?;
    let backend = backend(&a.backend)?;
    if let Some(batch) = &a.batch {
        let jobs = load_jobs(batch, &config)?;
        create_dir(&a.out)?;
        let pipeline = Pipeline::new(&lib, backend.as_ref(), &a.out).with_parallelism(a.jobs);
        let result = pipeline.run_batch(&jobs)?;
        for (img, job_index) in result.images.iter().zip(image_indices(&jobs, &result)) {
            let dir = a.out.join(format!("{job_index:04}-{}", path_component(&img.image_id)));
            create_dir(&dir)?;
            let mask = dir.join("mask.png");
            img.final_mask.save_png(&mask).map_err(|e| io_failure(&mask, e))?;
            write_json_out(&dir.join("outcome.json"), &img.summary(Some(mask)))?;
        }
        write_json_out(&a.out.join("report.json"), &result.report)?;
        if !result.failures.is_empty() {
            write_json_out(&a.out.join("failures.json"), &result.failures)?;
            for f in &result.failures {
                eprintln!("handcraft: job {} ({}) failed: {}", f.index, f.image_id, f.error);
            }
        }
        let table = result.report.to_table("handcraft");
        write_text(&a.out.join("report.txt"), &table)?;
        print!("{table}");
        return Ok(());
    }

    let job = load_job(&a.input, config)?;
    create_dir(&a.out)?;
    let pipeline = Pipeline::new(&lib, backend.as_ref(), &a.out);
    let outcome = pipeline.restore_image(&job, 0)?;
    if outcome.hands.is_empty() {
        eprintln!("handcraft: no eligible hands; image copied unchanged");
    }
    let restored = a.out.join("restored.png");
    handcraft_core::raster::save_rgb_png(&outcome.restored, &restored)
        .map_err(|e| io_failure(&restored, e))?;
    let mask = a.out.join("mask.png");
    outcome.final_mask.save_png(&mask).map_err(|e| io_failure(&mask, e))?;
    let mut summary = outcome.summary(Some(mask));
    summary.restored_image_path = Some(restored.clone());
    write_json_out(&a.out.join("outcome.json"), &summary)?;
    println!("{}", restored.display());
    Ok(())
}

/// Job index of each successful image, in order.
fn image_indices(jobs: &[RestorationJob], result: &handcraft_core::pipeline::BatchResult) -> Vec<usize> {
    let failed: Vec<usize> = result.failures.iter().map(|f| f.index).collect();
    (0..jobs.len()).filter(|i| !failed.contains(i)).collect()
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let n = a.original.len();
    if a.restored.len() != n || a.mask.len() != n {
        return Err(invalid(format!(
            "list lengths differ: {} originals, {} restored, {} masks",
            n,
            a.restored.len(),
            a.mask.len()
        )));
    }
    let mut psnr = Vec::with_capacity(n);
    let mut ssim = Vec::with_capacity(n);
    for ((o, r), m) in a.original.iter().zip(&a.restored).zip(&a.mask) {
        for (p, what) in [(o, "original"), (r, "restored"), (m, "mask")] {
            require_file(p, what)?;
        }
        let (orig, rest) = (load_rgb_png(o)?, load_rgb_png(r)?);
        let mask = BinaryMask::load_png(m)?;
        psnr.push(masked_psnr(&orig, &rest, &mask)?);
        ssim.push(masked_ssim(&orig, &rest, &mask)?);
    }
    require_file(&a.pose_records, "pose records")?;
    require_file(&a.classifier_records, "classifier records")?;
    let pose: Vec<HandPoseRecord> = read_jsonl(&a.pose_records)?;
    let classifier: Vec<ClassifierRecord> = read_jsonl(&a.classifier_records)?;
    let report = MetricsReport::aggregate(&pose, &classifier, &psnr, &ssim)?;
    let table = report.to_table(&a.method);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json_out(&out.join("report.json"), &report)?;
        write_text(&out.join("report.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let config = pipeline_config(&a.config)?;
    let lib = library(a.config.templates.as_deref())?;
    let grid: Vec<AblationConfig> = match &a.grid {
        Some(p) => {
            require_file(p, "grid file")?;
            read_json(p)?
        }
        None => AblationConfig::table_rows(),
    };
    if grid.is_empty() {
        return Err(invalid("ablation grid is empty"));
    }
    let jobs = load_jobs(&a.job_dir.join("jobs.json"), &config)?;
    let backend = backend(&a.backend)?;
    create_dir(&a.out)?;
    let pipeline = Pipeline::new(&lib, backend.as_ref(), &a.out).with_parallelism(a.jobs);
    let rows = pipeline.run_ablation(&jobs, &grid)?;
    let tsv = ablation_tsv(&rows);
    write_text(&a.out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn hand_keypoints(pose: &Path, hand: &str) -> Result<KeypointSet<f64>, Failure> {
    require_file(pose, "pose")?;
    let pose = validate_pose_file(pose)?;
    pose.hand(hand)
        .map(|h| h.keypoints.clone())
        .ok_or_else(|| invalid(format!("hand {hand} not in pose estimate")))
}

fn load_silhouette(path: &Path) -> Result<BinaryMask, Failure> {
    require_file(path, "silhouette")?;
    Ok(BinaryMask::load_png(path)?)
}

fn selection_failure(e: handcraft_core::selection::SelectionError) -> Failure {
    PipelineError::from(e).into()
}

pub fn select_template(a: SelectArgs) -> Outcome {
    let lib = library(a.templates.as_deref())?;
    let kps = hand_keypoints(&a.pose, &a.hand)?;
    let result = match a.select {
        Select::Silhouette => {
            let path = a
                .silhouette
                .as_ref()
                .ok_or_else(|| invalid("silhouette selection needs --silhouette"))?;
            silhouette_consistent_select(&lib, &kps, &load_silhouette(path)?)
                .map_err(selection_failure)?
        }
        Select::Random => random_select(&lib, a.seed),
    };
    let text = serde_json::to_string_pretty(&result).expect("selection serializes") + "\n";
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("selection.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn misalign(a: MisalignArgs) -> Outcome {
    let lib = library(a.templates.as_deref())?;
    let kps = hand_keypoints(&a.pose, &a.hand)?;
    let target = load_silhouette(&a.silhouette)?;
    let id = match &a.template {
        Some(id) => id.clone(),
        None => {
            silhouette_consistent_select(&lib, &kps, &target)
                .map_err(selection_failure)?
                .template_id
        }
    };
    let template = lib
        .get(&id)
        .ok_or_else(|| invalid(format!("template {id} not in library")))?;
    let rows = misalignment_study(template, &kps, &target, &a.rotation_offset)?;
    let mut tsv = String::from("label\trotation_offset_deg\tflipped\tiou\n");
    for r in rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            r.label, r.rotation_offset_deg, r.flipped as u8, r.iou
        ));
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("misalignment.tsv"), &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

pub fn make_fixtures(a: FixtureArgs) -> Outcome {
    if a.count == 0 || a.hands == 0 {
        return Err(invalid("--count and --hands must be positive"));
    }
    let lib = bundled::library();
    let spec = FixtureSpec {
        hands: a.hands,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let mut jobs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let case = synthetic_case(&lib, &spec, a.seed.wrapping_add(i as u64), PipelineConfig::default())?;
        let name = format!("case-{i:03}");
        write_case(&case, &a.out.join(&name))?;
        let rel = |f: &str| PathBuf::from(&name).join(f);
        jobs.push(JobEntry {
            image: rel("image.png"),
            pose: rel("pose.json"),
            detections: rel("detections.json"),
            silhouette: Some(rel("silhouette.png")),
        });
    }
    let path = a.out.join("jobs.json");
    write_json_out(&path, &JobsFile { jobs })?;
    println!("{}", path.display());
    Ok(())
}

pub fn export_templates(a: ExportArgs) -> Outcome {
    create_dir(&a.out)?;
    let manifest = write_library(&a.out, &bundled::templates()).map_err(|e| io_failure(&a.out, e))?;
    println!("{}", manifest.display());
    Ok(())
}
