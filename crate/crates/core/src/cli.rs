//! `reid` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::camera::{self, CameraResidualParams, CONSISTENCY_DEFINITION};
use crate::distance::{self, DistanceConfig, LocalMode, Metric};
use crate::ensemble::{self, EmaState};
use crate::featurize::{self, FeaturizerConfig};
use crate::gallery::{self, EmbeddingSet, GalleryIndex, Role};
use crate::imaging::{self, Image, Mask};
use crate::metrics::{self, EvalProtocol};
use crate::mining::{self, MiningConfig};
use crate::tsne::{self, TsneParams};

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Person re-identification embedding toolkit")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel library calls.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute stripe colour-histogram embeddings for every record of an index.
    Embed(EmbedArgs),
    /// Mask image backgrounds, or fuse masks into a 4-channel tensor.
    Mask(MaskArgs),
    /// Write a query-to-gallery distance matrix.
    Dist(DistArgs),
    /// Evaluate retrieval (mAP and CMC) and print a JSON report.
    Eval(EvalArgs),
    /// Sample a PK batch, mine batch-hard triplets and report the loss.
    Mine(MineArgs),
    /// Mean-teacher weight averaging and consistency loss.
    #[command(subcommand)]
    Ema(EmaCommand),
    /// Per-camera offsets, identity-agnosticism score and transforms.
    Camera(CameraArgs),
    /// Exact t-SNE coordinates for plotting.
    Tsne(TsneArgs),
}

#[derive(Debug, Args)]
struct DistanceArgs {
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    #[arg(long, default_value = "none")]
    local_mode: LocalMode,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

impl DistanceArgs {
    fn config(&self) -> DistanceConfig {
        DistanceConfig {
            metric: self.metric,
            lambda: self.lambda,
            local_mode: self.local_mode,
        }
    }
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    index: PathBuf,
    /// Directory image paths are relative to (default: the index's directory).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Directory of `<stem>.pgm` masks applied before featurizing.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Featurize the binary mask alone (body shape only).
    #[arg(long, requires = "masks")]
    mask_only: bool,
    #[arg(long, default_value_t = 8)]
    stripes: usize,
    #[arg(long, default_value_t = 8)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write `<stem>.remb` RGB+mask tensors (N=height, S=width, Dl=4)
    /// instead of masked images.
    #[arg(long)]
    fuse: bool,
}

#[derive(Debug, Args)]
struct DistArgs {
    #[arg(long)]
    emb_q: PathBuf,
    #[arg(long)]
    emb_g: PathBuf,
    #[command(flatten)]
    distance: DistanceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, requires = "emb_g", required_unless_present = "dist")]
    emb_q: Option<PathBuf>,
    #[arg(long, requires = "emb_q")]
    emb_g: Option<PathBuf>,
    /// Precomputed distance matrix instead of embeddings.
    #[arg(long, conflicts_with_all = ["emb_q", "emb_g"])]
    dist: Option<PathBuf>,
    #[command(flatten)]
    distance: DistanceArgs,
    /// Keep same-camera images of the query identity in the gallery.
    #[arg(long)]
    no_cross_camera: bool,
    #[arg(long, default_value_t = 20)]
    max_rank: usize,
    /// Also estimate the random-ranking mAP with this many trials.
    #[arg(long)]
    random_trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    emb: PathBuf,
    /// Role of the rows to sample from.
    #[arg(long, default_value = "train")]
    role: Role,
    #[arg(long, default_value_t = 4)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    /// Include the loss gradient for every batch row.
    #[arg(long)]
    with_grad: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EmaCommand {
    /// Fold a student snapshot into the teacher (initialising it if absent).
    Update {
        #[arg(long)]
        student: PathBuf,
        /// Existing teacher manifest.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 0.999)]
        alpha: f64,
        #[arg(long)]
        warmup: bool,
        /// Manifest path for the updated teacher.
        #[arg(long)]
        out: PathBuf,
    },
    /// MSE consistency loss between teacher and student embeddings.
    Consistency {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        with_grad: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CameraArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    emb: PathBuf,
    /// Write camera-normalized embeddings here.
    #[arg(long)]
    normalized_out: Option<PathBuf>,
    /// Camera residual parameter manifest to apply.
    #[arg(long, requires = "residual_out")]
    residual: Option<PathBuf>,
    #[arg(long, requires = "residual")]
    residual_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TsneArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    emb: PathBuf,
    /// Roles to include.
    #[arg(long, value_delimiter = ',', default_value = "gallery")]
    roles: Vec<Role>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-iteration KL trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Embed(a) => embed(a),
        Command::Mask(a) => mask(a),
        Command::Dist(a) => dist(a),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Mine(a) => mine(a, cli.seed),
        Command::Ema(a) => ema(a),
        Command::Camera(a) => camera_cmd(a),
        Command::Tsne(a) => tsne_cmd(a, cli.seed),
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!("input directory not found: {}", path.display());
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_index(path: &Path) -> anyhow::Result<GalleryIndex> {
    require_file(path)?;
    gallery::load_index(path).with_context(|| format!("loading {}", path.display()))
}

fn load_embeddings(path: &Path) -> anyhow::Result<EmbeddingSet> {
    require_file(path)?;
    gallery::read_embeddings(path).with_context(|| format!("loading {}", path.display()))
}

fn load_aligned(index: &Path, emb: &Path) -> anyhow::Result<(GalleryIndex, EmbeddingSet)> {
    let idx = load_index(index)?;
    let set = load_embeddings(emb)?;
    set.check_aligned(&idx)
        .with_context(|| format!("{} vs {}", emb.display(), index.display()))?;
    Ok((idx, set))
}

fn stem(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("no file stem in {}", path.display()))
}

/// Load `<masks>/<stem>.pgm` for `image_path`, co-registered to `img`.
fn load_mask_for(masks: &Path, image_path: &Path, img: &Image) -> anyhow::Result<Mask> {
    let mask_path = masks.join(format!("{}.pgm", stem(image_path)?));
    require_file(&mask_path)?;
    let m = imaging::read_mask(&mask_path)
        .with_context(|| format!("reading mask {}", mask_path.display()))?;
    if (m.width(), m.height()) == (img.width(), img.height()) {
        Ok(m)
    } else {
        Ok(imaging::resize_mask_nearest(&m, img.width(), img.height())?)
    }
}

fn embed(a: &EmbedArgs) -> anyhow::Result<()> {
    let idx = load_index(&a.index)?;
    let root = match &a.root {
        Some(r) => r.clone(),
        None => a.index.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if let Some(m) = &a.masks {
        require_dir(m)?;
    }
    let cfg = FeaturizerConfig {
        stripes: a.stripes,
        bins: a.bins,
    };
    cfg.validate()?;
    let images = idx
        .records
        .iter()
        .map(|r| {
            let path = root.join(&r.path);
            require_file(&path)?;
            let img = imaging::read_image(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(match &a.masks {
                None => img,
                Some(dir) => {
                    let m = load_mask_for(dir, &path, &img)?;
                    if a.mask_only {
                        m.to_rgb()
                    } else {
                        imaging::apply_mask(&img, &m)?
                    }
                }
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let set = featurize::featurize_all(&images, &cfg)?;
    gallery::write_embeddings(&a.out, &set)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn mask(a: &MaskArgs) -> anyhow::Result<()> {
    require_dir(&a.images)?;
    require_dir(&a.masks)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut images: Vec<PathBuf> = fs::read_dir(&a.images)
        .with_context(|| format!("listing {}", a.images.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    images.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    images.sort();
    if images.is_empty() {
        bail!("no .ppm images in {}", a.images.display());
    }
    for path in images {
        let img = imaging::read_image(&path).with_context(|| format!("reading {}", path.display()))?;
        let m = load_mask_for(&a.masks, &path, &img)?;
        let name = stem(&path)?;
        if a.fuse {
            let t = imaging::fuse_mask_channel(&img, &m)?;
            let local = Array3::from_shape_vec((t.height, t.width, 4), t.data)?;
            let set = EmbeddingSet::new(Array2::zeros((t.height, 0)), Some(local))?;
            gallery::write_embeddings(a.out.join(format!("{name}.remb")), &set)?;
        } else {
            imaging::write_image(a.out.join(format!("{name}.ppm")), &imaging::apply_mask(&img, &m)?)?;
        }
    }
    Ok(())
}

fn dist(a: &DistArgs) -> anyhow::Result<()> {
    let q = load_embeddings(&a.emb_q)?;
    let g = load_embeddings(&a.emb_g)?;
    let d = distance::compute_distances(&q, &g, &a.distance.config())?;
    distance::write_distances(&a.out, &d).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64) -> anyhow::Result<()> {
    let queries = load_index(&a.queries)?;
    let gallery_idx = load_index(&a.gallery)?;
    let (d, distance_cfg) = match (&a.dist, &a.emb_q, &a.emb_g) {
        (Some(path), _, _) => {
            require_file(path)?;
            (distance::read_distances(path)?, None)
        }
        (None, Some(eq), Some(eg)) => {
            let q = load_embeddings(eq)?;
            let g = load_embeddings(eg)?;
            q.check_aligned(&queries).context("query embeddings")?;
            g.check_aligned(&gallery_idx).context("gallery embeddings")?;
            let cfg = a.distance.config();
            (distance::compute_distances(&q, &g, &cfg)?, Some(cfg))
        }
        _ => bail!("eval needs either --dist or both --emb-q and --emb-g"),
    };
    let protocol = EvalProtocol {
        cross_camera_filter: !a.no_cross_camera,
        max_rank: a.max_rank,
    };
    let mut report = metrics::evaluate(&queries, &gallery_idx, &d, &protocol)?;
    report.distance = distance_cfg;
    if let Some(trials) = a.random_trials {
        report.random_baseline = Some(metrics::random_ranking_baseline(
            &queries,
            &gallery_idx,
            &protocol,
            trials,
            seed,
        )?);
    }
    emit(a.out.as_deref(), &to_json(&report)?)
}

#[derive(Serialize)]
struct MineReport {
    config: MiningConfig,
    metric: Metric,
    /// Rows of the index forming the batch, in batch order.
    batch_rows: Vec<usize>,
    labels: Vec<u32>,
    /// Triplets as batch positions.
    triplets: Vec<mining::Triplet>,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<Vec<f64>>>,
}

fn mine(a: &MineArgs, seed: u64) -> anyhow::Result<()> {
    let (idx, set) = load_aligned(&a.index, &a.emb)?;
    let cfg = MiningConfig {
        p: a.p,
        k: a.k,
        margin: a.margin,
        seed,
    };
    let rows = idx.rows_with_role(&[a.role]);
    if rows.is_empty() {
        bail!("no rows with role {} in {}", a.role, a.index.display());
    }
    let pool = idx.subset(&rows);
    let batch: Vec<usize> = mining::pk_sample(&pool, &cfg)?
        .into_iter()
        .map(|i| rows[i])
        .collect();
    let labels: Vec<u32> = batch.iter().map(|&r| idx.records[r].person_id).collect();
    let emb = set.global_f64().select(Axis(0), &batch);
    let d = distance::distance_matrix(
        set.global().select(Axis(0), &batch).view(),
        set.global().select(Axis(0), &batch).view(),
        Metric::Euclidean,
    )?;
    let triplets = mining::batch_hard(d.values().view(), &labels)?;
    let (loss, grad) = mining::triplet_loss_grad(emb.view(), &triplets, cfg.margin)?;
    let report = MineReport {
        config: cfg,
        metric: Metric::Euclidean,
        batch_rows: batch,
        labels,
        triplets: triplets.triplets,
        loss,
        grad: a
            .with_grad
            .then(|| grad.outer_iter().map(|r| r.to_vec()).collect()),
    };
    emit(a.out.as_deref(), &to_json(&report)?)
}

#[derive(Serialize)]
struct EmaReport {
    alpha: f64,
    warmup: bool,
    step: u64,
    tensors: Vec<String>,
}

#[derive(Serialize)]
struct ConsistencyReport {
    loss: f64,
    rows: usize,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<Vec<f64>>>,
}

fn ema(cmd: &EmaCommand) -> anyhow::Result<()> {
    match cmd {
        EmaCommand::Update {
            student,
            state,
            alpha,
            warmup,
            out,
        } => {
            require_file(student)?;
            let (_, student_tensors) = ensemble::load_tensors(student)
                .with_context(|| format!("loading {}", student.display()))?;
            let mut teacher = match state {
                Some(path) => {
                    require_file(path)?;
                    EmaState::load(path).with_context(|| format!("loading {}", path.display()))?
                }
                None => EmaState::new(student_tensors.clone(), *alpha, *warmup)?,
            };
            if state.is_some() {
                teacher.update(&student_tensors)?;
            }
            teacher.save(out).with_context(|| format!("writing {}", out.display()))?;
            let report = EmaReport {
                alpha: teacher.alpha(),
                warmup: teacher.warmup(),
                step: teacher.step(),
                tensors: teacher.teacher().keys().cloned().collect(),
            };
            emit(None, &to_json(&report)?)
        }
        EmaCommand::Consistency {
            teacher,
            student,
            with_grad,
            out,
        } => {
            let t = load_embeddings(teacher)?.global_f64();
            let s = load_embeddings(student)?.global_f64();
            let (loss, grad) = ensemble::consistency_loss_grad(t.view(), s.view())?;
            let report = ConsistencyReport {
                loss,
                rows: s.nrows(),
                dim: s.ncols(),
                grad: with_grad.then(|| grad.outer_iter().map(|r| r.to_vec()).collect()),
            };
            emit(out.as_deref(), &to_json(&report)?)
        }
    }
}

#[derive(Serialize)]
struct CameraReport<'a> {
    consistency_definition: &'a str,
    #[serde(flatten)]
    offsets: &'a camera::CameraOffsets,
    weighted_offset_sum: Vec<f64>,
}

fn narrow(e: &Array2<f64>) -> anyhow::Result<EmbeddingSet> {
    Ok(EmbeddingSet::global_only(e.mapv(|v| v as f32))?)
}

fn camera_cmd(a: &CameraArgs) -> anyhow::Result<()> {
    let (idx, set) = load_aligned(&a.index, &a.emb)?;
    let e = set.global_f64();
    let cams = idx.camera_ids();
    let offsets = camera::camera_offsets(e.view(), &cams, &idx.person_ids())?;
    if let Some(path) = &a.normalized_out {
        let n = camera::camera_normalize(e.view(), &offsets, &cams)?;
        gallery::write_embeddings(path, &narrow(&n)?)?;
    }
    if let (Some(params), Some(path)) = (&a.residual, &a.residual_out) {
        require_file(params)?;
        let p = CameraResidualParams::load(params)
            .with_context(|| format!("loading {}", params.display()))?;
        let r = camera::apply_camera_residual(e.view(), &p, &cams)?;
        gallery::write_embeddings(path, &narrow(&r)?)?;
    }
    let report = CameraReport {
        consistency_definition: CONSISTENCY_DEFINITION,
        weighted_offset_sum: offsets.weighted_sum(),
        offsets: &offsets,
    };
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn tsne_cmd(a: &TsneArgs, seed: u64) -> anyhow::Result<()> {
    let (idx, set) = load_aligned(&a.index, &a.emb)?;
    let rows = idx.rows_with_role(&a.roles);
    if rows.is_empty() {
        bail!("no rows with the requested roles in {}", a.index.display());
    }
    let x = set.global_f64().select(Axis(0), &rows);
    let params = TsneParams {
        perplexity: a.perplexity,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed,
        ..TsneParams::default()
    };
    let out = tsne::run_tsne(x.view(), &params)?;
    let mut text = format!(
        "# perplexity={} iterations={} learning_rate={} exaggeration={} switch_iteration={} seed={} final_kl={}\n",
        params.perplexity,
        params.iterations,
        params.learning_rate,
        params.exaggeration,
        params.switch_iteration,
        params.seed,
        out.final_kl()
    );
    text.push_str("row\tx\ty\tperson_id\tcamera_id\n");
    for (k, &r) in rows.iter().enumerate() {
        let rec = &idx.records[r];
        let y = out.embedding.row(k);
        text.push_str(&format!(
            "{r}\t{}\t{}\t{}\t{}\n",
            y[0], y[1], rec.person_id, rec.camera_id
        ));
    }
    emit(a.out.as_deref(), &text)?;
    if let Some(path) = &a.trace {
        let mut trace = String::from("iteration\tkl\n");
        for (i, kl) in out.kl_trace.iter().enumerate() {
            trace.push_str(&format!("{i}\t{kl}\n"));
        }
        fs::write(path, trace).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
