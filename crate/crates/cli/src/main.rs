//! `nerf-analogy` command-line driver.
//!
//! Exit status: 0 on success, 2 for invalid arguments or configs, 3 when a
//! stage fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nerf_analogy::correspondence::{
    assemble_training_set, build_mapping, prealign, sample_points, score_histogram_image, transferred_image,
    RigidTransform,
};
use nerf_analogy::eval::{bootstrap_metrics, composite, direct_metrics, make_split, with_alpha, SplitSpec};
use nerf_analogy::features::{affinity_heatmap, pca_visualization};
use nerf_analogy::field::{load_checkpoint, save_checkpoint};
use nerf_analogy::io;
use nerf_analogy::pipeline::{
    alignment_json, builtin_features, list_files, preset_by_name, read_feats, read_views, run_pipeline, synth_views,
    validate_config, view_file_name, PipelineError, RunConfig, PRESET_NAMES, UNTEXTURED_ALBEDO,
};
use nerf_analogy::raster::Image;
use nerf_analogy::scene::{circular_trajectory, sample_camera_sphere, Intrinsics, SceneDescription};
use nerf_analogy::training::{geometry_reference, render_field, train, EdgeReference, EdgeView};

#[derive(Parser)]
#[command(name = "nerf-analogy", version, about = "Appearance transfer between 3D objects via feature matching")]
struct Cli {
    /// Global RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives the sequential reference schedule).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run config whose sections supply defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render G-buffers of a scene from random or circular cameras.
    Synth(SynthArgs),
    /// Compute or import per-view descriptor maps.
    Features(FeaturesArgs),
    /// Match target points to source points and assemble training samples.
    Match(MatchArgs),
    /// Fit the appearance field to transfer samples.
    Train(TrainArgs),
    /// Render a trained field on G-buffer views.
    Render(RenderArgs),
    /// Score a trained field (direct or bootstrapped PSNR/SSIM).
    Eval(EvalArgs),
    /// Alpha-over an RGBA render onto a background.
    Composite(CompositeArgs),
    /// Print the header of a GBUF, FEAT, CORR, TSMP, IMGF or NFLD file.
    Inspect { file: PathBuf },
    /// Convert between containers and PNG.
    Convert(ConvertArgs),
    /// Joint PCA colouring of descriptor maps.
    PcaViz(PcaArgs),
    /// Cosine-affinity heatmap of one query pixel against another map.
    Affinity(AffinityArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
    /// Field checkpoint utilities.
    Field {
        #[command(subcommand)]
        command: FieldCommand,
    },
    /// Check a run config and list every problem.
    Validate { path: Option<PathBuf> },
}

#[derive(Subcommand)]
enum FieldCommand {
    /// Print the architecture stored in a checkpoint.
    Info { file: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (TOML).
    #[arg(long, conflicts_with = "preset")]
    scene: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 3.5)]
    radius: f64,
    #[arg(long, default_value_t = 400)]
    width: u32,
    #[arg(long, default_value_t = 400)]
    height: u32,
    #[arg(long, default_value_t = 40.0)]
    fov_deg: f64,
    /// Circular trajectory at this elevation instead of random sphere cameras.
    #[arg(long)]
    trajectory_elevation_deg: Option<f64>,
    /// Constant albedo instead of the scene's textures.
    #[arg(long)]
    untextured: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Builtin,
    External,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    gbuf_dir: PathBuf,
    #[arg(long, value_enum, default_value = "builtin")]
    backend: BackendArg,
    /// Comma-separated Gaussian scales for the built-in descriptor.
    #[arg(long)]
    scales: Option<String>,
    /// Comma-separated groups among normal, position, appearance.
    #[arg(long)]
    groups: Option<String>,
    /// FEAT files to import with `--backend external`.
    #[arg(long)]
    external_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    source_gbuf: PathBuf,
    #[arg(long)]
    source_feat: PathBuf,
    #[arg(long)]
    target_gbuf: PathBuf,
    #[arg(long)]
    target_feat: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    per_view: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    prealign: Option<OnOff>,
    /// Dense transferred images for the first N target views (edge-loss references).
    #[arg(long)]
    edge_views: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EdgeRefArg {
    Transfer,
    Geometry,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    samples: PathBuf,
    /// G-buffer views used by the edge loss.
    #[arg(long)]
    edge_gbuf: Option<PathBuf>,
    /// Transferred images (`view_NNN.imgf`) matching the edge views by name.
    #[arg(long)]
    transfer_dir: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    lambda_start: Option<f64>,
    #[arg(long)]
    lambda_ramp_end: Option<f64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, value_enum)]
    edge_ref: Option<EdgeRefArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    gbuf_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Direct,
    Bootstrap,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    gbuf_dir: PathBuf,
    #[arg(long, value_enum, default_value = "bootstrap")]
    protocol: ProtocolArg,
    /// Split sizes `train,val,test`; must sum to the number of views.
    #[arg(long)]
    split: Option<String>,
    /// Iterations of the bootstrap refit.
    #[arg(long)]
    refit_iters: Option<usize>,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompositeArgs {
    #[arg(long)]
    fg: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plane {
    Rgb,
    Normal,
    Position,
    ViewDir,
    Alpha,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    /// Which GBUF plane to export.
    #[arg(long, value_enum, default_value = "rgb")]
    plane: Plane,
}

#[derive(Args)]
struct PcaArgs {
    /// Directories of FEAT files, visualized jointly.
    #[arg(long = "feat-dir", required = true)]
    feat_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AffinityArgs {
    #[arg(long)]
    query: PathBuf,
    /// Query pixel `x,y` in feature-map coordinates.
    #[arg(long)]
    pixel: String,
    #[arg(long)]
    other: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `train.total_iters`.
    #[arg(long)]
    iters: Option<usize>,
    /// Use the bundled smoke config when no `--config` is given.
    #[arg(long)]
    smoke: bool,
}

enum CliError {
    Config(String),
    Stage(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.exit_code() == 2 {
            CliError::Config(e.to_string())
        } else {
            CliError::Stage(e.to_string())
        }
    }
}

type CliResult = Result<(), CliError>;

fn stage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Stage(e.to_string())
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

struct Globals {
    seed: Option<u64>,
    config: Option<RunConfig>,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        configure_threads(n);
    }
    let result = (|| {
        let config = match (&cli.config, &cli.command) {
            (Some(p), Command::Validate { path: None }) => {
                return validate(p);
            }
            (Some(p), _) => Some(RunConfig::load(p)?),
            (None, _) => None,
        };
        dispatch(cli.command, Globals { seed: cli.seed, config })
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("error: {m}"),
                CliError::Stage(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(n: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("could not configure thread pool: {e}");
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(n: usize) {
    if n != 1 {
        log::warn!("built without the `parallel` feature; running single-threaded");
    }
}

fn dispatch(command: Command, g: Globals) -> CliResult {
    match command {
        Command::Synth(a) => synth(a, &g),
        Command::Features(a) => features(a, &g),
        Command::Match(a) => match_cmd(a, &g),
        Command::Train(a) => train_cmd(a, &g),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a, &g),
        Command::Composite(a) => composite_cmd(a),
        Command::Inspect { file } => inspect(&file),
        Command::Convert(a) => convert(a),
        Command::PcaViz(a) => pca_viz(a),
        Command::Affinity(a) => affinity(a),
        Command::Run(a) => run(a, g),
        Command::Field { command: FieldCommand::Info { file } } => field_info(&file),
        Command::Validate { path: Some(p) } => validate(&p),
        Command::Validate { path: None } => Err(CliError::Config("validate needs a config path or --config".into())),
    }
}

fn validate(path: &Path) -> CliResult {
    validate_config(path)?;
    println!("{}: ok", path.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    io::write_atomic(path, bytes).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs, g: &Globals) -> CliResult {
    let scene = match (&a.scene, &a.preset) {
        (Some(p), None) => SceneDescription::load(p).map_err(|e| config(format!("{}: {e}", p.display())))?,
        (None, Some(name)) => preset_by_name(name)
            .ok_or_else(|| config(format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "))))?,
        _ => return Err(config("give exactly one of --scene or --preset")),
    };
    let scene = if a.untextured { scene.untextured(UNTEXTURED_ALBEDO) } else { scene };
    if a.count == 0 || !(a.radius > 0.0) || !(a.fov_deg > 0.0 && a.fov_deg < 180.0) {
        return Err(config("count must be >= 1, radius > 0 and fov-deg in (0, 180)"));
    }
    let intr = Intrinsics { fov_y: a.fov_deg.to_radians(), width: a.width, height: a.height };
    let cams = match a.trajectory_elevation_deg {
        Some(e) => circular_trajectory(a.count, a.radius, e.to_radians(), intr),
        None => sample_camera_sphere(a.count, a.radius, g.seed(), intr),
    };
    let views = synth_views(&scene, &cams).map_err(stage)?;
    for (i, v) in views.iter().enumerate() {
        io::write_gbuf(v, &a.out.join(view_file_name(i, "gbuf"))).map_err(stage)?;
    }
    println!("wrote {} views to {}", views.len(), a.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| config(format!("{what}: cannot parse `{p}`"))))
        .collect()
}

fn features(a: FeaturesArgs, g: &Globals) -> CliResult {
    let views = read_views(&a.gbuf_dir).map_err(stage)?;
    let maps = match a.backend {
        BackendArg::Builtin => {
            let mut cfg = g.config.as_ref().map(|c| c.features.descriptor.clone()).unwrap_or_default();
            if let Some(s) = &a.scales {
                cfg.scales = parse_list(s, "--scales")?;
            }
            if let Some(gr) = &a.groups {
                cfg = cfg.with_groups(gr).map_err(config)?;
            }
            cfg.validate().map_err(config)?;
            builtin_features(&views, &cfg).map_err(stage)?
        }
        BackendArg::External => {
            let dir = a.external_dir.as_ref().ok_or_else(|| config("--backend external needs --external-dir"))?;
            read_feats(dir).map_err(stage)?
        }
    };
    if maps.len() != views.len() {
        return Err(stage(format!("{} feature maps for {} views", maps.len(), views.len())));
    }
    for (i, m) in maps.iter().enumerate() {
        io::write_feat(m, &a.out.join(view_file_name(i, "feat"))).map_err(stage)?;
    }
    println!("wrote {} feature maps (dim {}) to {}", maps.len(), maps.first().map_or(0, |m| m.dim), a.out.display());
    Ok(())
}

fn load_pairs(
    gdir: &Path,
    fdir: &Path,
    views: usize,
) -> Result<(Vec<nerf_analogy::GBufferView>, Vec<nerf_analogy::FeatureMap>), CliError> {
    let g = read_views(gdir).map_err(stage)?;
    let f = read_feats(fdir).map_err(stage)?;
    if g.len() != f.len() {
        return Err(stage(format!("{} has {} views but {} has {} feature maps", gdir.display(), g.len(), fdir.display(), f.len())));
    }
    let n = views.min(g.len());
    Ok((g[..n].to_vec(), f[..n].to_vec()))
}

fn match_cmd(a: MatchArgs, g: &Globals) -> CliResult {
    let mut m = g.config.as_ref().map(|c| c.correspondence.clone()).unwrap_or_default();
    m.views = a.views.unwrap_or(m.views);
    m.per_view = a.per_view.unwrap_or(m.per_view);
    m.k = a.k.unwrap_or(m.k);
    m.edge_views = a.edge_views.unwrap_or(0);
    if let Some(p) = a.prealign {
        m.prealign = p == OnOff::On;
    }
    if m.views == 0 || m.per_view == 0 || m.k == 0 {
        return Err(config("--views, --per-view and --k must be >= 1"));
    }
    let seed = g.seed();
    let (tg, tf) = load_pairs(&a.target_gbuf, &a.target_feat, m.views)?;
    let (sg, sf) = load_pairs(&a.source_gbuf, &a.source_feat, m.views)?;
    let pairs = |g: &[_], f: &[_]| g.iter().cloned().zip(f.iter().cloned()).collect::<Vec<_>>();
    let target = sample_points(&pairs(&tg, &tf), m.per_view, seed.wrapping_mul(2).wrapping_add(1)).map_err(stage)?;
    let source = sample_points(&pairs(&sg, &sf), m.per_view, seed.wrapping_mul(2)).map_err(stage)?;
    let alignment = if m.prealign { Some(prealign(&target, &source, &m.search).map_err(stage)?) } else { None };
    let map = build_mapping(&target, &source, m.k, alignment.as_ref()).map_err(stage)?;
    let samples = assemble_training_set(&map, &target, &source);
    write_file(&a.out.join("correspondence.corr"), &io::encode_corr(&map))?;
    write_file(&a.out.join("samples.tsmp"), &io::encode_samples(&samples))?;
    let transform = alignment.clone().unwrap_or_else(RigidTransform::identity);
    write_file(&a.out.join("alignment.json"), alignment_json(&transform).as_bytes())?;
    io::write_png(&score_histogram_image(&map, m.histogram_bins, 64), &a.out.join("score_hist.png")).map_err(stage)?;
    for i in 0..m.edge_views.min(tg.len()) {
        let img = transferred_image(&tg[i], &tf[i], &source, m.k, alignment.as_ref()).map_err(stage)?;
        write_file(&a.out.join("transfer").join(view_file_name(i, "imgf")), &io::encode_imgf(&img))?;
    }
    let mean = map.score.iter().map(|s| *s as f64).sum::<f64>() / map.len().max(1) as f64;
    println!("matched {} target points to {} source points, mean similarity {mean:.4}", map.len(), source.len());
    Ok(())
}

fn train_cmd(a: TrainArgs, g: &Globals) -> CliResult {
    let mut cfg = g.config.as_ref().map(|c| c.train.clone()).unwrap_or_default();
    cfg.total_iters = a.iters.unwrap_or(cfg.total_iters);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.lambda_max = a.lambda_max.unwrap_or(cfg.lambda_max);
    cfg.lambda_start_frac = a.lambda_start.unwrap_or(cfg.lambda_start_frac);
    cfg.lambda_ramp_end_frac = a.lambda_ramp_end.unwrap_or(cfg.lambda_ramp_end_frac);
    cfg.sigma1 = a.sigma1.unwrap_or(cfg.sigma1);
    cfg.sigma2 = a.sigma2.unwrap_or(cfg.sigma2);
    if let Some(e) = a.edge_ref {
        cfg.edge_reference = match e {
            EdgeRefArg::Transfer => EdgeReference::Transfer,
            EdgeRefArg::Geometry => EdgeReference::Geometry,
        };
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config)?;
    let samples = io::decode_samples(&std::fs::read(&a.samples).map_err(|e| stage(format!("{}: {e}", a.samples.display())))?)
        .map_err(stage)?;
    let mut edge_views = Vec::new();
    if cfg.lambda_max > 0.0 {
        let Some(dir) = &a.edge_gbuf else {
            return Err(config("edge loss enabled (--lambda-max > 0) but no --edge-gbuf given"));
        };
        for path in list_files(dir, "gbuf").map_err(stage)? {
            let view = io::read_gbuf(&path).map_err(stage)?;
            let reference = match cfg.edge_reference {
                EdgeReference::Geometry => geometry_reference(&view),
                EdgeReference::Transfer => {
                    let tdir = a.transfer_dir.as_ref().ok_or_else(|| config("--edge-ref transfer needs --transfer-dir"))?;
                    let name = path.with_extension("imgf");
                    let p = tdir.join(name.file_name().expect("file name"));
                    if !p.exists() {
                        continue;
                    }
                    io::decode_imgf(&std::fs::read(&p).map_err(stage)?).map_err(stage)?
                }
            };
            edge_views.push(EdgeView { view, reference });
        }
        if edge_views.is_empty() {
            return Err(stage("no edge views with a matching reference image"));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(stage)?;
    cfg.diagnostic_checkpoint = Some(a.out.join("diagnostic.nfld"));
    let outcome = train(&samples, &edge_views, &cfg).map_err(stage)?;
    save_checkpoint(&outcome.params, &a.out.join("field.nfld")).map_err(stage)?;
    write_file(&a.out.join("loss.csv"), outcome.loss_csv().as_bytes())?;
    println!("trained {} iterations, mean colour loss over the last 100 {:.6}", cfg.total_iters, outcome.final_color_loss(100));
    Ok(())
}

fn render(a: RenderArgs) -> CliResult {
    let field = load_checkpoint(&a.field).map_err(stage)?;
    let files = list_files(&a.gbuf_dir, "gbuf").map_err(stage)?;
    for path in &files {
        let view = io::read_gbuf(path).map_err(stage)?;
        let img = render_field(&field, &view).map_err(stage)?;
        let rgba = with_alpha(&img, &view.alpha).map_err(stage)?;
        let name = path.with_extension("png");
        io::write_png(&rgba, &a.out.join(name.file_name().expect("file name"))).map_err(stage)?;
    }
    println!("rendered {} views to {}", files.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, g: &Globals) -> CliResult {
    let field = load_checkpoint(&a.field).map_err(stage)?;
    let views = read_views(&a.gbuf_dir).map_err(stage)?;
    let report = match a.protocol {
        ProtocolArg::Direct => {
            let refs: Vec<Image> = views.iter().map(|v| v.rgb_image()).collect();
            let items: Vec<_> = views.iter().zip(&refs).enumerate().map(|(i, (v, r))| (i, v, r)).collect();
            direct_metrics(&field, &items).map_err(stage)?
        }
        ProtocolArg::Bootstrap => {
            let mut spec = match (&a.split, &g.config) {
                (Some(s), _) => {
                    let parts: Vec<usize> = parse_list(s, "--split")?;
                    let [train, val, test] = parts[..] else {
                        return Err(config("--split takes three sizes: train,val,test"));
                    };
                    SplitSpec { total: train + val + test, train, val, test, seed: 0 }
                }
                (None, Some(c)) => c.split_spec(),
                (None, None) => SplitSpec::default(),
            };
            if a.split.is_some() || g.seed.is_some() {
                spec.seed = g.seed();
            }
            let split = make_split(&spec, &views).map_err(config)?;
            let mut refit = g.config.as_ref().map(|c| c.refit_config()).unwrap_or_default();
            refit.total_iters = a.refit_iters.unwrap_or(refit.total_iters);
            refit.validate().map_err(config)?;
            bootstrap_metrics(&field, &views, &split, &refit).map_err(stage)?.report
        }
    };
    match &a.out {
        Some(p) => write_file(p, report.to_csv().as_bytes())?,
        None => print!("{}", report.to_csv()),
    }
    println!("{}", report.summary());
    Ok(())
}

fn composite_cmd(a: CompositeArgs) -> CliResult {
    let fg = io::read_png(&a.fg).map_err(stage)?;
    let bg = io::read_png(&a.bg).map_err(stage)?;
    let out = composite(&fg, &bg).map_err(stage)?;
    io::write_png(&out, &a.out).map_err(stage)
}

fn inspect(file: &Path) -> CliResult {
    let bytes = std::fs::read(file).map_err(|e| stage(format!("{}: {e}", file.display())))?;
    let text = if bytes.starts_with(b"NFLD") {
        let p = nerf_analogy::field::decode_checkpoint(&bytes).map_err(stage)?;
        format!("NFLD params={} {}", p.param_count(), p.arch_summary())
    } else {
        io::describe(&bytes).map_err(stage)?
    };
    println!("{text}");
    Ok(())
}

fn field_info(file: &Path) -> CliResult {
    let p = load_checkpoint(file).map_err(stage)?;
    println!("encoding: {:?}", p.encoding);
    println!("arch: {:?}", p.arch);
    println!("layers: {}", p.arch_summary());
    println!("parameters: {}", p.param_count());
    Ok(())
}

fn ext(p: &Path) -> String {
    p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default()
}

fn plane_image(view: &nerf_analogy::GBufferView, plane: Plane) -> Image {
    let (w, h) = (view.width(), view.height());
    let signed = |v: &[[f32; 3]]| -> Vec<[f32; 3]> { v.iter().map(|p| p.map(|c| 0.5 + 0.5 * c)).collect() };
    match plane {
        Plane::Rgb => view.rgb_image(),
        Plane::Normal => Image::from_rgb(w, h, &signed(&view.normal)),
        Plane::ViewDir => Image::from_rgb(w, h, &signed(&view.view_dir)),
        Plane::Position => Image::from_rgb(w, h, &signed(&view.position)),
        Plane::Alpha => view.alpha_image(),
    }
}

fn convert(a: ConvertArgs) -> CliResult {
    let read = |p: &Path| std::fs::read(p).map_err(|e| stage(format!("{}: {e}", p.display())));
    let img = match ext(&a.input).as_str() {
        "gbuf" => plane_image(&io::read_gbuf(&a.input).map_err(stage)?, a.plane),
        "imgf" => io::decode_imgf(&read(&a.input)?).map_err(stage)?,
        "png" => io::read_png(&a.input).map_err(stage)?,
        "feat" => {
            let v = pca_visualization(&[io::read_feat(&a.input).map_err(stage)?]).map_err(stage)?;
            v.images.into_iter().next().expect("one image")
        }
        other => return Err(config(format!("cannot convert from `.{other}`"))),
    };
    match ext(&a.output).as_str() {
        "png" => io::write_png(&img, &a.output).map_err(stage),
        "imgf" => write_file(&a.output, &io::encode_imgf(&img)),
        other => Err(config(format!("cannot convert to `.{other}`"))),
    }
}

fn pca_viz(a: PcaArgs) -> CliResult {
    let mut names = Vec::new();
    let mut maps = Vec::new();
    for dir in &a.feat_dirs {
        for p in list_files(dir, "feat").map_err(stage)? {
            maps.push(io::read_feat(&p).map_err(stage)?);
            let set: Vec<String> =
                dir.components().filter_map(|c| c.as_os_str().to_str()).filter(|c| *c != "." && *c != "/").map(String::from).collect();
            names.push(format!("{}_{}", set.join("_"), p.with_extension("png").file_name().unwrap().to_string_lossy()));
        }
    }
    let vis = pca_visualization(&maps).map_err(stage)?;
    for (img, name) in vis.images.iter().zip(&names) {
        io::write_png(img, &a.out.join(name)).map_err(stage)?;
    }
    println!("explained variance {:?}", vis.explained_variance);
    Ok(())
}

fn affinity(a: AffinityArgs) -> CliResult {
    let xy: Vec<usize> = parse_list(&a.pixel, "--pixel")?;
    let [x, y] = xy[..] else {
        return Err(config("--pixel takes x,y"));
    };
    let q = io::read_feat(&a.query).map_err(stage)?;
    let o = io::read_feat(&a.other).map_err(stage)?;
    let img = affinity_heatmap((x, y), &q, &o, true).map_err(stage)?;
    io::write_png(&img, &a.out).map_err(stage)
}

fn run(a: RunArgs, g: Globals) -> CliResult {
    let mut cfg = match (g.config, a.smoke) {
        (Some(c), _) => c,
        (None, true) => RunConfig::smoke(Path::new("out")),
        (None, false) => return Err(config("run needs --config (or --smoke)")),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.output_dir {
        cfg.output_dir = std::path::absolute(&o).map_err(config)?;
    }
    if let Some(i) = a.iters {
        cfg.train.total_iters = i;
    }
    let summary = run_pipeline(&cfg)?;
    for t in &summary.timings {
        println!("{:<9} {:?} {:.2}s", t.stage, t.status, t.seconds);
    }
    println!("manifest: {}", cfg.output().join(nerf_analogy::pipeline::MANIFEST_FILE).display());
    Ok(())
}
