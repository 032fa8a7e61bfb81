//! Subcommands of the `tracklink` tool.
//!
//! Every tunable can come from a flag or from an optional `key = value`
//! config file (`--config`); flags win. Keys are the long flag names.
//! Each command returns the text it would print so it can be tested
//! without spawning a process.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tracklink::colorxfer;
use tracklink::globallink::{self, GateConfig};
use tracklink::ict::{self, AssocConfig, CameraTracks, DEFAULT_LAST_K};
use tracklink::linker::{self, Architecture, TrainConfig};
use tracklink::metrics::{self, DEFAULT_IOU_THRESHOLD};
use tracklink::synth::{self, SceneConfig};
use tracklink::trackio::{self, TrackSet};

#[derive(Debug, Parser)]
#[command(name = "tracklink", version, about = "Tracklet linking and multi-camera association")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: ground truth, fragmented tracks, embeddings, cut list.
    Synth(SynthArgs),
    /// Train the link model on ground-truth trajectories.
    Train(TrainArgs),
    /// Merge fragmented tracklets of one camera with a trained link model.
    Link(LinkArgs),
    /// Transfer the colour style of reference frames onto content frames.
    Color(ColorArgs),
    /// Assign global identities across cameras by embedding distance.
    Associate(AssociateArgs),
    /// Score tracking results against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// alpha 0.5
    Mmct,
    /// alpha 0.8
    Dhu,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        <Profile as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; one subdirectory per camera.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub frames: Option<u32>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    #[arg(long)]
    pub walk_std: Option<f64>,
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    #[arg(long)]
    pub gap_min: Option<u32>,
    #[arg(long)]
    pub gap_max: Option<u32>,
    #[arg(long)]
    pub intra_std: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub camera_bias: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ground-truth MOT files; samples are split evenly between them.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Weights file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV; defaults to the weights path with `.loss.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Negatives per positive.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    /// Convolution widths as `a,b,c`.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exclusive lower bound of the frame gap.
    #[arg(long)]
    pub min_gap: Option<u32>,
    /// Inclusive upper bound of the frame gap.
    #[arg(long)]
    pub max_gap: Option<u32>,
    /// Junction radius in pixels.
    #[arg(long)]
    pub sigma_s: Option<f64>,
    /// Score threshold.
    #[arg(long)]
    pub sigma_a: Option<f64>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ColorArgs {
    /// Reference-style frames (P6 PPM).
    #[arg(long, num_args = 1..)]
    pub reference: Vec<PathBuf>,
    /// Use every k-th reference frame.
    #[arg(long)]
    pub every: Option<usize>,
    /// Directory for the recoloured frames; file names are kept.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Content frames to recolour.
    pub content: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssociateArgs {
    /// Camera names, in the order cameras are associated.
    #[arg(long = "camera", num_args = 1..)]
    pub cameras: Vec<String>,
    /// One MOT file per camera.
    #[arg(long = "tracks", num_args = 1..)]
    pub tracks: Vec<PathBuf>,
    /// One embedding file per camera.
    #[arg(long = "embeddings", num_args = 1..)]
    pub embeddings: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Overrides the profile's distance threshold.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub last_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth MOT files, one per camera.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Prediction MOT files, one per camera.
    #[arg(long, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    /// Camera names for `--mtmc`; defaults to cam1, cam2, ...
    #[arg(long = "camera", num_args = 1..)]
    pub cameras: Vec<String>,
    /// Cross-camera identity scores using a global-id CSV.
    #[arg(long)]
    pub mtmc: bool,
    #[arg(long)]
    pub global_ids: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Also write the `metric,value` CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// `key = value` settings from a config file, consulted when a flag is absent.
#[derive(Debug, Default)]
pub struct Settings {
    values: HashMap<String, String>,
    source: String,
}

impl Settings {
    pub fn parse(text: &str, source: &str, known: &[&str]) -> Result<Self> {
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{source}:{}: expected `key = value`", i + 1))?;
            let key = k.trim().replace('_', "-");
            if !known.contains(&key.as_str()) {
                bail!("{source}:{}: unknown key `{key}`", i + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self {
            values,
            source: source.to_string(),
        })
    }

    pub fn load(path: Option<&Path>, known: &[&str]) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text, &p.display().to_string(), known)
            }
        }
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| anyhow!("{}: bad value for `{key}`: {e}", self.source))
            })
            .transpose()
    }

    /// Flag value, else config value, else `default`.
    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.lookup(key)?.unwrap_or(default)),
        }
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => self
                .lookup(key)?
                .ok_or_else(|| anyhow!("missing required setting `--{key}`")),
        }
    }

    /// A repeatable path flag; the config value is a comma-separated list.
    pub fn paths(&self, flag: Vec<PathBuf>, key: &str) -> Vec<PathBuf> {
        if !flag.is_empty() {
            return flag;
        }
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| PathBuf::from(s.trim()))
                    .filter(|p| !p.as_os_str().is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Link(a) => cmd_link(a),
        Command::Color(a) => cmd_color(a),
        Command::Associate(a) => cmd_associate(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_tracks(path: &Path, camera: &str) -> Result<TrackSet> {
    trackio::read_mot_file(path, camera).with_context(|| format!("reading tracks {}", path.display()))
}

const SYNTH_KEYS: &[&str] = &[
    "out",
    "identities",
    "cameras",
    "frames",
    "width",
    "height",
    "walk-std",
    "occlusion-rate",
    "gap-min",
    "gap-max",
    "intra-std",
    "separation",
    "camera-bias",
    "seed",
];

/// Writes, per camera, `gt.txt`, `pred.txt` (fragmented), `pred_emb.csv`,
/// `gt_emb.csv` and `cuts.csv` under `<out>/<camera>/`.
pub fn cmd_synth(a: SynthArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), SYNTH_KEYS)?;
    let d = SceneConfig::default();
    let config = SceneConfig {
        num_identities: s.get(a.identities, "identities", d.num_identities)?,
        cameras: s.get(a.cameras, "cameras", d.cameras)?,
        frames: s.get(a.frames, "frames", d.frames)?,
        image_size: (
            s.get(a.width, "width", d.image_size.0)?,
            s.get(a.height, "height", d.image_size.1)?,
        ),
        walk_step_std: s.get(a.walk_std, "walk-std", d.walk_step_std)?,
        occlusion_rate: s.get(a.occlusion_rate, "occlusion-rate", d.occlusion_rate)?,
        occlusion_gap: (
            s.get(a.gap_min, "gap-min", d.occlusion_gap.0)?,
            s.get(a.gap_max, "gap-max", d.occlusion_gap.1)?,
        ),
        embedding_intra_std: s.get(a.intra_std, "intra-std", d.embedding_intra_std)?,
        embedding_inter_separation: s.get(a.separation, "separation", d.embedding_inter_separation)?,
        camera_bias_std: s.get(a.camera_bias, "camera-bias", d.camera_bias_std)?,
        seed: s.get(a.seed, "seed", d.seed)?,
    };
    let out: PathBuf = s.require(a.out, "out")?;
    let scene = synth::gen_scene(&config)?;
    let mut report = String::new();
    for (c, cam) in scene.cameras.iter().enumerate() {
        let dir = out.join(&cam.gt.camera_id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        // each camera gets its own cut pattern
        let frag_config = SceneConfig {
            seed: config.seed.wrapping_add(c as u64),
            ..config.clone()
        };
        let frag = synth::fragment(&cam.gt, &frag_config)?;
        let pred_emb = synth::fragment_embeddings(&cam.embeddings, &frag);
        write_file(&dir.join("gt.txt"), trackio::write_mot(&cam.gt))?;
        write_file(&dir.join("pred.txt"), trackio::write_mot(&frag.tracks))?;
        trackio::write_embeddings_file(dir.join("gt_emb.csv"), &cam.embeddings)?;
        trackio::write_embeddings_file(dir.join("pred_emb.csv"), &pred_emb)?;
        let mut cuts = String::from("gt_id,pred_id,succ_id,pred_end,succ_start\n");
        for k in &frag.cuts {
            let _ = writeln!(
                cuts,
                "{},{},{},{},{}",
                k.gt_id, k.pred_id, k.succ_id, k.pred_end, k.succ_start
            );
        }
        write_file(&dir.join("cuts.csv"), cuts)?;
        let _ = writeln!(
            report,
            "{}: {} identities, {} tracklets, {} cuts",
            cam.gt.camera_id,
            cam.gt.len(),
            frag.tracks.len(),
            frag.cuts.len()
        );
    }
    Ok(report)
}

const TRAIN_KEYS: &[&str] = &[
    "gt",
    "out",
    "history",
    "epochs",
    "lr",
    "batch-size",
    "smoothing",
    "ratio",
    "samples",
    "seed",
    "width",
    "height",
    "widths",
    "hidden",
];

fn parse_widths(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("bad --widths `{text}`: {e}"))?;
    let widths: [usize; 3] = parts
        .try_into()
        .map_err(|_| anyhow!("--widths needs exactly three values, got `{text}`"))?;
    if widths.contains(&0) {
        bail!("--widths must be positive, got `{text}`");
    }
    Ok(widths)
}

pub fn cmd_train(a: TrainArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let widths = match s.get(a.widths, "widths", String::new())? {
        w if w.is_empty() => d.architecture.widths,
        w => parse_widths(&w)?,
    };
    let hidden = s.get(a.hidden, "hidden", d.architecture.hidden)?;
    if hidden == 0 {
        bail!("--hidden must be positive");
    }
    let config = TrainConfig {
        learning_rate: s.get(a.lr, "lr", d.learning_rate)?,
        epochs: s.get(a.epochs, "epochs", d.epochs)?,
        batch_size: s.get(a.batch_size, "batch-size", d.batch_size)?,
        label_smoothing: s.get(a.smoothing, "smoothing", d.label_smoothing)?,
        neg_pos_ratio: s.get(a.ratio, "ratio", d.neg_pos_ratio)?,
        seed: s.get(a.seed, "seed", d.seed)?,
        image_size: (
            s.get(a.width, "width", d.image_size.0)?,
            s.get(a.height, "height", d.image_size.1)?,
        ),
        num_samples: s.get(a.samples, "samples", d.num_samples)?,
        architecture: Architecture { widths, hidden },
    };
    config.validate()?;
    let out: PathBuf = s.require(a.out, "out")?;
    let history_path = match s.get(a.history, "history", PathBuf::new())? {
        p if p.as_os_str().is_empty() => out.with_extension("loss.csv"),
        p => p,
    };
    let gt_files = s.paths(a.gt, "gt");
    if gt_files.is_empty() {
        bail!("missing required setting `--gt`");
    }

    let mut samples = Vec::with_capacity(config.num_samples);
    let n = gt_files.len();
    for (i, path) in gt_files.iter().enumerate() {
        let gt = read_tracks(path, "gt")?;
        // spread the sample budget evenly; the first files take the remainder
        let share = config.num_samples / n + usize::from(i < config.num_samples % n);
        if share == 0 {
            continue;
        }
        let part = TrainConfig {
            num_samples: share,
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        samples.extend(linker::generate_samples(&gt, &part).with_context(|| format!("sampling {}", path.display()))?);
    }
    let outcome = linker::train(&samples, &config)?;
    linker::write_params_file(&outcome.params, &out).with_context(|| format!("writing weights {}", out.display()))?;
    let mut csv = String::from("epoch,loss\n");
    let mut report = String::new();
    for (e, l) in outcome.history.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", e + 1);
        let _ = writeln!(report, "epoch {:>3}  loss {l:.6}", e + 1);
    }
    write_file(&history_path, csv)?;
    let _ = writeln!(
        report,
        "{} samples, {} parameters, weights written to {}",
        samples.len(),
        outcome.params.num_learnable(),
        out.display()
    );
    Ok(report)
}

const LINK_KEYS: &[&str] = &[
    "weights", "input", "output", "min-gap", "max-gap", "sigma-s", "sigma-a", "width", "height",
];

pub fn cmd_link(a: LinkArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), LINK_KEYS)?;
    let d = GateConfig::default();
    let gate = GateConfig {
        min_gap: s.get(a.min_gap, "min-gap", d.min_gap)?,
        max_gap: s.get(a.max_gap, "max-gap", d.max_gap)?,
        spatial_radius: s.get(a.sigma_s, "sigma-s", d.spatial_radius)?,
        score_threshold: s.get(a.sigma_a, "sigma-a", d.score_threshold)?,
    };
    gate.validate()?;
    let td = TrainConfig::default();
    let image_size = (
        s.get(a.width, "width", td.image_size.0)?,
        s.get(a.height, "height", td.image_size.1)?,
    );
    let weights: PathBuf = s.require(a.weights, "weights")?;
    let input: PathBuf = s.require(a.input, "input")?;
    let output: PathBuf = s.require(a.output, "output")?;

    let params =
        linker::read_params_file(&weights).with_context(|| format!("loading weights {}", weights.display()))?;
    let tracks = read_tracks(&input, "input")?;
    let pairs = globallink::candidate_pairs(&tracks, &gate);
    let scored = globallink::score_pairs(&params, &pairs, &tracks, image_size)?;
    let linked = globallink::link(&tracks, &scored, &gate)?;
    write_file(&output, trackio::write_mot(&linked))?;
    Ok(format!(
        "{} tracklets in, {} candidate pairs, {} tracklets out\n",
        tracks.len(),
        pairs.len(),
        linked.len()
    ))
}

const COLOR_KEYS: &[&str] = &["reference", "every", "out-dir"];

pub fn cmd_color(a: ColorArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), COLOR_KEYS)?;
    let every = s.get(a.every, "every", 1usize)?;
    if every == 0 {
        bail!("--every must be at least 1");
    }
    let out_dir: PathBuf = s.require(a.out_dir, "out-dir")?;
    let references = s.paths(a.reference, "reference");
    if references.is_empty() {
        bail!("missing required setting `--reference`");
    }
    if a.content.is_empty() {
        bail!("no content frames given");
    }
    let frames = references
        .iter()
        .map(|p| colorxfer::read_ppm(p).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let stats = colorxfer::reference_stats(&frames, every)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for path in &a.content {
        let image = colorxfer::read_ppm(path)?;
        let name = path
            .file_name()
            .ok_or_else(|| anyhow!("{} has no file name", path.display()))?;
        let recoloured = colorxfer::transfer_frame(&image, &stats)?;
        colorxfer::write_ppm(out_dir.join(name), &recoloured)?;
    }
    Ok(format!(
        "reference mean l={:.4} a={:.4} b={:.4}; {} frames written to {}\n",
        stats.mean[0],
        stats.mean[1],
        stats.mean[2],
        a.content.len(),
        out_dir.display()
    ))
}

const ASSOCIATE_KEYS: &[&str] = &["camera", "tracks", "embeddings", "output", "profile", "alpha", "last-k"];

pub fn cmd_associate(a: AssociateArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), ASSOCIATE_KEYS)?;
    let profile = s.get(a.profile, "profile", Profile::Mmct)?;
    let base = match profile {
        Profile::Mmct => AssocConfig::mmct(),
        Profile::Dhu => AssocConfig::dhu(),
    };
    let config = AssocConfig {
        alpha: s.get(a.alpha, "alpha", base.alpha)?,
        last_k: s.get(a.last_k, "last-k", DEFAULT_LAST_K)?,
    };
    config.validate()?;
    let output: PathBuf = s.require(a.output, "output")?;
    let tracks = s.paths(a.tracks, "tracks");
    let embeddings = s.paths(a.embeddings, "embeddings");
    let names = if a.cameras.is_empty() {
        s.get(None, "camera", String::new())?
            .split(',')
            .map(|n| n.trim().to_string())
            .filter(|n| !n.is_empty())
            .collect()
    } else {
        a.cameras
    };
    if tracks.is_empty() {
        bail!("missing required setting `--tracks`");
    }
    if tracks.len() != embeddings.len() {
        bail!("{} track files but {} embedding files", tracks.len(), embeddings.len());
    }
    let names: Vec<String> = if names.is_empty() {
        (0..tracks.len()).map(synth::camera_name).collect()
    } else if names.len() == tracks.len() {
        names
    } else {
        bail!("{} camera names for {} track files", names.len(), tracks.len());
    };
    let mut cameras = Vec::with_capacity(tracks.len());
    for ((name, t), e) in names.iter().zip(&tracks).zip(&embeddings) {
        cameras.push(CameraTracks {
            tracks: read_tracks(t, name)?,
            embeddings: trackio::read_embeddings_file(e)
                .with_context(|| format!("reading embeddings {}", e.display()))?,
        });
    }
    let map = ict::assign_global_ids(&cameras, &config)?;
    ict::write_global_ids_file(&output, &map).with_context(|| format!("writing {}", output.display()))?;
    let identities = map.values().collect::<std::collections::BTreeSet<_>>().len();
    Ok(format!(
        "{} tracklets over {} cameras -> {identities} global identities (alpha {})\n",
        map.len(),
        cameras.len(),
        config.alpha
    ))
}

const EVAL_KEYS: &[&str] = &["gt", "pred", "camera", "global-ids", "iou", "csv"];

pub fn cmd_eval(a: EvalArgs) -> Result<String> {
    let s = Settings::load(a.config.as_deref(), EVAL_KEYS)?;
    let iou = s.get(a.iou, "iou", DEFAULT_IOU_THRESHOLD)?;
    let gt_files = s.paths(a.gt, "gt");
    let pred_files = s.paths(a.pred, "pred");
    if gt_files.is_empty() || pred_files.is_empty() {
        bail!("both --gt and --pred are required");
    }
    if gt_files.len() != pred_files.len() {
        bail!(
            "{} ground-truth files but {} prediction files",
            gt_files.len(),
            pred_files.len()
        );
    }
    let names: Vec<String> = if a.cameras.is_empty() {
        (0..gt_files.len()).map(synth::camera_name).collect()
    } else if a.cameras.len() == gt_files.len() {
        a.cameras
    } else {
        bail!("{} camera names for {} files", a.cameras.len(), gt_files.len());
    };
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for ((name, g), p) in names.iter().zip(&gt_files).zip(&pred_files) {
        let gt = read_tracks(g, name)?;
        let pred = read_tracks(p, name)?;
        if let (Some((g0, g1)), Some((p0, p1))) = (gt.frame_range(), pred.frame_range()) {
            if p0 > g1 || p1 < g0 {
                bail!("camera {name}: prediction frames {p0}..{p1} do not overlap ground truth {g0}..{g1}");
            }
        }
        gts.push(gt);
        preds.push(pred);
    }
    let rows: Vec<(&str, String)> = if a.mtmc {
        let map = match s.get(a.global_ids, "global-ids", PathBuf::new())? {
            p if p.as_os_str().is_empty() => {
                // without an association file each tracklet keeps its own id
                preds
                    .iter()
                    .flat_map(|set| set.ids().map(|id| ((set.camera_id.clone(), id), id)))
                    .collect()
            }
            p => ict::read_global_ids_file(&p).with_context(|| format!("reading {}", p.display()))?,
        };
        metrics::evaluate_mtmc(&gts, &preds, &map, iou)?.rows()
    } else {
        if gts.len() != 1 {
            bail!("single-camera evaluation takes one --gt and one --pred; use --mtmc for several cameras");
        }
        metrics::evaluate(&gts[0], &preds[0], iou)?.rows()
    };
    let csv = metrics::format_csv(&rows);
    if let Some(path) = s
        .get(a.csv, "csv", PathBuf::new())
        .map(|p| (!p.as_os_str().is_empty()).then_some(p))?
    {
        write_file(&path, &csv)?;
    }
    Ok(format!("{}\n{csv}", metrics::format_table(&rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let s = Settings::parse(
            "# comment\nepochs = 5\nlr=0.01 # trailing\n\nbatch_size = 8\n",
            "cfg",
            TRAIN_KEYS,
        )
        .unwrap();
        assert_eq!(s.get(None, "epochs", 60usize).unwrap(), 5);
        assert_eq!(s.get(Some(7usize), "epochs", 60).unwrap(), 7);
        assert_eq!(s.get(None, "lr", 0.001).unwrap(), 0.01);
        assert_eq!(s.get(None, "batch-size", 32usize).unwrap(), 8);
        assert_eq!(s.get(None, "seed", 3u64).unwrap(), 3);
        assert!(s.require::<PathBuf>(None, "out").is_err());
    }

    #[test]
    fn config_file_errors() {
        assert!(Settings::parse("epochs 5", "cfg", TRAIN_KEYS).is_err());
        assert!(Settings::parse("bogus = 1", "cfg", TRAIN_KEYS).is_err());
        let s = Settings::parse("epochs = many", "cfg", TRAIN_KEYS).unwrap();
        assert!(s.get(None, "epochs", 1usize).is_err());
    }

    #[test]
    fn path_lists() {
        let s = Settings::parse("gt = a.txt, b.txt", "cfg", TRAIN_KEYS).unwrap();
        assert_eq!(
            s.paths(vec![], "gt"),
            vec![PathBuf::from("a.txt"), PathBuf::from("b.txt")]
        );
        assert_eq!(s.paths(vec![PathBuf::from("c")], "gt"), vec![PathBuf::from("c")]);
    }

    #[test]
    fn widths_parsing() {
        assert_eq!(parse_widths("4, 8,8").unwrap(), [4, 8, 8]);
        assert!(parse_widths("4,8").is_err());
        assert!(parse_widths("4,0,8").is_err());
        assert!(parse_widths("a,b,c").is_err());
    }

    #[test]
    fn profiles() {
        assert_eq!("mmct".parse::<Profile>().unwrap(), Profile::Mmct);
        assert_eq!("DHU".parse::<Profile>().unwrap(), Profile::Dhu);
        assert!("other".parse::<Profile>().is_err());
    }
}
