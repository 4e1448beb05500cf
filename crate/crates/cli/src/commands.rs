use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scenefill::camera::Viewpoint;
use scenefill::config::Config;
use scenefill::datagen::{SceneLayout, SceneSpec};
use scenefill::inpaint::InpainterKind;
use scenefill::io::{load_scene, save_scene};
use scenefill::mdp::{EnvSettings, EpisodeInput, GroundTruth, Mode, Scenario};
use scenefill::metrics::evaluate;
use scenefill::planner::{
    run_episode_on, train_a3c, train_dqn, DqnOptions, EpisodeSummary, Planner, PolicyParams, QParams, TrainingOptions,
};
use scenefill::render::ViewMaps;
use scenefill::volume::{gradcheck, GradcheckOptions, GradcheckReport};

use crate::error::{CliError, Result};

pub const SPEC_FILE: &str = "spec.json";
pub const VIEW_FILE: &str = "view.json";
pub const LAYOUT_FILE: &str = "layout.json";
pub const GT_FILE: &str = "gt.ply";
pub const DEPTH_FILE: &str = "input_depth.png";
pub const COLOR_FILE: &str = "input_color.png";
pub const SEG_FILE: &str = "input_seg.png";
pub const MANIFEST_FILE: &str = "manifest.json";

const GRADCHECK_TOL: f64 = 1e-4;

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::ConfigFile {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn default_config_toml() -> String {
    toml::to_string(&Config::default()).expect("default config serializes")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    write_file(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

/// Writes one directory per scene plus `config.toml` and a manifest of
/// SHA-256 digests. Returns the manifest and the digest of its file.
pub fn gen(cfg: &Config, out: &Path, scenes: usize, first_seed: u64) -> Result<(Manifest, String)> {
    create_dir(out)?;
    let generated = Scenario::suite(cfg, first_seed, scenes)?;
    let config_text = toml::to_string(cfg).expect("config serializes");
    write_file(&out.join("config.toml"), &config_text)?;
    let mut manifest = Manifest {
        scenes: Vec::new(),
        files: Vec::new(),
    };
    let record = |rel: String, manifest: &mut Manifest| -> Result<()> {
        let bytes = fs::read(out.join(&rel)).map_err(|e| CliError::io(out.join(&rel), e))?;
        manifest.files.push(ManifestEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    };
    record("config.toml".into(), &mut manifest)?;
    for sc in &generated {
        let name = format!("scene_{:05}", sc.spec.seed);
        let dir = out.join(&name);
        create_dir(&dir)?;
        write_json(&dir.join(SPEC_FILE), &sc.spec)?;
        write_json(&dir.join(VIEW_FILE), &sc.input.view)?;
        write_json(&dir.join(LAYOUT_FILE), &sc.gt.layout)?;
        save_scene(&sc.gt.cloud, dir.join(GT_FILE))?;
        sc.input.maps.save_depth_png(dir.join(DEPTH_FILE))?;
        sc.input.maps.save_color_png(dir.join(COLOR_FILE))?;
        sc.input.maps.save_seg_png(dir.join(SEG_FILE))?;
        for f in [SPEC_FILE, VIEW_FILE, LAYOUT_FILE, GT_FILE, DEPTH_FILE, COLOR_FILE, SEG_FILE] {
            record(format!("{name}/{f}"), &mut manifest)?;
        }
        manifest.scenes.push(name);
    }
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok((manifest, sha256_hex(&bytes)))
}

/// A scene directory written by [`gen`]. Ground truth is optional.
pub struct SceneDir {
    pub spec: SceneSpec,
    pub input: EpisodeInput,
    pub gt: Option<Arc<GroundTruth>>,
}

impl SceneDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let spec: SceneSpec = read_json(&dir.join(SPEC_FILE))?;
        let view: Viewpoint = read_json(&dir.join(VIEW_FILE))?;
        let maps = ViewMaps::load_pngs(dir.join(DEPTH_FILE), dir.join(COLOR_FILE), dir.join(SEG_FILE))?;
        let (gt_path, layout_path) = (dir.join(GT_FILE), dir.join(LAYOUT_FILE));
        let gt = if gt_path.exists() && layout_path.exists() {
            let layout: SceneLayout = read_json(&layout_path)?;
            Some(Arc::new(GroundTruth::new(load_scene(&gt_path)?, layout)?))
        } else {
            None
        };
        Ok(Self {
            spec,
            input: EpisodeInput { maps, view },
            gt,
        })
    }
}

/// `uniform<k>`, `greedy`, `random`, `policy:PATH` or `q:PATH`.
pub fn parse_planner(text: &str, cfg: &Config) -> Result<Planner> {
    if let Some(path) = text.strip_prefix("policy:") {
        return Ok(Planner::ActorCritic(PolicyParams::load(path)?));
    }
    if let Some(path) = text.strip_prefix("q:") {
        return Ok(Planner::DoubleQ(QParams::load(path, cfg.learner.replay_capacity)?.online));
    }
    match text {
        "greedy" => Ok(Planner::Greedy),
        "random" => Ok(Planner::Random),
        _ => text
            .strip_prefix("uniform")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(Planner::Uniform)
            .ok_or_else(|| CliError::Usage(format!("unknown planner `{text}`"))),
    }
}

pub struct CompleteArgs<'a> {
    pub scene: &'a Path,
    pub planner: &'a str,
    pub inpainter: InpainterKind,
    pub mode: Option<Mode>,
    pub out: &'a Path,
}

/// Runs one episode and writes `completion.ply` (the part inside the input
/// frustum), `cloud.ply` (everything), `trace.jsonl` and `summary.json`.
pub fn complete(cfg: &Config, args: &CompleteArgs<'_>) -> Result<EpisodeSummary> {
    let scene = SceneDir::load(args.scene)?;
    let planner = parse_planner(args.planner, cfg)?;
    let mode = args.mode.unwrap_or(if scene.gt.is_some() { Mode::Train } else { Mode::Inference });
    let settings = Arc::new(EnvSettings::from_config(cfg)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (summary, env) =
        run_episode_on(settings, &scene.input, scene.gt.clone(), scene.spec.seed, &planner, args.inpainter, mode, &mut rng)?;
    create_dir(args.out)?;
    save_scene(&env.completion(), args.out.join("completion.ply"))?;
    save_scene(env.cloud(), args.out.join("cloud.ply"))?;
    let mut trace = String::new();
    for t in &summary.trace {
        trace.push_str(&t.to_json_line());
        trace.push('\n');
    }
    write_file(&args.out.join("trace.jsonl"), trace)?;
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `metrics.txt` (one `key=value` per line) and `metrics.json`.
pub fn eval(cfg: &Config, pred: &Path, gt: &Path, out: &Path) -> Result<String> {
    let p = load_scene(pred)?;
    let g = load_scene(gt)?;
    let report = evaluate(&p, &g, &cfg.scene.room(), &cfg.metrics.radii, &cfg.metrics.edges)?;
    create_dir(out)?;
    let text = report.to_text();
    write_file(&out.join("metrics.txt"), &text)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learner {
    A3c,
    Dqn,
}

pub struct TrainArgs<'a> {
    pub learner: Learner,
    pub out: &'a Path,
    pub episodes: Option<usize>,
    pub workers: Option<usize>,
}

/// Trains on `learner.train_scenes` scenes and writes the parameter file
/// and `curve.jsonl`, one record per episode. Returns the parameter path.
pub fn train(cfg: &Config, args: &TrainArgs<'_>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(e) = args.episodes {
        cfg.learner.episodes = e;
    }
    if let Some(w) = args.workers {
        cfg.learner.workers = w;
    }
    cfg.validate()?;
    let settings = Arc::new(EnvSettings::from_config(&cfg)?);
    let scenes = Scenario::suite(&cfg, cfg.learner.train_first_seed, cfg.learner.train_scenes)?;
    create_dir(args.out)?;
    let (path, curve) = match args.learner {
        Learner::A3c => {
            let trained = train_a3c(settings, &scenes, &TrainingOptions::from_config(&cfg.learner, cfg.seed))?;
            let path = args.out.join("policy.bin");
            trained.params.save(&path)?;
            (path, trained.curve)
        }
        Learner::Dqn => {
            let trained = train_dqn(settings, &scenes, &DqnOptions::from_config(&cfg.learner, cfg.seed))?;
            let path = args.out.join("q.bin");
            trained.params.save(&path)?;
            (path, trained.curve)
        }
    };
    let curve_path = args.out.join("curve.jsonl");
    let mut file = fs::File::create(&curve_path).map_err(|e| CliError::io(&curve_path, e))?;
    for r in &curve {
        writeln!(file, "{}", r.to_json_line()).map_err(|e| CliError::io(&curve_path, e))?;
    }
    Ok(path)
}

pub fn gradcheck_report(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for (i, e) in report.per_trial.iter().enumerate() {
        out.push_str(&format!("trial {i}: max rel err {e:.3e}\n"));
    }
    out.push_str(&format!(
        "checked {} derivatives, max rel err {:.3e}, tolerance {GRADCHECK_TOL:.0e}: {}\n",
        report.checked,
        report.max_rel_err,
        if report.passed(GRADCHECK_TOL) { "PASS" } else { "FAIL" }
    ));
    out
}

/// Runs the finite-difference check; fails with a check error when the
/// tolerance is exceeded. `out` receives the JSON report.
pub fn run_gradcheck(cfg: &Config, corrupt: f64, out: Option<&Path>) -> Result<String> {
    let opts = GradcheckOptions {
        seed: cfg.seed,
        temperature: cfg.volume.temperature,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&opts)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    let text = gradcheck_report(&report);
    if report.passed(GRADCHECK_TOL) {
        Ok(text)
    } else {
        Err(CliError::Check(text))
    }
}
