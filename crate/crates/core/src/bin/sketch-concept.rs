use clap::{Args, Parser, Subcommand};
use sketch_concept::inference::Sampling;
use sketch_concept::platform::commands::{self, SketchArgs, SynthOptions};
use sketch_concept::platform::{server, Config, ConceptStore};
use sketch_concept::trainer::{AblationFlags, Concept};
use sketch_concept::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sketch-concept", version, about = "Learn sketch concepts and edit them with dual sketches")]
struct Cli {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base archive: store hash or file path (overrides `paths.base`).
    #[arg(long, global = true)]
    base: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Sketch {
    /// Stroke JSON file.
    #[arg(long)]
    sketch: PathBuf,
    /// Foreground mask PNG; the contour hull when omitted.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct Gen {
    /// Stored concept id.
    #[arg(long)]
    concept: String,
    #[command(flatten)]
    sketch: Sketch,
    #[arg(long)]
    prompt: String,
    /// Denoising steps (overrides `sampling.steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the base model on the procedural corpus.
    Pretrain,
    /// Write synthetic concept datasets.
    SynthData {
        #[arg(long, default_value_t = 3)]
        concepts: usize,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 6)]
        edits: usize,
        /// Image size; the base's working size by default.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Learn a concept from a dataset directory.
    Train {
        /// Concept id; the dataset's id by default.
        #[arg(long)]
        concept: Option<String>,
        /// Dataset directory with `concept.json`.
        #[arg(long)]
        pairs: PathBuf,
        /// Ablations, comma separated (overrides `flags`).
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Generate a concept following a sketch.
    Generate(Gen),
    /// Regenerate a masked region of an image.
    Edit {
        #[command(flatten)]
        gen: Gen,
        /// Image to edit.
        #[arg(long)]
        image: PathBuf,
        /// Region to regenerate; the sketch mask when omitted.
        #[arg(long)]
        blend_mask: Option<PathBuf>,
    },
    /// Edit an image of one concept using another concept's token and encoders.
    Transfer {
        #[command(flatten)]
        gen: Gen,
        /// Concept the image shows.
        #[arg(long)]
        target: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        blend_mask: Option<PathBuf>,
    },
    /// Compose several concepts, each with its own sketch.
    Multi {
        #[arg(long, required = true)]
        concept: Vec<String>,
        #[arg(long, required = true)]
        sketch: Vec<PathBuf>,
        /// Masks in concept order; all or none.
        #[arg(long)]
        mask: Vec<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Keep the concept's geometry, take appearance from a prompt without [v].
    Style(Gen),
    /// Evaluate concept variants on datasets.
    Bench {
        /// `concept.json`, dataset directory or directory of datasets.
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated variants; `a+b` combines ablations.
        #[arg(long, default_value = "full")]
        variants: String,
        /// Train variants missing from the store.
        #[arg(long)]
        train: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

struct Env {
    cfg: Config,
    store: ConceptStore,
    out: PathBuf,
    base: String,
}

impl Env {
    fn base(&self) -> Result<sketch_concept::backbone::BaseModel> {
        self.store.resolve_base(&self.base)
    }

    fn concept(&self, id: &str, base: &sketch_concept::backbone::BaseModel) -> Result<Concept> {
        self.store.load_concept(id, None, base)
    }

    fn sampling(&self, steps: Option<usize>) -> Sampling {
        Sampling { steps: steps.unwrap_or(self.cfg.sampling.steps), seed: self.cfg.sampling.seed }
    }
}

fn parse_variants(s: &str) -> Result<Vec<AblationFlags>> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(AblationFlags::parse).collect()
}

fn run(cli: Cli) -> Result<(String, Vec<PathBuf>, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.corpus.seed = s;
        cfg.pretrain.seed = s;
        cfg.stage1.seed = s;
        cfg.stage2.seed = s.wrapping_add(1);
        cfg.sampling.seed = s;
        cfg.bench.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let store = ConceptStore::from_env(cfg.paths.store.as_deref())?;
    let base = cli.base.clone().unwrap_or_else(|| cfg.paths.base.clone());
    let env = Env { cfg, store, out, base };
    let seed = cli.seed.unwrap_or(env.cfg.sampling.seed);
    let (name, files) = match cli.cmd {
        Cmd::Pretrain => ("pretrain", commands::pretrain(&env.cfg, &env.store, &env.out)?.1),
        Cmd::SynthData { concepts, pairs, edits, size } => {
            let size = size.unwrap_or(env.cfg.pretrain.denoiser.size);
            ("synth-data", commands::synth_data(&env.out, &SynthOptions { concepts, pairs, edits, size, seed })?)
        }
        Cmd::Train { concept, pairs, ablate } => {
            let base = env.base()?;
            let mut ds = sketch_concept::sketchrep::manifest::load_concept_dir(&pairs)?;
            if let Some(id) = concept {
                ds.manifest.concept_id = id;
            }
            let flags = match ablate {
                Some(a) => AblationFlags::parse(&a)?,
                None => env.cfg.flags,
            };
            ("train", commands::train(&env.cfg, &env.store, &base, &ds, flags, &env.out)?.1)
        }
        Cmd::Generate(g) => {
            let base = env.base()?;
            let c = env.concept(&g.concept, &base)?;
            let sk = SketchArgs { strokes: &g.sketch.sketch, mask: g.sketch.mask.as_deref() };
            ("generate", commands::generate(&base, &c, &sk, &g.prompt, env.sampling(g.steps), &env.out)?)
        }
        Cmd::Edit { gen: g, image, blend_mask } => {
            let base = env.base()?;
            let c = env.concept(&g.concept, &base)?;
            let sk = SketchArgs { strokes: &g.sketch.sketch, mask: g.sketch.mask.as_deref() };
            ("edit", commands::edit(&base, &c, &image, &sk, blend_mask.as_deref(), &g.prompt, env.sampling(g.steps), &env.out)?)
        }
        Cmd::Transfer { gen: g, target, image, blend_mask } => {
            let base = env.base()?;
            let source = env.concept(&g.concept, &base)?;
            let target = env.concept(&target, &base)?;
            let sk = SketchArgs { strokes: &g.sketch.sketch, mask: g.sketch.mask.as_deref() };
            ("transfer", commands::transfer(&base, &target, &source, &image, &sk, blend_mask.as_deref(), &g.prompt, env.sampling(g.steps), &env.out)?)
        }
        Cmd::Multi { concept, sketch, mask, prompt, steps } => {
            if !mask.is_empty() && mask.len() != sketch.len() {
                return Err(Error::InvalidArgument("give a mask for every sketch or none".into()));
            }
            let base = env.base()?;
            let cs = concept.iter().map(|id| env.concept(id, &base)).collect::<Result<Vec<_>>>()?;
            let sks: Vec<SketchArgs> = sketch.iter().enumerate().map(|(i, s)| SketchArgs { strokes: s, mask: mask.get(i).map(PathBuf::as_path) }).collect();
            ("multi", commands::multi(&base, &cs, &sks, prompt.as_deref(), env.sampling(steps), &env.out)?)
        }
        Cmd::Style(g) => {
            let base = env.base()?;
            let c = env.concept(&g.concept, &base)?;
            let sk = SketchArgs { strokes: &g.sketch.sketch, mask: g.sketch.mask.as_deref() };
            ("style", commands::style(&base, &c, &sk, &g.prompt, env.sampling(g.steps), &env.out)?)
        }
        Cmd::Bench { manifest, variants, train } => {
            let base = env.base()?;
            let ds = commands::load_datasets(&manifest)?;
            let v = parse_variants(&variants)?;
            ("bench", commands::bench(&env.cfg, &env.store, &base, &ds, &v, train, &env.out)?.1)
        }
        Cmd::Serve { host, port } => {
            let base = env.base()?;
            let mut sc = env.cfg.server.clone();
            sc.host = host.unwrap_or(sc.host);
            sc.port = port.unwrap_or(sc.port);
            server::serve_blocking(&sc, server::AppState::new(base, env.store.clone(), env.cfg.clone()))?;
            ("serve", Vec::new())
        }
    };
    Ok((name.to_string(), files, env.out))
}

fn write_timings(out: &Path, command: &str, seconds: f64) {
    let body = serde_json::json!({ "command": command, "seconds": seconds });
    if std::fs::create_dir_all(out).is_ok() {
        let _ = std::fs::write(out.join("timings.json"), format!("{body}\n"));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok((name, files, out)) => {
            for f in &files {
                println!("{}", f.display());
            }
            write_timings(&out, &name, start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
