use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rasr_core::dataset::{build_manifest, preselect_references, CachedStore, FsStore};
use rasr_core::embedding::{EncoderRegistry, EncoderSpec};
use rasr_core::metrics::{evaluate, MetricRegistry};
use rasr_core::pipeline::{
    build_reference_index, init_checkpoint, open_index, restore_one, run_ablation,
    save_index_with_encoder, AblationConfig, AblationKind, PipelineRun, PromptSource,
    ReferenceMode,
};
use rasr_core::retrieval::{benchmark_query, synthetic_index};
use rasr_core::training::{train_loop, TrainConfig, Trainer};
use rasr_core::{degrade, rng, DegradationConfig, Image, RasrError, SplitRule};

#[derive(Parser)]
#[command(name = "rasr", version, about = "Retrieval-augmented super-resolution")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "RASR_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefArg {
    Retrieved,
    Random,
    None,
}

impl From<RefArg> for ReferenceMode {
    fn from(r: RefArg) -> Self {
        match r {
            RefArg::Retrieved => ReferenceMode::Retrieved,
            RefArg::Random => ReferenceMode::Random,
            RefArg::None => ReferenceMode::Disabled,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed every DIR/<category>/*.png into a reference index.
    BuildIndex {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "toy")]
        encoder: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k references for a query image as JSON.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        category: Option<String>,
    },
    /// Synthesize LR images from every PNG in a directory.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write each trace as <name>.trace.json.
        #[arg(long)]
        traces: bool,
    },
    /// Partition a category tree and preselect references.
    BuildDataset {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        test: usize,
        #[arg(long, default_value_t = 5)]
        refs: usize,
        #[arg(long)]
        patch_size_train: Option<usize>,
        #[arg(long)]
        patch_size_source: Option<usize>,
        #[arg(long, default_value = "toy")]
        encoder: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// Train the reference branch; writes checkpoints and a JSON-lines log.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Only write a freshly initialized generator to OUT/final.ckpt.
        #[arg(long)]
        init_only: bool,
    },
    /// Restore one LR image or a directory of them.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ref+lr")]
        prompt_source: String,
        #[arg(long, value_enum, default_value = "retrieved")]
        reference: RefArg,
        #[arg(long)]
        category: Option<String>,
        /// Ground-truth directory; enables scoring when LR is a directory.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "psnr,ssim")]
        metrics: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "psnr,ssim")]
        metrics: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write a CSV or JSON table.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        /// Table path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure query latency on a saved or synthetic index.
    BenchIndex {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value_t = 84_991)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
    },
}

fn metric_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect()
}

fn encoder_spec(name: &str, dim: usize, seed: u64) -> EncoderSpec {
    EncoderSpec {
        name: name.to_string(),
        dim,
        seed,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> rasr_core::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| RasrError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn print_json(value: &impl serde::Serialize) -> rasr_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn pngs(dir: &Path) -> rasr_core::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RasrError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn run(cli: Cli) -> rasr_core::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildIndex {
            images,
            encoder,
            dim,
            out,
        } => {
            let index = build_reference_index(&images, &encoder_spec(&encoder, dim, seed))?;
            save_index_with_encoder(&index, &out)?;
            log::info!("indexed {} references into {}", index.len(), out.display());
        }
        Command::Retrieve {
            index,
            query,
            k,
            category,
        } => {
            let index = open_index(&index)?;
            let spec = index.encoder_spec().cloned().unwrap_or_default();
            let q = EncoderRegistry::default().build(&spec)?.encode(&Image::load(&query)?)?;
            print_json(&index.query_filtered(&q, k, category.as_deref())?)?;
        }
        Command::Degrade {
            input,
            out,
            scale,
            config,
            traces,
        } => {
            let mut cfg: DegradationConfig = match &config {
                Some(p) => read_json(p)?,
                None => DegradationConfig::default(),
            };
            if let Some(s) = scale {
                cfg.scale = s;
            }
            for path in pngs(&input)? {
                let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let item_seed = rng::derive_seed(seed, &[rng::hash_str(&name)]);
                let (lr, trace) = degrade(&Image::load(&path)?, &cfg, item_seed)?;
                lr.save(out.join(&name))?;
                if traces {
                    let trace_path = out.join(format!("{name}.trace.json"));
                    rasr_core::io::write_atomic(&trace_path, serde_json::to_string_pretty(&trace)?.as_bytes())?;
                }
            }
        }
        Command::BuildDataset {
            root,
            out,
            train,
            test,
            refs,
            patch_size_train,
            patch_size_source,
            encoder,
            dim,
        } => {
            let mut manifest = build_manifest(&root, seed, &SplitRule { train, test })?;
            if let Some(p) = patch_size_train {
                manifest.patch_size_train = p;
            }
            if let Some(p) = patch_size_source {
                manifest.patch_size_source = p;
            }
            let store = CachedStore::new(FsStore::new(&root));
            let manifest = preselect_references(manifest, &store, &encoder_spec(&encoder, dim, seed), refs)?;
            manifest.save(&out)?;
        }
        Command::Train {
            manifest,
            config,
            out,
            steps,
            resume,
            init_only,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            cfg.generator.seed = seed;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if init_only {
                return init_checkpoint(cfg.generator, &out.join(rasr_core::training::FINAL_CHECKPOINT));
            }
            let manifest_path = manifest
                .ok_or_else(|| RasrError::InvalidInput("--manifest is required for training".into()))?;
            let manifest = rasr_core::DatasetManifest::load(&manifest_path)?;
            let root = manifest
                .root
                .clone()
                .map(PathBuf::from)
                .unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default());
            let store = CachedStore::new(FsStore::new(root));
            let resume = resume.map(Trainer::load).transpose()?;
            train_loop(&manifest, &store, cfg, Some(&out), resume, |e| {
                log::info!("step {} loss {:.6}", e.step, e.loss.total);
            })?;
        }
        Command::Infer {
            ckpt,
            lr,
            index,
            alpha,
            out,
            prompt_source,
            reference,
            category,
            gt,
            report,
            metrics,
            jobs,
        } => {
            let mut run = PipelineRun::new(index, ckpt, lr.clone(), out.clone());
            run.alpha = alpha;
            run.prompt_source = prompt_source.parse::<PromptSource>()?;
            run.reference_mode = reference.into();
            run.category = category;
            run.seed = seed;
            run.metrics = metric_list(&metrics);
            run.jobs = jobs;
            run.gt_dir = gt;
            if lr.is_dir() {
                let r = rasr_core::run_rasr(&run)?;
                match report {
                    Some(p) => r.save(p)?,
                    None => print_json(&r)?,
                }
            } else {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(RasrError::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
                }
                run.input_dir = lr.parent().map(Path::to_path_buf).unwrap_or_default();
                let name = lr.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let index = open_index(&run.index_path)?;
                let state = rasr_core::load_generator(&run.checkpoint_path)?;
                let (img, item) = restore_one(&state, &index, &run, &name)?;
                img.save(&out)?;
                print_json(&item)?;
            }
        }
        Command::Evaluate {
            pred,
            gt,
            metrics,
            out,
        } => {
            let r = evaluate(&pred, &gt, &metric_list(&metrics), &MetricRegistry::default())?;
            match out {
                Some(p) => r.save(p)?,
                None => print_json(&r)?,
            }
        }
        Command::Ablate { kind, config, out } => {
            let kind: AblationKind = kind.parse()?;
            let mut cfg: AblationConfig = read_json(&config)?;
            cfg.run.seed = seed;
            if let Some(t) = cfg.train.as_mut() {
                t.seed = seed;
            }
            let table = run_ablation(kind, &cfg)?;
            let text = if out.extension().is_some_and(|e| e == "json") {
                serde_json::to_string_pretty(&table)?
            } else {
                table.to_csv()
            };
            rasr_core::io::write_atomic(&out, text.as_bytes())?;
        }
        Command::BenchIndex {
            index,
            count,
            dim,
            queries,
        } => {
            let index = match index {
                Some(p) => open_index(&p)?,
                None => synthetic_index(count, dim, seed),
            };
            print_json(&benchmark_query(&index, queries, seed)?)?;
        }
    }
    Ok(())
}

fn exit_code(err: &RasrError) -> u8 {
    match err {
        RasrError::InvalidInput(_) | RasrError::UnknownEncoder(_) => 2,
        RasrError::NonFiniteLoss { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
