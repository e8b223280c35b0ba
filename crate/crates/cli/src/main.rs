use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pictor::dataset::{class_distribution, distribution_csv, DiskSource, Manifest, Split, Task};
use pictor::descriptors::{self, DescriptorKind};
use pictor::imaging::ImageBuffer;
use pictor::net::PaintingNet;
use pictor::nn::checkpoint::Checkpoint;
use pictor::probe::{self, NetworkOutcomes};
use pictor::retrieval::{self, sha256_hex};
use pictor::synth::{SynthConfig, SynthCorpus};
use pictor::train::{self, FeatureCache, RunConfig};
use pictor_server::{AppState, ServerConfig, Service};

#[derive(Parser)]
#[command(name = "pictor", version, about = "Multitask painting categorization and similarity search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a hand-crafted descriptor for one or more images.
    Extract {
        #[arg(long)]
        descriptor: DescriptorKind,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metadata tables and manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Render the synthetic texture/palette/layout corpus to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1200)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Shorter side of every rendered image.
        #[arg(long, default_value_t = 512)]
        min_side: usize,
    },
    /// Train a network; writes best.ckpt, last.ckpt, run.cfg and train_log.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean per-class accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the full report (confusions, id lists) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Linear classifier on a descriptor (or on a checkpoint's pooled features with `pooled`).
    Probe {
        #[arg(long)]
        descriptor: String,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: ProbeArgs,
    },
    /// Network mistakes recovered by descriptor probes, per task.
    Residuals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        descriptors: Vec<DescriptorKind>,
        #[command(flatten)]
        common: ProbeArgs,
    },
    /// Embedding indices.
    #[command(subcommand)]
    Index(IndexCommand),
    /// HTTP API for classification and similarity search.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory images are read from (defaults to the manifest root).
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Built UI assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = pictor_server::DEFAULT_MAX_UPLOAD)]
        max_upload: usize,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for cached descriptor values.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Parse, filter to a per-class floor across all three tasks, and split 70/30.
    Build {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image directory recorded in the manifest (defaults to the CSV's directory).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Write `<task>_distribution.csv` files here.
        #[arg(long)]
        distributions: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "train,test")]
        splits: Vec<Split>,
    },
}

fn load_net(path: &Path) -> Result<(PaintingNet, Option<DescriptorKind>, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_reader(bytes.as_slice())?;
    let inject = serde_json::from_value(ck.meta["extra"]["inject"].clone()).unwrap_or(None);
    Ok((PaintingNet::from_checkpoint(&ck)?, inject, sha256_hex(&bytes)))
}

fn source_for(manifest: &Manifest) -> DiskSource {
    DiskSource { root: manifest.root.clone() }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract { descriptor, input, out } => {
            let mut feats = Vec::with_capacity(input.len());
            for p in &input {
                let img = ImageBuffer::open(p).with_context(|| format!("reading {}", p.display()))?;
                feats.push(descriptor.extract(&img)?);
            }
            descriptors::write_records(std::fs::File::create(&out)?, &feats)?;
            println!("wrote {} {} record(s) of dim {} to {}", feats.len(), descriptor, descriptor.dim(), out.display());
        }
        Command::Dataset(DatasetCommand::Build { csv, min_per_class, seed, out, root, distributions }) => {
            let root = root.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            let f = std::fs::File::open(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let m = Manifest::build(f, root, min_per_class, seed)?;
            m.save(&out)?;
            let [a, s, g] = m.num_classes();
            println!(
                "{} paintings ({} train / {} test), {a} artists, {s} styles, {g} genres; {} rows dropped for missing labels",
                m.records.len(),
                m.split(Split::Train).len(),
                m.split(Split::Test).len(),
                m.dropped_missing_labels
            );
            if let Some(dir) = distributions {
                std::fs::create_dir_all(&dir)?;
                for t in Task::ALL {
                    let csv = distribution_csv(&class_distribution(&m.records, t));
                    std::fs::write(dir.join(format!("{}_distribution.csv", t.name())), csv)?;
                }
            }
        }
        Command::Synth { out, count, seed, min_side } => {
            if min_side == 0 {
                bail!("--min-side must be positive");
            }
            let corpus = SynthCorpus::new(SynthConfig { count, seed, min_side, ..SynthConfig::default() });
            corpus.write_to_dir(&out)?;
            println!("wrote {count} images and metadata.csv to {}", out.display());
        }
        Command::Train { config, manifest, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let m = Manifest::load(&manifest)?;
            let outcome = train::train(&cfg, &m, &source_for(&m), Some(&out), &mut ())?;
            if let Some(r) = outcome.last_report {
                println!("Artist | Style | Genre | Average");
                println!("{}", r.table_row());
            }
            println!("best average {:.4}; checkpoints in {}", outcome.best_average, out.display());
        }
        Command::Eval { checkpoint, manifest, split, report } => {
            let (net, inject, _) = load_net(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let cache = FeatureCache::new(None);
            let r = train::evaluate(&net, &m, &source_for(&m), split, inject.map(|k| (k, &cache)))?;
            println!("Artist | Style | Genre | Average");
            println!("{}", r.table_row());
            if let Some(p) = report {
                std::fs::write(p, serde_json::to_string_pretty(&r)?)?;
            }
        }
        Command::Probe { descriptor, task, manifest, checkpoint, common } => {
            let m = Manifest::load(&manifest)?;
            let src = source_for(&m);
            let cache = FeatureCache::new(common.cache_dir);
            let r = if descriptor == "pooled" {
                let ck = checkpoint.context("`--descriptor pooled` needs --checkpoint")?;
                let (net, inject, _) = load_net(&ck)?;
                probe::pooled_probe(&net, &m, &src, task, inject.map(|k| (k, &cache)), common.seed)?
            } else {
                let kind: DescriptorKind = descriptor.parse()?;
                probe::linear_probe(kind, &m, &src, task, &cache, common.seed)?
            };
            println!("{descriptor} {task}: mean per-class accuracy {:.4} (lambda {})", r.accuracy, r.lambda);
        }
        Command::Residuals { checkpoint, manifest, descriptors, common } => {
            let (net, inject, _) = load_net(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let src = source_for(&m);
            let cache = FeatureCache::new(common.cache_dir);
            let preds = train::predict(&net, &m, &src, &m.split(Split::Test), inject.map(|k| (k, &cache)))?;
            let outcomes = NetworkOutcomes::from_predictions(&preds);
            let mut probes = Vec::new();
            for kind in &descriptors {
                let mut maps: [HashMap<String, usize>; 3] = Default::default();
                for t in Task::ALL {
                    let r = probe::linear_probe(*kind, &m, &src, t, &cache, common.seed)?;
                    maps[t.index()] = r.predictions.into_iter().collect();
                }
                probes.push((kind.to_string(), maps));
            }
            let errors = outcomes.error_counts();
            println!("network errors: artist {} style {} genre {}", errors[0], errors[1], errors[2]);
            println!("descriptor,artist,style,genre,total");
            for r in probe::residual_error_analysis(&outcomes, &probes) {
                println!("{},{},{},{},{}", r.probe, r.per_task[0], r.per_task[1], r.per_task[2], r.total);
            }
        }
        Command::Index(IndexCommand::Build { checkpoint, manifest, out, splits }) => {
            let (net, inject, hash) = load_net(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let cache = FeatureCache::new(None);
            let idx = retrieval::build_index(&net, &hash, &m, &source_for(&m), &splits, inject.map(|k| (k, &cache)))?;
            idx.save(&out)?;
            println!("indexed {} paintings (dims {:?}) into {}", idx.len(), idx.dims, out.display());
        }
        Command::Serve { addr, index, checkpoint, manifest, image_root, static_dir, max_upload } => {
            if max_upload == 0 {
                bail!("--max-upload must be positive");
            }
            let service = Service::load(&checkpoint, &index, &manifest, image_root)?;
            let state = Arc::new(AppState::new(service));
            let cfg = ServerConfig { max_upload_bytes: max_upload, static_dir };
            tokio::runtime::Runtime::new()?.block_on(pictor_server::serve(addr, state, cfg))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
