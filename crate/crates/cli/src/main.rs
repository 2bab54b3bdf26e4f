use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use norppa_core::encoder::{load_embedding, save_embedding};
use norppa_core::features::{load_descriptors, save_descriptors, DescriptorSet};
use norppa_core::geoverify::{render_svg, SvgLayout};
use norppa_core::harness::{
    build_index_from_manifest, confirm_match, embedding_to_f64, eval_index, index_embeddings, prepare_descriptors,
    prepare_pattern_masked, query_and_verify, run_eval, train_vocabulary, verify_matches, verify_pair, ConfirmRequest,
    EmbeddedItem, Journal, Manifest, Pipeline, PipelineConfig, PipelineInput, PipelineOutput, Split,
};
use norppa_core::index::{load_index, save_index, IdentityIndex};
use norppa_core::raster::PatternImage;
use norppa_core::vocab::{load_vocabulary, save_vocabulary, Vocabulary};
use norppa_service::{
    config_body, health_body, images_body, individuals_body, journal_path, AppState, ServiceSettings, DEFAULT_PORT,
    ENV_CONFIG, ENV_INDEX, ENV_PORT,
};

type Index = IdentityIndex<f64>;

#[derive(Parser)]
#[command(name = "norppa", version, about = "Re-identify individuals from their fur patterns")]
struct Cli {
    /// Pipeline config (JSON). Defaults are used when absent.
    #[arg(long, global = true, env = ENV_CONFIG)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize, clean and stroke-normalize a pattern image; writes a PGM mask.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        /// Segmentation mask (PGM/PNG, nonzero = animal) restricting the pattern.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        target_stroke: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect and describe affine regions; writes a descriptor file.
    Extract {
        /// Pattern image or raster.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_regions: Option<usize>,
    },
    /// Fit PCA and the GMM vocabulary on every descriptor file in a directory.
    TrainVocab {
        #[arg(long)]
        desc_dir: PathBuf,
        #[arg(long)]
        pca_dim: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode descriptor files into normalized embeddings (`<stem>.nrpf`).
    Encode {
        /// Vocabulary file; alternatively take the models from `--index`.
        #[arg(long, required_unless_present = "index")]
        vocab: Option<PathBuf>,
        #[arg(long, conflicts_with = "vocab")]
        index: Option<PathBuf>,
        /// Descriptor file or directory of them.
        #[arg(long)]
        desc: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Keep final embeddings even if the index has a KPCA model.
        #[arg(long)]
        no_kpca: bool,
    },
    #[command(subcommand)]
    Index(IndexCommand),
    /// Top-k evaluation of a manifest's query split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate against this index; otherwise one is built from the database split.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        kmax: Option<usize>,
        /// Write report JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write report.json, queries.csv and curve.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Geometric verification of one descriptor pair; writes the overlay JSON.
    Verify {
        #[arg(long)]
        query_desc: PathBuf,
        #[arg(long)]
        db_desc: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Add an expert-confirmed query image to the index (journaled).
    Confirm {
        #[command(flatten)]
        index: IndexArg,
        #[arg(long)]
        query_image_id: String,
        #[arg(long)]
        individual_id: String,
        /// The individual is not in the database yet.
        #[arg(long)]
        new: bool,
        #[arg(long)]
        embedding: PathBuf,
        /// Query descriptors, kept so later matches against this image can be verified.
        #[arg(long)]
        desc: Option<PathBuf>,
    },
    /// List individuals, or the images of one.
    Individuals {
        #[command(flatten)]
        index: IndexArg,
        #[arg(long)]
        id: Option<String>,
    },
    /// Index summary.
    Health {
        #[command(flatten)]
        index: IndexArg,
    },
    /// Print the effective config and its hash (from `--config`, `--index`, or defaults).
    Config {
        #[arg(long)]
        index: Option<PathBuf>,
        /// Print only the hash.
        #[arg(long)]
        hash: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[command(flatten)]
        index: IndexArg,
        #[arg(long, env = ENV_PORT, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build an index from a manifest's database split.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<image-id>.nrpf` embeddings; otherwise descriptors are encoded here.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Vocabulary; otherwise the manifest's, or one trained on the database split.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ranked, verified candidates for one query.
    Query {
        #[command(flatten)]
        index: IndexArg,
        /// Pattern image, raster or descriptor file; runs the full pipeline.
        #[arg(long = "in", required_unless_present = "embedding", conflicts_with = "embedding")]
        input: Option<PathBuf>,
        /// Precomputed embedding.
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Query descriptors for verification with `--embedding`.
        #[arg(long, requires = "embedding")]
        desc: Option<PathBuf>,
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long)]
        image_id: Option<String>,
    },
}

#[derive(Args)]
struct IndexArg {
    #[arg(long = "index", env = ENV_INDEX)]
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let explicit = match &cli.config {
        Some(p) => Some(PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?),
        None => None,
    };
    let config = || explicit.clone().unwrap_or_default();
    match cli.command {
        Command::Preprocess { input, mask, target_stroke, out } => {
            let mut config = config();
            if let Some(t) = target_stroke {
                config.preprocess.target_stroke = t;
                config.validate()?;
            }
            let input = PipelineInput::from_path(&input)?;
            let seal = mask.map(PatternImage::load).transpose()?;
            let pattern = prepare_pattern_masked(&config, &input, seal.as_ref())?;
            pattern.save_pgm(&out)?;
            print_json(&json!({
                "image-id": input.image_id(),
                "width": pattern.width(),
                "height": pattern.height(),
                "foreground": pattern.foreground_count(),
            }))
        }
        Command::Extract { input, out, max_regions } => {
            let mut config = config();
            if let Some(n) = max_regions {
                config.detector.max_regions = n;
            }
            let (set, _) = prepare_descriptors(&config, &PipelineInput::from_path(&input)?)?;
            save_descriptors(&set, &out)?;
            print_json(&json!({ "image-id": set.image_id, "descriptors": set.len(), "dim": set.dim() }))
        }
        Command::TrainVocab { desc_dir, pca_dim, k, seed, out } => {
            let mut config = config();
            if let Some(d) = pca_dim {
                config.vocab.pca_dim = d;
            }
            if let Some(k) = k {
                config.vocab.components = k;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            config.validate()?;
            let sets = descriptor_files(&desc_dir)?
                .iter()
                .map(|p| load_descriptors(p).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            let vocab: Vocabulary<f64> = train_vocabulary(&config, &sets)?;
            save_vocabulary(&vocab, &out)?;
            print_json(&json!({
                "vocab-id": vocab.id().to_string(),
                "components": vocab.gmm.components(),
                "pca-dim": vocab.gmm.dim(),
                "training-images": sets.len(),
            }))
        }
        Command::Encode { vocab, index, desc, out, no_kpca } => {
            let mut pipeline = match (vocab, index) {
                (Some(v), _) => Pipeline::new(config(), load_vocabulary::<f64>(v)?, None),
                (None, Some(i)) => open_index(&i, explicit.as_ref())?.1,
                (None, None) => unreachable!("clap requires one"),
            };
            if no_kpca {
                pipeline.kpca = None;
            }
            let files = if desc.is_dir() { descriptor_files(&desc)? } else { vec![desc] };
            std::fs::create_dir_all(&out)?;
            let mut written = Vec::new();
            for f in &files {
                let set = load_descriptors(f).with_context(|| f.display().to_string())?;
                let fv = pipeline.embed(&set).with_context(|| f.display().to_string())?;
                let path = out.join(format!("{}.nrpf", file_stem(f)));
                save_embedding(&fv, &path)?;
                written.push(path.display().to_string());
            }
            print_json(&json!({ "written": written }))
        }
        Command::Index(IndexCommand::Build { manifest, embeddings, vocab, out }) => {
            let config = config();
            let mut manifest = Manifest::load(&manifest)?;
            if let Some(v) = vocab {
                manifest.vocabulary = Some(std::path::absolute(v)?.display().to_string());
            }
            let (index, skipped) = match embeddings {
                Some(dir) => (index_from_embeddings(&config, &manifest, &dir)?, Vec::new()),
                None => {
                    let dir = std::path::absolute(with_suffix(&out, ".descriptors"))?;
                    build_index_from_manifest::<f64>(&config, &manifest, Some(&dir))?
                }
            };
            save_index(&index, &out)?;
            let mut body = health_body(&index, &config.hash());
            body["skipped"] = serde_json::to_value(skipped)?;
            print_json(&body)
        }
        Command::Index(IndexCommand::Query { index, input, embedding, desc, k, image_id }) => {
            let (idx, pipeline) = open_index(&index.path, explicit.as_ref())?;
            let k = k.unwrap_or(pipeline.config.query.k);
            let base = index.path.parent();
            let result = match (input, embedding) {
                (Some(input), _) => {
                    let mut input = PipelineInput::from_path(&input)?;
                    if let Some(id) = image_id {
                        input = input.with_image_id(id);
                    }
                    let mut config = pipeline.config.clone();
                    config.query.k = k;
                    query_and_verify(&idx, &config, &input, base)?
                }
                (None, Some(e)) => {
                    let fv = pipeline.to_index_space(load_embedding(&e)?)?;
                    let mut descriptors = match desc {
                        Some(d) => load_descriptors(d)?,
                        None => DescriptorSet::new("", Vec::new()),
                    };
                    descriptors.image_id = image_id.unwrap_or_else(|| file_stem(&e));
                    let output = PipelineOutput { embedding: fv, descriptors, pattern: None };
                    verify_matches(&pipeline, &idx, &output, k, base)?
                }
                (None, None) => unreachable!("clap requires one"),
            };
            print_json(&serde_json::to_value(result)?)
        }
        Command::Eval { manifest, index, kmax, report, out_dir } => {
            let manifest = Manifest::load(&manifest)?;
            let output = match index {
                Some(path) => {
                    let (idx, pipeline) = open_index(&path, explicit.as_ref())?;
                    eval_index(&idx, &pipeline.config, &manifest, kmax.unwrap_or(pipeline.config.query.k_max))?
                }
                None => {
                    let mut config = config();
                    if let Some(k) = kmax {
                        config.query.k_max = k;
                    }
                    run_eval::<f64>(&config, &manifest)?
                }
            };
            if let Some(dir) = &out_dir {
                output.write(dir)?;
            }
            match &report {
                Some(p) => std::fs::write(p, output.to_json()).with_context(|| p.display().to_string())?,
                None if out_dir.is_none() => println!("{}", output.to_json()),
                None => {}
            }
            let curve: Vec<String> = output.report.accuracy.iter().map(|a| format!("{a:.4}")).collect();
            eprintln!("queries {}  top-k {}", output.report.queries.len(), curve.join(" "));
            Ok(())
        }
        Command::Verify { query_desc, db_desc, percentile, out, svg } => {
            let mut config = config();
            if let Some(p) = percentile {
                config.verify.percentile = p;
                config.validate()?;
            }
            let q = load_descriptors(&query_desc)?;
            let d = load_descriptors(&db_desc)?;
            let (hom, overlay) = verify_pair(&config, &q, &d).context("geoverify")?;
            if let Some(path) = svg {
                std::fs::write(&path, render_svg(&overlay, &SvgLayout::default()))?;
            }
            let body = serde_json::to_value(&overlay)?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_string_pretty(&body)?)?,
                None => print_json(&body)?,
            }
            eprintln!("inliers {}", hom.inlier_count);
            Ok(())
        }
        Command::Confirm { index, query_image_id, individual_id, new, embedding, desc } => {
            let (mut idx, pipeline) = open_index(&index.path, explicit.as_ref())?;
            let mut journal = Journal::open(journal_path(&index.path))?;
            journal.replay(&mut idx)?;
            let fv = pipeline.to_index_space(load_embedding(&embedding)?)?;
            let descriptor_ref = desc.map(|d| std::path::absolute(d).map(|p| p.display().to_string())).transpose()?;
            let request = ConfirmRequest {
                query_image_id,
                individual_id,
                new_individual: new,
                embedding: embedding_to_f64(fv.values()),
                descriptor_ref,
            };
            let entry = confirm_match(&mut idx, Some(&mut journal), &request)?;
            save_index(&idx, &index.path)?;
            print_json(&json!({
                "config-hash": pipeline.config.hash(),
                "entry": entry,
                "individual-count": idx.individuals().len(),
                "image-count": idx.len(),
            }))
        }
        Command::Individuals { index, id } => {
            let (idx, pipeline) = open_index(&index.path, explicit.as_ref())?;
            let hash = pipeline.config.hash();
            match id {
                Some(id) => {
                    print_json(&images_body(&idx, &hash, &id).ok_or_else(|| anyhow!("unknown individual {id}"))?)
                }
                None => print_json(&individuals_body(&idx, &hash)),
            }
        }
        Command::Health { index } => {
            let (idx, pipeline) = open_index(&index.path, explicit.as_ref())?;
            print_json(&health_body(&idx, &pipeline.config.hash()))
        }
        Command::Config { index, hash } => {
            let config = match (&explicit, index) {
                (Some(c), _) => c.clone(),
                (None, Some(i)) => PipelineConfig::from_value(&load_index::<f64>(&i)?.config)?,
                (None, None) => PipelineConfig::default(),
            };
            if hash {
                println!("{}", config.hash());
                Ok(())
            } else {
                print_json(&config_body(&config))
            }
        }
        Command::Serve { index, port, host } => {
            let settings = ServiceSettings { index_path: index.path, config: explicit, state_dir: None };
            let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
            let state = AppState::open(settings)?;
            eprintln!("listening on http://{addr} (config {})", state.config_hash());
            tokio::runtime::Runtime::new()?.block_on(norppa_service::serve(state, addr))?;
            Ok(())
        }
    }
}

/// Index with journaled confirmations applied, plus its pipeline. The config
/// comes from `--config` when given and must match the index.
fn open_index(path: &Path, config: Option<&PipelineConfig>) -> Result<(Index, Pipeline<f64>)> {
    let mut index: Index = load_index(path).with_context(|| format!("index {}", path.display()))?;
    let config = match config {
        Some(c) => c.clone(),
        None => PipelineConfig::from_value(&index.config)?,
    };
    let pipeline = Pipeline::from_index(&index, &config)?;
    Journal::open(journal_path(path))?.replay(&mut index)?;
    Ok((index, pipeline))
}

fn index_from_embeddings(config: &PipelineConfig, manifest: &Manifest, dir: &Path) -> Result<Index> {
    let vocab_path =
        manifest.vocabulary.as_ref().ok_or_else(|| anyhow!("--embeddings needs a vocabulary (--vocab)"))?;
    let vocabulary = load_vocabulary::<f64>(manifest.resolve(vocab_path))?;
    let mut items = Vec::new();
    for e in manifest.split(Split::Database) {
        let path = dir.join(format!("{}.nrpf", e.image_id));
        items.push(EmbeddedItem {
            individual_id: e.individual_id.clone(),
            image_id: e.image_id.clone(),
            embedding: load_embedding(&path).with_context(|| path.display().to_string())?,
            descriptor_ref: e.descriptor_path.as_ref().map(|p| manifest.resolve(p).display().to_string()),
        });
    }
    if items.is_empty() {
        bail!("manifest has no database entries");
    }
    Ok(index_embeddings(config, vocabulary, items)?)
}

fn descriptor_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "nrpd"));
    files.sort();
    if files.is_empty() {
        bail!("no .nrpd files in {}", dir.display());
    }
    Ok(files)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}
