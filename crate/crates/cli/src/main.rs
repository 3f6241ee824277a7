use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hotspot::catalog::{Catalog, CatalogError, Generation};
use hotspot::features::{DescriptorVariant, GrayImage, Roi};
use hotspot::harness::{self, Algorithm, EvalOptions, QueryConfig, SynthParams};
use hotspot::matching::{Backend, ScoringFn};
use hotspot_service::AppState;

#[derive(Parser)]
#[command(name = "hotspot", version, about = "Identify individual animals by their coat patterns")]
struct Cli {
    /// Catalog directory.
    #[arg(long, global = true, env = "HS_CATALOG", default_value = "catalog")]
    catalog: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Add images from a directory (one subdirectory per label) or an ingest.json listing.
    Ingest {
        source: PathBuf,
        /// Descriptor variant for a new catalog.
        #[arg(long, default_value = "rootsift")]
        variant: DescriptorVariant,
    },
    /// Build a new index generation from the catalog.
    Index {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Identify the animal in one image.
    Query {
        image: PathBuf,
        /// Region of interest as x,y,w,h (default: whole image).
        #[arg(long)]
        roi: Option<Roi>,
        /// Number of labels printed.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Leave-one-out evaluation over every image whose label has another image.
    Eval {
        /// Build a fresh generation with the given configuration first.
        #[arg(long)]
        build: bool,
        /// Evaluate only the first N eligible queries.
        #[arg(long)]
        max_queries: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "HS_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory of built review UI assets served under /.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    labels: usize,
    #[arg(long, default_value_t = 3)]
    per_label: usize,
    #[arg(long, default_value_t = 1.0)]
    warp: f64,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 384)]
    height: usize,
}

/// `QueryConfig` overrides; unset flags keep the defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Read a JSON QueryConfig; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    k: Option<usize>,
    /// LNBNN, ratio, lnrat or count.
    #[arg(long)]
    delta: Option<ScoringFn>,
    #[arg(long)]
    t_ratio: Option<f64>,
    /// Images spatially reranked, or "all".
    #[arg(long, value_parser = parse_count_or("all"))]
    k_sr: Option<CountOr>,
    #[arg(long)]
    t_sp_frac: Option<f64>,
    #[arg(long)]
    descriptor_variant: Option<DescriptorVariant>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    num_trees: Option<usize>,
    /// Forest check budget, or "exact".
    #[arg(long, value_parser = parse_count_or("exact"))]
    max_checks: Option<CountOr>,
    #[arg(long)]
    seed: Option<u64>,
}

/// A count, or a keyword meaning unbounded.
#[derive(Clone, Copy)]
struct CountOr(Option<usize>);

fn parse_count_or(word: &'static str) -> impl Fn(&str) -> Result<CountOr, String> + Clone {
    move |s| {
        if s.eq_ignore_ascii_case(word) {
            Ok(CountOr(None))
        } else {
            s.parse().map(|n| CountOr(Some(n))).map_err(|e| format!("expected a count or {word:?}: {e}"))
        }
    }
}

impl ConfigArgs {
    /// Defaults, then the generation's backend and variant, then the file,
    /// then flags.
    fn resolve(&self, generation: Option<&Generation>) -> Result<QueryConfig> {
        let mut c = QueryConfig::default();
        if let Some(g) = generation {
            c.backend = g.index.backend();
            c.descriptor_variant = g.variant();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut base = serde_json::to_value(c)?;
            let over: serde_json::Value = serde_json::from_str(&text)?;
            let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) else {
                bail!("{} must hold a JSON object", path.display());
            };
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
            c = serde_json::from_value(base).with_context(|| format!("parsing {}", path.display()))?;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(algorithm, k, delta, t_ratio, t_sp_frac, descriptor_variant, backend, num_trees, seed);
        if let Some(CountOr(v)) = self.k_sr {
            c.k_sr = v;
        }
        if let Some(CountOr(v)) = self.max_checks {
            c.max_checks = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn current_generation(catalog: &Catalog) -> Result<Option<std::sync::Arc<Generation>>> {
    match catalog.load_current_generation() {
        Ok(g) => Ok(Some(g)),
        Err(CatalogError::NoGeneration) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(a) => {
            let params = SynthParams {
                n_labels: a.labels,
                images_per_label: a.per_label,
                warp_magnitude: a.warp,
                noise: a.noise,
                seed: a.seed,
                width: a.width,
                height: a.height,
            };
            let manifest = harness::gen_synthetic(&params, &a.out)?;
            println!("wrote {} images to {}", manifest.images.len(), a.out.display());
        }
        Command::Ingest { source, variant } => {
            let mut catalog = Catalog::open_or_create(&cli.catalog, variant)?;
            let records = harness::ingest(&mut catalog, &source)?;
            println!("ingested {} images; catalog holds {}", records.len(), catalog.images().len());
        }
        Command::Index { config } => {
            let mut catalog = Catalog::open(&cli.catalog)?;
            let c = config.resolve(None)?;
            let g = catalog.build_generation(c.build_params())?;
            println!(
                "generation {}: {} images, {} descriptors, {} backend",
                g.id(),
                g.image_ids().len(),
                g.index.pool().len(),
                g.index.backend()
            );
        }
        Command::Query { image, roi, top, json, config } => {
            let catalog = Catalog::open(&cli.catalog)?;
            let generation = current_generation(&catalog)?.context("no index generation; run `hotspot index`")?;
            let c = config.resolve(Some(&generation))?;
            let img = GrayImage::open(&image)?;
            let roi = roi.unwrap_or_else(|| Roi::full(&img));
            let (result, _) = harness::run_query(&generation, &img, roi, &c)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                println!("{:>4}  {:<24} {:>12}  best image", "rank", "label", "score");
                for (rank, l) in result.labels.iter().take(top).enumerate() {
                    let name = generation.label_name(l.label_id).unwrap_or("?");
                    let best = l.best_image_id.map_or("-".to_string(), |i| i.to_string());
                    println!("{:>4}  {:<24} {:>12.4}  {best}", rank + 1, name, l.score);
                }
                println!("generation {}, {:.3}s", result.generation, result.timing.total_secs);
            }
        }
        Command::Eval { build, max_queries, out, config } => {
            let mut catalog = Catalog::open(&cli.catalog)?;
            let generation = if build {
                let c = config.resolve(None)?;
                Some(catalog.build_generation(c.build_params())?)
            } else {
                current_generation(&catalog)?
            };
            let generation = generation.context("no index generation; run `hotspot index` or pass --build")?;
            let c = config.resolve(Some(&generation))?;
            let report = harness::run_eval(&generation, &c, &EvalOptions { max_queries })?;
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Command::Serve { port, host, static_dir, config } => {
            let catalog = Catalog::open_or_create(&cli.catalog, DescriptorVariant::RootSift)?;
            let generation = current_generation(&catalog)?;
            let c = config.resolve(generation.as_deref())?;
            let state = AppState::new(catalog, c.build_params(), static_dir)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(hotspot_service::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
