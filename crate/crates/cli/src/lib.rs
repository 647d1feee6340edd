//! Command-line driver: calibration, attack campaigns, analysis, the
//! labeling server and image rendering.

pub mod analyze;
pub mod attack;
pub mod config;
pub mod failure;
pub mod images;
pub mod records;

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use latprobe_core::archive::{load_archive, save_archive};
use latprobe_core::fixtures;
use latprobe_core::sigma::calibrate;
use latprobe_labeling::{ImageItem, LabelStore, StoreConfig, DEFAULT_PANEL_SIZE};
use serde_json::json;

use crate::analyze::{run_analyze, AnalyzeOptions};
use crate::attack::run_attack;
use crate::config::{Campaign, Prepared};
use crate::failure::Failure;
use crate::records::read_records;

#[derive(Debug, Parser)]
#[command(name = "latprobe", version, about = "Latent-activation perturbation campaigns")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Campaign config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (tuple seed for attack, sampling seed for calibrate)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random-weight generator/classifier pair and a campaign config
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Tuple count written to the config
        #[arg(long, default_value_t = 50)]
        tuples: usize,
    },
    /// Estimate per-neuron sigma and store it in the generator archive
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Number of latent samples, overriding the config
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run (or resume) the attack campaign
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Curves, mean-magnitude table and tradeoff counts
    Analyze {
        /// Campaign config; its records file is analysed unless --records is given
        #[arg(long)]
        config: Option<PathBuf>,
        /// Records files (JSONL)
        #[arg(long)]
        records: Vec<PathBuf>,
        /// Dispositions JSON (as served by the labeling API)
        #[arg(long)]
        dispositions: Option<PathBuf>,
        #[arg(long, default_value_t = latprobe_core::analysis::DEFAULT_GROUP_SIZE)]
        group_size: usize,
        /// Comma-separated ascending bounds for the tradeoff counts
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Without dispositions: only count successes up to this magnitude
        #[arg(long)]
        max_magnitude: Option<f64>,
        /// Allow records from different configs
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the labeling API over the campaign's success records
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Judge token; repeat for each judge
        #[arg(long = "judge")]
        judges: Vec<String>,
        /// File with one judge token per line
        #[arg(long)]
        judges_file: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PANEL_SIZE)]
        panel: usize,
    },
    /// Write dispositions.json from the vote log
    Tally {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_PANEL_SIZE)]
        panel: usize,
    },
    /// PNG triples (unperturbed, perturbed, difference) of success records
    Render {
        #[command(flatten)]
        common: Common,
        /// Difference amplification
        #[arg(long, default_value_t = 10.0)]
        scale: f32,
        /// Rows in grid.png
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
}

fn campaign(common: &Common) -> Result<Campaign, Failure> {
    let mut c = Campaign::load(&common.config)?;
    if let Some(out) = &common.out {
        c.config.out = std::path::absolute(out)?;
    }
    Ok(c)
}

fn prepared(common: &Common) -> Result<Prepared, Failure> {
    let mut c = campaign(common)?;
    if let Some(seed) = common.seed {
        c.config.tuples.seed = seed;
    }
    Prepared::open(c)
}

fn read_judges(judges: &[String], file: Option<&Path>) -> Result<Vec<String>, Failure> {
    let mut out = judges.to_vec();
    if let Some(f) = file {
        let text = fs::read_to_string(f).map_err(|e| Failure::usage(format!("cannot read {}: {e}", f.display())))?;
        out.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    Ok(out)
}

fn make_fixture(out: &Path, seed: u64, tuples: usize) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    let generator = fixtures::mnist_generator(seed)?;
    let classifier = fixtures::center_classifier(fixtures::mnist_classifier(seed + 4)?, &generator, 512, seed)?;
    save_archive(out.join("generator.lprobe"), &generator, None)?;
    save_archive(out.join("classifier.lprobe"), &classifier, None)?;
    let config = json!({
        "generator": "generator.lprobe",
        "classifiers": [{"name": "fixture", "path": "classifier.lprobe"}],
        "tuples": {"count": tuples, "seed": 1},
        "labels": "predicted",
        "profile": "imagenet",
        "subsets": {"first-half": [0, 1], "last-half": [2, 3], "all": [0, 1, 2, 3]},
        "sigma": {"samples": 256, "seed": 3, "floor": 1e-6},
        "class_names": (0..fixtures::MNIST_CLASSES).map(|k| k.to_string()).collect::<Vec<_>>(),
        "workers": 4,
        "out": "run"
    });
    fs::write(out.join("campaign.json"), serde_json::to_string_pretty(&config)?)?;
    println!("wrote fixture to {}", out.display());
    Ok(())
}

fn run_command(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::MakeFixture { out, seed, tuples } => make_fixture(&out, seed, tuples),
        Command::Calibrate { common, samples } => {
            let c = campaign(&common)?;
            let mut settings = c.config.sigma;
            settings.seed = common.seed.unwrap_or(settings.seed);
            settings.samples = samples.unwrap_or(settings.samples);
            if settings.samples < 2 {
                return Err(Failure::usage("sigma needs at least two samples"));
            }
            let path = c.generator_path();
            let archive = load_archive(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let sigma = calibrate(&archive.network, settings.samples, settings.seed, settings.floor)?;
            save_archive(&path, &archive.network, Some(&sigma))?;
            println!(
                "calibrated {} injection points from {} samples into {}",
                sigma.len(),
                settings.samples,
                path.display()
            );
            Ok(())
        }
        Command::Attack { common, workers } => {
            let p = prepared(&common)?;
            let workers = workers
                .or(p.campaign.config.workers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let s = run_attack(&p, workers)?;
            println!(
                "config {}: {} attacked ({} success, {} exhausted, {} skipped), {} already done",
                p.hash, s.attempted, s.success, s.exhausted, s.skipped, s.resumed
            );
            Ok(())
        }
        Command::Analyze {
            config,
            records,
            dispositions,
            group_size,
            grid,
            max_magnitude,
            force,
            out,
        } => {
            let campaign = config.as_deref().map(Campaign::load).transpose()?;
            let records = match (records.is_empty(), &campaign) {
                (false, _) => records,
                (true, Some(c)) => vec![c.records_path()],
                (true, None) => return Err(Failure::usage("analyze needs --config or --records")),
            };
            let out = match (out, &campaign) {
                (Some(o), _) => o,
                (None, Some(c)) => c.out_dir().join("analysis"),
                (None, None) => PathBuf::from("analysis"),
            };
            let report = run_analyze(&AnalyzeOptions {
                records,
                dispositions,
                group_size,
                grid,
                max_magnitude,
                force,
                out: out.clone(),
            })?;
            println!("config {}: {} series written to {}", report.config_hash, report.curves.len(), out.display());
            Ok(())
        }
        Command::Serve {
            common,
            addr,
            judges,
            judges_file,
            panel,
        } => {
            let p = prepared(&common)?;
            let judges = read_judges(&judges, judges_file.as_deref())?;
            if judges.is_empty() {
                return Err(Failure::usage("no judges; pass --judge or --judges-file"));
            }
            let records = read_records(&p.campaign.records_path(), false)?;
            let pairs = images::rebuild_pairs(&p, &records)?;
            let items = images::labeling_items(&p, &pairs)?;
            let store = open_store(&p, items, panel)?;
            let shared = Arc::new(Mutex::new(store));
            {
                let mut s = shared.lock().expect("store lock");
                for j in &judges {
                    s.register_judge(j);
                }
            }
            println!("serving {} images to {} judges on http://{addr}", pairs.len(), judges.len());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                tokio::select! {
                    r = latprobe_labeling::serve(shared, addr) => r,
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })?;
            Ok(())
        }
        Command::Tally { common, panel } => {
            let p = prepared(&common)?;
            let records = read_records(&p.campaign.records_path(), false)?;
            let items = records
                .iter()
                .filter(|r| r.status == latprobe_core::AttackStatus::Success)
                .map(|r| ImageItem {
                    image_id: r.image_id(),
                    label_name: p.label_name(r.y),
                    unperturbed_png: Vec::new(),
                    perturbed_png: Vec::new(),
                })
                .collect();
            let store = open_store(&p, items, panel)?;
            let d = store.dispositions();
            let path = p.campaign.out_dir().join("dispositions.json");
            fs::write(&path, serde_json::to_string_pretty(&d)?)?;
            println!("{} complete dispositions written to {}", d.len(), path.display());
            Ok(())
        }
        Command::Render { common, scale, limit } => {
            let p = prepared(&common)?;
            let records = read_records(&p.campaign.records_path(), false)?;
            let pairs = images::rebuild_pairs(&p, &records)?;
            let dir = p.campaign.out_dir().join("render");
            let written = images::render_pairs(&pairs, scale, limit, &dir)?;
            println!("{} images written to {}", written.len(), dir.display());
            Ok(())
        }
    }
}

fn open_store(p: &Prepared, items: Vec<ImageItem>, panel: usize) -> Result<LabelStore, Failure> {
    if panel == 0 {
        return Err(Failure::usage("--panel must be at least 1"));
    }
    let dir = p.campaign.out_dir();
    fs::create_dir_all(&dir)?;
    let config = StoreConfig {
        panel_size: panel,
        order_seed: p.campaign.config.tuples.seed,
        ..StoreConfig::default()
    };
    Ok(LabelStore::open(config, items, dir.join("votes.jsonl"))?)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
