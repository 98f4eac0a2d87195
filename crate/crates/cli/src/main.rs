use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqrec::checkpoint;
use freqrec::config::{AblationSpec, ModelConfig};
use freqrec::data::{generate_synthetic, load_interactions, parse_buckets, sparsity_buckets, SplitKind, SyntheticSpec};
use freqrec::evaluation::{evaluate, evaluate_model, ModelScorer};
use freqrec::experiment::{graft_freq_loss, grid_search, parse_grid, run_ablation, RunResult};
use freqrec::train::train_with;
use freqrec::{Error, InteractionDataset, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "freqrec", version, about = "Frequency-enhanced sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report validation and test metrics.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the final metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation or test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "K,K")]
        eval_k: Option<String>,
        #[arg(long, value_name = "SWITCHES")]
        disable: Option<String>,
        /// Sequence-length buckets such as `5-6,7-8,9-12`.
        #[arg(long)]
        buckets: Option<String>,
        /// Defaults to the training batch size; the cohort filter mixes
        /// users within a batch, so scores depend on it.
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every point of a hyperparameter grid.
    Gridsearch {
        #[command(flatten)]
        model: ModelArgs,
        /// Axes such as `alpha=0.1,0.5;gamma=0.3,0.7`.
        #[arg(long)]
        grid: String,
        /// Run grid points on separate threads.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train each ablation variant with the same configuration.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        /// Semicolon-separated switch lists; `full` means nothing disabled.
        #[arg(long, default_value = "full;gsa;lsr;gsa,lsr;lf")]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare self-attention alone with and without the frequency loss.
    GraftLf {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic periodic interaction file.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        cycles: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 25)]
        seq_len: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 30)]
        items: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Interaction file with one `user item` pair per line.
    #[arg(long)]
    dataset: PathBuf,
    /// File of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_name = "parallel|serial")]
    fusion: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long, value_name = "l1|l2|mix")]
    distance: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_name = "K,K")]
    eval_k: Option<String>,
    #[arg(long, value_name = "MAX_LEN")]
    max_len: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    /// Components to switch off, from `sa,gsa,lsr,lf,ce`.
    #[arg(long, value_name = "SWITCHES")]
    disable: Option<String>,
    /// Any other configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(ModelConfig, AblationSpec, InteractionDataset)> {
        let mut config = ModelConfig::default();
        if let Some(path) = &self.config {
            config.apply_text(&std::fs::read_to_string(path)?)?;
        }
        let flags = [
            ("fusion", &self.fusion),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("distance", &self.distance),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("seed", &self.seed),
            ("eval_k", &self.eval_k),
            ("max_len", &self.max_len),
            ("dim", &self.dim),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            config.set(k, v)?;
        }
        config.validate()?;
        let ablation = match &self.disable {
            Some(s) => AblationSpec::parse_list(s)?,
            None => AblationSpec::full(),
        };
        let ds = load_dataset(&self.dataset)?;
        Ok((config, ablation, ds))
    }
}

fn load_dataset(path: &Path) -> Result<InteractionDataset> {
    let (ds, report) = load_interactions(path)?;
    eprintln!(
        "loaded {}: {} users, {} items, {} interactions, {} short users dropped",
        path.display(),
        ds.user_count(),
        ds.item_count,
        report.interactions,
        report.dropped_users
    );
    Ok(ds)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn prefixed(prefix: &str, text: &str) -> String {
    text.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

fn union(a: &AblationSpec, b: &AblationSpec) -> AblationSpec {
    AblationSpec {
        disable_sa: a.disable_sa || b.disable_sa,
        disable_gsa: a.disable_gsa || b.disable_gsa,
        disable_lsr: a.disable_lsr || b.disable_lsr,
        disable_freq_loss: a.disable_freq_loss || b.disable_freq_loss,
        disable_ce_loss: a.disable_ce_loss || b.disable_ce_loss,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { model, checkpoint: ckpt, out } => {
            let (config, ablation, ds) = model.resolve()?;
            let verbose = model.verbose;
            let (trained, log) = train_with(&config, &ds, &ablation, |e| {
                if verbose {
                    eprintln!("{}", e.to_line());
                }
            })?;
            if let Some(path) = &ckpt {
                checkpoint::save(&trained, path)?;
                eprintln!("saved checkpoint to {}", path.display());
            }
            let ks = &config.eval_ks;
            let valid = evaluate_model(&trained, &ablation, &ds.split(SplitKind::Valid), ks, config.batch_size)?;
            let test = evaluate_model(&trained, &ablation, &ds.split(SplitKind::Test), ks, config.batch_size)?;
            let mut text = String::new();
            writeln!(text, "variant = {}", ablation.label()).unwrap();
            match log.best_epoch {
                Some(e) => writeln!(text, "best_epoch = {e}").unwrap(),
                None => writeln!(text, "best_epoch = none").unwrap(),
            }
            writeln!(text, "epochs_run = {}", log.epochs.len()).unwrap();
            text += &prefixed("valid.", &valid.to_text());
            text += &prefixed("test.", &test.to_text());
            emit(&text, out.as_deref())
        }
        Command::Evaluate {
            checkpoint: ckpt,
            dataset,
            split,
            eval_k,
            disable,
            buckets,
            batch_size,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let ds = load_dataset(&dataset)?;
            if ds.item_count > model.item_count() {
                return Err(Error::Validation(format!(
                    "dataset has item ids up to {} but the checkpoint covers {}",
                    ds.item_count,
                    model.item_count()
                )));
            }
            let kind = match split.as_str() {
                "valid" => SplitKind::Valid,
                "test" => SplitKind::Test,
                other => return Err(Error::Config(format!("split must be valid or test, got `{other}`"))),
            };
            let mut config = model.config.clone();
            if let Some(k) = &eval_k {
                config.set("eval_k", k)?;
            }
            let ablation = match &disable {
                Some(s) => AblationSpec::parse_list(s)?,
                None => AblationSpec::full(),
            };
            let buckets = match &buckets {
                Some(b) => Some(sparsity_buckets(&ds, &parse_buckets(b)?)?),
                None => None,
            };
            let scorer = ModelScorer {
                model: &model,
                ablation,
            };
            let batch_size = batch_size.unwrap_or(config.batch_size);
            let report = evaluate(&scorer, &ds.split(kind), &config.eval_ks, batch_size, buckets.as_deref())?;
            emit(&report.to_text(), out.as_deref())
        }
        Command::Gridsearch {
            model,
            grid,
            parallel,
            out,
        } => {
            let (config, ablation, ds) = model.resolve()?;
            let axes = parse_grid(&grid)?;
            let result = grid_search(&config, &axes, &ds, &ablation, parallel)?;
            emit(&result.to_table(), out.as_deref())
        }
        Command::Ablate { model, variants, out } => {
            let (config, base, ds) = model.resolve()?;
            let mut ks = config.eval_ks.clone();
            if !ks.contains(&10) {
                ks.push(10);
                ks.sort_unstable();
            }
            let mut table = String::from("variant");
            for split in ["valid", "test"] {
                for metric in ["hr", "ndcg"] {
                    for k in &ks {
                        write!(table, "\t{split}_{metric}@{k}").unwrap();
                    }
                }
            }
            table.push('\n');
            for variant in variants.split(';').map(str::trim).filter(|v| !v.is_empty()) {
                let spec = if variant == "full" {
                    AblationSpec::full()
                } else {
                    AblationSpec::parse_list(variant)?
                };
                let spec = union(&base, &spec);
                let r: RunResult = run_ablation(&config, &spec, &ds)?;
                table += &spec.label();
                for report in [&r.valid, &r.test] {
                    for k in &ks {
                        write!(table, "\t{:.6}", report.hr_at(*k)).unwrap();
                    }
                    for k in &ks {
                        write!(table, "\t{:.6}", report.ndcg_at(*k)).unwrap();
                    }
                }
                table.push('\n');
            }
            emit(&table, out.as_deref())
        }
        Command::GraftLf { model, out } => {
            let (config, _, ds) = model.resolve()?;
            let report = graft_freq_loss(&config, &ds)?;
            emit(&report.to_text(), out.as_deref())
        }
        Command::GenSynth {
            out,
            cycles,
            users,
            seq_len,
            noise,
            items,
            seed,
        } => {
            let spec = SyntheticSpec {
                cycle_count: cycles,
                users,
                seq_len,
                noise_rate: noise,
                item_count: items,
            };
            let syn = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
            syn.dataset.write(&out)?;
            println!("users = {}", syn.dataset.user_count());
            println!("items = {}", syn.dataset.item_count);
            println!("interactions = {}", syn.dataset.interaction_count());
            println!("corrupted = {}", syn.corrupted);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
