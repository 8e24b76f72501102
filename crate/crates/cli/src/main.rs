//! Command-line front end: `train`, `parse`, `eval`, `bench` and
//! `oracle-check`.
//!
//! Exit status is 0 on success, 2 for usage errors and unreadable inputs,
//! and 1 for failures while running. Log verbosity comes from
//! `MFPARSE_LOG` (default `warn`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mfparse::bench::{benchmark, to_csv, to_table, BenchConfig};
use mfparse::conllu::{read_conllu, write_conllu, Prediction};
use mfparse::decoder::{mfvi, Formulation, Variant, MAX_ITERATIONS};
use mfparse::eval::{uas_las, PunctMode};
use mfparse::oracle::{best_arborescence_bruteforce, exact_marginals_local, exact_marginals_single};
use mfparse::pipeline::{parse_corpus, to_prediction};
use mfparse::scores::ScoreTensors;
use mfparse::trainer::{checkpoint, config::DESK_SCALE, train, TrainConfig};
use mfparse::tree::{chu_liu_edmonds, tree_weight, DecodeConfig};

#[derive(Parser, Debug)]
#[command(name = "mfparse", version, about = "Second-order dependency parser with mean-field decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus its iteration history.
    Train {
        #[arg(long, value_parser = parse_variant, default_value = "local2o")]
        variant: Variant,
        #[arg(long, value_parser = parse_iterations)]
        iterations: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// `key = value` file applied after the variant defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Iteration history as JSON; defaults to `<model>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        single_root: Option<Switch>,
        /// Multiply the full schedule (75000 iterations) by this factor
        /// instead of using the desk preset.
        #[arg(long)]
        scale: Option<f64>,
        /// Pretrained word vectors, one `word v1 .. vd` per line.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Parse a CoNLL-U file with a trained model.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the checkpoint's iteration count.
        #[arg(long, value_parser = parse_iterations)]
        iterations: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        single_root: Switch,
    },
    /// Print UAS/LAS as JSON, scoring a prediction file or a model's output.
    Eval {
        /// Gold CoNLL-U.
        #[arg(long)]
        test: PathBuf,
        /// Predicted CoNLL-U aligned with the gold file.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_iterations)]
        iterations: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        single_root: Switch,
        #[arg(long, value_parser = parse_punct, default_value = "upos-punct")]
        punct: PunctMode,
    },
    /// Time the four decoders on random scores.
    Bench {
        /// Variants to run (repeatable); all four by default.
        #[arg(long, value_parser = parse_variant)]
        variant: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 20, 40])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 20)]
        sentences: usize,
        /// Iterations of the second-order variants.
        #[arg(long, value_parser = parse_iterations, default_value_t = 3)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Decode across threads (reported separately).
        #[arg(long)]
        parallel: bool,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare the decoders and MST against exhaustive enumeration.
    OracleCheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![3, 4, 5])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, value_parser = parse_iterations, default_value_t = 3)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mfparse::Error| e.to_string())
}

fn parse_punct(s: &str) -> Result<PunctMode, String> {
    s.parse().map_err(|e: mfparse::Error| e.to_string())
}

fn parse_iterations(s: &str) -> Result<usize, String> {
    let t: usize = s.parse().map_err(|_| format!("{:?} is not a non-negative integer", s))?;
    if t > MAX_ITERATIONS {
        return Err(format!("at most {} iterations are supported", MAX_ITERATIONS));
    }
    Ok(t)
}

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("no such file: {}", path.display())).into());
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn load_model(path: &Path, iterations: Option<usize>) -> anyhow::Result<mfparse::scorer::ModelParams> {
    require_file(path)?;
    let mut params = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(t) = iterations {
        params.config.iterations = t;
    }
    Ok(params)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    variant: Variant,
    iterations: Option<usize>,
    lambda: Option<f64>,
    config_path: Option<&Path>,
    train_path: &Path,
    dev_path: Option<&Path>,
    model_path: &Path,
    history_path: Option<&Path>,
    seed: Option<u64>,
    single_root: Option<Switch>,
    scale: Option<f64>,
    embeddings: Option<&Path>,
) -> anyhow::Result<()> {
    require_file(train_path)?;
    for p in [dev_path, config_path, embeddings].into_iter().flatten() {
        require_file(p)?;
    }
    let mut config = TrainConfig::desk(variant);
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(UsageError(format!("--scale must be positive, got {}", s)).into());
        }
        let full = TrainConfig::full(variant).scaled(s);
        config.max_iterations = full.max_iterations;
        config.early_stop = full.early_stop;
        config.amsgrad_after = full.amsgrad_after;
        config.decay_step = full.decay_step;
    }
    if let Some(p) = config_path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config
            .apply_text(&text)
            .map_err(|e| UsageError(format!("{}: {}", p.display(), e)))?;
    }
    if let Some(t) = iterations {
        config.iterations = t;
    }
    if let Some(l) = lambda {
        config.lambda = l;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(r) = single_root {
        config.single_root = r.on();
    }
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    info!(
        "training {} with T = {}, lambda = {}, {} iterations (scale {})",
        config.variant,
        config.iterations,
        config.lambda,
        config.max_iterations,
        scale.unwrap_or(DESK_SCALE)
    );

    let train_set = read_conllu(train_path).with_context(|| format!("reading {}", train_path.display()))?;
    let dev_set = match dev_path {
        Some(p) => read_conllu(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };
    let outcome = match embeddings {
        None => train(&train_set, &dev_set, &config)?,
        Some(p) => {
            let corpus = mfparse::conllu::filter_long(train_set, config.max_train_len);
            let vocab = mfparse::scorer::Vocab::from_corpus(&corpus)?;
            let model = mfparse::scorer::ModelConfig {
                dims: config.model_dims(),
                formulation: config.formulation(),
                iterations: config.iterations,
                activation: config.activation,
            };
            let mut params = mfparse::scorer::ModelParams::new(model, vocab, config.seed)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let rows = params.load_embeddings(&text)?;
            info!("loaded {} pretrained word vectors", rows);
            mfparse::trainer::fit(params, &corpus, &dev_set, &config)?
        }
    };
    checkpoint::save(&outcome.params, model_path).with_context(|| format!("writing {}", model_path.display()))?;
    let history_path = history_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.json", model_path.display())));
    let history = json!({
        "variant": config.variant.name(),
        "iterations_run": outcome.history.len(),
        "best_iteration": outcome.best_iteration,
        "best_dev": outcome.best_dev,
        "stopped_early": outcome.stopped_early,
        "history": outcome.history,
    });
    fs::write(&history_path, serde_json::to_string_pretty(&history)? + "\n")
        .with_context(|| format!("writing {}", history_path.display()))?;
    if let Some(d) = outcome.best_dev {
        info!("best dev UAS {:.2} LAS {:.2}", d.uas, d.las);
    }
    Ok(())
}

fn run_parse(
    model: &Path,
    test: &Path,
    output: Option<&Path>,
    iterations: Option<usize>,
    single_root: Switch,
) -> anyhow::Result<()> {
    require_file(test)?;
    let params = load_model(model, iterations)?;
    let sentences = read_conllu(test).with_context(|| format!("reading {}", test.display()))?;
    let (trees, stats) = parse_corpus(
        &params,
        &sentences,
        DecodeConfig {
            single_root: single_root.on(),
        },
    )?;
    info!("decoded {} sentences, MST used {} times", stats.decoded, stats.mst_invocations);
    let preds: Vec<Prediction> = trees.iter().map(|t| to_prediction(&params, t)).collect();
    write_output(output, &write_conllu(&sentences, Some(&preds))?)
}

fn run_eval(
    test: &Path,
    pred: Option<&Path>,
    model: Option<&Path>,
    iterations: Option<usize>,
    single_root: Switch,
    punct: &PunctMode,
) -> anyhow::Result<()> {
    require_file(test)?;
    let gold = read_conllu(test).with_context(|| format!("reading {}", test.display()))?;
    let preds: Vec<Prediction> = match (pred, model) {
        (Some(p), _) => {
            require_file(p)?;
            read_conllu(p)
                .with_context(|| format!("reading {}", p.display()))?
                .iter()
                .map(|s| Prediction {
                    heads: s.gold_heads(),
                    labels: Some(s.gold_labels().iter().map(|l| l.to_string()).collect()),
                })
                .collect()
        }
        (None, Some(m)) => {
            let params = load_model(m, iterations)?;
            let (trees, _) = parse_corpus(
                &params,
                &gold,
                DecodeConfig {
                    single_root: single_root.on(),
                },
            )?;
            trees.iter().map(|t| to_prediction(&params, t)).collect()
        }
        (None, None) => return Err(UsageError("eval needs --pred or --model".into()).into()),
    };
    let scores = uas_las(&preds, &gold, punct)?;
    let out = json!({
        "uas": scores.uas,
        "las": scores.las,
        "punct": punct.to_string(),
        "counts": scores.counts,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn linf(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_oracle_check(lengths: &[usize], instances: usize, iterations: usize, seed: u64) -> anyhow::Result<bool> {
    let mut rows = Vec::new();
    let mut all_ok = true;
    for &n in lengths {
        if n == 0 || n > mfparse::oracle::MAX_LOCAL_WORDS {
            return Err(UsageError(format!(
                "lengths must lie in 1..={}",
                mfparse::oracle::MAX_LOCAL_WORDS
            ))
            .into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let single_ok = mfparse::oracle::candidate_edges(n).len() <= mfparse::oracle::MAX_SINGLE_EDGES;
        let (mut local_sum, mut local_max) = (0.0, 0.0f64);
        let (mut single_sum, mut single_max) = (0.0, 0.0f64);
        let mut mst_agree = 0;
        let mst_checked = n <= mfparse::oracle::MAX_BRUTEFORCE_WORDS;
        for _ in 0..instances {
            let scores = ScoreTensors::random(n, 1, 1.0, 0.25, &mut rng);
            let d = linf(
                mfvi(&scores, Formulation::Local, iterations).final_q(),
                &exact_marginals_local(&scores)?,
            );
            local_sum += d;
            local_max = local_max.max(d);
            if single_ok {
                let d = linf(
                    mfvi(&scores, Formulation::Single, iterations).final_q(),
                    &exact_marginals_single(&scores)?,
                );
                single_sum += d;
                single_max = single_max.max(d);
            }
            if mst_checked {
                let w = mfparse::tree::log_weights(&mfvi(&scores, Formulation::Local, iterations).final_q());
                let ok = [true, false].iter().all(|&sr| {
                    match (chu_liu_edmonds(&w, sr), best_arborescence_bruteforce(&w, sr)) {
                        (Ok(a), Ok(b)) => a == b && tree_weight(&w, &a) == tree_weight(&w, &b),
                        _ => false,
                    }
                });
                mst_agree += usize::from(ok);
            }
        }
        let k = instances.max(1) as f64;
        if mst_checked && mst_agree != instances {
            all_ok = false;
        }
        rows.push(json!({
            "n": n,
            "instances": instances,
            "local_mean_linf": local_sum / k,
            "local_max_linf": local_max,
            "single_mean_linf": single_ok.then_some(single_sum / k),
            "single_max_linf": single_ok.then_some(single_max),
            "mst_agreement": mst_checked.then_some(mst_agree),
        }));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "iterations": iterations, "results": rows }))?
    );
    Ok(all_ok)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            variant,
            iterations,
            lambda,
            config,
            train,
            dev,
            model,
            history,
            seed,
            single_root,
            scale,
            embeddings,
        } => run_train(
            variant,
            iterations,
            lambda,
            config.as_deref(),
            &train,
            dev.as_deref(),
            &model,
            history.as_deref(),
            seed,
            single_root,
            scale,
            embeddings.as_deref(),
        )?,
        Command::Parse {
            model,
            test,
            output,
            iterations,
            single_root,
        } => run_parse(&model, &test, output.as_deref(), iterations, single_root)?,
        Command::Eval {
            test,
            pred,
            model,
            iterations,
            single_root,
            punct,
        } => run_eval(&test, pred.as_deref(), model.as_deref(), iterations, single_root, &punct)?,
        Command::Bench {
            variant,
            lengths,
            repeats,
            sentences,
            iterations,
            seed,
            parallel,
            csv,
        } => {
            if lengths.is_empty() || lengths.contains(&0) {
                bail!(UsageError("--lengths must be positive".into()));
            }
            let config = BenchConfig {
                variants: if variant.is_empty() { Variant::ALL.to_vec() } else { variant },
                lengths,
                repeats,
                sentences,
                iterations,
                seed,
                parallel,
                ..BenchConfig::default()
            };
            let report = benchmark(&config);
            print!("{}", to_table(&report));
            if let Some(p) = csv {
                fs::write(&p, to_csv(&report)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::OracleCheck {
            lengths,
            instances,
            iterations,
            seed,
        } => {
            if !run_oracle_check(&lengths, instances, iterations, seed)? {
                eprintln!("error: MST disagrees with brute force");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MFPARSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {}\n", e);
            let _ = Cli::command().print_help();
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
