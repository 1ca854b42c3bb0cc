use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use swg_core::config::KeyValues;
use swg_core::files::atomic_write_with;
use swg_core::toymodel::{self, ModelConfig, TrainConfig};

use super::{load_corpus, write_file};
use crate::args::{output_file, require_file};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct Train {
    /// Corpus CSV produced by `gen-data`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// key = value file overriding model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-step loss CSV; defaults to the weight path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Print the loss every this many steps (0 silences progress).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

pub fn run(args: &Train) -> CliResult {
    let mut model = ModelConfig::default();
    let mut recipe = TrainConfig::default();
    if let Some(path) = &args.config {
        require_file("--config", path)?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let source = path.display().to_string();
        let kv = KeyValues::parse(&text, &source).map_err(|e| CliError::file(path, e))?;
        model.apply(&kv).map_err(|e| CliError::file(path, e))?;
        recipe.apply(&kv).map_err(|e| CliError::file(path, e))?;
        kv.ensure_consumed().map_err(|e| CliError::file(path, e))?;
    }
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    output_file("--out", &args.out)?;
    output_file("--loss-csv", &loss_path)?;
    let corpus = load_corpus("--corpus", &args.corpus)?;

    let every = args.log_every;
    let outcome = toymodel::train_with_progress(&corpus, model, &recipe, args.steps, args.seed, |step, loss| {
        if every > 0 && (step % every == 0 || step + 1 == args.steps) {
            eprintln!("step {step:>5}  loss {loss:.4}");
        }
    })
    .map_err(|e| CliError::flag("--corpus", e))?;

    atomic_write_with(&args.out, |w| toymodel::write_weights(w, &outcome.weights)).map_err(|e| CliError::file(&args.out, e))?;
    let mut csv = String::from("step,loss,learning_rate\n");
    for (step, loss) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{step},{loss},{}", recipe.learning_rate_at(step, args.steps)).expect("writing to a String");
    }
    write_file(&loss_path, csv.as_bytes())?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.final_loss(50)) {
        eprintln!("loss {first:.4} -> {last:.4} (mean of last 50 steps)");
    }
    Ok(())
}
