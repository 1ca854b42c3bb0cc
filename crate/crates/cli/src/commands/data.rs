use std::path::PathBuf;

use clap::Args;
use swg_core::dataset::{self, render_pgm};

use super::{corpus_bytes, write_file};
use crate::args::{output_dir, output_file};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 4096)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub class_count: usize,
    /// Corpus CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the first few grids as PGM images into this directory.
    #[arg(long)]
    pub render_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub render_count: usize,
    /// Pixels per token edge in renders.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

pub fn run(args: &GenData) -> CliResult {
    output_file("--out", &args.out)?;
    let render_dir = args.render_dir.as_deref().map(|d| output_dir("--render-dir", d)).transpose()?;
    let grids = dataset::generate_corpus(args.count, args.seed, args.class_count).map_err(|e| {
        let flag = if args.count == 0 { "--count" } else { "--class-count" };
        CliError::flag(flag, e)
    })?;
    write_file(&args.out, &corpus_bytes(&grids))?;
    if let Some(dir) = render_dir {
        for (i, g) in grids.iter().take(args.render_count).enumerate() {
            write_file(&dir.join(format!("grid_{i:04}.pgm")), &render_pgm(g, args.scale))?;
        }
    }
    eprintln!("wrote {} grids to {}", grids.len(), args.out.display());
    Ok(())
}
