mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use commands::*;
use run::{Failure, Outcome, Run};

#[derive(Parser)]
#[command(
    name = "phyloembed",
    version,
    about = "Phylogeny-derived embeddings for species recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; must contain `seed`.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Drop poorly conserved alignment columns.
    Trim(Common),
    /// Pairwise evolutionary distances.
    Dist(Common),
    /// Bootstrap standard errors and intervals for distances.
    Bootstrap(Common),
    /// Neighbor-joining tree from a distance matrix.
    Nj(Common),
    /// Generate a synthetic world.
    Synth(Common),
    /// Train the multi-branch recognizer.
    Train(Common),
    /// Classify samples with a trained model.
    Classify(Common),
    /// Zero-shot classification against unseen class embeddings.
    Zeroshot(Common),
    /// Place predicted embeddings into a species tree.
    JointTree(Common),
    /// Train and/or apply the embedding-to-DNA decoder.
    DecodeDna(Common),
    /// Metrics from prediction files.
    Eval(Common),
    /// Run the acceptance checks.
    Repro(Common),
}

impl Cmd {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Cmd::Trim(c) => ("trim", c),
            Cmd::Dist(c) => ("dist", c),
            Cmd::Bootstrap(c) => ("bootstrap", c),
            Cmd::Nj(c) => ("nj", c),
            Cmd::Synth(c) => ("synth", c),
            Cmd::Train(c) => ("train", c),
            Cmd::Classify(c) => ("classify", c),
            Cmd::Zeroshot(c) => ("zeroshot", c),
            Cmd::JointTree(c) => ("joint-tree", c),
            Cmd::DecodeDna(c) => ("decode-dna", c),
            Cmd::Eval(c) => ("eval", c),
            Cmd::Repro(c) => ("repro", c),
        }
    }
}

struct Loaded<C> {
    config: C,
    text: String,
    out_dir: PathBuf,
}

fn load<C: Command>(common: &Common) -> Outcome<Loaded<C>> {
    let invalid = |m: String| Failure::Validation(m);
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| invalid(format!("{}: {e}", common.config.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("config: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| invalid("config must be a JSON object".into()))?;
    if !obj.get("seed").is_some_and(Value::is_u64) {
        return Err(invalid(
            "config: `seed` (non-negative integer) is required".into(),
        ));
    }
    let from_config = obj.remove("output_dir");
    let out_dir = match (&common.out, from_config) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(s))) => PathBuf::from(s),
        (None, Some(_)) => return Err(invalid("config: `output_dir` must be a string".into())),
        (None, None) => {
            return Err(invalid(
                "set `output_dir` in the config or pass --out".into(),
            ))
        }
    };
    let config: C = serde_json::from_value(value).map_err(|e| invalid(format!("config: {e}")))?;
    for p in config.inputs() {
        if !p.exists() {
            return Err(invalid(format!("input not found: {}", p.display())));
        }
    }
    Ok(Loaded {
        config,
        text,
        out_dir,
    })
}

fn execute<C: Command>(name: &str, common: &Common) -> Outcome<PathBuf> {
    let loaded: Loaded<C> = load(common)?;
    let mut run = Run::start(name, loaded.config.seed(), &loaded.out_dir, loaded.text)?;
    match loaded.config.execute(&mut run) {
        Ok(()) => run.finish(),
        Err(f) => {
            let dest = run.quarantine(&f)?;
            eprintln!("quarantined partial output in {}", dest.display());
            Err(f)
        }
    }
}

fn dispatch(cmd: &Cmd) -> Outcome<PathBuf> {
    let (name, c) = cmd.parts();
    match cmd {
        Cmd::Trim(_) => execute::<TrimConfig>(name, c),
        Cmd::Dist(_) => execute::<DistConfig>(name, c),
        Cmd::Bootstrap(_) => execute::<BootstrapConfig>(name, c),
        Cmd::Nj(_) => execute::<NjConfig>(name, c),
        Cmd::Synth(_) => execute::<SynthConfig>(name, c),
        Cmd::Train(_) => execute::<TrainConfig>(name, c),
        Cmd::Classify(_) => execute::<ClassifyConfig>(name, c),
        Cmd::Zeroshot(_) => execute::<ZeroShotConfig>(name, c),
        Cmd::JointTree(_) => execute::<JointTreeConfig>(name, c),
        Cmd::DecodeDna(_) => execute::<DecodeDnaConfig>(name, c),
        Cmd::Eval(_) => execute::<EvalConfig>(name, c),
        Cmd::Repro(_) => execute::<ReproConfig>(name, c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::Validation(e.to_string().trim_end().to_string());
            eprintln!("{}", f.record("usage"));
            return ExitCode::from(1);
        }
    };
    let (name, _) = cli.command.parts();
    match dispatch(&cli.command) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.record(name));
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
