use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use langadapt::ablation::{run_ablation, AblationGrid};
use langadapt::compare::compare_llms;
use langadapt::config::RunConfig;
use langadapt::pipeline::{
    embed_caches, run_alignment, run_stages, stages_through, RunLayout, RunSummary, Stage,
};
use langadapt::split::split_dataset;
use langadapt_core::corpus::llm::{
    FixtureClient, LocalCommandClient, RecordingClient, RemoteClient,
};
use langadapt_core::corpus::{
    build_prompts, generate_descriptions, load_corpus, save_corpus, ClassCatalog,
    GenerationOptions, LanguageModelClient, PromptTemplate,
};
use langadapt_core::dataset::Manifest;
use langadapt_core::io::write_atomic;
use langadapt_core::synth::{write_synthetic, SynthConfig};
use langadapt_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(
    name = "langadapt",
    version,
    about = "Label-free adaptation of a frozen vision-language model"
)]
struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or check a description corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Fill the text and image embedding caches of a run.
    Embed(ConfigArg),
    /// Corpus stage and stage 1 (text-trained adapter).
    TrainText(ConfigArg),
    /// Through stage 2 (prompt and adapter on unlabeled images).
    TrainUnsup(ConfigArg),
    /// Full pipeline including evaluation reports.
    Eval(ConfigArg),
    /// Description/image alignment on frozen embeddings.
    Align(ConfigArg),
    /// Loss-function ablation over six cells.
    Ablate(ConfigArg),
    /// One run per description corpus.
    CompareLlms {
        #[arg(long)]
        config: PathBuf,
        /// Corpora sharing one class catalog.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
    },
    /// Assign train/val/test splits to a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_stratify: bool,
    },
    /// Write a synthetic dataset, corpus and run.toml.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        images_per_class: Option<usize>,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    Generate {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        /// `fixture:<file>`, `local:<command line>` or a remote model id.
        #[arg(long)]
        llm: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        retries: usize,
        /// Also save every response as a replayable fixture.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    Validate {
        corpus: PathBuf,
        /// Check the corpus covers exactly this catalog.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

fn llm_client(spec: &str) -> Result<Box<dyn LanguageModelClient>> {
    if let Some(path) = spec.strip_prefix("fixture:") {
        Ok(Box::new(FixtureClient::from_json_file(Path::new(path))?))
    } else if let Some(line) = spec.strip_prefix("local:") {
        Ok(Box::new(LocalCommandClient::from_command_line(line)?))
    } else {
        Ok(Box::new(RemoteClient::from_env(spec)?))
    }
}

struct Shared<'a>(&'a dyn LanguageModelClient);

impl LanguageModelClient for Shared<'_> {
    fn model_id(&self) -> &str {
        self.0.model_id()
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.0.complete(prompt)
    }

    fn complete_sample(&self, prompt: &str, sample: usize) -> Result<String> {
        self.0.complete_sample(prompt, sample)
    }
}

fn corpus_command(cmd: CorpusCommand) -> Result<()> {
    match cmd {
        CorpusCommand::Generate {
            catalog,
            templates,
            llm,
            out,
            samples,
            retries,
            record,
        } => {
            let catalog = ClassCatalog::from_json_file(&catalog)?;
            let templates = PromptTemplate::list_from_json_file(&templates)?;
            let queries = build_prompts(&catalog, &templates)?;
            let client = llm_client(&llm)?;
            let opts = GenerationOptions {
                retries,
                samples_per_query: samples,
                ..GenerationOptions::default()
            };
            let generated = match &record {
                Some(fixture) => {
                    let recorder = RecordingClient::new(Shared(&*client));
                    let g = generate_descriptions(&catalog, &queries, &recorder, &opts)?;
                    write_atomic(fixture, recorder.into_fixture().to_json().as_bytes())?;
                    g
                }
                None => generate_descriptions(&catalog, &queries, &*client, &opts)?,
            };
            save_corpus(&generated.corpus, &out)?;
            println!(
                "wrote {} descriptions for {} classes to {} ({} skipped)",
                generated.corpus.total(),
                catalog.len(),
                out.display(),
                generated.skipped.len()
            );
        }
        CorpusCommand::Validate { corpus, catalog } => {
            let c = load_corpus(&corpus)?;
            if let Some(path) = catalog {
                c.check_catalog(&ClassCatalog::from_json_file(&path)?)?;
            }
            println!(
                "{}: {} descriptions from {}",
                corpus.display(),
                c.total(),
                c.generator()
            );
            for (label, n) in c.catalog().labels().iter().zip(c.counts()) {
                println!("  {label}\t{n}");
            }
        }
    }
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!("run {} (config {})", s.run_dir.display(), s.config_hash);
    for st in &s.stages {
        println!(
            "  {:<7} {}",
            st.stage.name(),
            if st.skipped { "skipped" } else { "done" }
        );
    }
    let show = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("  {name:<28} {v:.4}");
        }
    };
    show("text holdout accuracy", s.text_holdout_accuracy);
    show("stage-1 test accuracy", s.stage1_visual_accuracy);
    show("stage-2 test accuracy", s.accuracy);
    show("final strong entropy", s.final_strong_entropy);
}

fn through(config: &Path, last: Stage) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let summary = run_stages(
        &cfg,
        &RunLayout::single(&cfg.output_dir),
        &stages_through(last),
    )?;
    print_summary(&summary);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(cmd) => corpus_command(cmd)?,
        Command::Embed(a) => {
            let (texts, images) = embed_caches(&RunConfig::load(&a.config)?)?;
            println!("cached {texts} description and {images} image embeddings");
        }
        Command::TrainText(a) => through(&a.config, Stage::Stage1)?,
        Command::TrainUnsup(a) => through(&a.config, Stage::Stage2)?,
        Command::Eval(a) => through(&a.config, Stage::Eval)?,
        Command::Align(a) => {
            let report = run_alignment(&RunConfig::load(&a.config)?)?;
            println!("alignment ({})", report.definition_id);
            for (k, s) in report.k_values.iter().zip(&report.scores) {
                println!("  k={k}\t{s:.4}");
            }
        }
        Command::Ablate(a) => {
            let table = run_ablation(&RunConfig::load(&a.config)?, &AblationGrid::default())?;
            print!("{}", table.to_text());
        }
        Command::CompareLlms { config, corpora } => {
            let table = compare_llms(&RunConfig::load(&config)?, &corpora)?;
            print!("{}", table.to_text());
        }
        Command::Split {
            manifest,
            out,
            fractions,
            seed,
            no_stratify,
        } => {
            let m = Manifest::load(&manifest)?;
            let f: [f64; 3] = fractions
                .try_into()
                .map_err(|_| Error::validation("--fractions needs three values"))?;
            let split = split_dataset(&m, &f, seed, !no_stratify)?;
            write_atomic(&out, split.to_csv().as_bytes())?;
            println!("wrote {} entries to {}", split.len(), out.display());
        }
        Command::Synth {
            out,
            seed,
            images_per_class,
        } => {
            let mut synth = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            if let Some(n) = images_per_class {
                synth.images_per_class = n;
            }
            let paths = write_synthetic(&synth, &out)?;
            let mut cfg = RunConfig::synthetic(&paths, "run", seed);
            for p in [&mut cfg.manifest, &mut cfg.corpus] {
                *p = p
                    .strip_prefix(&out)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|_| p.clone());
            }
            let toml_path = out.join("run.toml");
            write_atomic(&toml_path, cfg.to_toml().as_bytes())?;
            println!("wrote synthetic data and {}", toml_path.display());
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 1,
        ErrorClass::Data => 2,
        ErrorClass::Runtime => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
