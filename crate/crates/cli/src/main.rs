//! `meshgen`: two-stage MeSH concept extraction and image-conditioned
//! MeSH sequence generation.

mod concepts;
mod config;
mod error;
mod evaluate;
mod generator;
mod gradcheck;
mod io;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "meshgen",
    version,
    about = "Radiology MeSH concept extraction and generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the report classifier on a gold subset of the corpus.
    TrainConcepts(concepts::TrainConceptsArgs),
    /// Annotate non-gold reports with predicted MeSH captions.
    PredictConcepts(concepts::PredictConceptsArgs),
    /// Train an image-conditioned caption generator.
    TrainGenerator(generator::TrainGeneratorArgs),
    /// Decode captions for image embeddings.
    Generate(generator::GenerateArgs),
    /// Score labels or captions against references.
    Evaluate(evaluate::EvaluateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MESHGEN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::TrainConcepts(a) => concepts::train_concepts(a),
        Command::PredictConcepts(a) => concepts::predict_concepts(a),
        Command::TrainGenerator(a) => generator::train_generator(a),
        Command::Generate(a) => generator::generate(a),
        Command::Evaluate(a) => evaluate::evaluate(a),
        Command::Gradcheck(a) => gradcheck::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
