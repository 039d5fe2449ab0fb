//! Command-line front end and experiment harness for `tmlab-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod fsio;
pub mod indexfile;
pub mod manifest;
pub mod report;
pub mod systems;
pub mod threads;

use clap::Parser;

use crate::cli::{Cli, Command, CorpusCmd, EvalCmd, IndexCmd};
use crate::error::{CliError, Result};
use crate::manifest::RunRecord;

/// Outcome of argument parsing: a command to run, or an exit code after
/// help, version or a usage error has been printed.
#[derive(Debug)]
pub enum Parsed {
    Run(Box<Cli>),
    Exit(i32),
}

/// Parses `argv` (program name first). Help and version exit 0, bad
/// arguments exit 1.
pub fn parse(argv: &[String]) -> Parsed {
    match Cli::try_parse_from(argv) {
        Ok(cli) => Parsed::Run(Box::new(cli)),
        Err(e) => {
            let _ = e.print();
            Parsed::Exit(if e.use_stderr() { 1 } else { 0 })
        }
    }
}

fn dispatch(cli: &Cli, record: &mut RunRecord) -> Result<Option<String>> {
    use crate::commands as c;
    match &cli.command {
        Command::Corpus(CorpusCmd::Synth(a)) => c::synth(a, record).map(|_| None),
        Command::Corpus(CorpusCmd::Stats(a)) => c::stats(a, record),
        Command::Corpus(CorpusCmd::Split(a)) => c::split(a, record).map(|_| None),
        Command::Corpus(CorpusCmd::Vocab(a)) => c::vocab(a, record).map(|_| None),
        Command::Index(IndexCmd::Build(a)) => c::index_build(a, record).map(|_| None),
        Command::Retrieve(a) => c::retrieve(a, record).map(|_| None),
        Command::Train(a) => c::train_cmd(a, record).map(|_| None),
        Command::FinetuneWeight(a) => c::finetune(a, record).map(|_| None),
        Command::Translate(a) => c::translate_cmd(a, record).map(|_| None),
        Command::Eval(EvalCmd::Bleu(a)) => c::eval_bleu(a, record),
        Command::Eval(EvalCmd::Ppl(a)) => c::eval_ppl(a, record),
        Command::Biasvar(a) => c::biasvar(a, record).map(|_| None),
        Command::Experiment(e) => c::experiment_cmd(e, record).map(|_| None),
        Command::Rerun(_) => Err(CliError::usage("rerun cannot be nested")),
    }
}

/// Runs a parsed command. `argv` is recorded in the run manifest written
/// next to the command's main output.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    if let Command::Rerun(a) = &cli.command {
        return rerun(&a.manifest);
    }
    let mut record = RunRecord::default();
    if let Some(text) = dispatch(cli, &mut record)? {
        print!("{text}");
    }
    if let Some(path) = &record.manifest {
        let m = manifest::build(argv.get(1..).unwrap_or_default(), &record)?;
        manifest::save(path, &m)?;
    }
    Ok(())
}

/// Re-executes the command recorded in a manifest and checks that every
/// output is byte-identical to the recorded one.
pub fn rerun(path: &std::path::Path) -> Result<()> {
    let m = manifest::load(path)?;
    let cwd = commands::rerun_target(&m)?;
    std::env::set_current_dir(&cwd).map_err(|e| CliError::io(&cwd, e))?;
    let changed = manifest::changed(&m.inputs)?;
    if !changed.is_empty() {
        return Err(CliError::data(format!("inputs changed since the run: {}", changed.join(", "))));
    }
    let mut argv = vec!["tmlab".to_string()];
    argv.extend(m.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::usage(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::usage("rerun cannot be nested"));
    }
    execute(&cli, &argv)?;
    let differ = manifest::changed(&m.outputs)?;
    if !differ.is_empty() {
        return Err(CliError::data(format!("outputs differ from the recorded run: {}", differ.join(", "))));
    }
    println!("rerun: {} outputs byte-identical", m.outputs.len());
    Ok(())
}
