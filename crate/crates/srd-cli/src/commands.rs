//! The five subcommands: argument checking here, algorithms in the library.
//!
//! Error routing: anything wrong with what the user asked for — flags,
//! config contents, unreadable inputs, mismatched checkpoints — exits 2;
//! failures while doing the work (output writes, engine errors) exit 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use srd_core::corpus::{
    build_vocab, generate_synthetic, read_records, records_to_jsonl, split, tokenize_records,
    Splits, SyntheticSpec, Vocabulary, UNK,
};
use srd_core::curriculum::cost_model;
use srd_core::reflect::{run_reflection, write_report};
use srd_core::seeding::{derive_seed, STREAM_TEACHER};
use srd_core::tinylm::{load_checkpoint, save_checkpoint, TinyLm};
use srd_core::trainer::{
    evaluate, run_with_init, train_supervised, EvalMetrics, RunConfig, RunMode, RunOutput,
    TrainingReport,
};

use crate::config::{parse_config, CliConfig};
use crate::{runtime, usage, CliError};

/// `gen`: write a synthetic corpus.
pub fn gen(
    template: &str,
    count: usize,
    seed: u64,
    alphabet: usize,
    levels: usize,
    label_noise: f64,
    out: &Path,
) -> Result<(), CliError> {
    let template = template.parse().map_err(usage)?;
    if !(1..=26).contains(&alphabet) {
        return Err(usage(format!("--alphabet must be in 1..=26, got {alphabet}")));
    }
    if levels == 0 {
        return Err(usage("--levels must be at least 1"));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(usage(format!(
            "--label-noise must be in 0.0..=1.0, got {label_noise}"
        )));
    }
    let spec = SyntheticSpec {
        template,
        alphabet,
        levels,
        label_noise,
    };
    let records = generate_synthetic(&spec, count, seed);
    fs::write(out, records_to_jsonl(&records)).map_err(runtime)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

/// `reflect`: score a dataset with a student checkpoint.
pub fn reflect(data: &Path, student: &Path, config: &Path, out: &Path) -> Result<(), CliError> {
    let cli = read_config(config)?;
    let (model, vocab) = load_checkpoint(student).map_err(usage)?;
    let records = read_records(data).map_err(usage)?;
    let (dataset, _) = tokenize_records(&records, vocab, cli.max_len);
    let curation = cli.curation()?;
    curation.validate().map_err(usage)?;
    let outcome = run_reflection(&model, &dataset, &curation).map_err(runtime)?;
    write_report(out, &outcome).map_err(runtime)?;
    println!("kept {} / {}", outcome.curated.len(), dataset.pairs.len());
    Ok(())
}

/// `train`: one full run, artifacts into a directory.
pub fn train(config: &Path, mode_flag: Option<&str>, out_dir: &Path) -> Result<(), CliError> {
    let prepared = prepare(config, mode_flag)?;
    let output = execute(&prepared, prepared.run.clone())?;

    fs::create_dir_all(out_dir).map_err(runtime)?;
    let vocab = &prepared.splits.train.vocab;
    save_checkpoint(out_dir.join("teacher.json"), &prepared.teacher, vocab).map_err(runtime)?;
    save_checkpoint(out_dir.join("student.json"), &output.student, vocab).map_err(runtime)?;
    if let Some(plan) = &output.plan {
        let json = serde_json::to_string_pretty(plan).map_err(runtime)?;
        fs::write(out_dir.join("plan.json"), json + "\n").map_err(runtime)?;
    }
    if let Some(reflection) = &output.reflection {
        write_report(out_dir.join("reflection.jsonl"), reflection).map_err(runtime)?;
    }
    fs::write(out_dir.join("epochs.csv"), epochs_csv(&output.report)).map_err(runtime)?;
    let summary = Summary::from_report(&output.report);
    let json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    fs::write(out_dir.join("summary.json"), json + "\n").map_err(runtime)?;

    println!(
        "mode={} kept={}/{} budget={:.4} test_ce={:.6} test_rouge_f={:.6}",
        output.report.mode,
        output.report.kept,
        output.report.total_train_pairs,
        output.report.budget_fraction,
        output.report.final_test.mean_ce,
        output.report.final_test.mean_rouge_f
    );
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// `eval`: score a checkpoint on a dataset, print metrics JSON.
pub fn eval(
    checkpoint: &Path,
    data: &Path,
    max_len: usize,
    decode_max_len: usize,
) -> Result<(), CliError> {
    let (model, vocab) = load_checkpoint(checkpoint).map_err(usage)?;
    let records = read_records(data).map_err(usage)?;
    if records.is_empty() {
        return Err(usage(format!("{}: no records to evaluate", data.display())));
    }
    let (dataset, _) = tokenize_records(&records, vocab, max_len);
    if dataset.pairs.is_empty() {
        return Err(usage(format!(
            "{}: every record exceeds max_len {max_len}",
            data.display()
        )));
    }
    let mismatched = dataset
        .pairs
        .iter()
        .filter(|p| p.prompt.iter().chain(&p.response).any(|&t| t == UNK))
        .count();
    if mismatched > 0 {
        return Err(usage(format!(
            "vocab mismatch: {mismatched} of {} pairs contain tokens outside the checkpoint vocabulary",
            dataset.pairs.len()
        )));
    }
    let metrics = evaluate(&model, &dataset, decode_max_len).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(runtime)?;
    println!("{json}");
    Ok(())
}

/// `sweep`: a one-axis grid of runs, results as CSV.
pub fn sweep(
    config: &Path,
    mode_flag: Option<&str>,
    axis: &str,
    values: &str,
    seeds: &str,
    out: &Path,
) -> Result<(), CliError> {
    let axis = Axis::parse(axis)?;
    let values = axis.parse_values(values)?;
    let seeds = parse_list::<u64>(seeds, "--seeds")?;
    let prepared = prepare(config, mode_flag)?;

    let mut csv = format!(
        "{},seed,kept,budget_fraction,valid_ce,valid_rouge_f,test_ce,test_rouge_f\n",
        axis.name()
    );
    let mut rows = 0usize;
    for value in &values {
        for &seed in &seeds {
            let mut run = prepared.run.clone();
            run.seed = seed;
            axis.apply(&mut run, *value);
            run.validate().map_err(usage)?;
            let output = execute(&prepared, run)?;
            let report = &output.report;
            writeln!(
                csv,
                "{},{seed},{},{},{},{},{},{}",
                axis.format(*value),
                report.kept,
                report.budget_fraction,
                report.final_valid.mean_ce,
                report.final_valid.mean_rouge_f,
                report.final_test.mean_ce,
                report.final_test.mean_rouge_f
            )
            .expect("string write");
            rows += 1;
        }
    }
    fs::write(out, csv).map_err(runtime)?;
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}

/// Swept knob; the CSV's first column carries its name.
#[derive(Clone, Copy)]
enum Axis {
    Lambda,
    NStages,
    TauN,
    Alpha0,
}

impl Axis {
    fn parse(raw: &str) -> Result<Self, CliError> {
        match raw {
            "lambda" => Ok(Axis::Lambda),
            "n_stages" => Ok(Axis::NStages),
            "tau_n" => Ok(Axis::TauN),
            "alpha0" => Ok(Axis::Alpha0),
            other => Err(usage(format!(
                "unknown axis \"{other}\" (expected lambda, n_stages, tau_n, or alpha0)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::NStages => "n_stages",
            Axis::TauN => "tau_n",
            Axis::Alpha0 => "alpha0",
        }
    }

    fn parse_values(self, raw: &str) -> Result<Vec<f64>, CliError> {
        match self {
            // Integral axis: parse as integers, carry as exact floats.
            Axis::NStages => Ok(parse_list::<usize>(raw, "--values")?
                .into_iter()
                .map(|n| n as f64)
                .collect()),
            _ => parse_list::<f64>(raw, "--values"),
        }
    }

    fn apply(self, run: &mut RunConfig, value: f64) {
        match self {
            Axis::Lambda => run.curation.lambda = value,
            Axis::NStages => run.schedule.n_stages = value as usize,
            Axis::TauN => run.schedule.tau_n = value,
            Axis::Alpha0 => run.schedule.alpha0 = value,
        }
    }

    fn format(self, value: f64) -> String {
        match self {
            Axis::NStages => format!("{}", value as usize),
            _ => format!("{value}"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, flag: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, CliError> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|err| usage(format!("{flag}: {err} (got \"{s}\")")))
        })
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(usage(format!("{flag} must list at least one value")));
    }
    Ok(items)
}

/// Everything `train` and `sweep` share: data, teacher, warm start, base run.
struct Prepared {
    splits: Splits,
    teacher: TinyLm,
    warm: Option<TinyLm>,
    run: RunConfig,
}

fn read_config(path: &Path) -> Result<CliConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|err| usage(format!("{}: {err}", path.display())))?;
    parse_config(&text)
}

fn vocab_matches(a: &Vocabulary, b: &Vocabulary) -> bool {
    a == b
}

fn prepare(config: &Path, mode_flag: Option<&str>) -> Result<Prepared, CliError> {
    let cli = read_config(config)?;
    let mode: RunMode = match mode_flag {
        Some(raw) => raw.parse().map_err(usage)?,
        None => cli
            .mode
            .ok_or_else(|| usage("missing required key: mode (config key or --mode)"))?,
    };
    let data_path = cli
        .data
        .clone()
        .ok_or_else(|| usage("missing required key: data"))?;
    let records = read_records(Path::new(&data_path)).map_err(usage)?;
    let vocab = build_vocab(&records, 1);
    let (dataset, _) = tokenize_records(&records, vocab, cli.max_len);
    let splits = split(
        dataset,
        (cli.split_train, cli.split_valid, cli.split_test),
        cli.split_seed,
    )
    .map_err(usage)?;
    for (name, part) in [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ] {
        if part.pairs.is_empty() {
            return Err(usage(format!(
                "{name} split is empty; adjust the split fractions or grow the corpus"
            )));
        }
    }
    let vocab_size = splits.train.vocab.len();
    let run = cli.to_run_config(mode, vocab_size)?;
    run.validate().map_err(usage)?;

    let teacher = match &cli.teacher_checkpoint {
        Some(path) => {
            let (model, teacher_vocab) = load_checkpoint(path).map_err(usage)?;
            if !vocab_matches(&teacher_vocab, &splits.train.vocab) {
                return Err(usage(format!(
                    "teacher checkpoint {path} was trained with a different vocabulary than the data"
                )));
            }
            model
        }
        None => train_supervised(
            &splits.train,
            &cli.teacher_sft(vocab_size),
            derive_seed(cli.teacher_seed, &[STREAM_TEACHER]),
        )
        .map_err(runtime)?,
    };
    let warm = match &cli.init_student {
        None => None,
        Some(path) => {
            let (model, warm_vocab) = load_checkpoint(path).map_err(usage)?;
            if !vocab_matches(&warm_vocab, &splits.train.vocab) {
                return Err(usage(format!(
                    "init_student checkpoint {path} was trained with a different vocabulary than the data"
                )));
            }
            if model.config != run.student {
                return Err(usage(format!(
                    "init_student checkpoint {path} has shape {:?} but the config asks for {:?}",
                    model.config, run.student
                )));
            }
            Some(model)
        }
    };
    Ok(Prepared {
        splits,
        teacher,
        warm,
        run,
    })
}

fn execute(prepared: &Prepared, run: RunConfig) -> Result<RunOutput, CliError> {
    run_with_init(
        &prepared.teacher,
        &prepared.splits,
        &run,
        prepared.warm.as_ref(),
    )
    .map_err(runtime)
}

fn epochs_csv(report: &TrainingReport) -> String {
    let mut csv =
        String::from("stage,epoch,train_ce,train_kd,valid_ce,tau,alpha,cumulative_visits\n");
    for e in &report.epochs {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            e.stage, e.epoch, e.train_ce, e.train_kd, e.valid_ce, e.tau, e.alpha,
            e.cumulative_visits
        )
        .expect("string write");
    }
    csv
}

/// Wall-clock numbers, quarantined so the rest of the summary is
/// byte-reproducible across reruns.
#[derive(Serialize)]
struct Timing {
    reflection_seconds: f64,
    training_seconds: f64,
    /// Relative cost saving projected by the cost model from the measured
    /// times, extrapolating the curated run's training time to the full
    /// budget.
    projected_cost_saving: f64,
}

/// `summary.json`: the deterministic report fields plus isolated timing.
#[derive(Serialize)]
struct Summary {
    mode: String,
    order: String,
    ranking: String,
    divergence: String,
    beta: f64,
    tau_sq_scaling: bool,
    stage_taus: Vec<f64>,
    stage_alphas: Vec<f64>,
    kept: usize,
    total_train_pairs: usize,
    budget_fraction: f64,
    epochs_run: usize,
    final_valid: EvalMetrics,
    final_test: EvalMetrics,
    timing: Timing,
}

impl Summary {
    fn from_report(report: &TrainingReport) -> Self {
        let projected_baseline_seconds = report.training_seconds / report.budget_fraction;
        let projected_cost_saving = cost_model(
            report.reflection_seconds,
            projected_baseline_seconds,
            report.budget_fraction,
        )
        .unwrap_or(0.0);
        Summary {
            mode: report.mode.to_string(),
            order: report.order.to_string(),
            ranking: report.ranking.to_string(),
            divergence: report.divergence.to_string(),
            beta: report.beta,
            tau_sq_scaling: report.tau_sq_scaling,
            stage_taus: report.stage_taus.clone(),
            stage_alphas: report.stage_alphas.clone(),
            kept: report.kept,
            total_train_pairs: report.total_train_pairs,
            budget_fraction: report.budget_fraction,
            epochs_run: report.epochs.len(),
            final_valid: report.final_valid,
            final_test: report.final_test,
            timing: Timing {
                reflection_seconds: report.reflection_seconds,
                training_seconds: report.training_seconds,
                projected_cost_saving,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_and_application() {
        let mut run = RunConfig::new(
            RunMode::Srd,
            srd_core::tinylm::LmConfig {
                vocab_size: 8,
                context: 8,
                embed_dim: 4,
                hidden_dim: 8,
            },
        );
        for (raw, expected) in [
            ("lambda", "lambda"),
            ("n_stages", "n_stages"),
            ("tau_n", "tau_n"),
            ("alpha0", "alpha0"),
        ] {
            assert_eq!(Axis::parse(raw).unwrap().name(), expected);
        }
        assert!(Axis::parse("gamma").is_err());
        Axis::Lambda.apply(&mut run, 0.5);
        assert_eq!(run.curation.lambda, 0.5);
        Axis::NStages.apply(&mut run, 4.0);
        assert_eq!(run.schedule.n_stages, 4);
        Axis::TauN.apply(&mut run, 1.5);
        assert_eq!(run.schedule.tau_n, 1.5);
        Axis::Alpha0.apply(&mut run, 0.2);
        assert_eq!(run.schedule.alpha0, 0.2);
        assert_eq!(Axis::NStages.format(4.0), "4");
        assert_eq!(Axis::Lambda.format(0.5), "0.5");
    }

    #[test]
    fn value_lists_parse_and_reject() {
        assert_eq!(
            parse_list::<u64>("0, 1,2", "--seeds").unwrap(),
            vec![0, 1, 2]
        );
        assert!(parse_list::<u64>("", "--seeds").is_err());
        assert!(parse_list::<f64>("0.5,x", "--values").is_err());
    }

    #[test]
    fn epochs_csv_has_header_and_rows() {
        let report = TrainingReport {
            mode: RunMode::BaselineOffpolicy,
            order: srd_core::curriculum::CurriculumOrder::EasyToHard,
            ranking: srd_core::reflect::Ranking::Fusion,
            divergence: srd_core::divergence::DivergenceKind::Kld,
            beta: 0.1,
            tau_sq_scaling: true,
            stage_taus: vec![1.0],
            stage_alphas: vec![0.3],
            kept: 10,
            total_train_pairs: 10,
            epochs: vec![srd_core::trainer::EpochRecord {
                stage: 1,
                epoch: 1,
                train_ce: 2.0,
                train_kd: 0.5,
                valid_ce: 2.1,
                tau: 1.0,
                alpha: 0.3,
                cumulative_visits: 10,
            }],
            budget_fraction: 1.0,
            final_valid: EvalMetrics {
                mean_ce: 2.1,
                mean_rouge_f: 0.1,
            },
            final_test: EvalMetrics {
                mean_ce: 2.2,
                mean_rouge_f: 0.1,
            },
            reflection_seconds: 0.0,
            training_seconds: 1.0,
        };
        let csv = epochs_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "stage,epoch,train_ce,train_kd,valid_ce,tau,alpha,cumulative_visits"
        );
        assert_eq!(lines.next().unwrap(), "1,1,2,0.5,2.1,1,0.3,10");
        assert!(lines.next().is_none());
    }
}
