use std::path::PathBuf;

use clap::Args;
use dncshap::labels::{corpus_stats, LabelDecision, LabelRule};

use crate::error::CliError;
use crate::files;

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// CSV with columns sample_id, ser_p1..ser_pK, ier_p1..ier_pK.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for decisions.csv, stats.json and stats.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also discard samples where the two classifiers pick different classes.
    #[arg(long)]
    require_agreement: bool,
    /// Source label of each probability column, comma-separated
    /// (default: anger,happy,hate,sad).
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
}

fn decisions_csv(rows: &[(String, LabelDecision)]) -> String {
    let mut out = String::from("sample_id,outcome,label,max1,max2,winner\n");
    for (id, d) in rows {
        let (outcome, label) = match d.label {
            Some(c) => ("assigned", c.name()),
            None => ("discarded", ""),
        };
        out.push_str(&format!("{id},{outcome},{label},{},{},{}\n", d.max1, d.max2, d.winner));
    }
    out
}

pub fn run(args: LabelArgs) -> Result<(), CliError> {
    let mut rule = LabelRule {
        threshold: args.threshold,
        require_agreement: args.require_agreement,
        ..LabelRule::default()
    };
    if let Some(columns) = args.columns {
        rule.columns = columns;
    }
    if !(0.0..=1.0).contains(&rule.threshold) {
        return Err(CliError::Usage(format!(
            "--threshold {} is outside [0, 1]",
            rule.threshold
        )));
    }
    let k = rule.columns.len();
    let path = &args.input;
    let mut reader = files::csv_reader(path)?;
    let width = reader.headers().map_err(|e| files::csv_error(path, e))?.len();
    if width != 1 + 2 * k {
        return Err(CliError::Input {
            path: path.clone(),
            reason: format!("expected 1 + 2 x {k} columns, found {width}"),
        });
    }

    let mut decided = Vec::new();
    let mut problems = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let values: Result<Vec<f64>, _> = record.iter().skip(1).map(str::parse::<f64>).collect();
        let outcome = values
            .map_err(|e| e.to_string())
            .and_then(|v| rule.decide(&v[..k], &v[k..]).map_err(|e| e.to_string()));
        match outcome {
            Ok(d) => decided.push((record[0].to_string(), d)),
            Err(reason) => problems.push(format!("line {line} ({}): {reason}", &record[0])),
        }
    }

    let stats = corpus_stats(decided.iter().map(|(_, d)| d));
    files::create_dir(&args.out)?;
    files::write(&args.out.join("decisions.csv"), decisions_csv(&decided))?;
    files::write(&args.out.join("stats.json"), files::json(&stats)?)?;
    files::write(&args.out.join("stats.txt"), stats.render())?;
    print!("{}", stats.render());

    if problems.is_empty() {
        return Ok(());
    }
    for p in &problems {
        eprintln!("{}: {p}", path.display());
    }
    Err(CliError::Input {
        path: path.clone(),
        reason: format!("{} malformed row(s) skipped", problems.len()),
    })
}
