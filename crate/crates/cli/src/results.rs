//! Result rows and their CSV encoding.

use std::io::{Read, Write};

use crate::CliError;

pub const HEADER: [&str; 12] = [
    "experiment",
    "model",
    "trial",
    "seed",
    "stage",
    "task_index",
    "task_name",
    "accuracy",
    "beta",
    "d",
    "s",
    "delta_d",
];

/// Accuracy of one seen task after one stage of one trial. `stage` and
/// `task_index` are 1-based; heuristic fields are empty for fixed-β models.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub trial: usize,
    pub seed: u64,
    pub stage: usize,
    pub task_index: usize,
    pub task_name: String,
    pub accuracy: f64,
    pub beta: f64,
    pub d: Option<f64>,
    pub s: Option<f64>,
    pub delta_d: Option<f64>,
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

impl ResultRow {
    fn record(&self) -> [String; 12] {
        [
            self.experiment.clone(),
            self.model.clone(),
            self.trial.to_string(),
            self.seed.to_string(),
            self.stage.to_string(),
            self.task_index.to_string(),
            self.task_name.clone(),
            fmt6(self.accuracy),
            fmt6(self.beta),
            fmt_opt(self.d),
            fmt_opt(self.s),
            fmt_opt(self.delta_d),
        ]
    }
}

/// Writes the header and rows: floats with six decimals, LF line endings.
pub fn write_results_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(|e| CliError::Csv(e.into()))?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T, CliError> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        CliError::Data(format!("results line {line}: bad {} value {raw:?}", HEADER[i]))
    })
}

fn opt_field(rec: &csv::StringRecord, i: usize, line: u64) -> Result<Option<f64>, CliError> {
    if rec.get(i).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        field(rec, i, line).map(Some)
    }
}

/// Parses a file written by [`write_results_csv`].
pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(CliError::Data(format!(
            "unexpected results header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(ResultRow {
            experiment: rec[0].to_string(),
            model: rec[1].to_string(),
            trial: field(&rec, 2, line)?,
            seed: field(&rec, 3, line)?,
            stage: field(&rec, 4, line)?,
            task_index: field(&rec, 5, line)?,
            task_name: rec[6].to_string(),
            accuracy: field(&rec, 7, line)?,
            beta: field(&rec, 8, line)?,
            d: opt_field(&rec, 9, line)?,
            s: opt_field(&rec, 10, line)?,
            delta_d: opt_field(&rec, 11, line)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(accuracy: f64, d: Option<f64>) -> ResultRow {
        ResultRow {
            experiment: "synthetic".into(),
            model: "autovcl".into(),
            trial: 0,
            seed: 7,
            stage: 2,
            task_index: 1,
            task_name: "blobs(sep=10,rot=0.000)".into(),
            accuracy,
            beta: 20.085536923,
            d,
            s: d.map(|_| 0.6),
            delta_d: d.map(|_| 0.0),
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"experiment,model,trial,seed,stage,task_index,task_name,accuracy,beta,d,s,delta_d\n");
    }

    #[test]
    fn floats_use_six_decimals_and_lf() {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[row(0.9722, Some(0.1)), row(0.5, None)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[1],
            "synthetic,autovcl,0,7,2,1,\"blobs(sep=10,rot=0.000)\",0.972200,20.085537,0.100000,0.600000,0.000000"
        );
        assert!(lines[2].ends_with(",0.500000,20.085537,,,"));
    }

    #[test]
    fn parse_back_reproduces_the_file() {
        let mut first = Vec::new();
        write_results_csv(&mut first, &[row(0.9722, Some(0.1)), row(0.5, None)]).unwrap();
        let parsed = read_results_csv(first.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].d, None);
        assert_eq!(parsed[0].accuracy, 0.9722);
        let mut second = Vec::new();
        write_results_csv(&mut second, &parsed).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn foreign_header_is_rejected() {
        assert!(matches!(read_results_csv(&b"a,b\n1,2\n"[..]), Err(CliError::Data(_))));
    }
}
