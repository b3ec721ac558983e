use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::parse("split", format!("unknown split '{other}'"))),
        }
    }
}

/// One evaluated setting.
///
/// `dispersion` is the sample standard deviation of the per-seed mean
/// accuracies, not a confidence interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub learner: String,
    pub dataset: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub split: EvalSplit,
    pub mean_acc: f64,
    pub dispersion: f64,
    /// Episodes per evaluation seed.
    pub episodes: usize,
    pub seed: u64,
    /// Training epoch of the evaluated checkpoint.
    pub epoch: usize,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.mean_acc), || format!("accuracy {} outside [0, 1]", self.mean_acc))?;
        ensure(self.dispersion >= 0.0 && self.dispersion.is_finite(), || {
            format!("dispersion {} must be non-negative", self.dispersion)
        })
    }

    /// `84.23±0.93%`
    pub fn cell(&self) -> String {
        format!("{}±{}%", percent(self.mean_acc), percent(self.dispersion))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultFormat {
    Csv,
    Markdown,
}

impl ResultFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ResultFormat::Csv => "csv",
            ResultFormat::Markdown => "md",
        }
    }
}

impl FromStr for ResultFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ResultFormat::Csv),
            "markdown" | "md" => Ok(ResultFormat::Markdown),
            other => Err(Error::parse("result format", format!("unknown format '{other}'"))),
        }
    }
}

pub const RESULT_COLUMNS: [&str; 11] =
    ["policy", "learner", "dataset", "N", "K", "split", "mean_acc", "dispersion", "episodes", "seed", "epoch"];

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn row(r: &EvalReport) -> [String; 11] {
    [
        r.policy.clone(),
        r.learner.clone(),
        r.dataset.clone(),
        r.n_way.to_string(),
        r.k_shot.to_string(),
        r.split.to_string(),
        percent(r.mean_acc),
        percent(r.dispersion),
        r.episodes.to_string(),
        r.seed.to_string(),
        r.epoch.to_string(),
    ]
}

/// Renders `reports`; accuracies are percentages with two decimals.
pub fn render_results(reports: &[EvalReport], format: ResultFormat) -> Result<String> {
    ensure(!reports.is_empty(), || "no reports to emit".into())?;
    for r in reports {
        r.check()?;
    }
    match format {
        ResultFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(RESULT_COLUMNS).map_err(|e| Error::Serde(e.to_string()))?;
            for r in reports {
                w.write_record(row(r)).map_err(|e| Error::Serde(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
        }
        ResultFormat::Markdown => {
            let mut out = String::from(
                "Accuracy is the mean over evaluation seeds; ± is the standard deviation of the per-seed means.\n\n",
            );
            out.push_str("| policy | learner | dataset | N | K | split | accuracy | episodes | seed | epoch |\n");
            out.push_str("|---|---|---|---:|---:|---|---:|---:|---:|---:|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    r.policy,
                    r.learner,
                    r.dataset,
                    r.n_way,
                    r.k_shot,
                    r.split,
                    r.cell(),
                    r.episodes,
                    r.seed,
                    r.epoch
                ));
            }
            Ok(out)
        }
    }
}

pub fn emit_results(reports: &[EvalReport], format: ResultFormat, path: &Path) -> Result<()> {
    let text = render_results(reports, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn num<T: FromStr>(field: &str, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    field.trim().parse().map_err(|e: T::Err| Error::parse(what, format!("'{field}': {e}")))
}

fn from_percent(field: &str, what: &str) -> Result<f64> {
    Ok(num::<f64>(field, what)? / 100.0)
}

fn report_from_fields(f: &[&str], acc: f64, disp: f64, rest: &[&str]) -> Result<EvalReport> {
    Ok(EvalReport {
        policy: f[0].trim().to_string(),
        learner: f[1].trim().to_string(),
        dataset: f[2].trim().to_string(),
        n_way: num(f[3], "N")?,
        k_shot: num(f[4], "K")?,
        split: f[5].trim().parse()?,
        mean_acc: acc,
        dispersion: disp,
        episodes: num(rest[0], "episodes")?,
        seed: num(rest[1], "seed")?,
        epoch: num(rest[2], "epoch")?,
    })
}

/// Inverse of [`render_results`], up to the two-decimal rounding.
pub fn parse_results(text: &str, format: ResultFormat) -> Result<Vec<EvalReport>> {
    match format {
        ResultFormat::Csv => {
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            let header = rd.headers().map_err(|e| Error::parse("results header", e))?.clone();
            ensure(header.iter().eq(RESULT_COLUMNS), || format!("unexpected columns {header:?}"))?;
            rd.records()
                .map(|rec| {
                    let rec = rec.map_err(|e| Error::parse("results row", e))?;
                    let f: Vec<&str> = rec.iter().collect();
                    let acc = from_percent(f[6], "mean_acc")?;
                    let disp = from_percent(f[7], "dispersion")?;
                    report_from_fields(&f, acc, disp, &f[8..])
                })
                .collect()
        }
        ResultFormat::Markdown => text
            .lines()
            .filter(|l| l.starts_with('|'))
            .skip(2)
            .map(|l| {
                let f: Vec<&str> = l.trim().trim_matches('|').split('|').collect();
                ensure(f.len() == 10, || format!("markdown row has {} cells: {l}", f.len()))?;
                let cell = f[6].trim().trim_end_matches('%');
                let (acc, disp) = cell
                    .split_once('±')
                    .ok_or_else(|| Error::parse("accuracy cell", format!("'{cell}' lacks ±")))?;
                report_from_fields(&f, from_percent(acc, "accuracy")?, from_percent(disp, "dispersion")?, &f[7..])
            })
            .collect(),
    }
}

/// Mean and sample standard deviation; a single value has zero spread.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            policy: "CHV+DROP".into(),
            learner: "protonet".into(),
            dataset: "omniglot".into(),
            n_way: 5,
            k_shot: 1,
            split: EvalSplit::Test,
            mean_acc: 0.8423,
            dispersion: 0.0093,
            episodes: 600,
            seed: 3,
            epoch: 17,
        }
    }

    #[test]
    fn csv_has_header_and_one_row() {
        let text = render_results(&[report()], ResultFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "policy,learner,dataset,N,K,split,mean_acc,dispersion,episodes,seed,epoch");
        assert_eq!(lines[1], "CHV+DROP,protonet,omniglot,5,1,test,84.23,0.93,600,3,17");
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn markdown_uses_table_cells() {
        let text = render_results(&[report()], ResultFormat::Markdown).unwrap();
        assert!(text.contains("| 84.23±0.93% |"));
    }

    #[test]
    fn round_trip_both_formats() {
        for fmt in [ResultFormat::Csv, ResultFormat::Markdown] {
            let text = render_results(&[report(), report()], fmt).unwrap();
            let back = parse_results(&text, fmt).unwrap();
            assert_eq!(back.len(), 2);
            for b in &back {
                assert!((b.mean_acc - 0.8423).abs() < 1e-12 && (b.dispersion - 0.0093).abs() < 1e-12);
                assert_eq!(EvalReport { mean_acc: 0.8423, dispersion: 0.0093, ..b.clone() }, report());
            }
            assert_eq!(render_results(&back, fmt).unwrap(), text);
        }
    }

    #[test]
    fn empty_and_out_of_range_are_rejected() {
        assert!(render_results(&[], ResultFormat::Csv).is_err());
        let bad = EvalReport { mean_acc: 1.5, ..report() };
        assert!(render_results(&[bad], ResultFormat::Csv).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_std(&[0.5, 0.6, 0.7]);
        assert!((m - 0.6).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
        assert_eq!(mean_and_std(&[0.4]), (0.4, 0.0));
    }
}
