//! CSV score files: `score`, `label,score` and `group,score`.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::calibration::LabeledScoreSet;
use crate::error::{Result, SpiError};
use crate::subset_selection::GroupedScores;
use crate::transporter::ScoreVector;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        SpiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn records<R: Read>(input: R, expected: &[&str], source: &str) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(SpiError::config(format!(
            "{source}: expected header {:?}, found {:?}",
            expected.join(","),
            header.join(",")
        )));
    }
    Ok(reader.records().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn parse_score(field: &str, line: usize, source: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| SpiError::domain(format!("{source}: row {line}: cannot parse score {field:?}")))
}

/// Reads a single-column `score` file.
pub fn read_scores<R: Read>(input: R, source: &str) -> Result<ScoreVector> {
    let rows = records(input, &["score"], source)?;
    let values = rows
        .iter()
        .enumerate()
        .map(|(i, r)| parse_score(&r[0], i + 2, source))
        .collect::<Result<Vec<_>>>()?;
    ScoreVector::new(values)
}

pub fn read_scores_file(path: &Path) -> Result<ScoreVector> {
    read_scores(open(path)?, &path.display().to_string())
}

fn read_pairs<R: Read>(input: R, key: &str, source: &str) -> Result<Vec<(String, f64)>> {
    records(input, &[key, "score"], source)?
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((r[0].to_string(), parse_score(&r[1], i + 2, source)?)))
        .collect()
}

pub fn read_labeled<R: Read>(input: R, source: &str) -> Result<LabeledScoreSet> {
    LabeledScoreSet::new(read_pairs(input, "label", source)?)
}

pub fn read_labeled_file(path: &Path) -> Result<LabeledScoreSet> {
    read_labeled(open(path)?, &path.display().to_string())
}

/// Groups keep the order of their first appearance.
pub fn read_grouped<R: Read>(input: R, source: &str) -> Result<GroupedScores> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (id, score) in read_pairs(input, "group", source)? {
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(score),
            None => groups.push((id, vec![score])),
        }
    }
    GroupedScores::new(
        groups
            .into_iter()
            .map(|(id, v)| Ok((id, ScoreVector::new(v)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

pub fn read_grouped_file(path: &Path) -> Result<GroupedScores> {
    read_grouped(open(path)?, &path.display().to_string())
}
