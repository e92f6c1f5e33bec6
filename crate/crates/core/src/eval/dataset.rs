//! JSONL dataset ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{EvidenceDoc, Task};

/// One dataset line. Same shape as [`Task`].
pub type DatasetRecord = Task;

/// Share of malformed lines above which loading fails.
pub const MAX_MALFORMED_SHARE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset not found: {0}")]
    Missing(String),
    #[error("reading dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("{malformed} of {total} lines are malformed (first: line {first_line}: {first_message})")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub malformed: Vec<MalformedLine>,
}

/// Parses JSONL from any reader. Blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset, DatasetError> {
    let mut out = Dataset::default();
    let mut total = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<DatasetRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.malformed.push(MalformedLine {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if total > 0 && out.malformed.len() as f64 / total as f64 > MAX_MALFORMED_SHARE {
        let first = &out.malformed[0];
        return Err(DatasetError::TooManyMalformed {
            malformed: out.malformed.len(),
            total,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.display().to_string()));
    }
    parse_dataset(BufReader::new(File::open(path)?))
}

pub const FEVER_LABELS: [&str; 3] = ["SUPPORTS", "REFUTES", "NOT ENOUGH INFO"];

/// Claim-verification example mapped onto the question/answer record: the
/// claim becomes the question and the label the single gold answer.
pub fn fever_record(id: &str, claim: &str, label: &str, evidence: Vec<EvidenceDoc>) -> Option<DatasetRecord> {
    let label = FEVER_LABELS.iter().find(|l| l.eq_ignore_ascii_case(label.trim()))?;
    Some(Task {
        id: id.to_string(),
        question: claim.to_string(),
        contexts: evidence,
        gold_answers: vec![label.to_string()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","question":"q?","contexts":[{"doc_id":"d1","title":"T","sentences":["s0","s1"]}],"gold_answers":["x"]}"#;

    #[test]
    fn three_valid_lines() {
        let text = format!("{LINE}\n{}\n\n{}\n", LINE.replace("\"a\"", "\"b\""), LINE.replace("\"a\"", "\"c\""));
        let d = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.records.len(), 3);
        assert_eq!(d.records[2].id, "c");
        assert_eq!(d.records[0].contexts[0].sentences[1], "s1");
    }

    #[test]
    fn missing_question_is_malformed() {
        let bad = r#"{"id":"z","contexts":[],"gold_answers":[]}"#;
        let mut text = String::new();
        for i in 0..150 {
            text.push_str(&LINE.replace("\"a\"", &format!("\"a{i}\"")));
            text.push('\n');
        }
        text.push_str(bad);
        let d = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.records.len(), 150);
        assert_eq!(d.malformed.len(), 1);
        assert_eq!(d.malformed[0].line, 151);
        // one bad line in three is far over the limit
        let text = format!("{LINE}\n{LINE}\n{bad}\n");
        assert!(matches!(
            parse_dataset(text.as_bytes()),
            Err(DatasetError::TooManyMalformed { malformed: 1, total: 3, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty() {
        assert_eq!(parse_dataset("".as_bytes()).unwrap(), Dataset::default());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/data.jsonl")),
            Err(DatasetError::Missing(_))
        ));
    }

    #[test]
    fn fever_mapping() {
        let r = fever_record("f1", "The sky is green.", "refutes", vec![]).unwrap();
        assert_eq!(r.question, "The sky is green.");
        assert_eq!(r.gold_answers, vec!["REFUTES"]);
        assert!(fever_record("f2", "c", "MAYBE", vec![]).is_none());
    }
}
