use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, CorpusError, Pool, Split, Style};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn load_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string().split(" at line").next().unwrap_or_default().to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads full caption records, audio features included.
pub fn load_jsonl(path: &Path) -> Result<Vec<CaptionRecord>, CorpusError> {
    load_lines(path)
}

/// Caption record without its audio payload. Deserialising this never
/// touches the `features` field, whatever it contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub caption: String,
    pub split: Split,
    pub style: Style,
    pub pool: Pool,
}

impl From<&CaptionRecord> for TextRecord {
    fn from(r: &CaptionRecord) -> Self {
        Self { id: r.id.clone(), caption: r.caption.clone(), split: r.split, style: r.style, pool: r.pool }
    }
}

pub fn load_text_jsonl(path: &Path) -> Result<Vec<TextRecord>, CorpusError> {
    load_lines(path)
}
