//! Labeled datasets on disk: JSONL/CSV ingest and the append-only
//! training-set store.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use policyprobe_core::data::{average_rating, LabeledExample};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Toxic,
    Nontoxic,
}

impl Label {
    pub fn is_toxic(self) -> bool {
        self == Label::Toxic
    }

    pub fn from_toxic(toxic: bool) -> Self {
        if toxic {
            Label::Toxic
        } else {
            Label::Nontoxic
        }
    }
}

impl FromStr for Label {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toxic" | "1" | "true" | "yes" => Ok(Label::Toxic),
            "nontoxic" | "0" | "false" | "no" => Ok(Label::Nontoxic),
            other => bail!("unknown label {other:?} (expected toxic or nontoxic)"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Original,
    HumanQueue,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<Vec<u8>>,
    #[serde(default)]
    pub source: Source,
}

impl Record {
    pub fn avg_rating(&self) -> Option<f64> {
        self.ratings.as_deref().and_then(average_rating)
    }

    pub fn to_example(&self) -> LabeledExample {
        LabeledExample { comment: self.text.clone(), toxic: self.label.is_toxic(), ratings: self.ratings.clone().unwrap_or_default() }
    }

    pub fn from_example(id: String, e: &LabeledExample, source: Source) -> Self {
        Record {
            id,
            text: e.comment.clone(),
            label: Label::from_toxic(e.toxic),
            ratings: (!e.ratings.is_empty()).then(|| e.ratings.clone()),
            source,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            bail!("empty text");
        }
        if let Some(r) = &self.ratings {
            if r.iter().any(|&m| m > 1) {
                bail!("ratings must be 0 or 1");
            }
        }
        Ok(())
    }
}

pub fn to_examples(records: &[Record]) -> Vec<LabeledExample> {
    records.iter().map(Record::to_example).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("csv") => Ok(Format::Csv),
            _ => bail!("cannot tell the format of {}; use .jsonl or .csv", path.display()),
        }
    }
}

impl FromStr for Format {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            _ => bail!("unknown format {s:?} (expected jsonl or csv)"),
        }
    }
}

#[derive(Deserialize)]
struct RawJson {
    id: Option<serde_json::Value>,
    text: Option<String>,
    label: Option<serde_json::Value>,
    #[serde(default)]
    ratings: Option<Vec<u8>>,
    #[serde(default)]
    source: Option<Source>,
}

fn label_value(v: &serde_json::Value) -> Result<Label> {
    match v {
        serde_json::Value::String(s) => s.parse(),
        serde_json::Value::Bool(b) => Ok(Label::from_toxic(*b)),
        serde_json::Value::Number(n) if n.as_u64() == Some(0) || n.as_u64() == Some(1) => Ok(Label::from_toxic(n.as_u64() == Some(1))),
        other => bail!("unknown label {other}"),
    }
}

fn id_value(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => bail!("id must be a string or number, got {other}"),
    }
}

fn parse_json_row(line: &str, line_no: usize) -> Result<Record> {
    let raw: RawJson = serde_json::from_str(line)?;
    let text = raw.text.ok_or_else(|| anyhow!("missing text"))?;
    let label = label_value(raw.label.as_ref().ok_or_else(|| anyhow!("missing label"))?)?;
    let id = match raw.id {
        Some(v) => id_value(&v)?,
        None => format!("row-{line_no}"),
    };
    let r = Record { id, text, label, ratings: raw.ratings, source: raw.source.unwrap_or_default() };
    r.validate()?;
    Ok(r)
}

fn check_unique(records: &[Record]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            bail!("duplicate id {:?}", r.id);
        }
    }
    Ok(())
}

/// Load and validate a dataset. Rows without an id get `row-<line>`.
pub fn ingest(path: &Path, format: Format) -> Result<Vec<Record>> {
    let records = match format {
        Format::Jsonl => ingest_jsonl(path)?,
        Format::Csv => ingest_csv(path)?,
    };
    check_unique(&records).with_context(|| format!("in {}", path.display()))?;
    Ok(records)
}

fn ingest_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_json_row(&line, i + 1).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn ingest_csv(path: &Path) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(text_col), Some(label_col)) = (col("text"), col("label")) else {
        bail!("{}: header must name text and label columns", path.display());
    };
    let (id_col, ratings_col, source_col) = (col("id"), col("ratings"), col("source"));
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Line numbers count the header as line 1.
        let line_no = i + 2;
        let row_result = (|| -> Result<Record> {
            let row = row?;
            let get = |c: Option<usize>| c.and_then(|c| row.get(c)).map(str::to_string).filter(|s| !s.is_empty());
            let text = get(Some(text_col)).ok_or_else(|| anyhow!("missing text"))?;
            let label: Label = get(Some(label_col)).ok_or_else(|| anyhow!("missing label"))?.parse()?;
            let ratings = match get(ratings_col) {
                Some(s) => Some(s.split(';').map(|m| m.trim().parse::<u8>().map_err(|_| anyhow!("bad rating {m:?}"))).collect::<Result<Vec<u8>>>()?),
                None => None,
            };
            let source = match get(source_col) {
                Some(s) => serde_json::from_value(serde_json::Value::String(s.clone())).map_err(|_| anyhow!("unknown source {s:?}"))?,
                None => Source::Original,
            };
            let r = Record { id: get(id_col).unwrap_or_else(|| format!("row-{line_no}")), text, label, ratings, source };
            r.validate()?;
            Ok(r)
        })();
        out.push(row_result.with_context(|| format!("{}: line {line_no}", path.display()))?);
    }
    Ok(out)
}

/// Write records as JSONL.
pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Append-only JSONL training set with unique ids. One writer at a time;
/// every successful append is synced before it is visible in memory.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    records: Vec<Record>,
    ids: HashSet<String>,
    /// A torn final line (from an interrupted write) was skipped on open.
    pub torn_tail: bool,
}

impl Store {
    /// Open or create the store at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut torn_tail = false;
        if path.exists() {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let ends_clean = text.is_empty() || text.ends_with('\n');
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Record>(line) {
                    Ok(r) => records.push(r),
                    Err(_) if i + 1 == lines.len() && !ends_clean => torn_tail = true,
                    Err(e) => return Err(anyhow!(e)).with_context(|| format!("{}: line {}", path.display(), i + 1)),
                }
            }
        } else {
            write_atomic(path, b"")?;
        }
        check_unique(&records).with_context(|| format!("in {}", path.display()))?;
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let mut store = Store { path: path.to_path_buf(), records, ids, torn_tail };
        if torn_tail {
            store.compact()?;
            store.torn_tail = true;
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    /// Persist one record. On any error the store is left unchanged.
    pub fn append(&mut self, record: Record) -> Result<()> {
        if self.ids.contains(&record.id) {
            bail!("duplicate id {:?}", record.id);
        }
        record.validate()?;
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().append(true).create(true).open(&self.path).with_context(|| format!("opening {}", self.path.display()))?;
        let before = f.metadata()?.len();
        if let Err(e) = f.write_all(&line).and_then(|_| f.sync_data()) {
            // Roll back a partial line so the file matches memory.
            let _ = f.set_len(before);
            return Err(e).with_context(|| format!("appending to {}", self.path.display()));
        }
        self.ids.insert(record.id.clone());
        self.records.push(record);
        Ok(())
    }

    /// Rewrite the file from the in-memory records.
    pub fn compact(&mut self) -> Result<()> {
        write_jsonl(&self.path, &self.records)?;
        self.torn_tail = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn jsonl_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            r#"{"id":"a","text":"hello","label":"nontoxic"}
{"text":"you idiot","label":"toxic","ratings":[1,0,1]}
{"id":7,"text":"ok","label":0,"source":"synthetic"}

{"id":"d","text":"fine","label":"nontoxic"}
"#,
        );
        let rs = ingest(&p, Format::Jsonl).unwrap();
        assert_eq!(rs.len(), 4);
        assert_eq!(rs[1].id, "row-2");
        assert_eq!(rs[1].avg_rating(), Some(2.0 / 3.0));
        assert_eq!(rs[2].id, "7");
        assert_eq!(rs[2].source, Source::Synthetic);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.jsonl", "{\"text\":\"a\",\"label\":\"toxic\"}\n{\"label\":\"toxic\"}\n");
        let e = format!("{:#}", ingest(&p, Format::Jsonl).unwrap_err());
        assert!(e.contains("line 2") && e.contains("missing text"), "{e}");
        let p = write(dir.path(), "e.jsonl", "{\"id\":\"x\",\"text\":\"a\",\"label\":\"toxic\"}\n{\"id\":\"x\",\"text\":\"b\",\"label\":\"toxic\"}\n");
        assert!(format!("{:#}", ingest(&p, Format::Jsonl).unwrap_err()).contains("duplicate id"));
        let p = write(dir.path(), "f.jsonl", "{\"text\":\"a\",\"label\":\"toxic\",\"ratings\":[2]}\n");
        assert!(ingest(&p, Format::Jsonl).is_err());
    }

    #[test]
    fn csv_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "id,text,label,ratings\na,\"hi, there\",nontoxic,0;0\nb,you idiot,toxic,1;0;1\n,x,toxic,\n");
        let rs = ingest(&p, Format::Csv).unwrap();
        assert_eq!(rs.len(), 3);
        assert_eq!(rs[0].text, "hi, there");
        assert_eq!(rs[1].avg_rating(), Some(2.0 / 3.0));
        assert_eq!(rs[2].id, "row-4");
        assert_eq!(rs[2].ratings, None);
        let p = write(dir.path(), "e.csv", "text,label\nok,toxic\n,toxic\n");
        let e = format!("{:#}", ingest(&p, Format::Csv).unwrap_err());
        assert!(e.contains("line 3"), "{e}");
        let p = write(dir.path(), "f.csv", "comment,label\nok,toxic\n");
        assert!(ingest(&p, Format::Csv).is_err());
    }

    fn rec(id: &str) -> Record {
        Record { id: id.into(), text: format!("text {id}"), label: Label::Toxic, ratings: None, source: Source::HumanQueue }
    }

    #[test]
    fn store_appends_durably_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("store.jsonl");
        let mut s = Store::open(&p).unwrap();
        for i in 0..100 {
            s.append(rec(&i.to_string())).unwrap();
        }
        assert!(s.append(rec("5")).is_err());
        assert_eq!(s.len(), 100);
        let s2 = Store::open(&p).unwrap();
        assert_eq!(s2.records(), s.records());
        assert_eq!(s2.records()[99].id, "99");
    }

    #[test]
    fn torn_tail_is_dropped_and_compacted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("store.jsonl");
        let mut s = Store::open(&p).unwrap();
        s.append(rec("a")).unwrap();
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"id\":\"b\",\"te").unwrap();
        drop(f);
        let s2 = Store::open(&p).unwrap();
        assert!(s2.torn_tail);
        assert_eq!(s2.len(), 1);
        assert!(fs::read_to_string(&p).unwrap().ends_with("}\n"));
        fs::write(&p, "garbage\n{}\n").unwrap();
        assert!(Store::open(&p).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn ids_stay_unique_across_reopen(ops in proptest::collection::vec((0u8..8, proptest::collection::vec(0u8..3, 0..5)), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.jsonl");
            let mut store = Store::open(&p).unwrap();
            let mut kept = Vec::new();
            for (id, ratings) in ops {
                let r = Record { id: format!("r{id}"), text: "some text".into(), label: Label::Toxic, ratings: Some(ratings), source: Source::Original };
                let fresh = !kept.iter().any(|k: &Record| k.id == r.id);
                let valid = r.validate().is_ok();
                proptest::prop_assert_eq!(store.append(r.clone()).is_ok(), fresh && valid);
                if fresh && valid {
                    kept.push(r);
                }
            }
            let again = Store::open(&p).unwrap();
            proptest::prop_assert_eq!(again.records(), &kept[..]);
            for r in again.records() {
                if let Some(a) = r.avg_rating() {
                    proptest::prop_assert!((0.0..=1.0).contains(&a));
                }
            }
        }
    }
}
