//! File formats: vocab files, JSON array containers for checkpoints and
//! features, corpus and decode JSON-lines, phrase lists, flat config files,
//! score TSV and loss-trace CSV.
//!
//! Every writer here has a matching reader and the pair round-trips exactly,
//! floats included.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::DecodeResult;
use crate::scorer::{DecoderConfig, DecoderParams};
use crate::trainer::EpochLoss;
use crate::types::{EncoderFeatures, Utterance, Vocab};

pub const FORMAT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- vocab

pub fn render_vocab(vocab: &Vocab) -> String {
    let mut s = String::new();
    for t in vocab.entries() {
        s.push_str(t);
        s.push('\n');
    }
    s
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_text(path, &render_vocab(vocab))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    Vocab::new(text.lines().map(String::from).collect())
}

// ---------------------------------------------------------------- arrays

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing container: a header object plus named row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayContainer {
    pub format_version: u32,
    pub kind: String,
    pub header: serde_json::Map<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl ArrayContainer {
    pub fn new(kind: &str) -> Self {
        ArrayContainer {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            header: serde_json::Map::new(),
            arrays: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.arrays.iter().flat_map(|a| &a.values).any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("writing {}", path.display())));
        }
        write_text(path, &serde_json::to_string(self)?)
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let text = read_text(path)?;
        let c: ArrayContainer =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                path,
                0,
                format!("unsupported format version {}", c.format_version),
            ));
        }
        if c.kind != kind {
            return Err(Error::parse(path, 0, format!("expected a {kind} file, found {}", c.kind)));
        }
        for a in &c.arrays {
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(Error::parse(path, 0, format!("array {} has wrong length", a.name)));
            }
        }
        Ok(c)
    }
}

pub fn write_features(path: &Path, x: &EncoderFeatures) -> Result<()> {
    let mut c = ArrayContainer::new("features");
    c.arrays.push(NamedArray {
        name: "features".into(),
        shape: vec![x.frames(), x.dim()],
        values: x.values().to_vec(),
    });
    c.write(path)
}

pub fn read_features(path: &Path) -> Result<EncoderFeatures> {
    let c = ArrayContainer::read(path, "features")?;
    let a = match c.arrays.as_slice() {
        [a] if a.shape.len() == 2 => a,
        _ => return Err(Error::parse(path, 0, "expected one 2-d array")),
    };
    EncoderFeatures::new(a.shape[0], a.shape[1], a.values.clone())
}

pub fn write_checkpoint(path: &Path, params: &DecoderParams, vocab: &Vocab) -> Result<()> {
    if params.config.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "decoder vocab size {} but vocab has {} entries",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let mut c = ArrayContainer::new("checkpoint");
    c.header
        .insert("config".into(), serde_json::to_value(params.config)?);
    c.header
        .insert("vocab".into(), serde_json::to_value(vocab.entries())?);
    for (name, a) in params.blocks() {
        c.arrays.push(NamedArray {
            name,
            shape: a.shape().to_vec(),
            values: a.iter().copied().collect(),
        });
    }
    c.write(path)
}

/// Loads a checkpoint and the vocabulary it was trained with.
pub fn read_checkpoint(path: &Path) -> Result<(DecoderParams, Vocab)> {
    let c = ArrayContainer::read(path, "checkpoint")?;
    let field = |k: &str| {
        c.header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::parse(path, 0, format!("checkpoint header lacks {k}")))
    };
    let config: DecoderConfig = serde_json::from_value(field("config")?)?;
    config.validate()?;
    let vocab = Vocab::new(serde_json::from_value(field("vocab")?)?)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::ConfigMismatch("checkpoint vocab and config disagree".into()));
    }
    let mut params = DecoderParams::zeros(config);
    let blocks: Vec<(String, Vec<usize>, Vec<f64>)> = c
        .arrays
        .into_iter()
        .map(|a| (a.name, a.shape, a.values))
        .collect();
    params.load_blocks(&blocks)?;
    Ok((params, vocab))
}

/// Loads a checkpoint and checks that it was trained on `vocab`.
pub fn read_checkpoint_for(path: &Path, vocab: &Vocab) -> Result<DecoderParams> {
    let (params, own) = read_checkpoint(path)?;
    if own.entries() != vocab.entries() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint {} was trained on a different vocabulary",
            path.display()
        )));
    }
    Ok(params)
}

// ---------------------------------------------------------------- JSON lines

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub words: Vec<String>,
    /// Relative to the directory holding the corpus file.
    pub feature_file: String,
}

/// Writes `utts` as JSON-lines at `path` with one feature file per utterance
/// under `<dir of path>/<feature_dir>/`.
pub fn write_corpus(path: &Path, feature_dir: &str, utts: &[Utterance]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("{feature_dir}/{}.json", u.id);
        write_features(&base.join(&rel), &u.features)?;
        records.push(CorpusRecord {
            id: u.id.clone(),
            words: u.words.clone(),
            feature_file: rel,
        });
    }
    write_jsonl(path, &records)
}

pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_jsonl::<CorpusRecord>(path)?
        .into_iter()
        .map(|r| {
            let x = read_features(&base.join(&r.feature_file))?;
            Utterance::new(r.id, r.words, vocab, Arc::new(x))
        })
        .collect()
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub hypothesis_words: Vec<String>,
    pub kept_phrases: Vec<String>,
    pub bonus: f64,
    pub base_score: f64,
    pub bias_score: f64,
}

impl From<&DecodeResult> for DecodeRecord {
    fn from(r: &DecodeResult) -> Self {
        DecodeRecord {
            id: r.id.clone(),
            hypothesis_words: r.hypothesis_words.clone(),
            kept_phrases: r.kept_phrases.clone(),
            bonus: r.bonus,
            base_score: r.base_score,
            bias_score: r.bias_score,
        }
    }
}

// ---------------------------------------------------------------- phrase lists

/// Phrase list file. Phrases before the first `#utt <id>` header apply to
/// every utterance without a section of its own.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhraseList {
    pub global: Vec<Vec<String>>,
    pub sections: Vec<(String, Vec<Vec<String>>)>,
}

const SECTION: &str = "#utt ";

impl PhraseList {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut list = PhraseList::default();
        let mut blank_at: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                blank_at.get_or_insert(i + 1);
                continue;
            }
            if let Some(id) = line.strip_prefix(SECTION) {
                let id = id.trim();
                if id.is_empty() || id.contains(char::is_whitespace) {
                    return Err(Error::parse(path, i + 1, "malformed section header"));
                }
                if list.sections.iter().any(|(s, _)| s == id) {
                    return Err(Error::parse(path, i + 1, format!("duplicate section {id}")));
                }
                list.sections.push((id.to_string(), Vec::new()));
                blank_at = None;
                continue;
            }
            if let Some(b) = blank_at {
                if !list.sections.is_empty() || !list.global.is_empty() {
                    return Err(Error::parse(path, b, "empty line inside a phrase section"));
                }
            }
            blank_at = None;
            let phrase: Vec<String> = line.split_whitespace().map(|w| w.to_lowercase()).collect();
            match list.sections.last_mut() {
                Some((_, v)) => v.push(phrase),
                None => list.global.push(phrase),
            }
        }
        Ok(list)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let put = |ps: &[Vec<String>], s: &mut String| {
            for p in ps {
                s.push_str(&p.join(" "));
                s.push('\n');
            }
        };
        put(&self.global, &mut s);
        for (id, ps) in &self.sections {
            s.push_str(SECTION);
            s.push_str(id);
            s.push('\n');
            put(ps, &mut s);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }

    pub fn for_utterance(&self, id: &str) -> &[Vec<String>] {
        self.sections
            .iter()
            .find(|(s, _)| s == id)
            .map_or(&self.global[..], |(_, v)| &v[..])
    }
}

// ---------------------------------------------------------------- flat config

/// `key = value` lines; `#` starts a comment line. Keys are consumed with
/// [`KeyValues::take`] and [`KeyValues::finish`] rejects any left over.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    source: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = KeyValues {
            source: path.to_path_buf(),
            entries: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(path, i + 1, "empty key"));
            }
            if kv.entries.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate key {k}")));
            }
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    /// Command-line override; replaces any value from the file.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::parse(&self.source, line, format!("{key}: {e}"))),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::parse(&self.source, line, format!("{key}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::parse(&self.source, line, format!("unknown key {k}"))),
        }
    }
}

pub fn render_key_values<'a, I: IntoIterator<Item = (&'a str, String)>>(pairs: I) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

// ---------------------------------------------------------------- scores

pub const EMPTY_PHRASE_LABEL: &str = "<empty>";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub utt_id: String,
    /// Space-joined words; [`EMPTY_PHRASE_LABEL`] for the no-bias phrase.
    pub phrase: String,
    pub log_prob: f64,
    pub per_token: f64,
    pub kept: bool,
}

const SCORE_HEADER: &str = "utt_id\tphrase\tlog_prob\tper_token_score\tkept";

pub fn render_scores(tol: f64, rows: &[ScoreRow]) -> String {
    let mut s = format!("# tol={tol}\n{SCORE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.phrase,
            r.log_prob,
            r.per_token,
            u8::from(r.kept)
        ));
    }
    s
}

pub fn write_scores(path: &Path, tol: f64, rows: &[ScoreRow]) -> Result<()> {
    write_text(path, &render_scores(tol, rows))
}

pub fn read_scores(path: &Path) -> Result<(f64, Vec<ScoreRow>)> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |n: usize, m: &str| Error::parse(path, n, m.to_string());
    let tol = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("# tol="))
        .and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| bad(1, "missing `# tol=` header"))?;
    if lines.next().map(|(_, l)| l) != Some(SCORE_HEADER) {
        return Err(bad(2, "missing column header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, &e.to_string()));
        rows.push(ScoreRow {
            utt_id: f[0].to_string(),
            phrase: f[1].to_string(),
            log_prob: num(f[2])?,
            per_token: num(f[3])?,
            kept: match f[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(i + 1, "kept must be 0 or 1")),
            },
        });
    }
    Ok((tol, rows))
}

// ---------------------------------------------------------------- loss trace

const TRACE_HEADER: &str = "epoch,L_log,L_disc,combined";

pub fn render_trace(trace: &[EpochLoss]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for e in trace {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.log, e.disc, e.combined));
    }
    s
}

pub fn write_trace(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    write_text(path, &render_trace(trace))
}

pub fn read_trace(path: &Path) -> Result<Vec<EpochLoss>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(TRACE_HEADER) {
        return Err(Error::parse(path, 1, "missing trace header"));
    }
    lines
        .map(|(i, l)| {
            let bad = |m: String| Error::parse(path, i + 1, m);
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 columns".into()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            Ok(EpochLoss {
                epoch: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                log: num(f[1])?,
                disc: num(f[2])?,
                combined: num(f[3])?,
            })
        })
        .collect()
}

/// Buffered line writer for large outputs.
pub fn with_writer<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.txt")
    }

    #[test]
    fn phrase_list_sections() {
        let text = "Global One\n#utt a\nFoo Bar\nbaz\n\n#utt b\nqux\n";
        let l = PhraseList::parse(text, p()).unwrap();
        assert_eq!(l.global, vec![vec!["global", "one"]]);
        assert_eq!(l.for_utterance("a").len(), 2);
        assert_eq!(l.for_utterance("a")[0], vec!["foo", "bar"]);
        assert_eq!(l.for_utterance("zzz"), &l.global[..]);
        let again = PhraseList::parse(&l.render(), p()).unwrap();
        assert_eq!(again, l);
    }

    #[test]
    fn phrase_list_rejects_inner_blank() {
        assert!(PhraseList::parse("#utt a\nfoo\n\nbar\n", p()).is_err());
        assert!(PhraseList::parse("#utt a\nfoo\n#utt a\n", p()).is_err());
        assert!(PhraseList::parse("\n#utt a\nfoo\n\n", p()).is_ok());
    }

    #[test]
    fn key_values_reject_unknown_and_parse() {
        let mut kv = KeyValues::parse("# c\nbeta = 0.5\nn = 1,2, 3\nextra = x\n", p()).unwrap();
        assert_eq!(kv.take::<f64>("beta").unwrap(), Some(0.5));
        assert_eq!(kv.take_list::<usize>("n").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.take::<f64>("missing").unwrap(), None);
        assert!(kv.finish().is_err());
        let mut kv = KeyValues::parse("beta = abc\n", p()).unwrap();
        assert!(kv.take::<f64>("beta").is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n", p()).is_err());
        assert!(KeyValues::parse("novalue\n", p()).is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut kv = KeyValues::parse("tol = 1\n", p()).unwrap();
        kv.set("tol", "2.5");
        assert_eq!(kv.take::<f64>("tol").unwrap(), Some(2.5));
        kv.finish().unwrap();
    }
}
