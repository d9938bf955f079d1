//! Corpus preprocessing, task-pair construction, dataset splitting and
//! token statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocKind {
    Article,
    Poem,
    Couplet,
}

impl DocKind {
    pub const ALL: [DocKind; 3] = [DocKind::Article, DocKind::Poem, DocKind::Couplet];

    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::Article => "article",
            DocKind::Poem => "poem",
            DocKind::Couplet => "couplet",
        }
    }
}

impl FromStr for DocKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "article" => Ok(DocKind::Article),
            "poem" | "poetry" => Ok(DocKind::Poem),
            "couplet" => Ok(DocKind::Couplet),
            other => Err(Error::parse(
                "document kind",
                format!("unknown kind {other:?}"),
            )),
        }
    }
}

impl fmt::Display for DocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A document in first-line-title form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub title: String,
    pub body: String,
    pub kind: DocKind,
}

impl RawDocument {
    /// Splits `text` into title (first line) and body (remaining lines).
    pub fn from_text(text: &str, kind: DocKind) -> Self {
        let (title, body) = text.split_once('\n').unwrap_or((text, ""));
        RawDocument {
            title: title.trim_end_matches('\r').to_string(),
            body: body.to_string(),
            kind,
        }
    }
}

/// Parses a monolingual corpus: documents separated by blank lines.
pub fn parse_documents(text: &str, kind: DocKind) -> Vec<RawDocument> {
    split_blocks(text)
        .into_iter()
        .map(|block| RawDocument::from_text(&block, kind))
        .collect()
}

/// Blank-line separated blocks with line endings normalized to `\n`.
pub fn split_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current.join("\n"));
    }
    blocks
}

/// Writes documents (bodies only) as blank-line separated blocks.
pub fn join_blocks<S: AsRef<str>>(blocks: &[S]) -> String {
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(b.as_ref());
        out.push('\n');
    }
    out
}

/// Removes blacklisted and control characters, then collapses whitespace runs
/// to a single newline (if the run contained one) or a single space.
pub fn clean_text(text: &str, blacklist: &std::collections::HashSet<char>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending: Option<char> = None;
    for c in text.chars() {
        if blacklist.contains(&c) {
            continue;
        }
        if c.is_whitespace() {
            if c == '\n' {
                pending = Some('\n');
            } else if pending.is_none() {
                pending = Some(' ');
            }
            continue;
        }
        if c.is_control() {
            continue;
        }
        if let Some(sep) = pending.take() {
            if !out.is_empty() {
                out.push(sep);
            }
        }
        out.push(c);
    }
    out
}

/// Loads a symbol blacklist: every non-whitespace character in the file.
pub fn load_blacklist(path: impl AsRef<Path>) -> Result<std::collections::HashSet<char>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.chars().filter(|c| !c.is_whitespace()).collect())
}

/// Traditional → simplified codepoint table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimplifiedMap {
    map: HashMap<char, char>,
}

impl SimplifiedMap {
    /// Parses TSV rows `traditional<TAB>simplified`. Blank lines and lines
    /// starting with `#` are skipped. Chains (a→b, b→c) are resolved to
    /// their end so that conversion is idempotent; cycles are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |reason: &str| Error::MalformedMapping {
                line: line_no,
                reason: reason.to_string(),
            };
            if fields.len() != 2 {
                return Err(bad("expected two tab-separated fields"));
            }
            let single = |s: &str| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            };
            let (Some(from), Some(to)) = (single(fields[0]), single(fields[1])) else {
                return Err(bad("each field must be a single codepoint"));
            };
            if let Some(prev) = raw.insert(from, to) {
                if prev != to {
                    return Err(bad("conflicting mapping for the same codepoint"));
                }
            }
        }
        let mut map = HashMap::with_capacity(raw.len());
        for (&from, &to) in &raw {
            let mut end = to;
            let mut hops = 0;
            while let Some(&next) = raw.get(&end) {
                if next == end {
                    break;
                }
                end = next;
                hops += 1;
                if hops > raw.len() {
                    return Err(Error::MalformedMapping {
                        line: 0,
                        reason: format!("mapping cycle through {from}"),
                    });
                }
            }
            if from != end {
                map.insert(from, end);
            }
        }
        Ok(SimplifiedMap { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SimplifiedMap::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn to_simplified(text: &str, table: &SimplifiedMap) -> String {
    text.chars()
        .map(|c| *table.map.get(&c).unwrap_or(&c))
        .collect()
}

/// The document body, title removed.
pub fn strip_title(doc: &RawDocument) -> Result<String> {
    if doc.body.trim().is_empty() {
        return Err(Error::EmptyBody);
    }
    Ok(doc.body.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Poem topic classification.
    #[serde(rename = "PTC")]
    Ptc,
    /// Ancient → modern translation.
    #[serde(rename = "AMCT")]
    Amct,
    /// Poem generation, two lines → two lines.
    #[serde(rename = "CPG22")]
    Cpg22,
    /// Poem generation, one line → three lines.
    #[serde(rename = "CPG13")]
    Cpg13,
    /// Couplet generation.
    #[serde(rename = "CCG")]
    Ccg,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Ptc, Task::Amct, Task::Cpg22, Task::Cpg13, Task::Ccg];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ptc => "PTC",
            Task::Amct => "AMCT",
            Task::Cpg22 => "CPG22",
            Task::Cpg13 => "CPG13",
            Task::Ccg => "CCG",
        }
    }

    pub fn is_generation(self) -> bool {
        self != Task::Ptc
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "PTC" => Ok(Task::Ptc),
            "AMCT" => Ok(Task::Amct),
            "CPG22" => Ok(Task::Cpg22),
            "CPG13" => Ok(Task::Cpg13),
            "CCG" => Ok(Task::Ccg),
            _ => Err(Error::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub task: Task,
}

impl ParallelExample {
    pub fn new(source: &str, target: &str, task: Task) -> Result<Self> {
        let source = tokenize(source);
        let target = tokenize(target);
        if source.is_empty() || target.is_empty() {
            return Err(Error::parse(
                "parallel example",
                "source and target must be non-empty",
            ));
        }
        Ok(ParallelExample {
            source,
            target,
            task,
        })
    }
}

/// Reads a two-column TSV (`source<TAB>target`), skipping blank lines.
pub fn read_parallel_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse("parallel TSV", format!("line {} has no tab", i + 1)))?;
        if b.contains('\t') {
            return Err(Error::parse(
                "parallel TSV",
                format!("line {} has more than two columns", i + 1),
            ));
        }
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

pub fn write_parallel_tsv(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (a, b) in pairs {
        out.push_str(a);
        out.push('\t');
        out.push_str(b);
        out.push('\n');
    }
    out
}

/// Preferred separator between poem lines inside a source or target.
pub const LINE_SEPARATOR: char = '，';
/// Fallback when a line already contains [`LINE_SEPARATOR`].
pub const FALLBACK_SEPARATOR: char = '|';

/// `，` unless some line contains it, else `|`, so lines stay recoverable.
pub fn line_separator<S: AsRef<str>>(lines: &[S]) -> char {
    if lines.iter().any(|l| l.as_ref().contains(LINE_SEPARATOR)) {
        FALLBACK_SEPARATOR
    } else {
        LINE_SEPARATOR
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpgMode {
    #[serde(rename = "2-2")]
    TwoTwo,
    #[serde(rename = "1-3")]
    OneThree,
}

impl CpgMode {
    pub fn task(self) -> Task {
        match self {
            CpgMode::TwoTwo => Task::Cpg22,
            CpgMode::OneThree => Task::Cpg13,
        }
    }

    fn source_lines(self) -> usize {
        match self {
            CpgMode::TwoTwo => 2,
            CpgMode::OneThree => 1,
        }
    }
}

impl FromStr for CpgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2-2" | "22" => Ok(CpgMode::TwoTwo),
            "1-3" | "13" => Ok(CpgMode::OneThree),
            _ => Err(Error::parse(
                "cpg mode",
                format!("expected 2-2 or 1-3, got {s:?}"),
            )),
        }
    }
}

/// Source/target strings of a four-line poem, lines joined by `separator`.
pub fn make_cpg_strings<S: AsRef<str>>(
    lines: &[S],
    mode: CpgMode,
    separator: char,
) -> Result<(String, String)> {
    if lines.len() != 4 {
        return Err(Error::PoemLines(lines.len()));
    }
    let sep = separator.to_string();
    for l in lines {
        if l.as_ref().contains(separator) {
            return Err(Error::SeparatorInLine(l.as_ref().to_string()));
        }
    }
    let lines: Vec<&str> = lines.iter().map(AsRef::as_ref).collect();
    let k = mode.source_lines();
    Ok((lines[..k].join(&sep), lines[k..].join(&sep)))
}

pub fn make_cpg_pairs<S: AsRef<str>>(lines: &[S], mode: CpgMode) -> Result<ParallelExample> {
    let (source, target) = make_cpg_strings(lines, mode, line_separator(lines))?;
    ParallelExample::new(&source, &target, mode.task())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSizes {
    Counts {
        train: usize,
        dev: usize,
        test: usize,
    },
    Ratios {
        train: f64,
        dev: f64,
        test: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl SplitSpec {
    pub fn counts(train: usize, dev: usize, test: usize, seed: u64) -> Self {
        SplitSpec {
            sizes: SplitSizes::Counts { train, dev, test },
            seed,
        }
    }

    /// Absolute sizes for a dataset of `n` items. Ratio splits give any
    /// rounding remainder to train.
    pub fn resolve(&self, n: usize) -> Result<(usize, usize, usize)> {
        let (train, dev, test) = match self.sizes {
            SplitSizes::Counts { train, dev, test } => (train, dev, test),
            SplitSizes::Ratios { train, dev, test } => {
                if [train, dev, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || train + dev + test > 1.0 + 1e-9
                {
                    return Err(Error::InvalidSplit(format!("ratios {train}/{dev}/{test}")));
                }
                let dev_n = (n as f64 * dev).round() as usize;
                let test_n = (n as f64 * test).round() as usize;
                let train_n = if (train + dev + test - 1.0).abs() < 1e-9 {
                    n.saturating_sub(dev_n + test_n)
                } else {
                    (n as f64 * train).round() as usize
                };
                (train_n, dev_n, test_n)
            }
        };
        let needed = train + dev + test;
        if needed > n {
            return Err(Error::SplitTooLarge {
                needed,
                available: n,
            });
        }
        Ok((train, dev, test))
    }
}

/// Seeded shuffle then consecutive train/dev/test slices.
pub fn split_dataset<E: Clone>(
    examples: &[E],
    spec: &SplitSpec,
) -> Result<(Vec<E>, Vec<E>, Vec<E>)> {
    let (train, dev, test) = spec.resolve(examples.len())?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |range: std::ops::Range<usize>| {
        order[range]
            .iter()
            .map(|&i| examples[i].clone())
            .collect::<Vec<E>>()
    };
    Ok((
        take(0..train),
        take(train..train + dev),
        take(train + dev..train + dev + test),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub documents: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub tokens: usize,
    pub per_kind: BTreeMap<DocKind, KindStats>,
}

impl CorpusStats {
    pub fn to_toml(&self) -> String {
        let mut out = format!("documents = {}\ntokens = {}\n", self.documents, self.tokens);
        for kind in DocKind::ALL {
            let s = self.per_kind.get(&kind).copied().unwrap_or_default();
            out.push_str(&format!(
                "\n[per_kind.{kind}]\ndocuments = {}\ntokens = {}\n",
                s.documents, s.tokens
            ));
        }
        out
    }
}

/// Token counts per document kind, using the character tokenizer on bodies.
pub fn corpus_stats(docs: &[RawDocument]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for kind in DocKind::ALL {
        stats.per_kind.insert(kind, KindStats::default());
    }
    for doc in docs {
        let n = tokenize(&doc.body).len();
        let entry = stats.per_kind.entry(doc.kind).or_default();
        entry.documents += 1;
        entry.tokens += n;
    }
    stats.documents = stats.per_kind.values().map(|s| s.documents).sum();
    stats.tokens = stats.per_kind.values().map(|s| s.tokens).sum();
    stats
}
