//! Corpus BLEU, classification accuracy, and blinded human-evaluation sheets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub max_n: usize,
    /// Clipped n-gram matches per order (1-based order at index n-1).
    pub matches: Vec<usize>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<usize>,
    /// Precisions actually used, after smoothing.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub pairs: usize,
    /// BLEU in [0, 100].
    pub score: f64,
}

impl BleuReport {
    /// `key = value` lines, stable field order.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.12}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let ints = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        writeln!(s, "max_n = {}", self.max_n).unwrap();
        writeln!(s, "score = {:.12}", self.score).unwrap();
        writeln!(s, "brevity_penalty = {:.12}", self.brevity_penalty).unwrap();
        writeln!(s, "precisions = [{}]", list(&self.precisions)).unwrap();
        writeln!(s, "matches = [{}]", ints(&self.matches)).unwrap();
        writeln!(s, "totals = [{}]", ints(&self.totals)).unwrap();
        writeln!(s, "candidate_len = {}", self.candidate_len).unwrap();
        writeln!(s, "reference_len = {}", self.reference_len).unwrap();
        writeln!(s, "pairs = {}", self.pairs).unwrap();
        s
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-`max_n` with one reference per candidate.
///
/// Orders n ≥ 2 with zero clipped matches use `(m + 1) / (t + 1)`; zero
/// unigram matches give a score of 0.
pub fn bleu<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::CountMismatch {
            what: "candidates vs references",
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(refr, n);
            for (g, c) in ngram_counts(cand, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if matches[i] == 0 && i > 0 {
                1.0 / (totals[i] as f64 + 1.0)
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let score = if matches[0] == 0 || c_len == 0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        (100.0 * brevity_penalty * mean_log.exp()).min(100.0)
    };
    Ok(BleuReport {
        max_n,
        matches,
        totals,
        precisions,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
        pairs: candidates.len(),
        score,
    })
}

/// BLEU over character tokens of raw strings.
pub fn bleu_text<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    max_n: usize,
) -> Result<BleuReport> {
    let toks =
        |v: &[S]| -> Vec<Vec<String>> { v.iter().map(|s| tokenize(s.as_ref()).tokens).collect() };
    bleu(&toks(candidates), &toks(references), max_n)
}

pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::CountMismatch {
            what: "predicted vs gold labels",
            left: predicted.len(),
            right: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

pub const SYNTACTIC_GUIDE: &str =
    "syntactic: 1 if the composition of the generated text is complete and follows the form rules of the task (length, rhyme, pattern), else 0";
pub const SEMANTIC_GUIDE: &str = "semantic: 1 if the generated text is coherent and fluent, else 0";
const SHEET_HEADER: &str = "sheet_row_id\tsource\tgeneration\tsyntactic\tsemantic";
const KEY_HEADER: &str = "sheet_row_id\tsystem\ttask\titem_id";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SheetRow {
    pub row_id: String,
    pub source: String,
    pub generation: String,
    pub syntactic: Option<u8>,
    pub semantic: Option<u8>,
}

/// Evaluator-facing sheet; carries no system identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSheet {
    pub id: String,
    pub rows: Vec<SheetRow>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRow {
    pub row_id: String,
    pub system: String,
    pub task: String,
    pub item_id: usize,
}

/// One system's outputs, aligned with the shared source list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemOutputs {
    pub system: String,
    pub generations: Vec<String>,
}

fn clean_cell(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl EvalSheet {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# sheet {}\n# {SYNTACTIC_GUIDE}\n# {SEMANTIC_GUIDE}\n{SHEET_HEADER}\n",
            self.id
        );
        let score = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.row_id,
                clean_cell(&r.source),
                clean_cell(&r.generation),
                score(r.syntactic),
                score(r.semantic)
            )
            .unwrap();
        }
        s
    }

    /// Parses a (possibly filled) sheet; scores must be blank, 0 or 1.
    pub fn parse(id: &str, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen_header = false;
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim_end() != SHEET_HEADER {
                    return Err(Error::parse(
                        "eval sheet",
                        format!("line {}: expected header `{SHEET_HEADER}`", i + 1),
                    ));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 || cols.len() > 5 {
                return Err(Error::parse(
                    "eval sheet",
                    format!("line {}: expected 5 columns, found {}", i + 1, cols.len()),
                ));
            }
            let score = |k: usize| -> Result<Option<u8>> {
                match cols.get(k).map(|s| s.trim()).unwrap_or("") {
                    "" => Ok(None),
                    "0" => Ok(Some(0)),
                    "1" => Ok(Some(1)),
                    other => Err(Error::InvalidScore {
                        row: cols[0].to_string(),
                        value: other.to_string(),
                    }),
                }
            };
            rows.push(SheetRow {
                row_id: cols[0].to_string(),
                source: cols[1].to_string(),
                generation: cols[2].to_string(),
                syntactic: score(3)?,
                semantic: score(4)?,
            });
        }
        Ok(EvalSheet {
            id: id.to_string(),
            rows,
        })
    }
}

pub fn key_to_tsv(key: &[KeyRow]) -> String {
    let mut s = format!("{KEY_HEADER}\n");
    for k in key {
        writeln!(s, "{}\t{}\t{}\t{}", k.row_id, k.system, k.task, k.item_id).unwrap();
    }
    s
}

pub fn parse_key(text: &str) -> Result<Vec<KeyRow>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim_end() == KEY_HEADER || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                "key file",
                format!("line {}: expected 4 columns", i + 1),
            ));
        }
        let item_id = cols[3].parse().map_err(|_| {
            Error::parse(
                "key file",
                format!("line {}: bad item id `{}`", i + 1, cols[3]),
            )
        })?;
        out.push(KeyRow {
            row_id: cols[0].to_string(),
            system: cols[1].to_string(),
            task: cols[2].to_string(),
            item_id,
        });
    }
    Ok(out)
}

/// Samples `n_items` items and writes, for each evaluator, one sheet holding
/// every (system, item) pair in its own shuffled order.
pub fn make_eval_sheets(
    task: &str,
    sources: &[String],
    systems: &[SystemOutputs],
    n_items: usize,
    n_evaluators: usize,
    seed: u64,
) -> Result<(Vec<EvalSheet>, Vec<KeyRow>)> {
    if systems.is_empty() || n_evaluators == 0 || n_items == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = systems
        .iter()
        .find(|s| s.generations.len() != sources.len())
    {
        return Err(Error::Coverage(format!(
            "system {} has {} generations for {} items",
            s.system,
            s.generations.len(),
            sources.len()
        )));
    }
    if n_items > sources.len() {
        return Err(Error::Coverage(format!(
            "{n_items} items requested, {} available",
            sources.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..sources.len()).collect();
    let mut items: Vec<usize> = all.choose_multiple(&mut rng, n_items).copied().collect();
    items.sort_unstable();

    let mut sheets = Vec::with_capacity(n_evaluators);
    let mut key = Vec::new();
    for e in 0..n_evaluators {
        let mut pairs: Vec<(usize, usize)> = items
            .iter()
            .flat_map(|&i| (0..systems.len()).map(move |s| (s, i)))
            .collect();
        pairs.shuffle(&mut rng);
        let id = format!("{task}-e{:02}", e + 1);
        let rows = pairs
            .iter()
            .enumerate()
            .map(|(r, &(s, i))| {
                let row_id = format!("{id}-{:03}", r + 1);
                key.push(KeyRow {
                    row_id: row_id.clone(),
                    system: systems[s].system.clone(),
                    task: task.to_string(),
                    item_id: i,
                });
                SheetRow {
                    row_id,
                    source: sources[i].clone(),
                    generation: systems[s].generations[i].clone(),
                    syntactic: None,
                    semantic: None,
                }
            })
            .collect();
        sheets.push(EvalSheet { id, rows });
    }
    Ok((sheets, key))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AspectMeans {
    pub syntactic: f64,
    pub semantic: f64,
    pub ratings: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanEvalTable {
    /// `(system, task)` → mean scores.
    pub cells: BTreeMap<(String, String), AspectMeans>,
    /// Mean over all task-aspect cells of each system.
    pub averages: BTreeMap<String, f64>,
}

impl HumanEvalTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("system\ttask\tsyntactic\tsemantic\tratings\n");
        for ((sys, task), m) in &self.cells {
            writeln!(
                s,
                "{sys}\t{task}\t{:.2}\t{:.2}\t{}",
                m.syntactic, m.semantic, m.ratings
            )
            .unwrap();
        }
        for (sys, avg) in &self.averages {
            writeln!(s, "{sys}\taverage\t{avg:.2}\t{avg:.2}\t").unwrap();
        }
        s
    }
}

/// Joins filled sheets with the key and averages each aspect per system and task.
pub fn aggregate_sheets(sheets: &[EvalSheet], key: &[KeyRow]) -> Result<HumanEvalTable> {
    let lookup: HashMap<&str, &KeyRow> = key.iter().map(|k| (k.row_id.as_str(), k)).collect();
    let mut sums: BTreeMap<(String, String), (u64, u64, usize)> = BTreeMap::new();
    for sheet in sheets {
        for row in &sheet.rows {
            let k = lookup
                .get(row.row_id.as_str())
                .ok_or_else(|| Error::UnknownRow(row.row_id.clone()))?;
            let (Some(syn), Some(sem)) = (row.syntactic, row.semantic) else {
                return Err(Error::Unscored(row.row_id.clone()));
            };
            let e = sums
                .entry((k.system.clone(), k.task.clone()))
                .or_insert((0, 0, 0));
            e.0 += syn as u64;
            e.1 += sem as u64;
            e.2 += 1;
        }
    }
    if sums.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cells: BTreeMap<(String, String), AspectMeans> = sums
        .into_iter()
        .map(|(k, (syn, sem, n))| {
            (
                k,
                AspectMeans {
                    syntactic: syn as f64 / n as f64,
                    semantic: sem as f64 / n as f64,
                    ratings: n,
                },
            )
        })
        .collect();
    Ok(HumanEvalTable {
        averages: cell_averages(&cells),
        cells,
    })
}

/// Mean of every (task, aspect) cell per system.
pub fn cell_averages(cells: &BTreeMap<(String, String), AspectMeans>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((sys, _), m) in cells {
        let e = acc.entry(sys.clone()).or_insert((0.0, 0));
        e.0 += m.syntactic + m.semantic;
        e.1 += 2;
    }
    acc.into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect()
}
