use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use guwen_core::checkpoint::{build_model, load_checkpoint, save_checkpoint};
use guwen_core::corpus::{
    clean_text, corpus_stats, join_blocks, line_separator, load_blacklist, make_cpg_strings,
    parse_documents, read_parallel_tsv, split_blocks, split_dataset, strip_title, to_simplified,
    write_parallel_tsv, CpgMode, DocKind, SimplifiedMap, SplitSizes, SplitSpec, Task,
};
use guwen_core::decoding::{decode_lines, DecodeConfig, Strategy};
use guwen_core::eval::{
    accuracy, aggregate_sheets, bleu_text, key_to_tsv, make_eval_sheets, parse_key, EvalSheet,
    SystemOutputs,
};
use guwen_core::finetune::{predict_classes, run_task, TaskConfig, TaskData};
use guwen_core::model::ModelConfig;
use guwen_core::pretrain::RunOutputs;
use guwen_core::tokenizer::{encode_unpadded, tokenize, Vocab};
use serde::Serialize;

use crate::config::{overlay, resolve_model, resolve_pretrain, PretrainFile};
use crate::manifest::write_run_manifest;
use crate::{
    AggregateArgs, BuildVocabArgs, Ctx, EvalSheetsArgs, FinetuneArgs, GenerateArgs, PreprocessArgs,
    PretrainArgs, ScoreArgs, StatsArgs, UsageError,
};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// `dir/name.manifest.toml` for a single-file output `dir/name`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{name}.manifest.toml"))
}

fn lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect()
}

fn to_table<S: Serialize>(value: &S) -> toml::Table {
    toml::Table::try_from(value).expect("config values serialize to tables")
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn parse_split(spec: &str, seed: u64) -> Result<SplitSpec> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(UsageError(format!(
            "--split needs three comma-separated values, got {spec:?}"
        ))
        .into());
    }
    let sizes = if let Ok(c) = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
    {
        SplitSizes::Counts {
            train: c[0],
            dev: c[1],
            test: c[2],
        }
    } else {
        let r = parts
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| {
                UsageError(format!(
                    "--split values must be counts or ratios, got {spec:?}"
                ))
            })?;
        SplitSizes::Ratios {
            train: r[0],
            dev: r[1],
            test: r[2],
        }
    };
    Ok(SplitSpec { sizes, seed })
}

pub(crate) fn preprocess(a: PreprocessArgs, ctx: &Ctx) -> Result<()> {
    let kind: DocKind = a.kind.parse()?;
    let cpg: Option<CpgMode> = a.cpg.as_deref().map(str::parse).transpose()?;
    let blacklist = match &a.blacklist {
        Some(p) => load_blacklist(ctx.path(p))?,
        None => HashSet::new(),
    };
    let t2s = a
        .t2s
        .as_ref()
        .map(|p| SimplifiedMap::load(ctx.path(p)))
        .transpose()?;
    let normalize = |s: &str| {
        let c = clean_text(s, &blacklist);
        match &t2s {
            Some(m) => to_simplified(&c, m),
            None => c,
        }
    };
    let split = a
        .split
        .as_deref()
        .map(|s| parse_split(s, a.seed))
        .transpose()?;
    let text = read(&ctx.path(&a.input))?;
    let out = ctx.path(&a.out);
    out_dir(&out)?;

    let mut resolved = toml::Table::new();
    resolved.insert("input".into(), path_value(&ctx.path(&a.input)));
    resolved.insert("kind".into(), kind.as_str().into());
    let mut skipped = 0usize;
    let kept;
    if a.parallel || cpg.is_some() {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if a.parallel {
            for (s, t) in read_parallel_tsv(&text)? {
                let (s, t) = (
                    normalize(&s).trim().to_string(),
                    normalize(&t).trim().to_string(),
                );
                if s.is_empty() || t.is_empty() {
                    skipped += 1;
                } else {
                    pairs.push((s, t));
                }
            }
        } else {
            let mode = cpg.expect("cpg mode set");
            resolved.insert("cpg".into(), a.cpg.clone().unwrap_or_default().into());
            for doc in parse_documents(&text, kind) {
                let Ok(body) = strip_title(&doc) else {
                    skipped += 1;
                    continue;
                };
                let body = normalize(&body);
                let verses: Vec<&str> = body
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .collect();
                match make_cpg_strings(&verses, mode, line_separator(&verses)) {
                    Ok(p) => pairs.push(p),
                    Err(_) => skipped += 1,
                }
            }
        }
        kept = pairs.len();
        write(&out.join("pairs.tsv"), &write_parallel_tsv(&pairs))?;
        if let Some(spec) = &split {
            let (train, dev, test) = split_dataset(&pairs, spec)?;
            for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
                write(&out.join(format!("{name}.tsv")), &write_parallel_tsv(part))?;
                let column = |f: fn(&(String, String)) -> &String| {
                    part.iter()
                        .map(|p| format!("{}\n", f(p)))
                        .collect::<String>()
                };
                write(&out.join(format!("{name}.src")), &column(|p| &p.0))?;
                write(&out.join(format!("{name}.tgt")), &column(|p| &p.1))?;
            }
        }
    } else {
        let mut bodies = Vec::new();
        for doc in parse_documents(&text, kind) {
            match strip_title(&doc).map(|b| normalize(&b).trim().to_string()) {
                Ok(b) if !b.is_empty() => bodies.push(b),
                _ => skipped += 1,
            }
        }
        kept = bodies.len();
        write(&out.join("corpus.txt"), &join_blocks(&bodies))?;
        if let Some(spec) = &split {
            let (train, dev, test) = split_dataset(&bodies, spec)?;
            for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
                write(&out.join(format!("{name}.txt")), &join_blocks(part))?;
            }
        }
    }
    if let Some(spec) = &split {
        resolved.insert("split".into(), toml::Value::Table(to_table(spec)));
    }
    resolved.insert("kept".into(), (kept as i64).into());
    resolved.insert("skipped".into(), (skipped as i64).into());
    eprintln!("preprocess: kept {kept}, skipped {skipped}");
    write_run_manifest(ctx, &out.join("manifest.toml"), Some(a.seed), resolved)
}

pub(crate) fn build_vocab(a: BuildVocabArgs, ctx: &Ctx) -> Result<()> {
    let paths: Vec<PathBuf> = a.corpus.iter().map(|p| ctx.path(p)).collect();
    let texts = paths.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let out = ctx.path(&a.out);
    if let Some(dir) = out.parent() {
        out_dir(dir)?;
    }
    vocab.save(&out)?;
    eprintln!("build-vocab: {} tokens", vocab.len());
    let mut resolved = toml::Table::new();
    resolved.insert(
        "corpus".into(),
        toml::Value::Array(paths.iter().map(|p| path_value(p)).collect()),
    );
    resolved.insert("size".into(), (vocab.len() as i64).into());
    write_run_manifest(ctx, &sibling_manifest(&out), None, resolved)
}

pub(crate) fn stats(a: StatsArgs, ctx: &Ctx) -> Result<()> {
    let mut docs = Vec::new();
    for spec in &a.input {
        let (kind, path) = spec
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--input expects KIND=PATH, got {spec:?}")))?;
        let kind: DocKind = kind.parse()?;
        docs.extend(parse_documents(&read(&ctx.path(Path::new(path)))?, kind));
    }
    let report = corpus_stats(&docs).to_toml();
    print!("{report}");
    if let Some(out) = &a.out {
        let out = ctx.path(out);
        write(&out, &report)?;
        let mut resolved = toml::Table::new();
        resolved.insert(
            "inputs".into(),
            toml::Value::Array(a.input.iter().map(|s| s.as_str().into()).collect()),
        );
        write_run_manifest(ctx, &sibling_manifest(&out), None, resolved)?;
    }
    Ok(())
}

pub(crate) fn pretrain(a: PretrainArgs, ctx: &Ctx) -> Result<()> {
    let file = a
        .config
        .as_ref()
        .map(|p| PretrainFile::load(&ctx.path(p)))
        .transpose()?
        .unwrap_or_default();
    let vocab_path = a
        .vocab
        .as_ref()
        .map(|p| ctx.path(p))
        .or(file.data.vocab.clone())
        .ok_or_else(|| UsageError("a vocabulary is required: --vocab or [data] vocab".into()))?;
    let corpus_paths: Vec<PathBuf> = if a.corpus.is_empty() {
        file.data.corpus.clone()
    } else {
        a.corpus.iter().map(|p| ctx.path(p)).collect()
    };
    if corpus_paths.is_empty() {
        return Err(UsageError("a corpus is required: --corpus or [data] corpus".into()).into());
    }
    let vocab = Vocab::load(&vocab_path)?;
    let init_path = a.init.as_ref().map(|p| ctx.path(p));
    let init = init_path
        .as_ref()
        .map(|p| load_checkpoint::<f32>(p))
        .transpose()?;
    let model = resolve_model(
        file.model.as_ref(),
        vocab.len(),
        init.as_ref().map(|c| &c.config),
    )?;
    let mut cfg = resolve_pretrain(file.pretrain.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.max_steps = n;
    }
    let mut docs = Vec::new();
    for p in &corpus_paths {
        docs.extend(split_blocks(&read(p)?));
    }

    let out = ctx.path(&a.out);
    out_dir(&out)?;
    let log_path = out.join("train.log");
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let outcome = guwen_core::pretrain::pretrain::<f32, _>(
        &docs,
        &vocab,
        &model,
        &cfg,
        init.as_ref(),
        RunOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(&out),
        },
    )?;
    save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt"))?;

    let mut data = toml::Table::new();
    data.insert("vocab".into(), path_value(&vocab_path));
    data.insert(
        "corpus".into(),
        toml::Value::Array(corpus_paths.iter().map(|p| path_value(p)).collect()),
    );
    if let Some(p) = &init_path {
        data.insert("init".into(), path_value(p));
    }
    let mut resolved = toml::Table::new();
    resolved.insert("data".into(), data.into());
    resolved.insert("model".into(), to_table(&model).into());
    resolved.insert("pretrain".into(), to_table(&cfg).into());
    write(&out.join("config.toml"), &toml::to_string(&resolved)?)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "pretrain: {} steps, final loss {last:.4}",
        outcome.checkpoint.step
    );
    write_run_manifest(ctx, &out.join("manifest.toml"), Some(cfg.seed), resolved)
}

fn task_seed(cfg: &TaskConfig) -> u64 {
    match cfg {
        TaskConfig::Classification(c) => c.seed,
        TaskConfig::Generation(c) => c.seed,
    }
}

fn labeled(text: &str) -> Result<Vec<(String, usize)>> {
    read_parallel_tsv(text)?
        .into_iter()
        .map(|(t, l)| {
            let label = l
                .trim()
                .parse::<usize>()
                .map_err(|_| guwen_core::Error::Parse {
                    what: "labeled TSV".into(),
                    msg: format!("label {l:?} is not a class index"),
                })?;
            Ok((t, label))
        })
        .collect()
}

pub(crate) fn finetune(a: FinetuneArgs, ctx: &Ctx) -> Result<()> {
    let task: Task = a.task.parse()?;
    let mut cfg = match &a.config {
        Some(p) => TaskConfig::from_toml(task, &read(&ctx.path(p))?)?,
        None => TaskConfig::defaults(task),
    };
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(e) = a.epochs {
        match &mut cfg {
            TaskConfig::Classification(c) => c.epochs = e,
            TaskConfig::Generation(c) => c.epochs = e,
        }
    }
    let vocab = Vocab::load(ctx.path(&a.vocab))?;
    let mut encoder = load_checkpoint::<f32>(&ctx.path(&a.encoder))?;
    if a.random_init {
        let body = ModelConfig {
            decoder_layers: 0,
            num_classes: 0,
            ..encoder.config.clone()
        };
        encoder = build_model(&body, task_seed(&cfg))?;
    }
    let (train, dev) = (read(&ctx.path(&a.train))?, read(&ctx.path(&a.dev))?);
    let data = if task.is_generation() {
        TaskData::Parallel {
            train: read_parallel_tsv(&train)?,
            dev: read_parallel_tsv(&dev)?,
        }
    } else {
        TaskData::Labeled {
            train: labeled(&train)?,
            dev: labeled(&dev)?,
        }
    };
    let outcome = run_task(task, &data, &encoder, &vocab, &cfg)?;

    let out = ctx.path(&a.out);
    out_dir(&out)?;
    save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt"))?;
    write(&out.join("metrics.tsv"), &outcome.report_tsv())?;
    let config_text = cfg.to_toml();
    write(&out.join("config.toml"), &config_text)?;
    let mut resolved: toml::Table = toml::from_str(&config_text)?;
    let mut run = toml::Table::new();
    run.insert("task".into(), task.as_str().into());
    run.insert("encoder".into(), path_value(&ctx.path(&a.encoder)));
    run.insert("random_init".into(), a.random_init.into());
    run.insert("best_epoch".into(), (outcome.best_epoch as i64).into());
    resolved.insert("run".into(), run.into());
    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.dev_metric);
    eprintln!(
        "finetune {task}: best epoch {} (dev {:.4})",
        outcome.best_epoch,
        best.unwrap_or(f64::NAN)
    );
    write_run_manifest(
        ctx,
        &out.join("manifest.toml"),
        Some(task_seed(&cfg)),
        resolved,
    )
}

pub(crate) fn generate(a: GenerateArgs, ctx: &Ctx) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&ctx.path(&a.ckpt))?;
    let vocab = Vocab::load(ctx.path(&a.vocab))?;
    let inputs = lines(&read(&ctx.path(&a.input))?);
    let mut resolved = toml::Table::new();
    let outputs: Vec<String> = if ckpt.config.decoder_layers > 0 {
        let mut dc = match &a.config {
            Some(p) => overlay(
                &DecodeConfig::default(),
                &toml::from_str(&read(&ctx.path(p))?)?,
                "decode",
            )?,
            None => DecodeConfig::default(),
        };
        if a.greedy {
            dc.strategy = Strategy::Greedy;
            dc.beam_size = 1;
        }
        if let Some(b) = a.beam {
            dc.strategy = Strategy::Beam;
            dc.beam_size = b;
        }
        if let Some(m) = a.max_len {
            dc.max_decode_len = m;
        }
        if let Some(lp) = a.length_penalty {
            dc.length_penalty = lp;
        }
        resolved.insert("decode".into(), to_table(&dc).into());
        decode_lines(&ckpt, &vocab, &inputs, &dc)?
    } else if ckpt.config.num_classes > 0 {
        let rows: Vec<Vec<u32>> = inputs
            .iter()
            .map(|l| encode_unpadded(&tokenize(l), &vocab, ckpt.config.max_positions))
            .collect();
        resolved.insert("classify".into(), true.into());
        predict_classes(&ckpt, &rows, vocab.specials().pad)?
            .iter()
            .map(usize::to_string)
            .collect()
    } else {
        return Err(anyhow!(guwen_core::Error::NoDecoder));
    };
    let out = ctx.path(&a.out);
    if let Some(dir) = out.parent() {
        out_dir(dir)?;
    }
    write(
        &out,
        &outputs.iter().map(|l| format!("{l}\n")).collect::<String>(),
    )?;
    resolved.insert("ckpt".into(), path_value(&ctx.path(&a.ckpt)));
    resolved.insert("lines".into(), (outputs.len() as i64).into());
    write_run_manifest(ctx, &sibling_manifest(&out), None, resolved)
}

pub(crate) fn score(a: ScoreArgs, ctx: &Ctx) -> Result<()> {
    let cand = lines(&read(&ctx.path(&a.cand))?);
    let refs = lines(&read(&ctx.path(&a.reference))?);
    let metric = a.metric.to_ascii_lowercase();
    let (score, report) = if metric == "accuracy" {
        let c: Vec<&str> = cand.iter().map(|s| s.trim()).collect();
        let r: Vec<&str> = refs.iter().map(|s| s.trim()).collect();
        let acc = accuracy(&c, &r)?;
        let hits = c.iter().zip(&r).filter(|(x, y)| x == y).count();
        let report = format!(
            "metric = \"accuracy\"\nscore = {:.12}\ncorrect = {hits}\ntotal = {}\n",
            100.0 * acc,
            r.len()
        );
        (100.0 * acc, report)
    } else {
        let n = metric
            .strip_prefix("bleu")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| (1..=9).contains(n))
            .ok_or_else(|| {
                UsageError(format!(
                    "unknown metric {:?} (bleu1..bleu9, accuracy)",
                    a.metric
                ))
            })?;
        let r = bleu_text(&cand, &refs, n)?;
        (r.score, format!("metric = \"bleu{n}\"\n{}", r.to_toml()))
    };
    println!("{score:.2}");
    if let Some(out) = &a.out {
        let out = ctx.path(out);
        if let Some(dir) = out.parent() {
            out_dir(dir)?;
        }
        write(&out, &report)?;
        let mut resolved = toml::Table::new();
        resolved.insert("metric".into(), metric.into());
        resolved.insert("cand".into(), path_value(&ctx.path(&a.cand)));
        resolved.insert("ref".into(), path_value(&ctx.path(&a.reference)));
        write_run_manifest(ctx, &sibling_manifest(&out), None, resolved)?;
    }
    Ok(())
}

pub(crate) fn eval_sheets(a: EvalSheetsArgs, ctx: &Ctx) -> Result<()> {
    let sources = lines(&read(&ctx.path(&a.sources))?);
    let mut systems = Vec::new();
    for spec in &a.systems {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--system expects NAME=PATH, got {spec:?}")))?;
        systems.push(SystemOutputs {
            system: name.to_string(),
            generations: lines(&read(&ctx.path(Path::new(path)))?),
        });
    }
    let (sheets, key) =
        make_eval_sheets(&a.task, &sources, &systems, a.items, a.evaluators, a.seed)?;
    let out = ctx.path(&a.out);
    out_dir(&out)?;
    for s in &sheets {
        write(&out.join(format!("{}.tsv", s.id)), &s.to_tsv())?;
    }
    write(&out.join("key.tsv"), &key_to_tsv(&key))?;
    let mut resolved = toml::Table::new();
    resolved.insert("task".into(), a.task.as_str().into());
    resolved.insert("items".into(), (a.items as i64).into());
    resolved.insert("evaluators".into(), (a.evaluators as i64).into());
    resolved.insert(
        "systems".into(),
        toml::Value::Array(systems.iter().map(|s| s.system.as_str().into()).collect()),
    );
    eprintln!(
        "eval-sheets: {} sheets of {} rows",
        sheets.len(),
        sheets.first().map_or(0, |s| s.rows.len())
    );
    write_run_manifest(ctx, &out.join("manifest.toml"), Some(a.seed), resolved)
}

/// Sheet files named directly, plus every `*.tsv` except keys in named directories.
fn sheet_files(args: &[PathBuf], ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in args {
        let p = ctx.path(p);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "tsv")
                        && !f
                            .file_stem()
                            .is_some_and(|s| s.to_string_lossy().starts_with("key"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p);
        }
    }
    Ok(files)
}

pub(crate) fn aggregate(a: AggregateArgs, ctx: &Ctx) -> Result<()> {
    let mut sheets = Vec::new();
    for f in sheet_files(&a.sheets, ctx)? {
        let id = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        sheets.push(
            EvalSheet::parse(&id, &read(&f)?)
                .with_context(|| format!("in sheet {}", f.display()))?,
        );
    }
    let mut key = Vec::new();
    for k in &a.key {
        key.extend(parse_key(&read(&ctx.path(k))?)?);
    }
    let table = aggregate_sheets(&sheets, &key)?;
    let tsv = table.to_tsv();
    print!("{tsv}");
    if let Some(out) = &a.out {
        let out = ctx.path(out);
        write(&out, &tsv)?;
        let mut resolved = toml::Table::new();
        resolved.insert("sheets".into(), (sheets.len() as i64).into());
        write_run_manifest(ctx, &sibling_manifest(&out), None, resolved)?;
    }
    Ok(())
}
