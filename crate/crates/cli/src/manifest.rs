//! Run and pipeline manifests.
//!
//! ```toml
//! seed = 7             # root seed, appended as --seed to seeded stages
//! workdir = "/data"    # optional; defaults to the manifest's directory
//!
//! [[stage]]
//! command = "build-vocab"
//! args = ["--corpus", "corpus.txt", "--out", "vocab.txt"]
//! ```
//!
//! A run manifest is the same format with one stage and a `[resolved]`
//! table holding the fully resolved configuration of that run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::{Ctx, UsageError, EXIT_OK};

/// Subcommands that take `--seed`.
const SEEDED: [&str; 4] = ["preprocess", "pretrain", "finetune", "eval-sheets"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default, rename = "stage")]
    pub stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<toml::Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifests serialize")
    }

    /// The stage's argv with the root seed appended where the stage lacks one.
    pub fn stage_argv(&self, stage: &Stage) -> Vec<String> {
        let mut argv = vec![stage.command.clone()];
        argv.extend(stage.args.iter().cloned());
        if let Some(seed) = self.seed {
            if SEEDED.contains(&stage.command.as_str()) && !stage.args.iter().any(|a| a == "--seed")
            {
                argv.extend(["--seed".to_string(), seed.to_string()]);
            }
        }
        argv
    }
}

/// Records the invocation in `ctx` and `resolved` at `path`.
pub(crate) fn write_run_manifest(
    ctx: &Ctx,
    path: &Path,
    seed: Option<u64>,
    resolved: toml::Table,
) -> anyhow::Result<()> {
    let (command, args) = ctx.argv.split_first().expect("argv holds the subcommand");
    let m = Manifest {
        seed,
        workdir: Some(ctx.base.clone()),
        stages: vec![Stage {
            command: command.clone(),
            args: args.to_vec(),
        }],
        resolved: Some(resolved),
    };
    std::fs::write(path, m.to_toml()).with_context(|| format!("writing {}", path.display()))
}

/// Runs every stage in order; the first failing stage's exit code aborts.
pub(crate) fn reproduce(path: &Path) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest =
        Manifest::parse(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    if manifest.stages.is_empty() {
        return Err(UsageError(format!("manifest {} lists no stages", path.display())).into());
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = match &manifest.workdir {
        Some(w) if w.is_absolute() => w.clone(),
        Some(w) => dir.join(w),
        None => dir,
    };
    for (i, stage) in manifest.stages.iter().enumerate() {
        if stage.command == "reproduce" {
            return Err(UsageError("manifests cannot nest reproduce stages".into()).into());
        }
        let argv = manifest.stage_argv(stage);
        eprintln!(
            "[stage {}/{}] guwen {}",
            i + 1,
            manifest.stages.len(),
            argv.join(" ")
        );
        let args: Vec<OsString> = std::iter::once("guwen".to_string())
            .chain(argv)
            .map(OsString::from)
            .collect();
        let code = crate::run_in(&base, &args);
        if code != EXIT_OK {
            eprintln!(
                "stage {} ({}) failed with exit code {code}",
                i + 1,
                stage.command
            );
            return Ok(code);
        }
    }
    Ok(EXIT_OK)
}
