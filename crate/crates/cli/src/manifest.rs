//! `manifest.txt`: one `key=value` per line. Keys under `arg.` are the
//! command-line flags of the run and are enough to replay it.

use std::fmt::Write as _;
use std::path::Path;

use sparsed::toydlm::parse_kv;
use sparsed::{ToyModelConfig, VERSION};

use crate::args::{AblateArgs, BaseArgsView, BenchArgs, GenerateArgs};
use crate::common::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("tool_version", VERSION);
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_flags(&mut self, flags: &[(&str, String)]) {
        for (flag, value) in flags {
            self.set(&format!("arg.{flag}"), value);
        }
    }

    pub fn set_model(&mut self, config: &ToyModelConfig) {
        for line in config.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("model.{k}"), v);
            }
        }
    }

    pub fn set_files(&mut self, files: &[String]) {
        self.set("files", files.join(","));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let kv = parse_kv(text).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
        Ok(Self {
            entries: kv.into_iter().collect(),
        })
    }

    /// Command line that reproduces the run, optionally into another directory.
    pub fn replay_argv(&self, out_dir: Option<&Path>) -> CliResult<Vec<String>> {
        let command = self
            .get("command")
            .ok_or_else(|| CliError::Usage("manifest has no command".into()))?;
        let mut argv = vec!["sparsed".to_string(), command.to_string()];
        for (k, v) in &self.entries {
            let Some(flag) = k.strip_prefix("arg.") else {
                continue;
            };
            if flag == "out-dir" && out_dir.is_some() {
                continue;
            }
            match v.as_str() {
                "true" => argv.push(format!("--{flag}")),
                "false" => {}
                _ => {
                    argv.push(format!("--{flag}"));
                    argv.push(v.clone());
                }
            }
        }
        if let Some(dir) = out_dir {
            argv.push("--out-dir".into());
            argv.push(dir.display().to_string());
        }
        Ok(argv)
    }
}

fn path_flag(p: &Path) -> String {
    std::fs::canonicalize(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .display()
        .to_string()
}

fn push_common(flags: &mut Vec<(&'static str, String)>, v: BaseArgsView<'_>) {
    flags.push(("rho", v.sparse.rho.to_string()));
    flags.push(("skip", v.sparse.skip.to_string()));
    flags.push(("block-size", v.sparse.block_size.to_string()));
    flags.push(("steps", v.sparse.steps.to_string()));
    flags.push(("seed", v.model.seed.to_string()));
    if let Some(p) = &v.model.model_config {
        flags.push(("model-config", path_flag(p)));
    }
    if let Some(seq) = v.sequence {
        flags.push(("seq-len", seq.seq_len.to_string()));
        if let Some(p) = seq.prefill_len {
            flags.push(("prefill-len", p.to_string()));
        }
        if let Some(p) = &seq.prompt_file {
            flags.push(("prompt-file", path_flag(p)));
        }
    }
    if let Some(b) = v.baseline {
        if let Some(w) = b.window {
            flags.push(("window", w.to_string()));
        }
        if let Some(s) = b.sink {
            flags.push(("sink", s.to_string()));
        }
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn generate_flags(a: &GenerateArgs) -> Vec<(&'static str, String)> {
    let mut f = vec![("mode", a.mode.as_str().to_string())];
    push_common(&mut f, a.view());
    f.push(("dump-attn", a.dump_attn.to_string()));
    f.push(("out-dir", a.out_dir.display().to_string()));
    f
}

pub fn bench_flags(a: &BenchArgs) -> Vec<(&'static str, String)> {
    let modes: Vec<&str> = a.modes.iter().map(|m| m.as_str()).collect();
    let mut f = vec![
        ("seq-lens", list(&a.seq_lens)),
        ("modes", list(&modes)),
        ("repeats", a.repeats.to_string()),
    ];
    push_common(&mut f, a.view());
    f.push(("out-dir", a.out_dir.display().to_string()));
    f
}

pub fn ablate_flags(a: &AblateArgs) -> Vec<(&'static str, String)> {
    let mut f = vec![
        ("sweep", a.sweep.as_str().to_string()),
        ("values", list(&a.values)),
    ];
    push_common(&mut f, a.view());
    f.push(("out-dir", a.out_dir.display().to_string()));
    f
}
