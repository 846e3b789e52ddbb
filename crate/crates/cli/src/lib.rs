//! Interactive sessions and batch translation on top of a trained engine.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use udnmt::cache::UserProfile;
use udnmt::corpus::{detokenize, read_records, tokenize, TokenId};
use udnmt::model::{CacheTokens, DecodeMode};
use udnmt::training::Engine;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

/// Exit code for an error chain: data and format problems map to
/// [`exit::DATA`], configuration problems to [`exit::USAGE`], anything else
/// to [`exit::RUNTIME`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use udnmt::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => exit::USAGE,
                E::Json { .. }
                | E::MissingField { .. }
                | E::UnknownUser(_)
                | E::Checkpoint(_)
                | E::VocabularyMismatch(_)
                | E::Length { .. }
                | E::Io { .. } => exit::DATA,
                E::Shape { .. } | E::Domain(_) | E::Diverged { .. } => exit::RUNTIME,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return exit::DATA;
        }
    }
    exit::RUNTIME
}

/// The error chain on one line, skipping causes already quoted by the
/// message before them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// One user typing sentences one after another. Caches are updated after
/// each translation, so an input only influences later ones.
pub struct Session<'e> {
    engine: &'e Engine,
    user_id: String,
    history: Vec<Vec<TokenId>>,
    mode: DecodeMode,
    /// `None` until the first input when starting without history; the
    /// first input then serves as the probe for borrowing a topic cache.
    profile: Option<UserProfile>,
    pub transcript: Vec<(String, String)>,
}

/// What the REPL should do after a line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Translation(String),
    Info(String),
    Quit,
}

pub const HELP: &str = "commands: :caches  show cache keywords\n          :reset   forget all inputs since start\n          :help    this message\n          :quit    leave\nany other line is translated";

impl<'e> Session<'e> {
    pub fn new(engine: &'e Engine, user_id: &str, history: &[String], mode: DecodeMode) -> Self {
        let history: Vec<Vec<TokenId>> = history
            .iter()
            .map(|h| engine.vocab.source.encode(&tokenize(h)))
            .filter(|h| !h.is_empty())
            .collect();
        let mut s = Session {
            engine,
            user_id: user_id.to_string(),
            history,
            mode,
            profile: None,
            transcript: Vec::new(),
        };
        s.reset();
        s
    }

    pub fn profile(&self) -> Option<&UserProfile> {
        self.profile.as_ref()
    }

    /// Back to the state right after construction.
    pub fn reset(&mut self) {
        self.profile = if self.history.is_empty() {
            None
        } else {
            Some(
                self.engine
                    .env()
                    .profile_from_history(&self.user_id, &self.history, None),
            )
        };
        self.transcript.clear();
    }

    pub fn translate(&mut self, line: &str) -> udnmt::Result<String> {
        let ids = self.engine.vocab.source.encode(&tokenize(line));
        if ids.is_empty() {
            return Ok(String::new());
        }
        let env = self.engine.env();
        let profile = match &self.profile {
            Some(p) => p.clone(),
            None => env.init_profile(&self.user_id, &[], Some(&ids)),
        };
        let out = self
            .engine
            .translate_ids(&ids, &CacheTokens::from(&profile), self.mode)?;
        let text = detokenize(&self.engine.target_surfaces(&out));
        self.profile = Some(env.observe(&profile, &ids));
        self.transcript.push((line.to_string(), text.clone()));
        Ok(text)
    }

    pub fn caches_report(&self) -> String {
        let Some(p) = &self.profile else {
            return "caches are empty (no input yet)".to_string();
        };
        let mut out = String::new();
        let _ = writeln!(out, "topic cache ({}):", p.topic.origin);
        for e in &p.topic.entries {
            let _ = writeln!(out, "  {:<16} {:.4}", e.surface, e.weight);
        }
        let _ = writeln!(out, "context cache:");
        for e in &p.context.entries {
            let _ = writeln!(out, "  {:<16} {:.4}  t={}", e.surface, e.weight, e.timestamp);
        }
        out.trim_end().to_string()
    }

    /// Handles one REPL line.
    pub fn handle(&mut self, line: &str) -> udnmt::Result<Reply> {
        let line = line.trim();
        if let Some(cmd) = line.strip_prefix(':') {
            return Ok(match cmd {
                "caches" => Reply::Info(self.caches_report()),
                "reset" => {
                    self.reset();
                    Reply::Info("session reset".to_string())
                }
                "help" => Reply::Info(HELP.to_string()),
                "quit" | "q" | "exit" => Reply::Quit,
                other => Reply::Info(format!("unknown command :{other}\n{HELP}")),
            });
        }
        self.translate(line).map(Reply::Translation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationLine {
    pub user_id: String,
    pub source: String,
    pub translation: String,
}

/// Translates every record of `input` (targets optional) and writes one
/// JSON line per record to `output`. Returns the number of lines written.
pub fn translate_batch(engine: &Engine, input: &Path, output: &Path, mode: DecodeMode) -> Result<usize> {
    let records = read_records(input, false).with_context(|| format!("reading {}", input.display()))?;
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let history: Vec<Vec<TokenId>> = r
            .history
            .iter()
            .map(|h| engine.vocab.source.encode(&tokenize(h)))
            .collect();
        let source = engine.vocab.source.encode(&tokenize(&r.source));
        let translation = if source.is_empty() {
            String::new()
        } else {
            let profile = engine.profile(&r.user_id, &history, &source);
            let ids = engine
                .translate_ids(&source, &CacheTokens::from(&profile), mode)
                .with_context(|| format!("record {} of {}", i + 1, input.display()))?;
            detokenize(&engine.target_surfaces(&ids))
        };
        let line = TranslationLine {
            user_id: r.user_id.clone(),
            source: r.source.clone(),
            translation,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(output, out).with_context(|| format!("writing {}", output.display()))?;
    Ok(records.len())
}
