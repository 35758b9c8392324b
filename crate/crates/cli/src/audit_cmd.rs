//! `audit`: runs the configured check families and writes `audit.jsonl`.

use std::path::Path;

use quadmech::audit::{append_jsonl, run_checks, AuditReport};
use serde_json::{json, Map};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{input_hash, record, Entry};

pub const AUDIT_FILE: &str = "audit.jsonl";

pub struct AuditOutcome {
    pub reports: Vec<AuditReport>,
    pub failures: usize,
}

impl AuditOutcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures > 0)
    }
}

pub fn audit(cfg: &RunConfig, out: &Path, broken_delta_u: bool) -> Result<AuditOutcome> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let a = &cfg.audit;
    let broken = broken_delta_u || a.broken_delta_u;
    let reports = run_checks(&a.checks, &a.scale.sizes(), cfg.seed, broken)?;
    let path = out.join(AUDIT_FILE);
    // Truncate first: the file holds exactly this run's reports.
    std::fs::write(&path, b"").map_err(|e| CliError::io(&path, e))?;
    append_jsonl(&path, &reports)?;
    let failures = reports.iter().filter(|r| r.is_failure()).count();

    let mut extra = Map::new();
    extra.insert("broken_delta_u".into(), json!(broken));
    extra.insert("reports".into(), json!(reports.len()));
    extra.insert("failures".into(), json!(failures));
    record(
        out,
        cfg,
        Entry {
            command: "audit",
            input_hash: input_hash(cfg, &[])?,
            inputs: Vec::new(),
            artifacts: vec![path],
            extra,
        },
    )?;
    Ok(AuditOutcome { reports, failures })
}
