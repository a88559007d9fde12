#![allow(dead_code)]

use std::path::{Path, PathBuf};

use precedent_core::ingestion::{read_crash_inputs, read_log_inputs, IngestError, Pipeline, RuleBasedTransformer};
use precedent_core::HashEmbedder;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Runs the offline pipeline over every fixture crash report and capture,
/// appending to `corpus`.
pub fn ingest_fixtures(corpus: &Path) -> Result<(), IngestError> {
    let embedder = HashEmbedder::new(64).expect("dim");
    let pipeline = Pipeline {
        transformer: &RuleBasedTransformer,
        embedder: &embedder,
    };
    for n in read_crash_inputs(&fixtures().join("crashes"), "crash-sample")? {
        pipeline.ingest_crash_report(&n, corpus)?;
    }
    for c in read_log_inputs(&fixtures().join("logs"))? {
        pipeline.ingest_driving_log(&c, corpus)?;
    }
    Ok(())
}

/// Compares against a golden file, rewriting it instead when
/// `PRECEDENT_UPDATE_GOLDEN` is set.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixtures().join("golden").join(name);
    if std::env::var_os("PRECEDENT_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from golden"))
    }
}
