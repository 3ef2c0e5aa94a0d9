//! Run manifests: per-artifact checksums so tampering is detected when
//! reports are consumed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bfa_core::checkpoint::fnv1a64;

pub const MANIFEST_NAME: &str = "run.manifest";

#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub plan_hash: u64,
    pub created_unix: u64,
    pub version: String,
    /// Relative path -> (checksum when ok, status).
    pub artifacts: BTreeMap<String, (Option<u64>, ArtifactStatus)>,
}

impl RunManifest {
    pub fn new(plan_hash: u64) -> RunManifest {
        RunManifest {
            plan_hash,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Checksums an existing file and records it.
    pub fn record_file(&mut self, root: &Path, rel: &str) -> Result<()> {
        let bytes = std::fs::read(root.join(rel)).with_context(|| format!("reading artifact {rel}"))?;
        self.artifacts
            .insert(rel.to_string(), (Some(fnv1a64(&bytes)), ArtifactStatus::Ok));
        Ok(())
    }

    pub fn record_failure(&mut self, rel: &str, msg: &str) {
        let one_line = msg.replace('\n', " ");
        self.artifacts
            .insert(rel.to_string(), (None, ArtifactStatus::Failed(one_line)));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# bfa run manifest v1\n");
        out.push_str(&format!("version = {}\n", self.version));
        out.push_str(&format!("created_unix = {}\n", self.created_unix));
        out.push_str(&format!("plan_hash = {:#018x}\n", self.plan_hash));
        out.push_str("[artifacts]\n");
        for (rel, (sum, status)) in &self.artifacts {
            match status {
                ArtifactStatus::Ok => {
                    out.push_str(&format!("{rel} = {:#018x} ok\n", sum.expect("ok has checksum")))
                }
                ArtifactStatus::Failed(msg) => out.push_str(&format!("{rel} = - failed {msg}\n")),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<RunManifest> {
        let mut lines = text.lines();
        if lines.next() != Some("# bfa run manifest v1") {
            bail!("missing manifest header");
        }
        fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|r| r.strip_prefix(" = "))
                .ok_or_else(|| anyhow::anyhow!("manifest: expected `{key} = ...`"))
        }
        let version = field(lines.next(), "version")?.to_string();
        let created_unix: u64 = field(lines.next(), "created_unix")?.parse()?;
        let plan_hash_s = field(lines.next(), "plan_hash")?;
        let plan_hash = u64::from_str_radix(plan_hash_s.trim_start_matches("0x"), 16)?;
        if lines.next() != Some("[artifacts]") {
            bail!("manifest: missing [artifacts]");
        }
        let mut artifacts = BTreeMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (rel, rest) = line
                .split_once(" = ")
                .ok_or_else(|| anyhow::anyhow!("manifest: bad line {line:?}"))?;
            let mut parts = rest.splitn(3, ' ');
            let sum_s = parts.next().unwrap_or("");
            let status_s = parts.next().unwrap_or("");
            let msg = parts.next().unwrap_or("");
            let entry = match status_s {
                "ok" => (
                    Some(u64::from_str_radix(sum_s.trim_start_matches("0x"), 16)?),
                    ArtifactStatus::Ok,
                ),
                "failed" => (None, ArtifactStatus::Failed(msg.to_string())),
                other => bail!("manifest: bad status {other:?} on {rel}"),
            };
            artifacts.insert(rel.to_string(), entry);
        }
        Ok(RunManifest {
            plan_hash,
            created_unix,
            version,
            artifacts,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::write(root.join(MANIFEST_NAME), self.to_text())?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<RunManifest> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        RunManifest::from_text(&text)
    }

    /// Re-checksums every ok artifact; errors on the first mismatch.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, (sum, status)) in &self.artifacts {
            if let (Some(expected), ArtifactStatus::Ok) = (sum, status) {
                let bytes =
                    std::fs::read(root.join(rel)).with_context(|| format!("artifact {rel} missing"))?;
                let actual = fnv1a64(&bytes);
                if actual != *expected {
                    bail!(
                        "artifact {rel} checksum mismatch: recorded {expected:#018x}, found {actual:#018x}"
                    );
                }
            }
        }
        Ok(())
    }

    pub fn failed(&self) -> Vec<(&str, &str)> {
        self.artifacts
            .iter()
            .filter_map(|(rel, (_, status))| match status {
                ArtifactStatus::Failed(msg) => Some((rel.as_str(), msg.as_str())),
                ArtifactStatus::Ok => None,
            })
            .collect()
    }
}

/// Convenience: verify the manifest in `dir` against its files.
pub fn verify_dir(dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(dir)?;
    manifest.verify(dir)?;
    Ok(manifest)
}

pub fn rel_path(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

pub fn join_rel(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let mut m = RunManifest::new(42);
        m.record_file(dir.path(), "a.txt").unwrap();
        m.record_failure("b.txt", "boom\nmultiline");
        m.save(dir.path()).unwrap();

        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.plan_hash, 42);
        assert_eq!(back.artifacts.len(), 2);
        assert_eq!(back.failed(), vec![("b.txt", "boom multiline")]);
        back.verify(dir.path()).unwrap();

        // tamper
        std::fs::write(dir.path().join("a.txt"), b"HELLO").unwrap();
        let err = back.verify(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
    }
}
