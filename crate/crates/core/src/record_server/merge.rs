use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::StoreError;

/// How per-replica outputs combine into the final result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MergePolicy {
    /// Append the parts in the given order.
    #[default]
    Concatenate,
    /// Run `program args... part1 part2 ...` and adopt its stdout.
    UserCommand(String),
}

pub fn merge_outputs(parts: &[PathBuf], policy: &MergePolicy, dest: &Path) -> Result<(), StoreError> {
    match policy {
        MergePolicy::Concatenate => {
            let mut out = File::create(dest)?;
            for p in parts {
                io::copy(&mut File::open(p)?, &mut out)?;
            }
            out.flush()?;
            Ok(())
        }
        MergePolicy::UserCommand(cmdline) => {
            let failed = |detail: String| StoreError::MergeCommandFailed { command: cmdline.clone(), detail };
            let mut words = cmdline.split_whitespace();
            let program = words.next().ok_or_else(|| failed("empty command".into()))?;
            let output = Command::new(program)
                .args(words)
                .args(parts)
                .stdin(Stdio::null())
                .output()
                .map_err(|e| failed(e.to_string()))?;
            if !output.status.success() {
                return Err(failed(format!("{}: {}", output.status, String::from_utf8_lossy(&output.stderr).trim())));
            }
            std::fs::write(dest, output.stdout)?;
            Ok(())
        }
    }
}
