//! Sandboxed-ish command execution for the build and test oracles.

use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::OracleError;

/// Captured output is clipped to this many bytes per stream.
const OUTPUT_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutcome {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }

    /// Deterministic transcript for evidence logs. Wall-clock time is
    /// deliberately absent.
    pub fn transcript(&self) -> String {
        let status = match (self.exit_code, self.signal) {
            (Some(c), _) => format!("exit={c}"),
            (None, Some(s)) => format!("signal={s}"),
            (None, None) => "exit=?".to_string(),
        };
        let mut out = status;
        if !self.stdout.is_empty() {
            out.push_str("\nstdout:\n");
            out.push_str(self.stdout.trim_end());
        }
        if !self.stderr.is_empty() {
            out.push_str("\nstderr:\n");
            out.push_str(self.stderr.trim_end());
        }
        out
    }
}

fn clip(bytes: Vec<u8>) -> String {
    let end = bytes.len().min(OUTPUT_LIMIT);
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

/// Run `sh -c command` in `workdir`, killing the whole process group once
/// `budget` elapses.
pub fn run_shell(
    command: &str,
    workdir: &Path,
    budget: Duration,
    stdin: Option<&[u8]>,
) -> Result<CommandOutcome, OracleError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(workdir)
        .env("LC_ALL", "C")
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| OracleError::Execution(format!("spawn `{command}`: {e}")))?;

    if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
        let input = input.to_vec();
        thread::spawn(move || {
            let _ = pipe.write_all(&input);
        });
    }
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let started = Instant::now();
    let mut pause = Duration::from_micros(200);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(e) => return Err(OracleError::Execution(format!("wait: {e}"))),
        }
        if started.elapsed() >= budget {
            // SAFETY: signalling the process group we created above.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            return Err(OracleError::Timeout { budget });
        }
        thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(20));
    };

    Ok(CommandOutcome {
        exit_code: status.code(),
        signal: status.signal(),
        stdout: clip(out_reader.join().unwrap_or_default()),
        stderr: clip(err_reader.join().unwrap_or_default()),
    })
}

/// Recursively copy a fixture project into a fresh working directory.
pub fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captures_exit_code_and_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_shell("echo hi; echo err >&2; exit 3", dir.path(), Duration::from_secs(10), None).unwrap();
        assert_eq!(out.exit_code, Some(3));
        assert_eq!(out.transcript(), "exit=3\nstdout:\nhi\nstderr:\nerr");
    }

    #[test]
    fn stdin_is_forwarded() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_shell("cat", dir.path(), Duration::from_secs(10), Some(b"payload")).unwrap();
        assert_eq!(out.stdout, "payload");
    }

    #[test]
    fn budget_exceeded_is_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let err = run_shell("sleep 30", dir.path(), Duration::from_millis(200), None).unwrap_err();
        assert!(matches!(err, OracleError::Timeout { .. }));
        assert!(started.elapsed() < Duration::from_secs(10));
    }
}
