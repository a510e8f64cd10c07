//! Runs a servable as a confined subprocess.
//!
//! The child gets a fresh scratch directory as its cwd, HOME and TMPDIR; an
//! environment cleared down to `PATH`, `LANG`, `LC_ALL`, `TZ` plus
//! `FAIRFAB_PRECISION` and `FAIRFAB_RUNNER`; its own process group (killed
//! as a whole on timeout); and, where the kernel allows unprivileged user
//! namespaces, a private network namespace with no interfaces but loopback.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{self, FrameError, Tensor};
use super::servable::{Servable, ServableError};
use crate::metadata::SignatureMismatch;
use crate::peaks::Precision;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
const ENV_ALLOWLIST: &[&str] = &["PATH", "LANG", "LC_ALL", "TZ"];
const STDERR_TAIL: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("invalid servable: {0}")]
    Servable(#[from] ServableError),
    #[error("input does not match the servable signature: {0}")]
    Signature(SignatureMismatch),
    #[error("timeout after {0:?}")]
    Timeout(Duration),
    #[error("servable exited with {status}: {stderr}")]
    Crashed { status: String, stderr: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("servable reported an error: {0}")]
    Remote(String),
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ExecError {
    /// Short failure class stored on failed tasks.
    pub fn class(&self) -> &'static str {
        match self {
            ExecError::Servable(_) => "servable",
            ExecError::Signature(_) => "signature",
            ExecError::Timeout(_) => "timeout",
            ExecError::Crashed { .. } => "crashed",
            ExecError::Protocol(_) => "protocol",
            ExecError::Remote(_) => "remote",
            ExecError::Io(_) => "io",
        }
    }
}

impl From<FrameError> for ExecError {
    fn from(e: FrameError) -> Self {
        ExecError::Protocol(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Executable substituted for `$RUNNER` in servable entry commands.
    pub runner: PathBuf,
    pub timeout: Duration,
    /// Request a private network namespace; silently skipped where unsupported.
    pub isolate_network: bool,
    /// Parent for scratch directories; the system temp dir when `None`.
    pub scratch_root: Option<PathBuf>,
}

impl SandboxConfig {
    pub fn new(runner: impl Into<PathBuf>) -> Self {
        SandboxConfig { runner: runner.into(), timeout: DEFAULT_TIMEOUT, isolate_network: true, scratch_root: None }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// Whether unprivileged user+network namespaces can be created here.
pub fn network_isolation_available() -> bool {
    static PROBE: OnceLock<bool> = OnceLock::new();
    *PROBE.get_or_init(|| {
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "exit 0"]).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
        let ok = isolate(&mut cmd).and_then(|_| cmd.status().ok()).is_some_and(|s| s.success());
        if !ok {
            tracing::warn!("unprivileged network namespaces unavailable; servables run without network isolation");
        }
        ok
    })
}

/// Entry programs that cannot be exec'd inside the namespace.
fn unconfinable() -> &'static std::sync::Mutex<std::collections::HashSet<String>> {
    static SET: OnceLock<std::sync::Mutex<std::collections::HashSet<String>>> = OnceLock::new();
    SET.get_or_init(Default::default)
}

#[cfg(target_os = "linux")]
fn isolate(cmd: &mut Command) -> Option<()> {
    use std::ffi::CString;
    use std::os::unix::process::CommandExt;

    // Everything the child touches is prepared before fork.
    let uid = unsafe { libc::getuid() };
    let gid = unsafe { libc::getgid() };
    let writes: Vec<(CString, Vec<u8>)> = vec![
        (CString::new("/proc/self/setgroups").ok()?, b"deny".to_vec()),
        (CString::new("/proc/self/uid_map").ok()?, format!("{uid} {uid} 1").into_bytes()),
        (CString::new("/proc/self/gid_map").ok()?, format!("{gid} {gid} 1").into_bytes()),
    ];
    unsafe {
        cmd.pre_exec(move || {
            if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            for (path, data) in &writes {
                let fd = libc::open(path.as_ptr(), libc::O_WRONLY);
                if fd < 0 {
                    return Err(std::io::Error::last_os_error());
                }
                let n = libc::write(fd, data.as_ptr().cast(), data.len());
                libc::close(fd);
                if n < 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
    Some(())
}

#[cfg(not(target_os = "linux"))]
fn isolate(_cmd: &mut Command) -> Option<()> {
    None
}

fn kill_group(child: &mut Child) {
    #[cfg(unix)]
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

fn tail(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(STDERR_TAIL);
    String::from_utf8_lossy(&bytes[start..]).trim().to_string()
}

/// Runs `servable` on `input` under `precision` and returns its output tensor.
pub fn execute_servable(
    servable: &[u8],
    model_id: &str,
    input: &Tensor,
    precision: Precision,
    config: &SandboxConfig,
) -> Result<Tensor, ExecError> {
    let servable = Servable::from_bytes(servable)?;
    let manifest = &servable.manifest;
    input.check_len()?;
    manifest.input_signature.check(input.element_type, &input.shape).map_err(ExecError::Signature)?;

    let scratch = match &config.scratch_root {
        Some(root) => tempfile::Builder::new().prefix("fairfab-").tempdir_in(root)?,
        None => tempfile::Builder::new().prefix("fairfab-").tempdir()?,
    };
    servable.unpack_into(scratch.path())?;
    let tmp = scratch.path().join(".tmp");
    std::fs::create_dir_all(&tmp)?;

    let mut request = Vec::new();
    protocol::write_request(&mut request, model_id, &manifest.input_signature, &manifest.output_signature, input)?;

    let argv = servable.command(&config.runner);
    let output = run_confined(&argv, scratch.path(), &tmp, precision, config, request)?;
    let status = output.status;
    if !status.success() {
        let mut stderr = tail(&output.stderr);
        if let Ok(Err(msg)) = protocol::decode_response(&output.stdout) {
            stderr = if stderr.is_empty() { msg } else { format!("{msg}; {stderr}") };
        }
        return Err(ExecError::Crashed { status: status.to_string(), stderr });
    }
    let tensor = match protocol::decode_response(&output.stdout)? {
        Ok(t) => t,
        Err(msg) => return Err(ExecError::Remote(msg)),
    };
    let batch = input.shape.first().copied().unwrap_or(1);
    let expected = manifest.output_signature.bind(batch);
    if tensor.element_type != manifest.output_signature.element_type || tensor.shape != expected {
        return Err(ExecError::Protocol(format!(
            "output {} {:?} does not match signature {} {:?}",
            tensor.element_type.name(),
            tensor.shape,
            manifest.output_signature.element_type.name(),
            expected
        )));
    }
    Ok(tensor)
}

struct Captured {
    status: std::process::ExitStatus,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

fn run_confined(
    argv: &[String],
    scratch: &Path,
    tmp: &Path,
    precision: Precision,
    config: &SandboxConfig,
    request: Vec<u8>,
) -> Result<Captured, ExecError> {
    let build = |isolated: bool| {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(scratch)
            .env_clear()
            .env("HOME", scratch)
            .env("TMPDIR", tmp)
            .env("FAIRFAB_PRECISION", precision.name())
            .env("FAIRFAB_RUNNER", &config.runner)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for key in ENV_ALLOWLIST {
            if let Some(v) = std::env::var_os(key) {
                cmd.env(key, v);
            }
        }
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        if isolated {
            isolate(&mut cmd);
        }
        cmd
    };
    let spawn_failure = |e: std::io::Error| ExecError::Crashed {
        status: "spawn failure".into(),
        stderr: format!("{}: {e}", argv[0]),
    };

    let isolated = config.isolate_network
        && network_isolation_available()
        && !unconfinable().lock().expect("unconfinable lock").contains(&argv[0]);
    let mut child = match build(isolated).spawn() {
        Ok(c) => c,
        // Inside the namespace the runner path can be untraversable (a parent
        // directory owned by an unmapped uid); exec never happened, so retry
        // unconfined.
        Err(e) if isolated && e.kind() == std::io::ErrorKind::PermissionDenied => {
            if unconfinable().lock().expect("unconfinable lock").insert(argv[0].clone()) {
                tracing::warn!("{}: not executable inside a network namespace; running without it", argv[0]);
            }
            build(false).spawn().map_err(spawn_failure)?
        }
        Err(e) => return Err(spawn_failure(e)),
    };
    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");

    // A child that exits without reading its input makes this write fail
    // with a broken pipe; its exit status is the better diagnostic.
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&request);
    });
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let deadline = Instant::now() + config.timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            kill_group(&mut child);
            let _ = child.wait();
            let _ = writer.join();
            let _ = out_reader.join();
            let _ = err_reader.join();
            return Err(ExecError::Timeout(config.timeout));
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    // Reap anything the entry command left behind in its group.
    kill_group(&mut child);
    let _ = writer.join();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(Captured { status, stdout, stderr })
}
