use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use fair_fabric::peaks::{
    export_servable, input_signature, nn_forward_f32, output_signature, positions_to_tensor, synth_dataset,
    ParamDistribution, Precision, TinyNetWeights,
};
use fair_fabric::tasking::servable::{Servable, ServableManifest, PROTOCOL_VERSION, RUNNER_PLACEHOLDER};
use fair_fabric::tasking::{execute_servable, ExecError, SandboxConfig, Tensor};

fn runner() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fairfab-runner"))
}

fn config() -> SandboxConfig {
    SandboxConfig::new(runner()).with_timeout(Duration::from_secs(30))
}

fn shell_servable(script: &str, echo_signature: bool) -> Vec<u8> {
    let manifest = ServableManifest {
        protocol_version: PROTOCOL_VERSION,
        entry: vec!["/bin/sh".into(), "-c".into(), script.into()],
        input_signature: input_signature(),
        output_signature: if echo_signature { input_signature() } else { output_signature() },
    };
    Servable::new(manifest, BTreeMap::new()).unwrap().to_bytes()
}

fn echo_servable() -> Vec<u8> {
    let manifest = ServableManifest {
        protocol_version: PROTOCOL_VERSION,
        entry: vec![RUNNER_PLACEHOLDER.into(), "echo".into()],
        input_signature: input_signature(),
        output_signature: input_signature(),
    };
    Servable::new(manifest, BTreeMap::new()).unwrap().to_bytes()
}

fn batch(n: usize, seed: u64) -> (Vec<[f32; 121]>, Tensor) {
    let patches = synth_dataset(n, &ParamDistribution::default(), seed).unwrap();
    let raw: Vec<[f32; 121]> = patches.iter().map(|p| p.intensities).collect();
    let flat: Vec<f32> = raw.iter().flatten().copied().collect();
    (raw, Tensor::from_f32(vec![n as u64, 1, 11, 11], &flat).unwrap())
}

#[test]
fn echo_round_trips_bytes() {
    let (_, input) = batch(5, 1);
    let out = execute_servable(&echo_servable(), "m", &input, Precision::StrictF32, &config()).unwrap();
    assert_eq!(out, input);
}

#[test]
fn braggnn_servable_matches_direct_forward_on_both_profiles() {
    let weights = TinyNetWeights::glorot(11);
    let servable = export_servable(&weights);
    let (raw, input) = batch(64, 2);
    for precision in [Precision::StrictF32, Precision::F64Accumulate] {
        let out = execute_servable(&servable, "m", &input, precision, &config()).unwrap();
        assert_eq!(out.shape, vec![64, 2]);
        let direct = positions_to_tensor(&nn_forward_f32(&weights, &raw, precision).unwrap());
        assert_eq!(out.data, direct, "{precision}");
    }
}

#[test]
fn signature_mismatch_is_rejected_before_spawning() {
    let bad = Tensor::from_f32(vec![1, 1, 11, 12], &[0.0; 132]).unwrap();
    let err = execute_servable(&echo_servable(), "m", &bad, Precision::StrictF32, &config()).unwrap_err();
    assert!(matches!(err, ExecError::Signature(_)), "{err}");
    assert_eq!(err.class(), "signature");
}

#[test]
fn timeout_kills_the_process_group() {
    let (_, input) = batch(1, 4);
    let servable = shell_servable("sleep 30 & sleep 30", false);
    let cfg = SandboxConfig::new(runner()).with_timeout(Duration::from_millis(300));
    let started = Instant::now();
    let err = execute_servable(&servable, "m", &input, Precision::StrictF32, &cfg).unwrap_err();
    assert!(matches!(err, ExecError::Timeout(_)), "{err}");
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn crash_reports_status_and_stderr_tail() {
    let (_, input) = batch(1, 5);
    let servable = shell_servable("cat >/dev/null; echo boom >&2; exit 3", false);
    let err = execute_servable(&servable, "m", &input, Precision::StrictF32, &config()).unwrap_err();
    match &err {
        ExecError::Crashed { status, stderr } => {
            assert!(status.contains('3'), "{status}");
            assert!(stderr.contains("boom"), "{stderr}");
        }
        other => panic!("expected a crash, got {other}"),
    }
}

#[test]
fn garbage_output_is_a_protocol_error() {
    let (_, input) = batch(1, 6);
    let servable = shell_servable("cat >/dev/null; printf 'not a frame at all'", false);
    let err = execute_servable(&servable, "m", &input, Precision::StrictF32, &config()).unwrap_err();
    assert_eq!(err.class(), "protocol", "{err}");
}

#[test]
fn wrong_output_shape_is_a_protocol_error() {
    // The echo runner returns its input, which violates the [n,2] output signature.
    let manifest = ServableManifest {
        protocol_version: PROTOCOL_VERSION,
        entry: vec![RUNNER_PLACEHOLDER.into(), "echo".into()],
        input_signature: input_signature(),
        output_signature: output_signature(),
    };
    let servable = Servable::new(manifest, BTreeMap::new()).unwrap().to_bytes();
    let (_, input) = batch(2, 7);
    let err = execute_servable(&servable, "m", &input, Precision::StrictF32, &config()).unwrap_err();
    assert_eq!(err.class(), "protocol", "{err}");
}

#[test]
fn environment_is_cleared() {
    let (_, input) = batch(1, 8);
    let servable = shell_servable("cat >/dev/null; env >&2; pwd >&2; exit 1", false);
    let err = execute_servable(&servable, "m", &input, Precision::F64Accumulate, &config()).unwrap_err();
    let ExecError::Crashed { stderr, .. } = err else { panic!("expected a crash") };
    assert!(stderr.contains("FAIRFAB_PRECISION=f64-accumulate"), "{stderr}");
    assert!(!stderr.contains("CARGO_"), "parent environment leaked: {stderr}");
    assert!(stderr.contains("fairfab-"), "cwd should be a scratch dir: {stderr}");
}
