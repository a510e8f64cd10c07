//! In-sandbox side of the servable protocol, used by the `fairfab-runner`
//! executable. Reads one request frame from stdin and writes one response
//! frame to stdout.
//!
//! Modes:
//! - `braggnn-lite <weights>`: evaluates the peak regressor under the
//!   precision named by `FAIRFAB_PRECISION` (default `strict-f32`).
//! - `echo`: returns the input tensor unchanged.

use std::io::{Read, Write};

use super::protocol::{self, Tensor};
use crate::metadata::ElementType;
use crate::peaks::{self, Precision, TinyNetWeights, PATCH_PIXELS, RUNNER_KIND};

pub const USAGE: &str = "usage: fairfab-runner (braggnn-lite <weights> | echo) < request-frame > response-frame";

fn braggnn(weights_path: &str, input: &Tensor) -> Result<Tensor, String> {
    let precision: Precision = match std::env::var("FAIRFAB_PRECISION") {
        Ok(p) => p.parse()?,
        Err(_) => Precision::default(),
    };
    let bytes = std::fs::read(weights_path).map_err(|e| format!("{weights_path}: {e}"))?;
    let weights = TinyNetWeights::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if input.element_type != ElementType::Float32 {
        return Err(format!("expected float32 input, got {}", input.element_type.name()));
    }
    peaks::input_signature().check(input.element_type, &input.shape).map_err(|e| e.to_string())?;
    let patches: Vec<[f32; PATCH_PIXELS]> = input
        .data
        .chunks_exact(PATCH_PIXELS * 4)
        .map(|c| {
            let mut p = [0f32; PATCH_PIXELS];
            for (v, b) in p.iter_mut().zip(c.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            p
        })
        .collect();
    let out = peaks::nn_forward_f32(&weights, &patches, precision).map_err(|e| e.to_string())?;
    let flat: Vec<f32> = out.into_iter().flatten().collect();
    Tensor::from_f32(vec![patches.len() as u64, 2], &flat).map_err(|e| e.to_string())
}

/// Runs one request/response exchange; returns the process exit code.
pub fn run<R: Read, W: Write>(args: &[String], stdin: &mut R, stdout: &mut W) -> i32 {
    let mode = args.first().map(String::as_str);
    let handler: Box<dyn Fn(&Tensor) -> Result<Tensor, String>> = match (mode, args.get(1)) {
        (Some(m), Some(weights)) if m == RUNNER_KIND && args.len() == 2 => {
            let weights = weights.clone();
            Box::new(move |t| braggnn(&weights, t))
        }
        (Some("echo"), None) => Box::new(|t| Ok(t.clone())),
        _ => {
            eprintln!("{USAGE}");
            return 2;
        }
    };
    let (_, input) = match protocol::read_request(stdin) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bad request frame: {e}");
            let _ = protocol::write_error(stdout, &e.to_string());
            return 3;
        }
    };
    match handler(&input) {
        Ok(out) => match protocol::write_ok(stdout, &out) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("writing response: {e}");
                1
            }
        },
        Err(msg) => {
            eprintln!("{msg}");
            let _ = protocol::write_error(stdout, &msg);
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peaks::{input_signature, output_signature, synth_dataset, ParamDistribution};

    fn request(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        protocol::write_request(&mut buf, "m", &input_signature(), &output_signature(), t).unwrap();
        buf
    }

    #[test]
    fn echo_returns_input() {
        let t = Tensor::from_f32(vec![1, 1, 11, 11], &[0.25; 121]).unwrap();
        let mut out = Vec::new();
        assert_eq!(run(&["echo".into()], &mut &request(&t)[..], &mut out), 0);
        assert_eq!(protocol::decode_response(&out).unwrap().unwrap(), t);
    }

    #[test]
    fn braggnn_matches_direct_forward() {
        let dir = tempfile::tempdir().unwrap();
        let w = TinyNetWeights::glorot(1);
        let path = dir.path().join("model.tnw");
        std::fs::write(&path, w.to_bytes()).unwrap();
        let patches = synth_dataset(3, &ParamDistribution::default(), 1).unwrap();
        let t = Tensor::new(ElementType::Float32, vec![3, 1, 11, 11], peaks::patches_to_tensor(&patches)).unwrap();
        let mut out = Vec::new();
        let code = run(&[RUNNER_KIND.into(), path.to_string_lossy().into_owned()], &mut &request(&t)[..], &mut out);
        assert_eq!(code, 0);
        let got = protocol::decode_response(&out).unwrap().unwrap();
        let direct = peaks::nn_forward_f32(&w, &patches.iter().map(|p| p.intensities).collect::<Vec<_>>(), Precision::StrictF32).unwrap();
        assert_eq!(got.to_f32().unwrap(), direct.into_iter().flatten().collect::<Vec<_>>());
    }

    #[test]
    fn bad_usage_and_bad_frames() {
        assert_eq!(run(&[], &mut &b""[..], &mut Vec::new()), 2);
        let mut out = Vec::new();
        assert_eq!(run(&["echo".into()], &mut &b"\0\0"[..], &mut out), 3);
        assert!(protocol::decode_response(&out).unwrap().is_err());
    }
}
