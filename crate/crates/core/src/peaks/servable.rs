use std::collections::BTreeMap;

use super::{input_signature, output_signature, TinyNetWeights};
use crate::tasking::servable::{Servable, ServableManifest, PROTOCOL_VERSION, RUNNER_PLACEHOLDER};

/// Runner mode that evaluates the regressor.
pub const RUNNER_KIND: &str = "braggnn-lite";
pub const WEIGHTS_FILE: &str = "model.tnw";

/// Packages weights as a servable archive; identical weights give
/// identical bytes.
pub fn export_servable(weights: &TinyNetWeights) -> Vec<u8> {
    let manifest = ServableManifest {
        protocol_version: PROTOCOL_VERSION,
        entry: vec![RUNNER_PLACEHOLDER.to_string(), RUNNER_KIND.to_string(), WEIGHTS_FILE.to_string()],
        input_signature: input_signature(),
        output_signature: output_signature(),
    };
    let files = BTreeMap::from([(WEIGHTS_FILE.to_string(), weights.to_bytes())]);
    Servable::new(manifest, files).expect("static manifest is valid").to_bytes()
}
