#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::model::{import_pretrained, ModelConfig};

fuzz_target!(|data: &[u8]| {
    // small enough that a valid seed file stays a few kilobytes
    let cfg = ModelConfig {
        image_size: 32,
        embed_dim: 8,
        ..ModelConfig::toy()
    };
    if let Ok(params) = import_pretrained(data, &cfg, 0, 1.0) {
        assert!(params.matches(&cfg));
    }
});
