#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::model::ModelConfig;
use roomroam_core::rdwsim::SimConfig;
use roomroam_core::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = ModelConfig::from_toml(text);
    let _ = TrainConfig::from_toml(text);
    let _ = SimConfig::from_toml(text);
});
