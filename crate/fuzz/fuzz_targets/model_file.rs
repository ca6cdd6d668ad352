#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::model::{deserialize, serialize};

fuzz_target!(|data: &[u8]| {
    if let Ok((params, cfg)) = deserialize(data) {
        let bytes = serialize(&params, &cfg);
        let (params, cfg) = deserialize(&bytes).expect("serialized model loads");
        assert_eq!(serialize(&params, &cfg), bytes);
    }
});
