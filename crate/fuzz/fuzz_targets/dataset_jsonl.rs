#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::dataset::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = read_dataset(data) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), samples);
    }
});
