#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::dataset::{read_layouts, write_layouts};

fuzz_target!(|data: &[u8]| {
    if let Ok(layouts) = read_layouts(data) {
        let mut buf = Vec::new();
        write_layouts(&mut buf, &layouts).unwrap();
        assert_eq!(read_layouts(buf.as_slice()).unwrap(), layouts);
    }
});
