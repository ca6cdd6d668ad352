#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::geometry::BinaryImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = BinaryImage::from_pgm(data) {
        assert_eq!(BinaryImage::from_pgm(&img.to_pgm()).unwrap(), img);
    }
});
