#![no_main]

use libfuzzer_sys::fuzz_target;
use roomroam_core::layout::{Catalog, Layout, LayoutDoc};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = Catalog::from_json(text);
    if let Ok(doc) = LayoutDoc::parse(text) {
        let _ = doc.resolve(&Catalog::default());
    }
    if let Ok(layout) = Layout::from_json(text) {
        let again = Layout::from_json(&layout.to_json()).expect("serialized layout parses");
        assert_eq!(again, layout);
    }
});
