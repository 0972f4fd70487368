#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = slq::readout::parse_dump(data) {
        let _ = slq::eval::EmbeddingSet::new(records);
    }
});
