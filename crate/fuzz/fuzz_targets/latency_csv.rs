#![no_main]
use libfuzzer_sys::fuzz_target;
use metaprune::cost::LatencyTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = LatencyTable::from_csv(text) {
            for (_, us) in table.iter() {
                assert!(us.is_finite() && us >= 0.0);
            }
        }
    }
});
