#![no_main]
use libfuzzer_sys::fuzz_target;
use metaprune::cost::flops;
use metaprune::NetworkTemplate;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = NetworkTemplate::from_json(text) {
            let full = t.full_gene();
            let _ = t.resolve(&full);
            let _ = flops(&t, &full);
        }
    }
});
