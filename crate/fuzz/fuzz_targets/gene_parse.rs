#![no_main]
use libfuzzer_sys::fuzz_target;
use metaprune::Gene;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = text.parse::<Gene>() {
            let back: Gene = g.to_string().parse().expect("displayed gene must parse");
            assert_eq!(back, g);
        }
    }
});
