#![no_main]
use libfuzzer_sys::fuzz_target;
use metaprune::data::{parse_cifar_records, Normalization, CIFAR_RECORD};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_cifar_records(data, &Normalization::default()) {
        assert_eq!(ds.len() * CIFAR_RECORD, data.len());
    }
});
