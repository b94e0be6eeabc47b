#![allow(dead_code)]

use metaprune::data::{synth_blobs, BlobSpec, Dataset};
use metaprune::NetworkTemplate;

/// conv3x3 (4 channels) -> linear, on 2x5x5 inputs.
pub fn two_layer() -> NetworkTemplate {
    NetworkTemplate::from_json(
        r#"{
        "name": "two-layer", "input": [2, 5, 5], "classes": 3,
        "axes": [{"kind": "layer", "max": 4}],
        "layers": [
            {"kind": "conv", "kernel": [3, 3], "pad": 1, "out": {"axis": 0}},
            {"kind": "linear", "out": {"fixed": 3}}
        ]}"#,
    )
    .unwrap()
}

/// Stem conv followed by two depthwise-separable blocks.
pub fn chain3(classes: usize) -> NetworkTemplate {
    let json = format!(
        r#"{{
        "name": "chain3", "input": [3, 8, 8], "classes": {classes},
        "axes": [{{"kind": "layer", "max": 8}}, {{"kind": "layer", "max": 12}}, {{"kind": "layer", "max": 16}}],
        "layers": [
            {{"kind": "conv", "kernel": [3, 3], "pad": 1, "out": {{"axis": 0}}}},
            {{"kind": "depthwise", "kernel": [3, 3], "pad": 1, "out": "input"}},
            {{"kind": "conv", "out": {{"axis": 1}}}},
            {{"kind": "depthwise", "kernel": [3, 3], "stride": 2, "pad": 1, "out": "input", "downsampling": true}},
            {{"kind": "conv", "out": {{"axis": 2}}}},
            {{"kind": "linear", "out": {{"fixed": {classes}}}}}
        ]}}"#
    );
    NetworkTemplate::from_json(&json).unwrap()
}

pub fn blobs(classes: usize, per_class: usize, shape: [usize; 3], noise: f64, seed: u64) -> Dataset {
    synth_blobs(&BlobSpec {
        classes,
        per_class,
        shape,
        noise,
        seed,
    })
    .unwrap()
}
