//! Result artifacts: the search/training summary JSON and the per-layer
//! width CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::{Gene, NetworkTemplate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub template: String,
    pub gene: Gene,
    pub flops: u64,
    /// Present when a latency table was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

impl Results {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub layer_id: usize,
    pub is_downsampling: bool,
    pub channels: usize,
    pub max_channels: usize,
}

/// Output width of every layer under `gene` next to its maximum.
pub fn layer_widths(template: &NetworkTemplate, gene: &Gene) -> Result<Vec<LayerWidth>> {
    let dims = template.resolve(gene)?;
    let full = template.resolve(&template.full_gene())?;
    Ok(template
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| LayerWidth {
            layer_id: l,
            is_downsampling: spec.downsampling,
            channels: dims[l].c_out,
            max_channels: full[l].c_out,
        })
        .collect())
}

/// CSV `layer_id,is_downsampling,channels,max_channels`.
pub fn layer_widths_csv(rows: &[LayerWidth]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("writing widths", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::builtin_template;

    #[test]
    fn full_gene_widths_are_max() {
        let t = builtin_template("mobilenet-v2-224").unwrap();
        let rows = layer_widths(&t, &t.full_gene()).unwrap();
        assert!(rows.iter().all(|r| r.channels == r.max_channels));
        assert!(rows.iter().any(|r| r.is_downsampling));
        let csv = layer_widths_csv(&rows[..1]).unwrap();
        assert!(csv.starts_with("layer_id,is_downsampling,channels,max_channels\n0,true,32,32\n"), "{csv}");
    }

    #[test]
    fn results_roundtrip() {
        let r = Results {
            template: "chain-small".into(),
            gene: Gene(vec![8, 12, 16]),
            flops: 12345,
            latency_us: None,
            constraint: Some("flops:20000".into()),
            subval_accuracy: Some(0.5),
            test_accuracy: None,
        };
        let json = r.to_json();
        assert!(json.contains("\"gene\": \"8/12/16\""));
        assert!(!json.contains("latency"));
        assert_eq!(serde_json::from_str::<Results>(&json).unwrap(), r);
    }
}
