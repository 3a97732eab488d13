use serde::{Deserialize, Serialize};

use crate::quantizer::QuantizedTensor;

/// `100 * ||got - reference|| / ||reference||`.
///
/// An all-zero reference makes the error absolute (denominator 1).
pub fn relative_l2_pct(got: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(got.len(), reference.len(), "compared tensors differ in length");
    let diff: f64 = got.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm: f64 = reference.iter().map(|b| b * b).sum();
    let denom = if norm > 0.0 { norm.sqrt() } else { 1.0 };
    100.0 * diff.sqrt() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub name: String,
    pub kind: String,
    pub rel_l2_pct: f64,
    pub max_abs_error: f64,
    /// Share of output codes that differ from the reference quantized at the
    /// same scale.
    pub changed_code_fraction: f64,
}

impl LayerError {
    /// Compares a quantized output with its fp32 reference, both in the
    /// normalized domain.
    pub fn measure(name: &str, kind: &str, got: &QuantizedTensor, reference: &[f64]) -> Self {
        let values = got.values();
        let max_abs_error = values
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let changed = got
            .codes
            .iter()
            .zip(reference)
            .filter(|(&c, &r)| got.format.quantize_value(r, got.h_s).ok() != Some(c))
            .count();
        LayerError {
            name: name.to_string(),
            kind: kind.to_string(),
            rel_l2_pct: relative_l2_pct(&values, reference),
            max_abs_error,
            changed_code_fraction: if values.is_empty() {
                0.0
            } else {
                changed as f64 / values.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub layers: Vec<LayerError>,
    /// Error of the network output.
    pub output_rel_l2_pct: f64,
    pub mean_rel_l2_pct: f64,
    pub max_abs_error: f64,
    pub changed_code_fraction: f64,
}

impl ErrorReport {
    pub fn from_layers(layers: Vec<LayerError>, sizes: &[usize]) -> Self {
        let n = layers.len().max(1) as f64;
        let total: usize = sizes.iter().sum();
        let changed: f64 = layers
            .iter()
            .zip(sizes)
            .map(|(l, &s)| l.changed_code_fraction * s as f64)
            .sum();
        ErrorReport {
            output_rel_l2_pct: layers.last().map_or(0.0, |l| l.rel_l2_pct),
            mean_rel_l2_pct: layers.iter().map(|l| l.rel_l2_pct).sum::<f64>() / n,
            max_abs_error: layers.iter().map(|l| l.max_abs_error).fold(0.0, f64::max),
            changed_code_fraction: if total == 0 { 0.0 } else { changed / total as f64 },
            layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2() {
        assert_eq!(relative_l2_pct(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_l2_pct(&[3.0, 0.0], &[4.0, 0.0]) - 25.0).abs() < 1e-12);
        assert_eq!(relative_l2_pct(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_l2_pct(&[0.5], &[0.0]), 50.0);
    }
}
