//! Forget-gate statistics: per-layer mean/median and a 64-bin histogram
//! of λ values pooled over time steps, dimensions, and evaluation batches.

use crate::error::{HgrnError, Result};
use crate::model::{bind_params, model_forward, ModelConfig, ModelParams};
use crate::tape::Tape;
use crate::tensor::Scalar;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug)]
pub struct LayerGateStats {
    pub layer: usize,
    pub mean: f64,
    pub median: f64,
    pub histogram: Vec<u64>,
    pub count: u64,
}

#[derive(Clone, Debug)]
pub struct GateStats {
    pub layers: Vec<LayerGateStats>,
}

/// Pools raw λ values per layer across forward passes, then reduces.
pub struct GateAccumulator {
    per_layer: Vec<Vec<f64>>,
}

impl GateAccumulator {
    pub fn new(layers: usize) -> Self {
        Self {
            per_layer: vec![Vec::new(); layers],
        }
    }

    pub fn record(&mut self, layer: usize, values: impl IntoIterator<Item = f64>) {
        self.per_layer[layer].extend(values);
    }

    pub fn finish(self) -> Result<GateStats> {
        let mut layers = Vec::with_capacity(self.per_layer.len());
        for (k, mut vals) in self.per_layer.into_iter().enumerate() {
            if vals.is_empty() {
                return Err(HgrnError::Contract(format!(
                    "no gate values recorded for layer {k}"
                )));
            }
            let count = vals.len() as u64;
            let mean = vals.iter().sum::<f64>() / count as f64;
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if vals.len() % 2 == 1 {
                vals[vals.len() / 2]
            } else {
                0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
            };
            let mut histogram = vec![0u64; HISTOGRAM_BINS];
            for v in &vals {
                // λ lies in [0,1]; clamp guards float round-off at the edges
                let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                histogram[bin] += 1;
            }
            layers.push(LayerGateStats {
                layer: k,
                mean,
                median,
                histogram,
                count,
            });
        }
        Ok(GateStats { layers })
    }
}

/// Evaluates the model on each token window and pools the recorded forget
/// gates per layer.
pub fn collect_gate_stats<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ModelParams<T>,
    windows: &[Vec<usize>],
) -> Result<GateStats> {
    if windows.is_empty() {
        return Err(HgrnError::Contract("no evaluation windows provided".into()));
    }
    let mut acc = GateAccumulator::new(mcfg.layers);
    for tokens in windows {
        let mut tape = Tape::<T>::new();
        let vars = bind_params(&mut tape, params, false);
        let out = model_forward(&mut tape, &vars, tokens, mcfg)?;
        for (k, lam) in out.lambdas.iter().enumerate() {
            acc.record(k, tape.value(*lam).data().iter().map(|v| v.as_f64()));
        }
    }
    acc.finish()
}

impl GateStats {
    pub fn csv_header() -> String {
        let bins: Vec<String> = (0..HISTOGRAM_BINS).map(|i| format!("bin_{i}")).collect();
        format!("layer,mean,median,{}", bins.join(","))
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for l in &self.layers {
            let bins: Vec<String> = l.histogram.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{:.9},{:.9},{}\n",
                l.layer,
                l.mean,
                l.median,
                bins.join(",")
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, LowerBoundMode};

    fn cfg(layers: usize, mode: LowerBoundMode) -> ModelConfig {
        let mut c: ModelConfig =
            serde_json::from_str(r#"{"layers":4,"dim":4,"vocab_size":11}"#).unwrap();
        c.layers = layers;
        c.lower_bound_mode = mode;
        c
    }

    fn windows(vocab: usize) -> Vec<Vec<usize>> {
        (0..3)
            .map(|b| (0..20).map(|i| (i * 3 + b) % vocab).collect())
            .collect()
    }

    #[test]
    fn histogram_mass_equals_count() {
        let mcfg = cfg(4, LowerBoundMode::Monotone);
        let params = init_params::<f64>(&mcfg, 0).unwrap();
        let stats = collect_gate_stats(&mcfg, &params, &windows(11)).unwrap();
        assert_eq!(stats.layers.len(), 4);
        for l in &stats.layers {
            assert_eq!(l.histogram.iter().sum::<u64>(), l.count);
            // 3 windows x 20 steps x 4 dims
            assert_eq!(l.count, 240);
            assert!(l.mean >= 0.0 && l.mean <= 1.0);
        }
    }

    #[test]
    fn untrained_monotone_means_dominate_lower_bound() {
        // Gamma = 0 at init, so gamma^k = (k-1)/H and mean lambda >= that.
        let mcfg = cfg(4, LowerBoundMode::Monotone);
        let params = init_params::<f64>(&mcfg, 0).unwrap();
        let stats = collect_gate_stats(&mcfg, &params, &windows(11)).unwrap();
        for (k, l) in stats.layers.iter().enumerate() {
            let bound = k as f64 / 4.0;
            assert!(
                l.mean >= bound - 1e-6,
                "layer {k}: mean {} < bound {bound}",
                l.mean
            );
        }
    }

    #[test]
    fn only_mode_is_data_independent() {
        // lambda == gamma^k exactly: mean = median, single-bin histograms per dim
        let mcfg = cfg(3, LowerBoundMode::Only);
        let params = init_params::<f64>(&mcfg, 0).unwrap();
        let stats = collect_gate_stats(&mcfg, &params, &windows(11)).unwrap();
        for (k, l) in stats.layers.iter().enumerate() {
            let expect = k as f64 / 3.0;
            assert!((l.mean - expect).abs() < 1e-9);
            assert!((l.median - expect).abs() < 1e-9);
            assert_eq!(l.histogram.iter().filter(|&&c| c > 0).count(), 1);
        }
    }

    #[test]
    fn csv_schema() {
        let mcfg = cfg(2, LowerBoundMode::Monotone);
        let params = init_params::<f64>(&mcfg, 0).unwrap();
        let stats = collect_gate_stats(&mcfg, &params, &windows(11)).unwrap();
        let csv = stats.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("layer,mean,median,bin_0,"));
        assert!(header.ends_with("bin_63"));
        assert_eq!(header.split(',').count(), 3 + 64);
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        assert!(GateAccumulator::new(1).finish().is_err());
    }
}
