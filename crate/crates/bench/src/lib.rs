//! Fixtures shared by the criterion benchmarks.

use hiprobe_core::synthlab::{generate_probe_dataset, LayerProfile};
use hiprobe_core::ProbeSet;

/// A probing corpus with a planted peak in the middle of the stack.
pub fn probe_corpus(num_layers: usize, hidden_dim: usize, n_per_class: usize) -> ProbeSet {
    let profile = LayerProfile::peaked(num_layers, hidden_dim, num_layers / 2, 4.0, 1.0, 0)
        .expect("valid benchmark profile");
    generate_probe_dataset(&profile, n_per_class)
        .expect("benchmark corpus")
        .0
}

/// A deterministic score curve in `[0, 1]` with a bump in the middle.
pub fn score_curve(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let x = i as f64 / len as f64;
            0.5 + 0.4 * (-(x - 0.5).powi(2) / 0.01).exp() * (i as f64).sin().abs()
        })
        .collect()
}
