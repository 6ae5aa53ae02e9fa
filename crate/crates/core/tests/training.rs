use std::time::Instant;

use uqt_core::embed::{synth_generate, SourceTag, SyntheticConfig};
use uqt_core::mrqvae::{evaluate, samples_from_records, train, MrqConfig};

#[test]
fn synthetic_training_reduces_reconstruction() {
    let t = Instant::now();
    let data = synth_generate(&SyntheticConfig::default()).unwrap();
    let samples = samples_from_records::<f32>(&data.records, &SourceTag::ALL, 64).unwrap();
    let cfg = MrqConfig {
        codebook_size: 32,
        code_dim: 16,
        ..MrqConfig::default()
    };
    let (model, curve) = train(&samples, &cfg).unwrap();
    let ev = evaluate(&model, &samples).unwrap();
    for w in ev.residual_norms.windows(2) {
        assert!(w[1] <= w[0], "{:?}", ev.residual_norms);
    }
    assert!(t.elapsed().as_secs() < 300);
    let first = curve.epochs[0].recon;
    let last = curve.epochs.last().unwrap().recon;
    assert!(last <= 0.5 * first, "{first} → {last}");
}
