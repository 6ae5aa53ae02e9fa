use uqt_core::align::{
    build_pairs, synth_behavior, synth_text_provider, top1_retrieval, train_alignment, AlignConfig,
    BehaviorSynthConfig, DenominatorMode, FusionHead,
};
use uqt_core::embed::{synth_generate, SourceTag, SyntheticConfig};
use uqt_core::mrqvae::{samples_from_records, train, MrqConfig};
use uqt_core::ndmath::Matrix;
use uqt_core::tokenizer::tokenize;

fn pooled_retrieval(head: &FusionHead<f32>, seqs: &[uqt_core::tokenizer::UserTokenSequence], text: &Matrix<f32>) -> f64 {
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let mut acc = 0.0;
    let mut pools = 0;
    for chunk in idx.chunks_exact(64) {
        let batch: Vec<_> = chunk.iter().map(|&i| &seqs[i]).collect();
        let (ef, _) = head.forward_batch(&batch).unwrap();
        acc += top1_retrieval(&ef, &text.gather_rows(chunk)).unwrap();
        pools += 1;
    }
    acc / pools as f64
}

#[test]
fn aligned_tokens_retrieve_their_text() {
    let data = synth_generate(&SyntheticConfig {
        num_users: 768,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let samples = samples_from_records::<f32>(&data.records, &SourceTag::ALL, 64).unwrap();
    let mcfg = MrqConfig {
        codebook_size: 32,
        code_dim: 16,
        epochs: 10,
        ..MrqConfig::default()
    };
    let (model, _) = train(&samples, &mcfg).unwrap();
    let (vocab, seqs) = tokenize(&model, &samples, &data.engagement, 256).unwrap();

    let bcfg = BehaviorSynthConfig::default();
    let records = synth_behavior(&data, &bcfg);
    let provider = synth_text_provider(&data, &records, &bcfg).unwrap();
    let (seqs, text) = build_pairs::<f32>(&seqs, &records, &provider).unwrap();

    let acfg = AlignConfig {
        token_dim: 16,
        hidden: vec![64],
        tau: 0.1,
        mode: DenominatorMode::Standard,
        lr: 3e-3,
        epochs: 30,
        ..AlignConfig::default()
    };
    let head = FusionHead::for_vocabulary(&vocab, &model.codebooks, acfg.token_dim, &acfg.hidden, bcfg.text_dim, 1).unwrap();
    let before = pooled_retrieval(&head, &seqs[512..], &text.gather_rows(&(512..768).collect::<Vec<_>>()));
    let (head, curve) = train_alignment(&seqs[..512], &text.gather_rows(&(0..512).collect::<Vec<_>>()), head, &acfg).unwrap();
    let test_text = text.gather_rows(&(512..768).collect::<Vec<_>>());
    let after = pooled_retrieval(&head, &seqs[512..], &test_text);
    assert!(curve.epochs.last().unwrap() < &curve.epochs[0]);
    assert!(after > 10.0 / 64.0, "held-out top-1 {after} (untrained {before})");
}
