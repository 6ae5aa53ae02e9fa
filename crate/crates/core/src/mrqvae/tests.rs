use super::*;
use crate::codebook::Codebook;
use crate::ndmath::{flatten, grad_check, unflatten_into};
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_config() -> MrqConfig {
    MrqConfig {
        sources: vec![SourceTag::Bill, SourceTag::Search],
        shared_levels: 1,
        specific_levels: 1,
        codebook_size: 3,
        code_dim: 3,
        input_dim: 5,
        pool_hidden: vec![4],
        encoder_hidden: vec![4],
        decoder_hidden: vec![4],
        batch_size: 4,
        epochs: 1,
        seed: 7,
        ..MrqConfig::default()
    }
}

fn random_samples<T: Real>(n_users: u64, sources: &[SourceTag], dim: usize, seed: u64) -> Vec<Sample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in 0..n_users {
        for &s in sources {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            out.push(Sample {
                user_id: u,
                source: s,
                embedding: Matrix::from_f64(1, dim, &v).unwrap(),
            });
        }
    }
    out
}

fn randomize_codebooks<T: Real>(model: &mut MrqModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in model.codebooks.all_mut() {
        for v in b.entries.data_mut() {
            *v = T::lit(rng.sample::<f64, _>(StandardNormal));
        }
    }
    model.codebooks_initialized = true;
}

fn stack_1d(l1: &[f64], l2: &[f64]) -> CodebookStack<f64> {
    let mut s = CodebookStack::zeros(&[SourceTag::Bill], 1, 1, 2, 1).unwrap();
    s.shared[0] = Codebook::new(Matrix::from_f64(2, 1, l1).unwrap(), 0, Scope::Shared).unwrap();
    s.specific.get_mut(&SourceTag::Bill).unwrap()[0] =
        Codebook::new(Matrix::from_f64(2, 1, l2).unwrap(), 1, Scope::Specific(SourceTag::Bill)).unwrap();
    s
}

#[test]
fn one_dimensional_trace() {
    let stack = stack_1d(&[0.0, 1.0], &[-0.1, 0.1]);
    let q = quantize(&[0.9], SourceTag::Bill, &stack).unwrap();
    assert_eq!(q.codes, vec![1, 0]);
    assert_eq!(q.scopes, vec![Scope::Shared, Scope::Specific(SourceTag::Bill)]);
    assert!((q.residual(1)[0] + 0.1).abs() < 1e-12);
    assert!(q.final_residual()[0].abs() < 1e-12);
    assert!((q.quantized.get(0, 0) - 0.9).abs() < 1e-12);
}

#[test]
fn exact_codeword_gives_zero_residuals() {
    let stack = stack_1d(&[0.0, 0.7], &[0.0, 3.0]);
    let q = quantize(&[0.7], SourceTag::Bill, &stack).unwrap();
    assert_eq!(q.final_residual(), &[0.0]);
    assert_eq!(q.quantized.get(0, 0), 0.7);
}

#[test]
fn unknown_source_rejected() {
    let stack = stack_1d(&[0.0, 1.0], &[0.0, 1.0]);
    assert!(matches!(
        quantize(&[0.5], SourceTag::App, &stack),
        Err(Error::UnknownSource(SourceTag::App))
    ));
}

#[test]
fn telescoping_and_greedy_choice() {
    let mut model = MrqModel::<f64>::new(MrqConfig {
        shared_levels: 2,
        specific_levels: 2,
        codebook_size: 8,
        code_dim: 6,
        ..tiny_config()
    })
    .unwrap();
    randomize_codebooks(&mut model, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let z: Vec<f64> = (0..6).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let q = model.quantize(&z, SourceTag::Search).unwrap();
        for l in 0..4 {
            let book = model.codebooks.level_book(SourceTag::Search, l).unwrap();
            let best = (0..8)
                .min_by(|&a, &b| {
                    sq_dist(q.residual(l), book.entry(a)).total_cmp(&sq_dist(q.residual(l), book.entry(b)))
                })
                .unwrap();
            assert_eq!(q.codes[l], best);
        }
        for j in 0..6 {
            let back = q.quantized.get(0, j) + q.final_residual()[j];
            assert!((back - z[j]).abs() <= 1e-10 * z[j].abs().max(1.0));
        }
    }
}

#[test]
fn level_loss_hand_value() {
    let stack = stack_1d(&[0.6, 5.0], &[0.0, 5.0]);
    let q = quantize(&[1.0], SourceTag::Bill, &stack).unwrap();
    let x = Matrix::<f64>::zeros(1, 1);
    let lo = losses(&x, &x, &q, 0.25).unwrap();
    // level 1: r = 1.0, v = 0.6 → 0.2; level 2: r = 0.4, v = 0 → 0.16·1.25 = 0.2
    assert!((lo.rq - 0.4).abs() < 1e-12);
    assert!((lo.grad_codewords.get(0, 0) - 2.0 * (0.6 - 1.0)).abs() < 1e-12);
    let q1 = quantize(&[1.0], SourceTag::Bill, &stack_1d(&[0.6, 5.0], &[0.4, 5.0])).unwrap();
    let lo1 = losses(&x, &x, &q1, 0.25).unwrap();
    assert!((lo1.rq - 0.2).abs() < 1e-12);
}

#[test]
fn perfect_fit_has_zero_loss() {
    let stack = stack_1d(&[0.0, 0.7], &[0.0, 3.0]);
    let q = quantize(&[0.7], SourceTag::Bill, &stack).unwrap();
    let x = Matrix::<f64>::filled(1, 2, 1.5);
    let lo = losses(&x, &x, &q, 0.25).unwrap();
    assert_eq!(lo.total(), 0.0);
}

#[test]
fn zero_alpha_removes_commitment_gradient() {
    let stack = stack_1d(&[0.6, 5.0], &[0.0, 5.0]);
    let q = quantize(&[1.0], SourceTag::Bill, &stack).unwrap();
    let x = Matrix::<f64>::zeros(1, 1);
    let lo = losses(&x, &x, &q, 0.0).unwrap();
    assert_eq!(lo.grad_z.get(0, 0), 0.0);
    assert!(lo.grad_codewords.get(0, 0) != 0.0);
}

#[test]
fn straight_through_forward_and_backward() {
    let z = Matrix::<f64>::from_f64(1, 2, &[0.3, -1.0]).unwrap();
    let zq = Matrix::<f64>::from_f64(1, 2, &[0.5, -0.5]).unwrap();
    assert_eq!(straight_through(&z, &zq).unwrap(), zq);
    let g = Matrix::<f64>::from_f64(1, 2, &[1.0, 2.0]).unwrap();
    assert_eq!(straight_through_backward(&g), g);
}

#[test]
fn pooling_examples() {
    let model = MrqModel::<f64>::new(MrqConfig {
        input_dim: 2,
        ..tiny_config()
    })
    .unwrap();
    let a = Matrix::from_f64(1, 2, &[1.0, 3.0]).unwrap();
    let b = Matrix::from_f64(1, 2, &[3.0, 1.0]).unwrap();
    let m = Matrix::from_f64(1, 2, &[2.0, 2.0]).unwrap();
    assert_eq!(model.pool_project(&[&a, &b]).unwrap(), model.pool.forward(&m).unwrap());
    assert_eq!(model.pool_project(&[&a]).unwrap(), model.pool.forward(&a).unwrap());
    assert_eq!(model.pool_project(&[&a, &a]).unwrap(), model.pool_project(&[&a]).unwrap());
    assert!(model.pool_project(&[]).is_err());
    assert!(model.pool_project(&[&Matrix::zeros(1, 3)]).is_err());
}

#[test]
fn encode_is_deterministic_and_checks_dims() {
    let model = MrqModel::<f32>::new(tiny_config()).unwrap();
    let h = Matrix::<f32>::zeros(1, 3);
    assert_eq!(model.encode(&h).unwrap(), model.encode(&h).unwrap());
    assert!(model.encode(&Matrix::zeros(1, 4)).is_err());
    assert!(model.decode(&h, SourceTag::App).is_err());
    assert_eq!(model.decode(&h, SourceTag::Bill).unwrap().shape(), (1, 5));
}

/// The objective whose true gradient the trainer implements: codes and every
/// stop-gradient operand are frozen at the base point.
struct Frozen {
    codes: Vec<Vec<usize>>,
    /// ẑ − z per sample.
    st_offset: Vec<Vec<f64>>,
    /// Residual entering each level, per sample.
    residuals: Vec<Matrix<f64>>,
    /// Selected codewords per sample.
    codewords: Vec<Matrix<f64>>,
}

fn freeze(model: &MrqModel<f64>, batch: &[&Sample<f64>]) -> Frozen {
    let mut f = Frozen {
        codes: vec![],
        st_offset: vec![],
        residuals: vec![],
        codewords: vec![],
    };
    for s in batch {
        let fw = model.forward(&s.embedding, s.source).unwrap();
        f.codes.push(fw.quant.codes.clone());
        f.st_offset.push(
            fw.quant.quantized.data().iter().zip(fw.z.data()).map(|(a, b)| a - b).collect(),
        );
        f.residuals.push(fw.quant.residuals.clone());
        f.codewords.push(fw.quant.codewords.clone());
    }
    f
}

fn surrogate(model: &MrqModel<f64>, batch: &[&Sample<f64>], fr: &Frozen) -> f64 {
    let alpha = model.config.alpha;
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let h = model.pool.forward(&s.embedding).unwrap();
        let z = model.encoder.forward(&h).unwrap();
        let st = Matrix::row_vector(z.data().iter().zip(&fr.st_offset[i]).map(|(a, b)| a + b).collect());
        let y = model.decode(&st, s.source).unwrap();
        total += y.sub(&s.embedding).unwrap().sq_norm();
        let mut r_live = z.data().to_vec();
        for l in 0..fr.codes[i].len() {
            let book = model.codebooks.level_book(s.source, l).unwrap();
            let v = book.entry(fr.codes[i][l]);
            total += sq_dist(fr.residuals[i].row(l), v);
            total += alpha * sq_dist(&r_live, fr.codewords[i].row(l));
            for (r, c) in r_live.iter_mut().zip(fr.codewords[i].row(l)) {
                *r -= c;
            }
        }
    }
    total / batch.len() as f64
}

/// Non-zero biases, so no ReLU sits exactly at its kink (an all-dead hidden
/// layer would otherwise feed an exact zero forward).
fn randomize_biases(model: &mut MrqModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = model.param_names();
    for (n, p) in names.iter().zip(model.params_mut()) {
        if n.ends_with(".bias") {
            for v in p.data_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

#[test]
fn composed_gradient_matches_finite_differences() {
    let mut model = MrqModel::<f64>::new(tiny_config()).unwrap();
    randomize_codebooks(&mut model, 5);
    randomize_biases(&mut model, 6);
    let samples = random_samples::<f64>(3, &model.config.sources, 5, 9);
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    let (_, grads, _) = compute_gradients(&model, &batch).unwrap();
    let fr = freeze(&model, &batch);
    let point = flatten(&model.params());
    let analytic = flatten(&grads.params.iter().collect::<Vec<_>>());
    let err = grad_check(
        |p: &[f64]| {
            let mut m = model.clone();
            unflatten_into(p, &mut m.params_mut());
            (surrogate(&m, &batch, &fr), analytic.clone())
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn unselected_entries_get_no_gradient() {
    let mut model = MrqModel::<f64>::new(MrqConfig {
        codebook_size: 16,
        ..tiny_config()
    })
    .unwrap();
    randomize_codebooks(&mut model, 5);
    let samples = random_samples::<f64>(2, &model.config.sources, 5, 1);
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    let (m0, grads, quants) = compute_gradients(&model, &batch).unwrap();
    let names = model.param_names();
    let first_book = names.iter().position(|n| n.starts_with("codebook")).unwrap();
    for (bi, book) in model.codebooks.all().enumerate() {
        for k in 0..16 {
            let used = quants.iter().any(|q| {
                (0..q.levels()).any(|l| q.codes[l] == k && q.scopes[l] == book.scope && l == book.level)
            });
            let g = grads.params[first_book + bi].row(k);
            if !used {
                assert!(g.iter().all(|&x| x == 0.0));
                // Nudging the entry leaves the real objective unchanged.
                let mut m = model.clone();
                m.codebooks.all_mut().nth(bi).unwrap().entries.row_mut(k)[0] += 1e-7;
                let (m1, _, _) = compute_gradients(&m, &batch).unwrap();
                assert_eq!(m0.total(), m1.total());
            }
        }
    }
}

#[test]
fn shared_books_see_every_source_specific_only_their_own() {
    let mut model = MrqModel::<f64>::new(tiny_config()).unwrap();
    randomize_codebooks(&mut model, 5);
    let samples = random_samples::<f64>(3, &[SourceTag::Bill], 5, 2);
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    let (_, grads, _) = compute_gradients(&model, &batch).unwrap();
    let names = model.param_names();
    for (name, (g, touched)) in names.iter().zip(grads.params.iter().zip(&grads.touched)) {
        if name.contains("Search") {
            assert!(!touched, "{name}");
            assert_eq!(g.max_abs(), 0.0);
        } else {
            assert!(touched, "{name}");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut model = MrqModel::<f32>::new(MrqConfig {
        lr: 0.0,
        ..tiny_config()
    })
    .unwrap();
    randomize_codebooks(&mut model, 1);
    let samples = random_samples::<f32>(4, &model.config.sources, 5, 3);
    let batch: Vec<&Sample<f32>> = samples.iter().collect();
    let mut trainer = Trainer::new(model.clone());
    trainer.train_step(&batch).unwrap();
    assert_eq!(trainer.model, model);
}

#[test]
fn batch_of_one_source_leaves_other_decoder() {
    let mut model = MrqModel::<f32>::new(tiny_config()).unwrap();
    randomize_codebooks(&mut model, 1);
    let both = random_samples::<f32>(4, &model.config.sources, 5, 3);
    let bill = random_samples::<f32>(4, &[SourceTag::Bill], 5, 4);
    let mut trainer = Trainer::new(model);
    trainer.train_step(&both.iter().collect::<Vec<_>>()).unwrap();
    let before = trainer.model.clone();
    trainer.train_step(&bill.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(trainer.model.decoders[&SourceTag::Search], before.decoders[&SourceTag::Search]);
    assert_eq!(
        trainer.model.codebooks.specific[&SourceTag::Search],
        before.codebooks.specific[&SourceTag::Search]
    );
    assert_ne!(trainer.model.decoders[&SourceTag::Bill], before.decoders[&SourceTag::Bill]);
    assert_ne!(trainer.model.codebooks.shared, before.codebooks.shared);
}

#[test]
fn repeated_batch_loss_does_not_increase() {
    let mut ok = 0;
    for seed in 0..10 {
        let cfg = MrqConfig {
            seed,
            codebook_size: 4,
            ..tiny_config()
        };
        let samples = random_samples::<f32>(4, &cfg.sources, 5, 100 + seed);
        let batch: Vec<&Sample<f32>> = samples.iter().collect();
        let mut trainer = Trainer::new(MrqModel::new(cfg).unwrap());
        let a = trainer.train_step(&batch).unwrap().total();
        let b = trainer.train_step(&batch).unwrap().total();
        if b <= a {
            ok += 1;
        }
    }
    assert!(ok >= 9, "{ok}/10");
}

#[test]
fn non_finite_input_is_named() {
    let mut model = MrqModel::<f32>::new(tiny_config()).unwrap();
    randomize_codebooks(&mut model, 1);
    let mut samples = random_samples::<f32>(1, &[SourceTag::Bill], 5, 3);
    samples[0].embedding.set(0, 2, f32::NAN);
    let mut trainer = Trainer::new(model);
    match trainer.train_step(&[&samples[0]]) {
        Err(Error::NonFinite(what)) => assert_eq!(what, "input embeddings"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_user_is_memorized() {
    let cfg = MrqConfig {
        lr: 1e-2,
        epochs: 300,
        ..tiny_config()
    };
    let samples = random_samples::<f32>(1, &cfg.sources, 5, 8);
    let (_, curve) = train(&samples, &cfg).unwrap();
    let first = curve.epochs[0].recon;
    let last = curve.epochs.last().unwrap().recon;
    assert!(last < 1e-3 * first.max(1.0), "{first} → {last}");
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let cfg = MrqConfig {
        epochs: 3,
        codebook_size: 4,
        ..tiny_config()
    };
    let samples = random_samples::<f32>(20, &cfg.sources, 5, 8);
    let (m1, c1) = train(&samples, &cfg).unwrap();
    let (m2, c2) = train(&samples, &cfg).unwrap();
    assert_eq!(c1, c2);
    let b1 = encode_checkpoint(&m1).unwrap();
    assert_eq!(b1, encode_checkpoint(&m2).unwrap());
    let back: MrqModel<f32> = decode_checkpoint(&b1).unwrap();
    assert_eq!(back, m1);

    let mut bad = b1.clone();
    let at = bad.len() / 2;
    bad[at] ^= 0x01;
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checksum { .. })));
    let mut old = b1.clone();
    old[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        decode_checkpoint::<f32>(&old),
        Err(Error::Version { found: 0, expected: 1 })
    ));
}

#[test]
fn coverage_is_checked() {
    let cfg = tiny_config();
    let only_bill = random_samples::<f32>(3, &[SourceTag::Bill], 5, 1);
    assert!(train(&only_bill, &cfg).is_err());
    let extra = random_samples::<f32>(3, &[SourceTag::Bill, SourceTag::Search, SourceTag::App], 5, 1);
    assert!(matches!(train(&extra, &cfg), Err(Error::UnknownSource(SourceTag::App))));
}

#[test]
fn config_validation() {
    assert!(MrqConfig::default().validate().is_ok());
    for bad in [
        MrqConfig { alpha: 0.0, ..tiny_config() },
        MrqConfig { codebook_size: 1, ..tiny_config() },
        MrqConfig { shared_levels: 0, specific_levels: 0, ..tiny_config() },
        MrqConfig { sources: vec![SourceTag::Search, SourceTag::Bill], ..tiny_config() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(serde_json::from_str::<MrqConfig>(r#"{"bogus": 1}"#).is_err());
    let cfg: MrqConfig = serde_json::from_str(r#"{"shared_levels": 4, "specific_levels": 0}"#).unwrap();
    assert_eq!(cfg.total_levels(), 4);
}

#[test]
fn samples_are_mean_pooled_per_user_and_source() {
    let recs = vec![
        EmbeddingRecord::new(2, SourceTag::Bill, vec![1.0, 3.0]),
        EmbeddingRecord::new(1, SourceTag::Bill, vec![0.0, 0.0]),
        EmbeddingRecord::new(2, SourceTag::Bill, vec![3.0, 1.0]),
    ];
    let s = samples_from_records::<f32>(&recs, &[SourceTag::Bill], 2).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[1].user_id, 2);
    assert_eq!(s[1].embedding.data(), &[2.0, 2.0]);
    assert!(samples_from_records::<f32>(&recs, &[SourceTag::App], 2).is_err());
    assert!(samples_from_records::<f32>(&recs, &[SourceTag::Bill], 3).is_err());
}

