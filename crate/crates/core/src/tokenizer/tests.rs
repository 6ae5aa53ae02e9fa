use super::*;
use crate::codebook::Codebook;
use crate::mrqvae::quantize;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn two_source_vocab() -> TokenVocabulary {
    TokenVocabulary::new(&[SourceTag::Search, SourceTag::Bill], 2, 2, 4, 8).unwrap()
}

fn result(source: SourceTag, codes: &[usize], shared: usize) -> QuantizeResult<f32> {
    let l = codes.len();
    QuantizeResult {
        source,
        codes: codes.to_vec(),
        scopes: (0..l)
            .map(|i| if i < shared { Scope::Shared } else { Scope::Specific(source) })
            .collect(),
        residuals: Matrix::zeros(l + 1, 1),
        codewords: Matrix::zeros(l, 1),
        quantized: Matrix::zeros(1, 1),
    }
}

fn seq(user_id: u64, tokens: &[u32]) -> UserTokenSequence {
    UserTokenSequence {
        user_id,
        tokens: tokens.to_vec(),
    }
}

#[test]
fn layout_offsets() {
    let v = two_source_vocab();
    assert_eq!(v.sources, vec![SourceTag::Bill, SourceTag::Search]);
    let offsets: Vec<u32> = v.blocks.iter().map(|b| b.offset).collect();
    assert_eq!(offsets, vec![0, 4, 8, 12, 16, 20]);
    assert_eq!(v.special_offset, 24);
    assert_eq!(v.vocab_size(), 32);
    assert_eq!(v.token_id(Scope::Shared, 1, 3).unwrap(), 7);
    assert!(v.token_id(Scope::Shared, 1, 4).is_err());
}

#[test]
fn all_zero_codes_give_block_offsets() {
    let v = two_source_vocab();
    let a = result(SourceTag::Bill, &[0, 0, 0, 0], 2);
    let b = result(SourceTag::Search, &[0, 0, 0, 0], 2);
    let s = assemble_tokens(1, &[&b, &a], &v).unwrap();
    assert_eq!(s.tokens, vec![0, 4, 8, 12, 0, 4, 16, 20]);
    assert_eq!(assemble_tokens(2, &[&a, &b], &v).unwrap().tokens, s.tokens);
    assert!(assemble_tokens(3, &[&a], &v).is_err());
    let bad = result(SourceTag::Search, &[0, 9, 0, 0], 2);
    assert!(matches!(
        assemble_tokens(4, &[&a, &bad], &v),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn engagement_ranks_collisions() {
    let v = TokenVocabulary::new(&[SourceTag::Bill], 1, 0, 4, 4).unwrap();
    let eng: EngagementTable = [(10, 10), (11, 7), (12, 0)].into_iter().collect();
    let out = resolve_collisions(&[seq(11, &[2]), seq(12, &[3]), seq(10, &[2])], &eng, &v).unwrap();
    assert_eq!(out[0].tokens, vec![2, 5]);
    assert_eq!(out[1].tokens, vec![3, 4]);
    assert_eq!(out[2].tokens, vec![2, 4]);

    let tie: EngagementTable = [(5, 3), (9, 3)].into_iter().collect();
    let out = resolve_collisions(&[seq(9, &[1]), seq(5, &[1])], &tie, &v).unwrap();
    assert_eq!(out[1].tokens[1], 4);
    assert_eq!(out[0].tokens[1], 5);
}

#[test]
fn capacity_error_names_group_size() {
    let v = TokenVocabulary::new(&[SourceTag::Bill], 1, 0, 4, 2).unwrap();
    let seqs: Vec<_> = (0..3).map(|u| seq(u, &[1])).collect();
    assert!(matches!(
        resolve_collisions(&seqs, &EngagementTable::new(), &v),
        Err(Error::Capacity { group_size: 3, capacity: 2 })
    ));
}

#[test]
fn duplicate_users_rejected() {
    let v = TokenVocabulary::new(&[SourceTag::Bill], 1, 0, 4, 2).unwrap();
    assert!(resolve_collisions(&[seq(1, &[0]), seq(1, &[1])], &EngagementTable::new(), &v).is_err());
}

proptest! {
    #[test]
    fn resolution_is_injective_and_order_free(
        codes in prop::collection::vec(0u32..3, 1..60),
        engs in prop::collection::vec(0u64..4, 60),
        rot in 0usize..60,
    ) {
        let v = TokenVocabulary::new(&[SourceTag::Bill], 1, 0, 3, 64).unwrap();
        let seqs: Vec<_> = codes.iter().enumerate().map(|(u, &c)| seq(u as u64 * 3, &[c])).collect();
        let eng: EngagementTable = seqs.iter().zip(&engs).map(|(s, &e)| (s.user_id, e)).collect();
        let out = resolve_collisions(&seqs, &eng, &v).unwrap();
        let distinct: std::collections::HashSet<_> = out.iter().map(|s| s.tokens.clone()).collect();
        prop_assert_eq!(distinct.len(), out.len());

        let mut rotated = seqs.clone();
        rotated.rotate_left(rot % seqs.len());
        let out2 = resolve_collisions(&rotated, &eng, &v).unwrap();
        let m1: BTreeMap<_, _> = out.into_iter().map(|s| (s.user_id, s.tokens)).collect();
        let m2: BTreeMap<_, _> = out2.into_iter().map(|s| (s.user_id, s.tokens)).collect();
        prop_assert_eq!(m1, m2);
    }
}

fn random_stack(seed: u64) -> CodebookStack<f32> {
    let sources = [SourceTag::Bill, SourceTag::App];
    let mut stack = CodebookStack::zeros(&sources, 2, 2, 8, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in stack.all_mut() {
        let data: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
        *b = Codebook::new(Matrix::from_f64(8, 5, &data).unwrap(), b.level, b.scope).unwrap();
    }
    stack
}

#[test]
fn detokenize_reproduces_quantized_bits() {
    let stack = random_stack(2);
    let vocab = TokenVocabulary::for_stack(&stack, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for u in 0..50 {
        let qs: Vec<QuantizeResult<f32>> = stack
            .sources()
            .into_iter()
            .map(|s| {
                let z: Vec<f32> = (0..5).map(|_| rng.sample::<f32, _>(StandardNormal) * 2.0).collect();
                quantize(&z, s, &stack).unwrap()
            })
            .collect();
        let refs: Vec<_> = qs.iter().collect();
        let s = assemble_tokens(u, &refs, &vocab).unwrap();
        let back = detokenize(&s, &stack, &vocab).unwrap();
        for q in &qs {
            assert_eq!(back[&q.source], q.quantized);
        }
    }
}

#[test]
fn detokenize_zero_codes_and_bad_ids() {
    let stack = random_stack(4);
    let vocab = TokenVocabulary::for_stack(&stack, 16).unwrap();
    let zeros: Vec<u32> = (0..vocab.base_len()).map(|p| vocab.position_range(p).unwrap().0).collect();
    let out = detokenize(&seq(1, &zeros), &stack, &vocab).unwrap();
    let mut expect = Matrix::<f32>::zeros(1, 5);
    for l in 0..4 {
        for (e, &x) in expect.data_mut().iter_mut().zip(stack.level_book(SourceTag::App, l).unwrap().entry(0)) {
            *e += x;
        }
    }
    assert_eq!(out[&SourceTag::App], expect);

    let mut bad = zeros.clone();
    bad[2] = 0;
    assert!(matches!(
        detokenize(&seq(1, &bad), &stack, &vocab),
        Err(Error::TokenOutOfRange { .. })
    ));
}

fn sample_sequences(n: u64) -> (TokenVocabulary, Vec<UserTokenSequence>) {
    let vocab = TokenVocabulary::new(&SourceTag::ALL, 2, 2, 256, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(n);
    let seqs = (0..n)
        .map(|u| {
            let tokens = (0..vocab.sequence_len())
                .map(|p| {
                    let (off, size) = vocab.position_range(p).unwrap();
                    off + rng.random_range(0..size)
                })
                .collect();
            UserTokenSequence {
                user_id: u * 7 + 1,
                tokens,
            }
        })
        .collect();
    (vocab, seqs)
}

#[test]
fn binary_and_jsonl_round_trip() {
    let (vocab, seqs) = sample_sequences(100);
    let bytes = encode_tokens_binary(&seqs, &vocab).unwrap();
    let (v2, s2) = decode_tokens_binary(&bytes).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(s2, seqs);

    let mut buf = Vec::new();
    write_tokens_jsonl(&seqs, &mut buf).unwrap();
    assert_eq!(read_tokens_jsonl(&buf[..]).unwrap(), seqs);

    let dir = tempfile::tempdir().unwrap();
    for (name, fmt) in [("t.bin", TokenFormat::Binary), ("t.jsonl", TokenFormat::Jsonl)] {
        let p = dir.path().join(name);
        serialize_tokens(&seqs, &vocab, &p, fmt).unwrap();
        assert_eq!(deserialize_tokens(&p).unwrap().sequences, seqs);
    }
}

#[test]
fn one_byte_per_token() {
    let (vocab, seqs) = sample_sequences(1000);
    let header = encode_tokens_binary(&[], &vocab).unwrap().len();
    let bytes = encode_tokens_binary(&seqs, &vocab).unwrap();
    assert_eq!(vocab.sequence_len(), 25);
    assert_eq!(bytes.len() - header, 1000 * (8 + 25));
}

#[test]
fn wider_blocks_use_two_bytes() {
    let vocab = TokenVocabulary::new(&[SourceTag::Bill], 1, 0, 300, 4).unwrap();
    let seqs = vec![seq(1, &[299, 301])];
    let bytes = encode_tokens_binary(&seqs, &vocab).unwrap();
    let header = encode_tokens_binary(&[], &vocab).unwrap().len();
    assert_eq!(bytes.len() - header, 8 + 2 + 1);
    assert_eq!(decode_tokens_binary(&bytes).unwrap().1, seqs);
}

#[test]
fn jsonl_fixture() {
    let mut buf = Vec::new();
    write_tokens_jsonl(&[seq(7, &[1, 2, 3])], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "{\"user_id\":7,\"tokens\":[1,2,3]}\n");
}

#[test]
fn corrupt_binary_rejected() {
    let (vocab, seqs) = sample_sequences(5);
    let bytes = encode_tokens_binary(&seqs, &vocab).unwrap();
    let mut b = bytes.clone();
    let n = b.len();
    b[n - 10] ^= 0xff;
    assert!(matches!(decode_tokens_binary(&b), Err(Error::Checksum { .. })));
    assert!(decode_tokens_binary(&bytes[..bytes.len() - 7]).is_err());
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(decode_tokens_binary(&v), Err(Error::Version { found: 9, .. })));
    let mut bad = seqs.clone();
    bad[0].tokens[0] = 5000;
    assert!(encode_tokens_binary(&bad, &vocab).is_err());
}
