use super::*;
use crate::models::{LatentConfig, ModelConfig};
use crate::nn::BlockConfig;

fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        block: BlockConfig {
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            layers: 1,
            dropout: 0.1,
            max_positions: 32,
        },
        latent: LatentConfig { t_z: 4, d_z: 6, rho: 0.5 },
        vocab: 12,
        posterior_layers: 1,
        seed: 9,
    }
}

fn bundle(kind: ModelKind) -> ModelBundle<f64> {
    ModelBundle::new(tiny(kind)).unwrap()
}

fn bias_toward(b: &mut ModelBundle<f64>, d: Direction, token: u32) {
    let id = b.dir(d).out_bias;
    b.store.get_mut(id).value.data_mut()[token as usize] = 1e3;
}

const SOURCES: [&[u32]; 3] = [&[3, 4, 5, 6], &[7, 8], &[9, 10, 11, 3, 4, 5]];

#[test]
fn nat_pass_counters() {
    for kind in [ModelKind::LaNmt, ModelKind::LadderNmt] {
        let b = bundle(kind);
        for d in [Direction::Forward, Direction::Reverse] {
            for r in [0, 1, 3] {
                let res = b.translate_nat(d, SOURCES[0], r).unwrap();
                assert_eq!(res.decoder_passes, 1 + r);
                assert_eq!(res.length_predictions, 1 + r);
                assert_eq!(res.refinements_used, r);
                assert!(res.untrained);
                assert!(!res.tokens.is_empty());
            }
        }
    }
}

#[test]
fn nat_is_deterministic_and_batch_independent() {
    for kind in [ModelKind::LaNmt, ModelKind::LadderNmt] {
        let b = bundle(kind);
        let batch = b.translate_nat_batch(Direction::Forward, &SOURCES, 2).unwrap();
        for (src, res) in SOURCES.iter().zip(&batch) {
            let single = b.translate_nat(Direction::Forward, src, 2).unwrap();
            assert_eq!(single.tokens, res.tokens);
        }
        let again = b.translate_nat_batch(Direction::Forward, &SOURCES, 2).unwrap();
        assert_eq!(
            batch.iter().map(|r| &r.tokens).collect::<Vec<_>>(),
            again.iter().map(|r| &r.tokens).collect::<Vec<_>>()
        );
    }
}

#[test]
fn refinement_rounds_compose() {
    for kind in [ModelKind::LaNmt, ModelKind::LadderNmt] {
        let b = bundle(kind);
        for d in [Direction::Forward, Direction::Reverse] {
            let src = SOURCES[2];
            let h0 = b.translate_nat(d, src, 0).unwrap().tokens;
            let h1 = b.refine(d, src, &h0).unwrap();
            assert_eq!(b.translate_nat(d, src, 1).unwrap().tokens, h1);
            let h2 = b.refine(d, src, &h1).unwrap();
            assert_eq!(b.translate_nat(d, src, 2).unwrap().tokens, h2);
            assert_eq!(b.refine(d, src, &h1).unwrap(), h2);
        }
    }
}

#[test]
fn nat_rejects_at_bundle_and_vice_versa() {
    let at = bundle(ModelKind::At);
    assert!(at.translate_nat(Direction::Forward, SOURCES[0], 0).is_err());
    assert!(at.refine(Direction::Forward, SOURCES[0], &[3]).is_err());
    let nat = bundle(ModelKind::LadderNmt);
    assert!(nat.translate_at(Direction::Forward, SOURCES[0], 5).is_err());
    assert!(nat.refine(Direction::Forward, SOURCES[0], &[]).is_err());
}

#[test]
fn at_immediate_eos_has_length_one() {
    let mut b = bundle(ModelKind::At);
    bias_toward(&mut b, Direction::Forward, EOS);
    let res = b.translate_at(Direction::Forward, SOURCES[0], 10).unwrap();
    assert_eq!(res.tokens, vec![EOS]);
    assert_eq!(res.decoder_passes, 1);
}

#[test]
fn at_passes_grow_with_output_length() {
    let mut b = bundle(ModelKind::At);
    bias_toward(&mut b, Direction::Reverse, 5);
    for max_len in [1, 3, 6, 12] {
        let res = b.translate_at(Direction::Reverse, SOURCES[1], max_len).unwrap();
        assert_eq!(res.tokens, vec![5; max_len]);
        assert_eq!(res.decoder_passes, max_len);
    }
    let capped = b.translate_at(Direction::Reverse, SOURCES[1], 1000).unwrap();
    assert_eq!(capped.tokens.len(), 31);
}

#[test]
fn at_batch_matches_single() {
    let b = bundle(ModelKind::At);
    let batch = b.translate_at_batch(Direction::Forward, &SOURCES, 9).unwrap();
    for (src, res) in SOURCES.iter().zip(&batch) {
        let single = b.translate_at(Direction::Forward, src, 9).unwrap();
        assert_eq!(single.tokens, res.tokens);
        assert_eq!(single.decoder_passes, res.tokens.len());
    }
}

#[test]
fn translate_all_strips_eos_and_threads_agree() {
    let mut at = bundle(ModelKind::At);
    at.trained_steps = 1;
    let sources: Vec<Vec<u32>> = (0..7).map(|i| SOURCES[i % 3].to_vec()).collect();
    let one = at.translate_all(Direction::Forward, &sources, 0, 2, 1).unwrap();
    let many = at.translate_all(Direction::Forward, &sources, 0, 2, 3).unwrap();
    assert_eq!(one, many);
    assert!(one.iter().all(|t| !t.contains(&EOS)));
    let nat = bundle(ModelKind::LaNmt);
    let a = nat.translate_all(Direction::Forward, &sources, 1, 3, 1).unwrap();
    let b = nat.translate_all(Direction::Forward, &sources, 1, 3, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), sources.len());
}

#[test]
fn strip_eos_truncates() {
    assert_eq!(strip_eos(vec![3, 4, EOS, 5]), vec![3, 4]);
    assert_eq!(strip_eos(vec![EOS]), Vec::<u32>::new());
    assert_eq!(strip_eos(vec![3]), vec![3]);
}

#[test]
fn speed_of_a_model_against_itself_is_near_one() {
    let b = bundle(ModelKind::LadderNmt);
    let sources: Vec<Vec<u32>> = SOURCES.iter().map(|s| s.to_vec()).collect();
    let rep = speed_bench(&b, &b, Direction::Forward, &sources, 1).unwrap();
    assert_eq!(rep.sentences, 3);
    assert!(rep.ratio > 0.5 && rep.ratio < 2.0, "ratio {}", rep.ratio);
    assert!(speed_bench(&b, &b, Direction::Forward, &[], 1).is_err());
}
