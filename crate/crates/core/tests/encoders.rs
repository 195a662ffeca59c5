//! Encoder properties: full-pipeline gradients, permutation equivariance
//! without position encoding, and causality of the forward components.

use wrdprobe::batch::Batch;
use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{attention_heads, embed, gru_direction, head_masks, Arch, Encoder, EncoderConfig, Mode};
use wrdprobe::numerics::{grad_check_many, Graph, Rng, Tensor};

fn tiny(arch: Arch, pos: bool) -> EncoderConfig {
    EncoderConfig {
        arch,
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        use_position_encoding: pos,
        dropout: 0.2,
    }
}

fn random_ids(n: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| 2 + rng.below(vocab - 2)).collect()
}

/// Loss of encoder + detector on a two-sentence padded batch, as a function
/// of every parameter array of both, with dropout masks fixed by `seed`.
#[test]
fn full_pipeline_gradients() {
    let vocab = 7;
    for arch in [Arch::Rnn, Arch::San, Arch::Disan] {
        for seed in 0..20u64 {
            let mut rng = Rng::new(500 + seed);
            let enc = Encoder::new(tiny(arch, true), vocab, &mut rng).unwrap();
            let det = Detector::new(8, DetectorMode::Joint, 0.2, &mut rng).unwrap();
            let seqs = vec![random_ids(4, vocab, &mut rng), random_ids(3, vocab, &mut rng)];
            let batch = Batch::new(&seqs).unwrap();
            let gold = [(rng.below(4), rng.below(4)), (rng.below(3), rng.below(3))];
            let inputs: Vec<Tensor> = enc
                .params
                .iter()
                .chain(det.params.iter())
                .map(|(_, t)| t.clone())
                .collect();
            let n_enc = enc.params.len();
            let err = grad_check_many(
                |g, vars| {
                    let pe = enc.params.bind_vars(&vars[..n_enc])?;
                    let pd = det.params.bind_vars(&vars[n_enc..])?;
                    let mut drop = Rng::new(seed);
                    let h = enc.forward(g, &pe, &batch, Mode::Train, &mut drop)?;
                    let out = det.forward(g, &pd, h.final_layer(), &batch.layout, Mode::Train, &mut drop)?;
                    det.loss(g, &out, &gold)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{arch} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn san_without_position_encoding_is_permutation_equivariant() {
    let vocab = 50;
    let mut cfg = EncoderConfig::desk(Arch::San);
    cfg.use_position_encoding = false;
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let enc = Encoder::new(cfg.clone(), vocab, &mut rng).unwrap();
        let n = 3 + rng.below(15);
        let ids = random_ids(n, vocab, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<usize> = perm.iter().map(|&k| ids[k]).collect();
        let a = enc.encode(&ids, Mode::Eval, &mut rng).unwrap();
        let b = enc.encode(&permuted, Mode::Eval, &mut rng).unwrap();
        for (la, lb) in a.per_layer.iter().zip(&b.per_layer) {
            for (row, &k) in perm.iter().enumerate() {
                for (x, y) in lb.row(row).iter().zip(la.row(k)) {
                    assert!((x - y).abs() <= 1e-9, "seed {seed}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn position_encoding_breaks_equivariance() {
    let vocab = 50;
    let mut rng = Rng::new(3);
    let enc = Encoder::new(EncoderConfig::desk(Arch::San), vocab, &mut rng).unwrap();
    let ids = vec![5, 9, 12, 30];
    let rev: Vec<usize> = ids.iter().rev().copied().collect();
    let a = enc.encode(&ids, Mode::Eval, &mut rng).unwrap();
    let b = enc.encode(&rev, Mode::Eval, &mut rng).unwrap();
    let diff: f64 = a
        .final_layer()
        .row(0)
        .iter()
        .zip(b.final_layer().row(3))
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-3);
}

/// Perturbs every token after position `n` (keeping the length).
fn perturb_after(ids: &[usize], n: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = ids.to_vec();
    for t in out.iter_mut().skip(n + 1) {
        *t = 2 + (*t - 2 + 1 + rng.below(vocab - 3)) % (vocab - 2);
    }
    out
}

#[test]
fn disan_forward_heads_are_causal() {
    let vocab = 40;
    let cfg = EncoderConfig::desk(Arch::Disan);
    let masks = head_masks(&cfg).unwrap();
    let head_dim = cfg.model_dim / cfg.num_heads;
    let fwd_cols = head_dim * cfg.num_heads / 2;
    let mut rng = Rng::new(77);
    let enc = Encoder::new(cfg.clone(), vocab, &mut rng).unwrap();
    let heads_of = |ids: &[usize]| {
        let batch = Batch::single(ids).unwrap();
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let mut r = Rng::new(0);
        let x = embed(&mut g, &p, &cfg, &batch, Mode::Eval, &mut r).unwrap();
        let h = attention_heads(&mut g, &p, "encoder.layer0.attn", x, &batch.layout, &masks).unwrap();
        g.value(h).clone()
    };
    for case in 0..100 {
        let len = 2 + rng.below(20);
        let n = rng.below(len - 1);
        let ids = random_ids(len, vocab, &mut rng);
        let other = perturb_after(&ids, n, vocab, &mut rng);
        assert_ne!(ids, other);
        let a = heads_of(&ids);
        let b = heads_of(&other);
        for pos in 0..=n {
            assert_eq!(
                &a.row(pos)[..fwd_cols],
                &b.row(pos)[..fwd_cols],
                "case {case} position {pos}"
            );
        }
        // The backward heads do see the change.
        assert_ne!(&a.row(n)[fwd_cols..], &b.row(n)[fwd_cols..], "case {case}");
    }
}

#[test]
fn forward_gru_states_are_causal() {
    let vocab = 40;
    let cfg = EncoderConfig::desk(Arch::Rnn);
    let mut rng = Rng::new(78);
    let enc = Encoder::new(cfg.clone(), vocab, &mut rng).unwrap();
    let states = |ids: &[usize]| {
        let batch = Batch::single(ids).unwrap();
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let mut r = Rng::new(0);
        let x = embed(&mut g, &p, &cfg, &batch, Mode::Eval, &mut r).unwrap();
        let h = gru_direction(&mut g, &p, "encoder.layer0.gru.fwd", x, &batch.layout, false).unwrap();
        g.value(h).clone()
    };
    for case in 0..100 {
        let len = 2 + rng.below(20);
        let n = rng.below(len - 1);
        let ids = random_ids(len, vocab, &mut rng);
        let other = perturb_after(&ids, n, vocab, &mut rng);
        let a = states(&ids);
        let b = states(&other);
        for pos in 0..=n {
            assert_eq!(a.row(pos), b.row(pos), "case {case} position {pos}");
        }
        assert_ne!(a.row(len - 1), b.row(len - 1), "case {case}");
    }
}

#[test]
fn padding_does_not_change_encodings() {
    let vocab = 30;
    for arch in [Arch::Rnn, Arch::San, Arch::Disan] {
        let mut rng = Rng::new(11);
        let enc = Encoder::new(EncoderConfig::desk(arch), vocab, &mut rng).unwrap();
        let short = random_ids(5, vocab, &mut rng);
        let long = random_ids(9, vocab, &mut rng);
        let alone = enc.encode(&short, Mode::Eval, &mut rng).unwrap();
        let batch = Batch::new(&[short.clone(), long]).unwrap();
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let vars = enc.forward(&mut g, &p, &batch, Mode::Eval, &mut rng).unwrap();
        let padded = g.value(vars.final_layer());
        for pos in 0..5 {
            for (x, y) in padded.row(pos).iter().zip(alone.final_layer().row(pos)) {
                assert!((x - y).abs() < 1e-10, "{arch} position {pos}");
            }
        }
    }
}
