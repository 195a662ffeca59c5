//! Checks reverse-mode gradients of the whole encoder → detector → loss
//! pipeline against central finite differences.
//!
//! cargo run --release --example gradcheck

use wrdprobe::batch::Batch;
use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{Arch, Encoder, EncoderConfig, Mode};
use wrdprobe::numerics::{grad_check_many, Rng, Tensor};

fn main() -> wrdprobe::Result<()> {
    for arch in [Arch::Rnn, Arch::San, Arch::Disan] {
        let cfg = EncoderConfig {
            arch,
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            use_position_encoding: true,
            dropout: 0.1,
        };
        let mut rng = Rng::new(1);
        let enc = Encoder::new(cfg, 10, &mut rng)?;
        let det = Detector::new(8, DetectorMode::Joint, 0.1, &mut rng)?;
        let batch = Batch::new(&[vec![2, 5, 7, 3], vec![4, 9, 6]])?;
        let gold = [(1, 3), (2, 0)];
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
                // Same dropout masks on every evaluation.
                let mut drop = Rng::new(42);
                let h = enc.forward(g, &pe, &batch, Mode::Train, &mut drop)?;
                let out = det.forward(g, &pd, h.final_layer(), &batch.layout, Mode::Train, &mut drop)?;
                det.loss(g, &out, &gold)
            },
            &inputs,
            1e-5,
        )?;
        println!(
            "{arch}: {} parameters, worst relative error {err:.2e}",
            inputs.iter().map(Tensor::len).sum::<usize>()
        );
    }
    Ok(())
}
