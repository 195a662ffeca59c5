use super::rng::Rng;
use super::tensor::Tensor;

/// Glorot-uniform matrix: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Glorot-uniform vector treated as a `len × 1` matrix.
pub fn glorot_vector(len: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (len + 1) as f64).sqrt();
    Tensor::vector((0..len).map(|_| rng.uniform_in(-limit, limit)).collect())
}
