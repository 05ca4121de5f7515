use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Index of the nearest codebook row to each row of `x`, in squared
/// Euclidean distance. Ties go to the lowest index.
pub fn nearest_codes(x: &Tensor, codebook: &Tensor) -> Vec<usize> {
    assert_eq!(x.cols, codebook.cols, "token and codebook widths differ");
    (0..x.rows)
        .map(|r| {
            let row = x.row_slice(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..codebook.rows {
                let d: f64 = row
                    .iter()
                    .zip(codebook.row_slice(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Outputs of one quantization.
#[derive(Debug, Clone)]
pub struct VqOut {
    pub indices: Vec<usize>,
    /// Holds the selected codebook rows; gradient passes straight to `x`.
    pub quantized: NodeId,
    /// `mean((sg(x) − e)²)`, which moves the codebook.
    pub codebook_loss: NodeId,
    /// `mean((x − sg(e))²)`, which moves the encoder side.
    pub commitment_loss: NodeId,
}

fn mse(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let s = g.square(d);
    g.mean_all(s)
}

/// Vector quantization of the rows of `x` against `codebook` (K × d).
pub fn vq_quantize(g: &mut Graph, x: NodeId, codebook: NodeId) -> VqOut {
    let indices = nearest_codes(g.value(x), g.value(codebook));
    let e = g.gather_rows(codebook, &indices);
    let x_sg = g.detach(x);
    let e_sg = g.detach(e);
    let codebook_loss = mse(g, x_sg, e);
    let commitment_loss = mse(g, x, e_sg);
    let quantized = g.straight_through(x, e);
    VqOut {
        indices,
        quantized,
        codebook_loss,
        commitment_loss,
    }
}

/// Fraction of the `k` codes that occur in `indices`.
pub fn codebook_usage(indices: &[usize], k: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Evaluation("codebook usage of an empty index stream".into()));
    }
    if k == 0 {
        return Err(Error::Evaluation("codebook of size zero".into()));
    }
    let mut used = vec![false; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Evaluation(format!("index {i} outside a codebook of {k}")));
        }
        used[i] = true;
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_neighbour_and_ties() {
        let cb = Tensor::from_vec(2, 1, vec![0.0, 1.0]);
        let x = Tensor::from_vec(3, 1, vec![0.4, 0.6, 0.5]);
        assert_eq!(nearest_codes(&x, &cb), vec![0, 1, 0]);
    }

    #[test]
    fn exact_entry_has_zero_error() {
        let cb = Tensor::randn(16, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let x = cb.select_rows(&[7]);
        let mut g = Graph::new();
        let xn = g.input(x);
        let c = g.constant(cb);
        let out = vq_quantize(&mut g, xn, c);
        assert_eq!(out.indices, vec![7]);
        assert_eq!(g.value(out.codebook_loss).item(), 0.0);
        assert_eq!(g.value(out.quantized), g.value(xn));
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Tensor::randn(32, 8, 1.0, &mut rng);
        let x = Tensor::randn(50, 8, 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let c = g.constant(cb);
        let first = vq_quantize(&mut g, xn, c);
        let again = vq_quantize(&mut g, first.quantized, c);
        assert_eq!(first.indices, again.indices);
        assert_eq!(g.value(again.quantized), g.value(first.quantized));
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Tensor::randn(8, 4, 1.0, &mut rng);
        let x = Tensor::randn(5, 4, 1.0, &mut rng);
        let w = Tensor::randn(5, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.input(x);
        let c = g.constant(cb);
        let out = vq_quantize(&mut g, xn, c);
        let wn = g.constant(w.clone());
        let prod = g.mul(out.quantized, wn);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(&g, out.quantized), w);
        assert_eq!(grads.wrt(&g, xn), w);
    }

    #[test]
    fn vq_losses_route_to_their_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let xn = g.input(Tensor::randn(6, 3, 1.0, &mut rng));
        let c = g.input(Tensor::randn(4, 3, 1.0, &mut rng));
        let out = vq_quantize(&mut g, xn, c);
        let gc = g.backward(out.codebook_loss);
        assert_eq!(gc.wrt(&g, xn).max_abs(), 0.0);
        assert!(gc.wrt(&g, c).max_abs() > 0.0);
        let gm = g.backward(out.commitment_loss);
        assert_eq!(gm.wrt(&g, c).max_abs(), 0.0);
        assert!(gm.wrt(&g, xn).max_abs() > 0.0);
    }

    #[test]
    fn usage_cases() {
        assert_eq!(codebook_usage(&vec![5; 100], 1024).unwrap(), 1.0 / 1024.0);
        let all: Vec<usize> = (0..1024).rev().collect();
        assert_eq!(codebook_usage(&all, 1024).unwrap(), 1.0);
        assert!(codebook_usage(&[], 1024).is_err());
        assert!(codebook_usage(&[1024], 1024).is_err());
    }
}
