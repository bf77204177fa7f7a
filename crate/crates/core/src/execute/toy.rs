//! A small seeded transformer used as the noise predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{attention, Mat};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    /// `hs x (mlp_ratio * hs)`.
    pub mlp_in: Mat,
    /// `(mlp_ratio * hs) x hs`.
    pub mlp_out: Mat,
}

/// Weights come from ChaCha8 seeded with `seed`, drawn uniform in `[-1, 1)` and filled layer
/// by layer in the order `w_q, w_k, w_v, w_o, mlp_in, mlp_out` (each row-major), then
/// `condition_bias`. Every matrix is divided by the square root of its input width.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT {
    pub seed: u64,
    pub hidden_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: Vec<ToyLayer>,
    /// Stands in for the conditioning input; added to every token before the first layer.
    pub condition_bias: Vec<f64>,
}

fn seeded(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Mat::from_vec(rows, cols, data).expect("sized by construction")
}

pub fn build_toy_model(seed: u64, layers: usize, hidden_size: usize, heads: usize, mlp_ratio: usize) -> Result<ToyDiT> {
    ensure!(layers >= 1, "toy model needs at least one layer");
    ensure!(hidden_size >= 1 && heads >= 1, "toy hidden size and heads must be positive");
    ensure!(
        hidden_size.is_multiple_of(heads),
        "hidden size {hidden_size} must be divisible by heads {heads}"
    );
    ensure!(mlp_ratio >= 1, "toy mlp ratio must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hs = hidden_size;
    let wide = mlp_ratio * hs;
    let narrow = 1.0 / (hs as f64).sqrt();
    let layers = (0..layers)
        .map(|_| ToyLayer {
            w_q: seeded(&mut rng, hs, hs, narrow),
            w_k: seeded(&mut rng, hs, hs, narrow),
            w_v: seeded(&mut rng, hs, hs, narrow),
            w_o: seeded(&mut rng, hs, hs, narrow),
            mlp_in: seeded(&mut rng, hs, wide, narrow),
            mlp_out: seeded(&mut rng, wide, hs, 1.0 / (wide as f64).sqrt()),
        })
        .collect();
    let condition_bias = (0..hs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(ToyDiT {
        seed,
        hidden_size,
        heads,
        mlp_ratio,
        layers,
        condition_bias,
    })
}

/// Standard-uniform latent from ChaCha8 seeded with `seed` on stream 1, so it never
/// shares draws with the model weights.
pub fn initial_latent(seed: u64, seq_len: usize, hidden_size: usize) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    seeded(&mut rng, seq_len, hidden_size, 1.0)
}

impl ToyDiT {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn embed(&self, x: &Mat) -> Mat {
        x.add_row(&self.condition_bias)
    }

    /// Keys and values of layer `l` for the rows of `h`.
    pub fn kv(&self, l: usize, h: &Mat) -> (Mat, Mat) {
        let layer = &self.layers[l];
        (h.matmul(&layer.w_k), h.matmul(&layer.w_v))
    }

    /// Rest of layer `l` for rows `h`, attending over `blocks` in order:
    /// `h + Attn(h) W_o`, then `+ tanh(h W_in) W_out`.
    pub fn finish_layer(&self, l: usize, h: &Mat, blocks: &[(&Mat, &Mat)], step: usize) -> Result<Mat> {
        let layer = &self.layers[l];
        let q = h.matmul(&layer.w_q);
        let attn = attention(&q, blocks, self.heads).matmul(&layer.w_o);
        let h = h.add(&attn);
        let mlp = h.matmul(&layer.mlp_in).map(f64::tanh).matmul(&layer.mlp_out);
        let h = h.add(&mlp);
        if !h.is_finite() {
            return Err(Error::NonFinite { step, layer: l });
        }
        Ok(h)
    }

    /// Layers `range` over a whole sequence with fresh attention.
    pub fn forward_layers(&self, range: std::ops::Range<usize>, mut h: Mat, step: usize) -> Result<Mat> {
        for l in range {
            let (k, v) = self.kv(l, &h);
            h = self.finish_layer(l, &h, &[(&k, &v)], step)?;
        }
        Ok(h)
    }

    /// Predicted noise for the whole latent.
    pub fn forward(&self, x: &Mat, step: usize) -> Result<Mat> {
        ensure!(
            x.cols() == self.hidden_size,
            "latent width {} does not match hidden size {}",
            x.cols(),
            self.hidden_size
        );
        self.forward_layers(0..self.layers.len(), self.embed(x), step)
    }
}
