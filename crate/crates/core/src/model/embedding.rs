use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pointops::Point;
use crate::tensor::nn::Mlp;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Random Fourier features of 3D coordinates followed by a learned
/// two-layer projection.
///
/// The frequency matrix is not a parameter: it is drawn once, never
/// updated, and stored in checkpoints next to the parameters.
#[derive(Clone, Debug)]
pub struct FourierEmbedding {
    /// `[bands, 3]`
    pub frequencies: Tensor,
    pub projection: Mlp,
}

impl FourierEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        bands: usize,
        sigma: f64,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::contract(format!("fourier sigma {sigma}: {e}")))?;
        let frequencies = Tensor::new(
            vec![bands, 3],
            (0..bands * 3).map(|_| normal.sample(rng)).collect(),
        )?;
        let projection = Mlp::new(store, name, &[2 * bands, out_dim, out_dim], false, rng);
        Ok(FourierEmbedding {
            frequencies,
            projection,
        })
    }

    pub fn bands(&self) -> usize {
        self.frequencies.shape()[0]
    }

    /// `[cos(2 pi F v), sin(2 pi F v)]` for every coordinate, `[M, 2 * bands]`.
    pub fn raw(&self, coords: &[Point]) -> Tensor {
        let bands = self.bands();
        let f = self.frequencies.data();
        let mut out = vec![0.0; coords.len() * 2 * bands];
        for (row, v) in out.chunks_mut(2 * bands).zip(coords) {
            for b in 0..bands {
                let phase = std::f64::consts::TAU
                    * (f[3 * b] * v[0] + f[3 * b + 1] * v[1] + f[3 * b + 2] * v[2]);
                row[b] = phase.cos();
                row[bands + b] = phase.sin();
            }
        }
        Tensor::new(vec![coords.len(), 2 * bands], out).expect("length matches shape")
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, coords: &[Point]) -> Result<Var> {
        let raw = tape.constant(self.raw(coords));
        self.projection.forward(tape, p, raw)
    }
}
