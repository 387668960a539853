use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every architectural hyperparameter of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub enc_mlp_hidden: usize,
    pub dec_mlp_hidden: usize,
    pub head_hidden: usize,
    /// Hidden widths of the point-embedding set aggregation MLP.
    pub sa_hidden: Vec<usize>,
    pub sa_radius: f64,
    pub sa_max_neighbors: usize,
    /// Points kept by the input set aggregation (N').
    pub n_points_sampled: usize,
    /// Box queries (B) used when no override is given.
    pub num_queries: usize,
    pub num_classes: usize,
    pub num_angle_bins: usize,
    pub masked_encoder: bool,
    /// Per-encoder-layer attention radius in the normalised frame.
    pub mask_radii: Vec<f64>,
    /// Points kept by the downsampling step after the first masked layer
    /// (N''); `None` disables the step.
    pub masked_downsample_to: Option<usize>,
    pub dropout_enc: f64,
    pub dropout_dec: f64,
    pub fourier_bands: usize,
    pub fourier_sigma: f64,
}

impl ModelConfig {
    /// Full-size architecture as published (256-d, 3 encoder / 8 decoder
    /// layers, 2048 points, 256 queries).
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            d_model: 256,
            enc_layers: 3,
            dec_layers: 8,
            heads: 4,
            enc_mlp_hidden: 128,
            dec_mlp_hidden: 256,
            head_hidden: 256,
            sa_hidden: vec![64, 128],
            sa_radius: 0.2,
            sa_max_neighbors: 64,
            n_points_sampled: 2048,
            num_queries: 256,
            num_classes,
            num_angle_bins: 12,
            masked_encoder: false,
            mask_radii: vec![0.4, 0.8, 1.2],
            masked_downsample_to: Some(1024),
            dropout_enc: 0.1,
            dropout_dec: 0.3,
            fourier_bands: 128,
            fourier_sigma: 1.0,
        }
    }

    /// Full-size architecture with the locally masked encoder.
    pub fn full_masked(num_classes: usize) -> Self {
        ModelConfig {
            masked_encoder: true,
            ..Self::full(num_classes)
        }
    }

    /// CPU-sized preset: trains in minutes on a handful of scenes.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            enc_layers: 3,
            dec_layers: 4,
            heads: 2,
            enc_mlp_hidden: 128,
            dec_mlp_hidden: 128,
            head_hidden: 64,
            sa_hidden: vec![32, 64],
            sa_radius: 0.2,
            sa_max_neighbors: 64,
            n_points_sampled: 512,
            num_queries: 32,
            num_classes: 5,
            num_angle_bins: 12,
            masked_encoder: false,
            mask_radii: vec![0.4, 0.8, 1.2],
            masked_downsample_to: Some(256),
            dropout_enc: 0.1,
            dropout_dec: 0.3,
            fourier_bands: 32,
            fourier_sigma: 1.0,
        }
    }

    /// Tiny network used by gradient checks and unit tests.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 8,
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            enc_mlp_hidden: 8,
            dec_mlp_hidden: 8,
            head_hidden: 8,
            sa_hidden: vec![4, 8],
            sa_radius: 0.4,
            sa_max_neighbors: 8,
            n_points_sampled: 8,
            num_queries: 4,
            num_classes: 3,
            num_angle_bins: 12,
            masked_encoder: false,
            mask_radii: vec![0.4],
            masked_downsample_to: None,
            dropout_enc: 0.0,
            dropout_dec: 0.0,
            fourier_bands: 4,
            fourier_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("model config: {m}")));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.num_classes == 0 || self.num_angle_bins == 0 || self.fourier_bands == 0 {
            return fail("num_classes, num_angle_bins and fourier_bands must be positive".into());
        }
        if self.num_queries == 0 || self.num_queries > self.n_points_sampled {
            return fail(format!(
                "num_queries {} must be in 1..={}",
                self.num_queries, self.n_points_sampled
            ));
        }
        if !(self.sa_radius > 0.0) || self.sa_max_neighbors == 0 {
            return fail("set aggregation radius and neighbour count must be positive".into());
        }
        for (name, rate) in [
            ("dropout_enc", self.dropout_enc),
            ("dropout_dec", self.dropout_dec),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} {rate} outside [0, 1)"));
            }
        }
        if self.masked_encoder {
            if self.mask_radii.len() != self.enc_layers {
                return fail(format!(
                    "{} mask radii for {} encoder layers",
                    self.mask_radii.len(),
                    self.enc_layers
                ));
            }
            if self.mask_radii.iter().any(|r| !(*r > 0.0))
                || self.mask_radii.windows(2).any(|w| w[1] <= w[0])
            {
                return fail(format!(
                    "mask radii {:?} must be positive and strictly increasing",
                    self.mask_radii
                ));
            }
            if let Some(n) = self.masked_downsample_to {
                if n == 0 || n > self.n_points_sampled {
                    return fail(format!(
                        "masked_downsample_to {n} outside 1..={}",
                        self.n_points_sampled
                    ));
                }
            }
        }
        Ok(())
    }
}
