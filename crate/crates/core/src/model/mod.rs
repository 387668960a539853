//! The detector network: point embedding by set aggregation, a
//! Transformer encoder (optionally locally masked), a parallel decoder fed
//! by farthest-point-sampled query locations, and shared box heads applied
//! after every decoder layer.

mod attention;
mod checkpoint;
mod config;
mod embedding;
mod heads;

pub use attention::{
    Decoder, DecoderLayer, Encoder, EncoderLayer, EncoderOutput, MultiHeadAttention,
};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use embedding::FourierEmbedding;
pub use heads::{
    bin_center, decode, quantize_angle, reconstruct_angle, BoxHeads, BoxPrediction, HeadOutput,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointops::{farthest_point_sample, Point, SetAggregation};
use crate::tensor::nn::LayerNorm;
use crate::tensor::{Bound, ParamStore, Tape, Var};

/// Per-call overrides of the configured query count and decoder depth.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub training: bool,
    pub num_queries: Option<usize>,
    pub depth: Option<usize>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        ForwardOptions {
            training: true,
            ..Self::default()
        }
    }
}

/// Points chosen as box queries and their positional embeddings.
pub struct QuerySet {
    pub points: Vec<Point>,
    /// `[B, d_model]`
    pub embeddings: Var,
}

pub struct DetectorOutput {
    pub queries: Vec<Point>,
    /// Encoder token positions after any downsampling.
    pub encoder_coords: Vec<Point>,
    /// One entry per decoder layer that was run.
    pub layers: Vec<HeadOutput>,
}

impl DetectorOutput {
    /// Decoded predictions of every layer.
    pub fn decode_all(&self, tape: &Tape) -> Vec<Vec<BoxPrediction>> {
        self.layers
            .iter()
            .map(|l| decode(tape, l, &self.queries))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub point_embed: SetAggregation,
    pub encoder: Encoder,
    pub pos_embed: FourierEmbedding,
    pub decoder: Decoder,
    pub heads: BoxHeads,
}

impl Detector {
    /// Fresh randomly initialised network; `seed` fixes every initial value
    /// including the Fourier frequencies.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let point_embed = SetAggregation::new(
            &mut store,
            "point_embed",
            0,
            &c.sa_hidden,
            d,
            c.sa_radius,
            c.sa_max_neighbors,
            &mut rng,
        );
        let mut layers = Vec::with_capacity(c.enc_layers);
        let mut downsample = None;
        for i in 0..c.enc_layers {
            layers.push(EncoderLayer::new(
                &mut store,
                &format!("encoder.{i}"),
                d,
                c.heads,
                c.enc_mlp_hidden,
                &mut rng,
            ));
            if i == 0 && c.masked_encoder {
                if let Some(keep) = c.masked_downsample_to {
                    let sa = SetAggregation::new(
                        &mut store,
                        "encoder.downsample",
                        d,
                        &[d, d],
                        d,
                        c.mask_radii[0],
                        c.sa_max_neighbors,
                        &mut rng,
                    );
                    downsample = Some((sa, keep));
                }
            }
        }
        let encoder = Encoder {
            layers,
            mask_radii: c.masked_encoder.then(|| c.mask_radii.clone()),
            downsample,
            dropout: c.dropout_enc,
        };
        let pos_embed = FourierEmbedding::new(
            &mut store,
            "pos_embed",
            c.fourier_bands,
            c.fourier_sigma,
            d,
            &mut rng,
        )?;
        let decoder = Decoder {
            layers: (0..c.dec_layers)
                .map(|i| {
                    DecoderLayer::new(
                        &mut store,
                        &format!("decoder.{i}"),
                        d,
                        c.heads,
                        c.dec_mlp_hidden,
                        &mut rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(&mut store, "decoder.norm", d),
            dropout: c.dropout_dec,
        };
        let heads = BoxHeads::new(
            &mut store,
            "heads",
            d,
            c.head_hidden,
            c.num_angle_bins,
            c.num_classes,
            &mut rng,
        );
        Ok(Detector {
            config,
            params: store,
            point_embed,
            encoder,
            pos_embed,
            decoder,
            heads,
        })
    }

    /// Farthest-point samples `b` of `coords` and embeds them.
    pub fn sample_queries(
        &self,
        tape: &mut Tape,
        p: &Bound,
        coords: &[Point],
        b: usize,
        seed_index: usize,
    ) -> Result<QuerySet> {
        if b == 0 || b > coords.len() {
            return Err(Error::contract(format!(
                "{b} queries requested from {} sampled points",
                coords.len()
            )));
        }
        let points = farthest_point_sample(coords, b, seed_index)?.coords;
        let embeddings = self.pos_embed.forward(tape, p, &points)?;
        Ok(QuerySet { points, embeddings })
    }

    /// Full pass over one normalised point cloud. Every decoder layer up to
    /// the requested depth produces a set of box predictions.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        points: &[Point],
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<DetectorOutput> {
        if points.is_empty() {
            return Err(Error::contract("forward on an empty point cloud"));
        }
        let training = opts.training;
        // Sampling always starts at the first point, so the output depends
        // only on the input order. Training randomness comes from augmentation.
        let k = self.config.n_points_sampled.min(points.len());
        let (sampled, features) = self.point_embed.forward(tape, p, points, None, k, 0)?;

        let b = opts.num_queries.unwrap_or(self.config.num_queries);
        let queries = self.sample_queries(tape, p, &sampled.coords, b, 0)?;

        let enc = self
            .encoder
            .forward(tape, p, features, &sampled.coords, training, rng)?;
        let memory_pos = self.pos_embed.forward(tape, p, &enc.coords)?;
        let depth = opts.depth.unwrap_or(self.config.dec_layers);
        let features = self.decoder.forward(
            tape,
            p,
            queries.embeddings,
            enc.features,
            memory_pos,
            depth,
            training,
            rng,
        )?;
        let layers = features
            .into_iter()
            .map(|f| self.heads.forward(tape, p, f, &queries.points))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorOutput {
            queries: queries.points,
            encoder_coords: enc.coords,
            layers,
        })
    }

    /// Inference on one normalised cloud; returns every computed layer's
    /// predictions, the last entry being the final output.
    pub fn predict(
        &self,
        points: &[Point],
        opts: ForwardOptions,
    ) -> Result<Vec<Vec<BoxPrediction>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(
            &mut tape,
            &p,
            points,
            ForwardOptions {
                training: false,
                ..opts
            },
            &mut rng,
        )?;
        Ok(out.decode_all(&tape))
    }
}
