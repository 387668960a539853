use rand::Rng;

use crate::error::{Error, Result};
use crate::pointops::{build_radius_mask, Point, SetAggregation};
use crate::tensor::nn::{LayerNorm, Linear, Mlp};
use crate::tensor::{Bound, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `query [n, d]` over `key`/`value`
    /// `[m, d]`. `mask`, if given, is an `n x m` keep-mask shared by all
    /// heads. Returns the output and the `[heads, n, m]` attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let (n, d) = match tape.shape(query) {
            &[n, d] => (n, d),
            s => {
                return Err(Error::contract(format!(
                    "attention query must be 2-d, got {s:?}"
                )))
            }
        };
        let m = tape.shape(key)[0];
        let h = self.heads;
        let dh = d / h;

        let q = self.q.forward(tape, p, query)?;
        let q = tape.reshape(q, &[n, h, dh])?;
        let q = tape.permute(q, &[1, 0, 2])?;
        let k = self.k.forward(tape, p, key)?;
        let k = tape.reshape(k, &[m, h, dh])?;
        let k = tape.permute(k, &[1, 2, 0])?;
        let v = self.v.forward(tape, p, value)?;
        let v = tape.reshape(v, &[m, h, dh])?;
        let v = tape.permute(v, &[1, 0, 2])?;

        let scores = tape.bmm(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = match mask {
            Some(mask) => tape.softmax_masked(scores, mask)?,
            None => tape.softmax(scores)?,
        };
        let ctx = tape.bmm(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[n, d])?;
        Ok((self.out.forward(tape, p, ctx)?, weights))
    }
}

/// Pre-norm self-attention block followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, hidden, d], false, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mask: Option<&[bool]>,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(tape, p, x)?;
        let (a, weights) = self.attn.forward(tape, p, h, h, h, mask)?;
        let a = tape.dropout(a, dropout, training, rng)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let f = self.mlp.forward(tape, p, h)?;
        let f = tape.dropout(f, dropout, training, rng)?;
        Ok((tape.add(x, f)?, weights))
    }
}

pub struct EncoderOutput {
    pub features: Var,
    pub coords: Vec<Point>,
    /// Attention weights of every layer, `[heads, M_l, M_l]`.
    pub attention: Vec<Var>,
}

/// Stack of encoder layers. With `mask_radii` set, layer `l` only attends
/// within `mask_radii[l]`, and an optional set-aggregation step after the
/// first layer reduces the token count.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub mask_radii: Option<Vec<f64>>,
    pub downsample: Option<(SetAggregation, usize)>,
    pub dropout: f64,
}

impl Encoder {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        coords: &[Point],
        training: bool,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        if tape.shape(features)[0] != coords.len() {
            return Err(Error::Shape {
                op: "encoder",
                lhs: tape.shape(features).to_vec(),
                rhs: vec![coords.len(), 3],
            });
        }
        let mut x = features;
        let mut coords = coords.to_vec();
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match &self.mask_radii {
                Some(radii) => Some(build_radius_mask(&coords, radii[l])?.bits),
                None => None,
            };
            let (y, w) = layer.forward(tape, p, x, mask.as_deref(), self.dropout, training, rng)?;
            x = y;
            attention.push(w);
            if l == 0 {
                if let Some((sa, keep)) = &self.downsample {
                    let keep = (*keep).min(coords.len());
                    let (sampled, pooled) = sa.forward(tape, p, &coords, Some(x), keep, 0)?;
                    x = pooled;
                    coords = sampled.coords;
                }
            }
        }
        Ok(EncoderOutput {
            features: x,
            coords,
            attention,
        })
    }
}

/// Pre-norm decoder block: self-attention among box queries,
/// cross-attention to encoder tokens, then an MLP.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                d,
                heads,
                rng,
            ),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, hidden, d], false, rng),
        }
    }

    /// `query_pos` is added to the query side of both attentions and
    /// `memory_pos` to the cross-attention keys.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_keys: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, p, tgt)?;
        let qk = tape.add(h, query_pos)?;
        let (a, _) = self.self_attn.forward(tape, p, qk, qk, h, None)?;
        let a = tape.dropout(a, dropout, training, rng)?;
        let tgt = tape.add(tgt, a)?;

        let h = self.norm2.forward(tape, p, tgt)?;
        let q = tape.add(h, query_pos)?;
        let (c, _) = self
            .cross_attn
            .forward(tape, p, q, memory_keys, memory, None)?;
        let c = tape.dropout(c, dropout, training, rng)?;
        let tgt = tape.add(tgt, c)?;

        let h = self.norm3.forward(tape, p, tgt)?;
        let f = self.mlp.forward(tape, p, h)?;
        let f = tape.dropout(f, dropout, training, rng)?;
        tape.add(tgt, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Shared normalisation applied to every layer's output before the heads.
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl Decoder {
    /// Runs the first `depth` layers and returns each layer's normalised
    /// `[B, d]` box features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
        depth: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        if depth == 0 || depth > self.layers.len() {
            return Err(Error::contract(format!(
                "decoder depth {depth} outside 1..={}",
                self.layers.len()
            )));
        }
        let shape = tape.shape(query_pos).to_vec();
        let mut tgt = tape.constant(crate::tensor::Tensor::zeros(&shape));
        let memory_keys = tape.add(memory, memory_pos)?;
        let mut outputs = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            tgt = layer.forward(
                tape,
                p,
                tgt,
                query_pos,
                memory,
                memory_keys,
                self.dropout,
                training,
                rng,
            )?;
            outputs.push(self.norm.forward(tape, p, tgt)?);
        }
        Ok(outputs)
    }
}
