//! The dose model: a shared per-slice convolutional encoder, a causal
//! transformer over the slice sequence (with a leading energy token) and a
//! shared per-slice convolutional decoder.

mod checkpoint;
mod config;
mod params;

use rand::{Rng, RngCore};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use params::{param_count, ParamStore};

use crate::error::{Error, Result};
use crate::grid::{DoseGrid, GeometryGrid, VoxelGrid};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

/// Parameters recorded on a graph, in [`ParamStore`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Geometry plus normalised energy for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput {
    /// `[B, L, H, W]` stopping-power ratios.
    pub geometry: Var,
    /// `[B, 1]` energies mapped by [`ModelConfig::normalize_energy`].
    pub energy: Var,
}

/// Lower-triangular attention mask of size `len x len`; `true` marks a
/// blocked (future) position.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in i + 1..len {
            mask[i * len + j] = true;
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dota<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Element> Dota<T> {
    /// Fresh model with randomly initialised weights.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&config, rng);
        Ok(Dota { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Dota { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Dota<U> {
        Dota {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| g.param(t.clone()))
                .collect(),
        }
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect(),
        }
    }

    fn p(&self, bound: &BoundParams, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        bound.vars[i]
    }

    /// Records geometry `[B, L, H, W]` and raw energies (MeV) as constants.
    pub fn input(
        &self,
        g: &mut Graph<T>,
        geometry: Tensor<T>,
        energies_mev: &[f64],
    ) -> Result<ModelInput> {
        let cfg = &self.config;
        let expected = [energies_mev.len(), cfg.seq_len, cfg.height, cfg.width];
        if geometry.shape() != expected {
            return Err(TensorError::shape(
                "model input",
                format!("{:?}", expected),
                geometry.shape(),
            )
            .into());
        }
        let e = Tensor::new(
            &[energies_mev.len(), 1],
            energies_mev
                .iter()
                .map(|&e| T::of(cfg.normalize_energy(e)))
                .collect(),
        )?;
        Ok(ModelInput {
            geometry: g.constant(geometry),
            energy: g.constant(e),
        })
    }

    /// `[B, L, H, W]` geometry to `[B, L, D]` tokens, slice by slice.
    pub fn encode_slices(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        geometry: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, l) = match *g.shape(geometry) {
            [b, l, h, w] if l == cfg.seq_len && h == cfg.height && w == cfg.width => (b, l),
            ref s => {
                let expected = format!("[B, {}, {}, {}]", cfg.seq_len, cfg.height, cfg.width);
                return Err(TensorError::shape("encode_slices", expected, s).into());
            }
        };
        let (c1, c2) = cfg.encoder_channels;
        let mut x = g.reshape(geometry, &[b * l, 1, cfg.height, cfg.width])?;
        for (i, c) in [(1, c1), (2, c2)] {
            x = g.conv2d(x, self.p(bound, &format!("enc.conv{}.weight", i)))?;
            x = g.channel_bias(x, self.p(bound, &format!("enc.conv{}.bias", i)))?;
            x = g.group_norm(
                x,
                ModelConfig::norm_groups(c),
                self.p(bound, &format!("enc.gn{}.gain", i)),
                self.p(bound, &format!("enc.gn{}.bias", i)),
            )?;
            x = g.pool2d(x, cfg.pool)?;
            x = g.relu(x)?;
        }
        x = g.conv2d(x, self.p(bound, "enc.conv3.weight"))?;
        x = g.channel_bias(x, self.p(bound, "enc.conv3.bias"))?;
        Ok(g.reshape(x, &[b, l, cfg.token_dim()])?)
    }

    /// `[B, 1]` normalised energies to `[B, 1, D]` energy tokens.
    pub fn embed_energy(&self, g: &mut Graph<T>, bound: &BoundParams, energy: Var) -> Result<Var> {
        let b = match *g.shape(energy) {
            [b, 1] => b,
            ref s => return Err(TensorError::shape("embed_energy", "[B, 1]", s).into()),
        };
        let z = g.matmul_bt(energy, self.p(bound, "energy.weight"))?;
        Ok(g.reshape(z, &[b, 1, self.config.token_dim()])?)
    }

    /// Adds the positional embedding and applies the transformer blocks to
    /// `[B, L+1, D]`.
    pub fn transformer_forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        z: Var,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, t) = (cfg.token_dim(), cfg.seq_len + 1);
        let b = match *g.shape(z) {
            [b, tt, dd] if tt == t && dd == d => b,
            ref s => {
                return Err(
                    TensorError::shape("transformer", format!("[B, {}, {}]", t, d), s).into(),
                )
            }
        };
        let (nh, dh) = (cfg.heads, cfg.head_dim());
        let mask = causal_mask(t);
        let mut z = g.add(z, self.p(bound, "pos_embedding"))?;
        for blk in 0..cfg.blocks {
            let p = |s: &str| self.p(bound, &format!("block{}.{}", blk, s));

            let h = g.layer_norm(z, p("ln1.gain"), p("ln1.bias"))?;
            let h = g.reshape(h, &[b * t, d])?;
            let qkv = g.matmul(h, p("attn.qkv"))?;
            let qkv = g.reshape(qkv, &[b, t, 3, nh, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let qkv = g.reshape(qkv, &[3, b * nh, t, dh])?;
            let mut qkv_parts = [qkv; 3];
            for (i, part) in qkv_parts.iter_mut().enumerate() {
                let v = g.narrow(qkv, 0, i, 1)?;
                *part = g.reshape(v, &[b * nh, t, dh])?;
            }
            let [q, k, v] = qkv_parts;
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = g.masked_fill(scores, &mask, f64::NEG_INFINITY)?;
            let attn = g.softmax(scores)?;
            let heads = g.matmul(attn, v)?;
            let heads = g.reshape(heads, &[b, nh, t, dh])?;
            let heads = g.permute(heads, &[0, 2, 1, 3])?;
            let heads = g.reshape(heads, &[b * t, d])?;
            let msa = g.matmul(heads, p("attn.proj"))?;
            let msa = g.reshape(msa, &[b, t, d])?;
            let s = g.add(z, msa)?;

            let h = g.layer_norm(s, p("ln2.gain"), p("ln2.bias"))?;
            let h = g.reshape(h, &[b * t, d])?;
            let h = g.matmul(h, p("mlp.fc1.weight"))?;
            let h = g.add(h, p("mlp.fc1.bias"))?;
            let h = g.gelu(h)?;
            let h = self.dropout(g, h, &mut dropout)?;
            let h = g.matmul(h, p("mlp.fc2.weight"))?;
            let h = g.add(h, p("mlp.fc2.bias"))?;
            let h = self.dropout(g, h, &mut dropout)?;
            let h = g.reshape(h, &[b, t, d])?;
            z = g.add(s, h)?;
        }
        Ok(z)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        Ok(match rng {
            Some(rng) => g.dropout(x, self.config.dropout_rate, true, rng)?,
            None => x,
        })
    }

    /// Drops the energy position of `[B, L+1, D]` and decodes each token to
    /// a slice, giving `[B, L, H, W]`.
    pub fn decode_tokens(&self, g: &mut Graph<T>, bound: &BoundParams, z: Var) -> Result<Var> {
        let cfg = &self.config;
        let (d, l) = (cfg.token_dim(), cfg.seq_len);
        let b = match *g.shape(z) {
            [b, t, dd] if t == l + 1 && dd == d => b,
            ref s => {
                return Err(TensorError::shape(
                    "decode_tokens",
                    format!("[B, {}, {}]", l + 1, d),
                    s,
                )
                .into())
            }
        };
        let (c1, c2) = cfg.encoder_channels;
        let x = g.narrow(z, 1, 1, l)?;
        let mut x = g.reshape(x, &[b * l, cfg.filters, cfg.height / 4, cfg.width / 4])?;
        for (i, c) in [(1, c2), (2, c1)] {
            x = g.conv2d_transposed(x, self.p(bound, &format!("dec.deconv{}.weight", i)), 2)?;
            x = g.channel_bias(x, self.p(bound, &format!("dec.deconv{}.bias", i)))?;
            x = g.group_norm(
                x,
                ModelConfig::norm_groups(c),
                self.p(bound, &format!("dec.gn{}.gain", i)),
                self.p(bound, &format!("dec.gn{}.bias", i)),
            )?;
            x = g.relu(x)?;
        }
        x = g.conv2d(x, self.p(bound, "dec.conv3.weight"))?;
        x = g.channel_bias(x, self.p(bound, "dec.conv3.bias"))?;
        x = g.relu(x)?;
        x = g.conv2d(x, self.p(bound, "dec.conv4.weight"))?;
        x = g.channel_bias(x, self.p(bound, "dec.conv4.bias"))?;
        Ok(g.reshape(x, &[b, l, cfg.height, cfg.width])?)
    }

    /// Full forward pass producing raw (unclamped) dose `[B, L, H, W]`.
    /// Dropout is active iff an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        input: ModelInput,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let tokens = self.encode_slices(g, bound, input.geometry)?;
        let ze = self.embed_energy(g, bound, input.energy)?;
        if g.shape(ze)[0] != g.shape(tokens)[0] {
            return Err(TensorError::shape(
                "forward",
                format!("{} energies", g.shape(tokens)[0]),
                g.shape(ze),
            )
            .into());
        }
        let z = g.concat(ze, tokens, 1)?;
        let z = self.transformer_forward(g, bound, z, dropout)?;
        self.decode_tokens(g, bound, z)
    }

    /// Inference on a batch of `(geometry, energy MeV)` pairs. Negative
    /// outputs are clamped to zero; grid spacing is carried over.
    pub fn predict_batch(&self, inputs: &[(&GeometryGrid, f64)]) -> Result<Vec<DoseGrid>> {
        let cfg = &self.config;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let dims = [cfg.seq_len, cfg.height, cfg.width];
        let mut data = Vec::with_capacity(inputs.len() * dims.iter().product::<usize>());
        for (grid, energy) in inputs {
            if grid.dims() != dims {
                return Err(Error::Data(format!(
                    "geometry dims {:?} do not match model dims {:?}",
                    grid.dims(),
                    dims
                )));
            }
            if !cfg.energy_in_range(*energy) {
                log::warn!(
                    "energy {} MeV outside trained range {:?}; extrapolating",
                    energy,
                    cfg.energy_range
                );
            }
            data.extend(grid.values().iter().map(|&v| T::of(v as f64)));
        }
        let energies: Vec<f64> = inputs.iter().map(|(_, e)| *e).collect();
        let out = self.forward_streamed(&data, &energies)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("model produced non-finite dose".into()));
        }
        let per = dims.iter().product::<usize>();
        inputs
            .iter()
            .zip(out.chunks_exact(per))
            .map(|((grid, _), chunk)| {
                let values = chunk.iter().map(|v| (v.as_f64() as f32).max(0.0)).collect();
                VoxelGrid::new(dims, grid.spacing(), values)
            })
            .collect()
    }

    /// Inference forward pass equal to [`Dota::forward`] without dropout.
    /// The per-slice encoder and decoder run one sample at a time in
    /// short-lived graphs, so the working set does not grow with the batch;
    /// only the transformer sees the whole batch.
    fn forward_streamed(&self, geometry: &[T], energies: &[f64]) -> Result<Vec<T>> {
        let cfg = &self.config;
        let (b, l, d) = (energies.len(), cfg.seq_len, cfg.token_dim());
        let per = l * cfg.height * cfg.width;
        let mut tokens = Vec::with_capacity(b * l * d);
        for (sample, &energy) in geometry.chunks_exact(per).zip(energies) {
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let input = self.input(
                &mut g,
                Tensor::new(&[1, l, cfg.height, cfg.width], sample.to_vec())?,
                &[energy],
            )?;
            let t = self.encode_slices(&mut g, &bound, input.geometry)?;
            tokens.extend_from_slice(g.value(t).data());
        }
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let e = Tensor::new(
            &[b, 1],
            energies
                .iter()
                .map(|&e| T::of(cfg.normalize_energy(e)))
                .collect(),
        )?;
        let e = g.constant(e);
        let ze = self.embed_energy(&mut g, &bound, e)?;
        let tokens = g.constant(Tensor::new(&[b, l, d], tokens)?);
        let z = g.concat(ze, tokens, 1)?;
        let z = self.transformer_forward(&mut g, &bound, z, None)?;
        let mut out = Vec::with_capacity(b * per);
        for z in g.value(z).data().chunks_exact((l + 1) * d) {
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let z = g.constant(Tensor::new(&[1, l + 1, d], z.to_vec())?);
            let y = self.decode_tokens(&mut g, &bound, z)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    pub fn predict(&self, geometry: &GeometryGrid, energy: f64) -> Result<DoseGrid> {
        Ok(self.predict_batch(&[(geometry, energy)])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 5,
            height: 8,
            width: 4,
            filters: 4,
            heads: 2,
            mlp_ratio: 2,
            encoder_channels: (4, 4),
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn mask_is_lower_triangular() {
        let m = causal_mask(4);
        assert_eq!(m.iter().filter(|&&b| !b).count(), 4 * 5 / 2);
        assert!(!m[0] && m[1]);
        assert!(m[12..16].iter().all(|&b| !b));
    }

    #[test]
    fn predict_preserves_shape_and_spacing() {
        let cfg = tiny();
        let model: Dota = Dota::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let geo = VoxelGrid::filled([5, 8, 4], [3.0, 1.0, 1.0], 1.0);
        let dose = model.predict(&geo, 100.0).unwrap();
        assert!(dose.same_layout(&geo));
        assert!(dose.values().iter().all(|&v| v >= 0.0));
        let wrong = VoxelGrid::filled([4, 8, 4], [3.0, 1.0, 1.0], 1.0);
        assert!(model.predict(&wrong, 100.0).is_err());
    }

    #[test]
    fn param_store_matches_closed_form() {
        let cfg = tiny();
        let model: Dota = Dota::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(model.params().scalar_count(), param_count(&cfg));
    }
}
