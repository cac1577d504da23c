//! Disentangled self-attention.
//!
//! A DSA layer owns `H` independent attention heads. Each head attends over
//! the response prefix with its own projections, then passes through a stack
//! shared by all heads: cross-attention over the encoded history, a linear
//! map back to the model width, layer normalization and a position-wise
//! feed-forward network. Instead of concatenating heads, the layer output is
//! the sum of the per-head outputs whose switch bit is on.
//!
//! Heads whose switch is off are never evaluated, so their parameters cannot
//! influence the output, and an all-off switch yields an exact zero matrix.
//! Active heads are summed in ascending head order.
//!
//! [`Hdsa`] stacks one DSA layer per act-graph layer; the switch for layer
//! `l` is segment `l` of the act [`SwitchVector`], and head `j` of layer `l`
//! stands for node `j` of that ontology layer.

use serde::{Deserialize, Serialize};

use crate::act_graph::SwitchVector;
use crate::nn::{causal_mask, Builder, FeedForward, LayerNorm, Linear};
use crate::numerics::{Init, ParamId, Tape, Var};
use crate::{Error, Result};

/// `softmax(Q K^T / sqrt(d_k)) V`, with `mask` entries (row-major over the
/// score matrix) blocked before the softmax.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
    let dk = tape.shape(q).1;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let scores = match mask {
        Some(m) => tape.masked_fill(scores, m, f64::NEG_INFINITY)?,
        None => scores,
    };
    let weights = tape.softmax(scores)?;
    Ok(tape.matmul(weights, v)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaLayerConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub qk_dim: usize,
    pub value_dim: usize,
    pub ffn_dim: usize,
    /// Adds residual paths around the shared stack. Off reproduces the
    /// plain `PFF(LN(MLP(ATT(g, u))))` composition.
    #[serde(default)]
    pub residual: bool,
}

impl DsaLayerConfig {
    /// Query/key width `max(1, floor(D / H))`, value width 16.
    pub fn with_heads(heads: usize, model_dim: usize) -> Self {
        Self {
            heads,
            model_dim,
            qk_dim: (model_dim / heads.max(1)).max(1),
            value_dim: 16,
            ffn_dim: 256,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.qk_dim == 0 || self.value_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("DSA dimensions must be positive: {self:?}")));
        }
        if self.residual && self.model_dim == 0 {
            return Err(Error::Config("residual mode needs a model width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdsaConfig {
    pub layers: Vec<DsaLayerConfig>,
}

impl HdsaConfig {
    /// One layer per entry of `heads`, all sharing the model width.
    pub fn from_heads(heads: &[usize], model_dim: usize) -> Self {
        Self {
            layers: heads.iter().map(|&h| DsaLayerConfig::with_heads(h, model_dim)).collect(),
        }
    }

    /// Three layers of 10 / 7 / 27 heads at width 64 (q/k widths 6 / 9 / 2).
    pub fn canonical() -> Self {
        Self::from_heads(&[10, 7, 27], 64)
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.layers.iter_mut().for_each(|l| l.residual = residual);
        self
    }

    pub fn with_ffn_dim(mut self, ffn: usize) -> Self {
        self.layers.iter_mut().for_each(|l| l.ffn_dim = ffn);
        self
    }

    pub fn with_value_dim(mut self, dv: usize) -> Self {
        self.layers.iter_mut().for_each(|l| l.value_dim = dv);
        self
    }

    pub fn head_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.heads).collect()
    }

    pub fn switch_len(&self) -> usize {
        self.layers.iter().map(|l| l.heads).sum()
    }

    pub fn model_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.model_dim)
    }

    pub fn residual(&self) -> bool {
        self.layers.iter().any(|l| l.residual)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::Config("HDSA needs at least one layer".into()))?;
        for l in &self.layers {
            l.validate()?;
            if l.model_dim != first.model_dim {
                return Err(Error::Config("all DSA layers must share the model width".into()));
            }
        }
        Ok(())
    }
}

/// Per-layer head switch `s = (alpha_1, .., alpha_H)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSwitch(pub Vec<bool>);

impl LayerSwitch {
    pub fn all(h: usize, on: bool) -> Self {
        Self(vec![on; h])
    }

    pub fn from_indices(h: usize, on: &[usize]) -> Self {
        let mut bits = vec![false; h];
        on.iter().for_each(|&i| bits[i] = true);
        Self(bits)
    }

    pub fn active(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct DsaLayer {
    cfg: DsaLayerConfig,
    heads: Vec<HeadParams>,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    mlp: Linear,
    norm: LayerNorm,
    pff: FeedForward,
}

impl DsaLayer {
    pub fn build(cfg: &DsaLayerConfig, prefix: &str, b: &mut Builder) -> Result<Self> {
        cfg.validate()?;
        let (d, dk, dv) = (cfg.model_dim, cfg.qk_dim, cfg.value_dim);
        let heads = (0..cfg.heads)
            .map(|i| {
                Ok(HeadParams {
                    wq: b.param(&format!("{prefix}.head{i}.wq"), &[d, dk], Init::Uniform)?,
                    wk: b.param(&format!("{prefix}.head{i}.wk"), &[d, dk], Init::Uniform)?,
                    wv: b.param(&format!("{prefix}.head{i}.wv"), &[d, dv], Init::Uniform)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            heads,
            cross_q: b.param(&format!("{prefix}.cross.wq"), &[dv, dv], Init::Uniform)?,
            cross_k: b.param(&format!("{prefix}.cross.wk"), &[d, dv], Init::Uniform)?,
            cross_v: b.param(&format!("{prefix}.cross.wv"), &[d, dv], Init::Uniform)?,
            mlp: b.linear(&format!("{prefix}.mlp"), dv, d, true)?,
            norm: b.layer_norm(&format!("{prefix}.norm"), d)?,
            pff: b.feed_forward(&format!("{prefix}.pff"), d, cfg.ffn_dim)?,
        })
    }

    pub fn config(&self) -> &DsaLayerConfig {
        &self.cfg
    }

    /// Names of the private parameters of head `i`.
    pub fn head_param_ids(&self, i: usize) -> [ParamId; 3] {
        let h = self.heads[i];
        [h.wq, h.wk, h.wv]
    }

    /// `G = sum_i alpha_i G_i` for input rows `x` (`n x D`) and encoded history
    /// `history` (`m x D`).
    pub fn forward(&self, tape: &mut Tape, x: Var, history: Var, switch: &LayerSwitch, causal: bool) -> Result<Var> {
        let (n, d) = tape.shape(x);
        if d != self.cfg.model_dim {
            return Err(Error::Config(format!("DSA input width {d}, layer expects {}", self.cfg.model_dim)));
        }
        if switch.0.len() != self.cfg.heads {
            return Err(Error::Config(format!(
                "switch has {} bits, layer has {} heads",
                switch.0.len(),
                self.cfg.heads
            )));
        }
        let active = switch.active();
        if active.is_empty() {
            return Ok(tape.constant_from(n, d, vec![0.0; n * d])?);
        }

        let mask = causal.then(|| causal_mask(n));
        let mut per_head = Vec::with_capacity(active.len());
        for &i in &active {
            let h = self.heads[i];
            let (wq, wk, wv) = (tape.param(h.wq), tape.param(h.wk), tape.param(h.wv));
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            per_head.push(attention(tape, q, k, v, mask.as_deref())?);
        }

        // Shared stack, applied to all active heads at once (rows are independent).
        let g = tape.concat_rows(&per_head)?;
        let (cq, ck, cv) = (tape.param(self.cross_q), tape.param(self.cross_k), tape.param(self.cross_v));
        let q = tape.matmul(g, cq)?;
        let k = tape.matmul(history, ck)?;
        let v = tape.matmul(history, cv)?;
        let mut c = attention(tape, q, k, v, None)?;
        if self.cfg.residual {
            c = tape.add(c, g)?;
        }
        let mut h = self.mlp.forward(tape, c)?;
        if self.cfg.residual {
            let tiled = tape.concat_rows(&vec![x; active.len()])?;
            h = tape.add(h, tiled)?;
        }
        let z = self.norm.forward(tape, h)?;
        let mut stacked = self.pff.forward(tape, z)?;
        if self.cfg.residual {
            stacked = tape.add(stacked, z)?;
        }

        let mut out = tape.slice_rows(stacked, 0, n)?;
        for j in 1..active.len() {
            let part = tape.slice_rows(stacked, j * n, n)?;
            out = tape.add(out, part)?;
        }
        Ok(out)
    }
}

/// Stacked DSA layers switched by the segments of an act switch vector.
#[derive(Clone, Debug)]
pub struct Hdsa {
    cfg: HdsaConfig,
    layers: Vec<DsaLayer>,
}

impl Hdsa {
    pub fn build(cfg: &HdsaConfig, prefix: &str, b: &mut Builder) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(l, lc)| DsaLayer::build(lc, &format!("{prefix}.layer{l}"), b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &HdsaConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[DsaLayer] {
        &self.layers
    }

    /// Splits `A` into one [`LayerSwitch`] per layer.
    pub fn switches(&self, a: &SwitchVector) -> Result<Vec<LayerSwitch>> {
        let expected = self.cfg.head_counts();
        if a.sizes() != expected.as_slice() {
            return Err(Error::Config(format!(
                "switch segments {:?} do not match head counts {:?}",
                a.sizes(),
                expected
            )));
        }
        Ok((0..expected.len()).map(|l| LayerSwitch(a.segment(l).to_vec())).collect())
    }

    /// Runs every layer in order; layer `l` consumes layer `l - 1`'s output.
    pub fn forward(&self, tape: &mut Tape, y: Var, history: Var, a: &SwitchVector, causal: bool) -> Result<Var> {
        let switches = self.switches(a)?;
        let mut x = y;
        for (layer, s) in self.layers.iter().zip(&switches) {
            x = layer.forward(tape, x, history, s, causal)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn micro(residual: bool) -> (ParamStore, DsaLayer, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = DsaLayerConfig {
            heads: 3,
            model_dim: 6,
            qk_dim: 2,
            value_dim: 4,
            ffn_dim: 8,
            residual,
        };
        let layer = DsaLayer::build(&cfg, "dsa", &mut Builder::init(&mut store, &mut rng)).unwrap();
        let x = random(&mut rng, 4, 6);
        let hist = random(&mut rng, 5, 6);
        (store, layer, x, hist)
    }

    fn run(store: &ParamStore, layer: &DsaLayer, x: &Tensor, hist: &Tensor, on: &[usize]) -> Tensor {
        let mut tape = Tape::inference(store);
        let xv = tape.constant(x);
        let hv = tape.constant(hist);
        let out = layer
            .forward(&mut tape, xv, hv, &LayerSwitch::from_indices(3, on), true)
            .unwrap();
        tape.tensor(out)
    }

    #[test]
    fn single_key_returns_value_row() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(&Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
        let v = tape.constant(&Tensor::from_rows(&[vec![1.5, 2.5, -1.0]]).unwrap());
        let out = attention(&mut tape, q, q, v, None).unwrap();
        assert_eq!(tape.value(out), &[1.5, 2.5, -1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(&Tensor::from_rows(&[vec![0.7, 0.1]]).unwrap());
        let k = tape.constant(&Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let v = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out), &[2.0, 2.0]);
    }

    #[test]
    fn fully_masked_attention_row_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(&Tensor::zeros(&[1, 2]));
        let err = attention(&mut tape, q, q, q, Some(&[true])).unwrap_err();
        assert!(err.to_string().contains("masked"));
    }

    #[test]
    fn zero_switch_gives_exact_zero() {
        let (store, layer, x, hist) = micro(false);
        assert!(run(&store, &layer, &x, &hist, &[]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disjoint_switches_add_exactly() {
        for residual in [false, true] {
            let (store, layer, x, hist) = micro(residual);
            let a = run(&store, &layer, &x, &hist, &[0]);
            let b = run(&store, &layer, &x, &hist, &[2]);
            let ab = run(&store, &layer, &x, &hist, &[0, 2]);
            let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
            assert_eq!(ab.data(), sum.as_slice());
        }
    }

    #[test]
    fn inactive_head_parameters_do_not_matter() {
        let (mut store, layer, x, hist) = micro(false);
        let before = run(&store, &layer, &x, &hist, &[0, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for id in layer.head_param_ids(1) {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        }
        assert_eq!(run(&store, &layer, &x, &hist, &[0, 2]), before);
    }

    #[test]
    fn switch_length_mismatch_rejected() {
        let (store, layer, x, hist) = micro(false);
        let mut tape = Tape::inference(&store);
        let xv = tape.constant(&x);
        let hv = tape.constant(&hist);
        assert!(layer.forward(&mut tape, xv, hv, &LayerSwitch::all(2, true), true).is_err());
    }

    #[test]
    fn layer_gradients_check() {
        for residual in [false, true] {
            let (mut store, layer, x, hist) = micro(residual);
            let report = check_gradients(
                &mut store,
                |t| {
                    let xv = t.constant(&x);
                    let hv = t.constant(&hist);
                    let out = layer.forward(t, xv, hv, &LayerSwitch::from_indices(3, &[0, 1, 2]), true)?;
                    let sq = t.mul(out, out)?;
                    Ok::<_, Error>(t.mean(sq))
                },
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed(), "residual={residual}: {:?}", report.worst());
        }
    }

    #[test]
    fn canonical_head_dims() {
        let cfg = HdsaConfig::canonical();
        let qk: Vec<usize> = cfg.layers.iter().map(|l| l.qk_dim).collect();
        assert_eq!(qk, vec![6, 9, 2]);
        assert_eq!(cfg.switch_len(), 44);
        assert!(cfg.layers.iter().all(|l| l.value_dim == 16 && l.ffn_dim == 256));
    }
}
