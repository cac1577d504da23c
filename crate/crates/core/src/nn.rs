//! Small building blocks shared by the encoder, predictor and decoder.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::{Error, Result};

/// Creates parameters in a fresh store, or binds to parameters already
/// present (e.g. after loading a checkpoint), checking their shapes.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Builder<'a> {
    pub fn init(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng: Some(rng) }
    }

    pub fn bind(store: &'a mut ParamStore) -> Self {
        Self { store, rng: None }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => Ok(self.store.create(name, shape, init, rng)?),
            None => {
                let id = self.store.id(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
                let got = self.store.value(id).shape();
                if got != shape {
                    return Err(Error::ParamShape {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        got: got.to_vec(),
                    });
                }
                Ok(id)
            }
        }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let w = self.param(&format!("{name}.w"), &[fan_in, fan_out], Init::Uniform)?;
        let b = if bias {
            Some(self.param(&format!("{name}.b"), &[1, fan_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.param(&format!("{name}.gain"), &[1, dim], Init::Ones)?,
            bias: self.param(&format!("{name}.bias"), &[1, dim], Init::Zeros)?,
        })
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), dim, hidden, true)?,
            down: self.linear(&format!("{name}.down"), hidden, dim, true)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                Ok(tape.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Position-wise `dim -> hidden -> dim` network with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, h)
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("table size matches")
}

/// `sqrt(dim) * E[ids] + positions`.
pub fn embed_with_positions(tape: &mut Tape, table: ParamId, ids: &[usize], dim: usize) -> Result<Var> {
    let table = tape.param(table);
    let e = tape.embedding(table, ids)?;
    let e = tape.scale(e, (dim as f64).sqrt());
    let pos = tape.constant(&sinusoidal_positions(ids.len(), dim));
    Ok(tape.add(e, pos)?)
}

/// Row-major causal mask: entry `(i, j)` is true (blocked) when `j > i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n > k / n).collect()
}
