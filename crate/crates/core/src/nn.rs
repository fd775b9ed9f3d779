//! Building blocks shared by the resampler, the decoder and the
//! completion module.

use numkit::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Named access to the tensors a component owns.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(trainable);
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self::scaled(d_in, d_out, 1.0, rng)
    }

    pub fn scaled<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data().iter().chain(self.bias.data()).all(|&v| v == 0.0)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        let n = tape.layer_norm(x)?;
        let n = tape.mul_row(n, g)?;
        Ok(tape.add_row(n, b)?)
    }
}

impl Module for Norm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("gain".into(), &mut self.gain), ("bias".into(), &mut self.bias)]
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, out_gain: f64, rng: &mut R) -> Self {
        Self {
            up: Linear::new(d, hidden, rng),
            down: Linear::scaled(hidden, d, out_gain, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }
}

impl Module for FeedForward {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("up", self.up.params());
        v.extend(prefixed("down", self.down.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("up", self.up.params_mut());
        v.extend(prefixed_mut("down", self.down.params_mut()));
        v
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// Returns the concatenated head outputs and each head's probability
/// matrix `[rows(q), rows(k)]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let p = if causal { tape.causal_softmax(s)? } else { tape.softmax(s)? };
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Copies the tape's gradients into the grad slots of every trainable
/// tensor in `params`. Tensors the tape never touched get a zero gradient.
pub fn pull_grads(tape: &Tape, grads: &numkit::Gradients, params: &mut [&mut Tensor]) -> Result<()> {
    for t in params.iter_mut() {
        if !t.requires_grad() {
            continue;
        }
        let g = tape
            .param_var(t)
            .and_then(|v| grads.get(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)?;
    }
    Ok(())
}
