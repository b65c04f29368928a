//! Layer building blocks shared by the VAE and the SAC networks.
//!
//! Layers only hold [`ParamId`]s; the weights themselves live in a
//! [`ParamStore`], so the same layer description drives an `f32` store for
//! training and an `f64` copy for gradient verification.

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Var};
use rand::Rng;

/// `U(-1/√fan_in, 1/√fan_in)` samples.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            &[inputs, outputs],
            uniform_init(rng, inputs * outputs, inputs),
        )?;
        let bias = store.add(format!("{name}.bias"), &[outputs], uniform_init(rng, outputs, inputs))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.inputs * self.outputs) as u64
    }
}

/// Fully-connected stack with relu between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

/// 4×4, stride-2, padding-1 convolution; halves each even spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let fan_in = cin * KERNEL * KERNEL;
        let kernel = store.add(
            format!("{name}.weight"),
            &[cout, cin, KERNEL, KERNEL],
            uniform_init(rng, cout * fan_in, fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), &[cout], uniform_init(rng, cout, fan_in))?;
        Ok(Self { kernel, bias, cin, cout })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.kernel), Some(p.var(self.bias)), STRIDE, PAD)
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        KERNEL * KERNEL * cin * cout + cout
    }
}

/// 4×4, stride-2, padding-1 transposed convolution; doubles spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let fan_in = cin * KERNEL * KERNEL;
        let kernel = store.add(
            format!("{name}.weight"),
            &[cin, cout, KERNEL, KERNEL],
            uniform_init(rng, cout * fan_in, fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), &[cout], uniform_init(rng, cout, fan_in))?;
        Ok(Self { kernel, bias, cin, cout })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.deconv2d(x, p.var(self.kernel), Some(p.var(self.bias)), STRIDE, PAD)
    }
}

/// Four stride-2 convolutions with relu, channel widths `[c, 2c, 4c, 8c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrunk {
    pub convs: Vec<Conv>,
}

impl ConvTrunk {
    pub fn widths(base: usize) -> [usize; 4] {
        [base, 2 * base, 4 * base, 8 * base]
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, base: usize, rng: &mut R) -> Result<Self> {
        let mut cin = 3;
        let mut convs = Vec::with_capacity(4);
        for (i, cout) in Self::widths(base).into_iter().enumerate() {
            convs.push(Conv::new(store, &format!("{name}.conv{i}"), cin, cout, rng)?);
            cin = cout;
        }
        Ok(Self { convs })
    }

    /// `[B, 3, H, W] → [B, 8c, H/16, W/16]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            x = c.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(3, |c| c.cout)
    }
}
