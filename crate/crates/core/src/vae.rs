//! Convolutional VAE with three width presets, its loss, training loop and
//! reconstruction metrics.

use crate::error::{Error, Result};
use crate::nn::{ConvTrunk, Deconv, Linear};
use crate::sim::Frame;
use crate::tensor::{reparameterize, Adam, AdamConfig, Bound, NamedTensor, ParamStore, Real, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Spatial reduction of the four stride-2 encoder layers.
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub config_id: u8,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub input_width: usize,
    pub input_height: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl VaeConfig {
    pub const PRESET_CHANNELS: [usize; 3] = [4, 8, 24];

    /// Preset `id ∈ {1, 2, 3}` at the given input resolution.
    pub fn preset(id: u8, width: usize, height: usize) -> Result<Self> {
        let base_channels = match id {
            1..=3 => Self::PRESET_CHANNELS[id as usize - 1],
            _ => return Err(Error::Config(format!("unknown VAE config id {id}, expected 1, 2 or 3"))),
        };
        let cfg = Self {
            config_id: id,
            base_channels,
            latent_dim: 64,
            beta: 1.0,
            input_width: width,
            input_height: height,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if self.latent_dim < 2 {
            return bad(format!("latent_dim must be at least 2, got {}", self.latent_dim));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.input_width == 0 || self.input_height == 0 {
            return bad("input dimensions must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    /// Input size after centred zero padding up to a multiple of 16.
    pub fn padded(&self) -> (usize, usize) {
        (padded_len(self.input_height), padded_len(self.input_width))
    }

    /// `(channels, height, width)` of the encoder's final feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (ph, pw) = self.padded();
        (8 * self.base_channels, ph / DOWNSAMPLE, pw / DOWNSAMPLE)
    }

    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.feature_shape();
        c * h * w
    }

    fn pad_offsets(&self) -> (usize, usize) {
        let (ph, pw) = self.padded();
        ((ph - self.input_height) / 2, (pw - self.input_width) / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub param_count: usize,
    pub recon_loss: f64,
    pub kl_loss: f64,
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon_loss: f64,
    pub kl_loss: f64,
    pub val_mse: f64,
    pub val_psnr: f64,
}

/// Side length rounded up to the encoder's downsampling factor.
pub fn padded_len(v: usize) -> usize {
    v.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

/// Frames of `width × height` to a `[B, 3, H', W']` buffer in `[0, 1]`,
/// centred in a zero border that rounds each side up to a multiple of 16.
pub fn padded_input<T: Real>(frames: &[&Frame], width: usize, height: usize) -> Result<Vec<T>> {
    let (ph, pw) = (padded_len(height), padded_len(width));
    let (top, left) = ((ph - height) / 2, (pw - width) / 2);
    let mut out = vec![T::zero(); frames.len() * 3 * ph * pw];
    let scale = T::lit(1.0 / 255.0);
    for (b, f) in frames.iter().enumerate() {
        if f.width() != width || f.height() != height {
            return Err(Error::shape("frame input", &[f.height(), f.width()], &[height, width]));
        }
        let data = f.data();
        let img = &mut out[b * 3 * ph * pw..(b + 1) * 3 * ph * pw];
        for y in 0..height {
            for x in 0..width {
                let src = (y * width + x) * 3;
                for ch in 0..3 {
                    img[ch * ph * pw + (y + top) * pw + x + left] = T::lit(data[src + ch] as f64) * scale;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Vae {
    config: VaeConfig,
    params: ParamStore,
    trunk: ConvTrunk,
    mu_head: Linear,
    logvar_head: Linear,
    dec_fc: Linear,
    deconvs: Vec<Deconv>,
}

/// Symbolic loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.base_channels;
        let trunk = ConvTrunk::new(&mut params, "encoder", c, &mut rng)?;
        let f = config.feature_len();
        let mu_head = Linear::new(&mut params, "encoder.mu", f, config.latent_dim, &mut rng)?;
        let logvar_head = Linear::new(&mut params, "encoder.logvar", f, config.latent_dim, &mut rng)?;
        let dec_fc = Linear::new(&mut params, "decoder.fc", config.latent_dim, f, &mut rng)?;
        let widths = [8 * c, 4 * c, 2 * c, c, 3];
        let deconvs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Deconv::new(&mut params, &format!("decoder.deconv{i}"), w[0], w[1], &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            trunk,
            mu_head,
            logvar_head,
            dec_fc,
            deconvs,
        })
    }

    /// Rebuild from saved tensors; fails without touching anything on a name or shape mismatch.
    pub fn from_tensors(config: VaeConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut vae = Self::new(config, 0)?;
        vae.params.load_named(tensors)?;
        Ok(vae)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params.to_named()
    }

    /// Frames to a normalized, centre-padded `[B, 3, H', W']` buffer.
    pub fn frames_to_input<T: Real>(&self, frames: &[&Frame]) -> Result<Vec<T>> {
        padded_input(frames, self.config.input_width, self.config.input_height)
    }

    /// Unpadded `[B, 3, H, W]` targets in `[0, 1]`.
    pub fn frames_to_target<T: Real>(&self, frames: &[&Frame]) -> Result<Vec<T>> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut out = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            if f.width() != w || f.height() != h {
                return Err(Error::shape("vae target", &[f.height(), f.width()], &[h, w]));
            }
            let d = f.data();
            for ch in 0..3 {
                out.extend((0..h * w).map(|i| T::lit(d[i * 3 + ch] as f64 / 255.0)));
            }
        }
        Ok(out)
    }

    /// `x: [B, 3, H', W']` → `(mu, logvar)`, each `[B, latent]`.
    pub fn encode_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let batch = tape.shape(x)[0];
        let h = self.trunk.forward(tape, p, x)?;
        let flat = tape.reshape(h, &[batch, self.config.feature_len()])?;
        let mu = self.mu_head.forward(tape, p, flat)?;
        let logvar = self.logvar_head.forward(tape, p, flat)?;
        Ok((mu, logvar))
    }

    /// `z: [B, latent]` → reconstruction `[B, 3, H, W]` in `[0, 1]`.
    pub fn decode_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let batch = tape.shape(z)[0];
        let (c, fh, fw) = self.config.feature_shape();
        let h = self.dec_fc.forward(tape, p, z)?;
        let h = tape.relu(h);
        let mut h = tape.reshape(h, &[batch, c, fh, fw])?;
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(tape, p, h)?;
            h = if i == last { tape.sigmoid(h) } else { tape.relu(h) };
        }
        let (top, left) = self.config.pad_offsets();
        tape.crop2d(h, top, left, self.config.input_height, self.config.input_width)
    }

    /// Deterministic codes (`z = mu`) for a batch of frames.
    pub fn encode_batch(&self, frames: &[&Frame]) -> Result<Vec<LatentCode>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let (ph, pw) = self.config.padded();
        let mut tape: Tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(self.frames_to_input(frames)?, &[frames.len(), 3, ph, pw])?;
        let (mu, lv) = self.encode_graph(&mut tape, &p, x)?;
        let d = self.config.latent_dim;
        Ok(tape
            .value(mu)
            .chunks_exact(d)
            .zip(tape.value(lv).chunks_exact(d))
            .map(|(m, l)| LatentCode {
                mu: m.to_vec(),
                logvar: l.to_vec(),
                z: m.to_vec(),
            })
            .collect())
    }

    /// `z = mu` for RL and evaluation.
    pub fn encode(&self, frame: &Frame) -> Result<LatentCode> {
        Ok(self.encode_batch(&[frame])?.remove(0))
    }

    /// `z = mu + exp(½·logvar)·ε` with `ε ~ N(0, I)` drawn from `rng`.
    pub fn encode_sampled<R: Rng + ?Sized>(&self, frame: &Frame, rng: &mut R) -> Result<LatentCode> {
        let mut code = self.encode(frame)?;
        code.z = code
            .mu
            .iter()
            .zip(&code.logvar)
            .map(|(&m, &l)| {
                let e: f32 = rng.sample(StandardNormal);
                m + (0.5 * l).exp() * e
            })
            .collect();
        Ok(code)
    }

    pub fn decode_batch(&self, zs: &[&[f32]]) -> Result<Vec<Frame>> {
        let d = self.config.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::shape("decode", &[z.len()], &[d]));
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape: Tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(zs.concat(), &[zs.len(), d])?;
        let y = self.decode_graph(&mut tape, &p, z)?;
        Ok(self.to_frames(tape.value(y), zs.len()))
    }

    pub fn decode(&self, z: &[f32]) -> Result<Frame> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }

    /// Encode then decode through `mu`.
    pub fn reconstruct(&self, frames: &[&Frame]) -> Result<Vec<Frame>> {
        let codes = self.encode_batch(frames)?;
        let zs: Vec<&[f32]> = codes.iter().map(|c| c.z.as_slice()).collect();
        self.decode_batch(&zs)
    }

    fn to_frames(&self, planar: &[f32], batch: usize) -> Vec<Frame> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        (0..batch)
            .map(|b| {
                let img = &planar[b * 3 * h * w..(b + 1) * 3 * h * w];
                let mut data = vec![0u8; h * w * 3];
                for i in 0..h * w {
                    for ch in 0..3 {
                        data[i * 3 + ch] = (img[ch * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
                Frame::new(w, h, data).expect("length matches")
            })
            .collect()
    }

    /// Forward pass plus loss for one minibatch; `eps` has `B·latent` entries.
    pub fn loss_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, frames: &[&Frame], eps: Vec<T>) -> Result<LossVars> {
        let (ph, pw) = self.config.padded();
        let b = frames.len();
        let x = tape.constant(self.frames_to_input(frames)?, &[b, 3, ph, pw])?;
        let target = tape.constant(
            self.frames_to_target(frames)?,
            &[b, 3, self.config.input_height, self.config.input_width],
        )?;
        let (mu, lv) = self.encode_graph(tape, p, x)?;
        let z = reparameterize(tape, mu, lv, eps)?;
        let recon = self.decode_graph(tape, p, z)?;
        vae_loss(tape, target, recon, mu, lv, T::lit(self.config.beta))
    }
}

/// VAE objective on a tape.
///
/// `recon` is the squared error summed over each image (pixels in `[0, 1]`)
/// and averaged over the batch; `kl` is the batch mean of
/// `−½·Σ(1 + logvar − mu² − exp(logvar))`; `total = recon + beta·kl`.
pub fn vae_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var, mu: Var, logvar: Var, beta: T) -> Result<LossVars> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::shape("vae_loss", tape.shape(x), tape.shape(x_hat)));
    }
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu).len() != 2 {
        return Err(Error::shape("vae_loss latent", tape.shape(mu), tape.shape(logvar)));
    }
    let all_finite = [x, x_hat, mu, logvar]
        .iter()
        .all(|&v| tape.value(v).iter().all(|t| t.is_finite()));
    if !all_finite {
        return Err(Error::Numeric("non-finite input to vae_loss".into()));
    }
    let batch = tape.shape(mu)[0].max(1);
    let inv_b = T::lit(1.0 / batch as f64);

    let d = tape.sub(x_hat, x)?;
    let sq = tape.square(d);
    let se = tape.sum(sq);
    let recon = tape.scale(se, inv_b);

    let mu2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let t = tape.add_scalar(logvar, T::one());
    let t = tape.sub(t, mu2)?;
    let t = tape.sub(t, ev)?;
    let s = tape.sum(t);
    let kl = tape.scale(s, T::lit(-0.5) * inv_b);

    let bkl = tape.scale(kl, beta);
    let total = tape.add(recon, bkl)?;
    Ok(LossVars { total, recon, kl })
}

/// `−½·Σ(1 + logvar − mu² − exp(logvar))` for a single code.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| 1.0 + l - m * m - l.exp())
        .sum::<f64>()
}

/// Mean over pixels and channels of the squared difference, in 0–255 units.
pub fn mse_255(x: &Frame, x_hat: &Frame) -> Result<f64> {
    if x.width() != x_hat.width() || x.height() != x_hat.height() {
        return Err(Error::shape(
            "mse_255",
            &[x.height(), x.width()],
            &[x_hat.height(), x_hat.width()],
        ));
    }
    let n = x.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: u64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / n as f64)
}

/// `10·log10(max_value² / mse)`; `+∞` for a perfect reconstruction.
pub fn psnr(mse: f64, max_value: f64) -> Result<f64> {
    if mse.is_nan() || mse < 0.0 {
        return Err(Error::Domain(format!("mse must be non-negative, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    /// Parameters of the best-validation epoch.
    pub vae: Vae,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub train_len: usize,
    pub val_len: usize,
}

impl TrainedVae {
    pub fn best(&self) -> &EpochMetrics {
        &self.history[self.best_epoch]
    }
}

/// 90/10 split by seeded shuffle; validation keeps at least one frame
/// whenever there are two or more.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let train = idx.split_off(val);
    (train, idx)
}

/// Mean per-pixel 0–255 MSE of `vae` reconstructions over `frames`.
pub fn evaluate_mse(vae: &Vae, frames: &[&Frame]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in frames.chunks(64) {
        for (x, y) in chunk.iter().zip(vae.reconstruct(chunk)?) {
            total += mse_255(x, &y)?;
        }
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Minibatch Adam on [`vae_loss`]; keeps the parameters of the epoch with
/// the lowest validation MSE.
///
/// `on_epoch` is called after every epoch with that epoch's metrics.
pub fn train_vae<F>(frames: &[Frame], config: VaeConfig, seed: u64, mut on_epoch: F) -> Result<TrainedVae>
where
    F: FnMut(&EpochMetrics),
{
    if frames.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let mut vae = Vae::new(config, seed)?;
    let (train_idx, val_idx) = split_indices(frames.len(), seed);
    // a single frame is both the training and validation set
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };
    let val: Vec<&Frame> = val_idx.iter().map(|&i| &frames[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ae);
    let mut adam = Adam::new(vae.params(), AdamConfig::with_lr(config.lr));
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum, mut seen) = (0.0, 0.0, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Frame> = batch.iter().map(|&i| &frames[i]).collect();
            let eps: Vec<f32> = (0..batch.len() * config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut tape: Tape = Tape::new();
            let p = vae.params.bind(&mut tape, true);
            let loss = vae.loss_graph(&mut tape, &p, &batch, eps)?;
            let total = tape.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite VAE loss at epoch {epoch}, batch {bi}")));
            }
            tape.backward(loss.total)?;
            vae.params.absorb_grads(&tape, &p);
            adam.step(&mut vae.params)?;
            recon_sum += tape.scalar(loss.recon) as f64 * batch.len() as f64;
            kl_sum += tape.scalar(loss.kl) as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let val_mse = evaluate_mse(&vae, &val)?;
        let m = EpochMetrics {
            epoch,
            recon_loss: recon_sum / seen as f64,
            kl_loss: kl_sum / seen as f64,
            val_mse,
            val_psnr: psnr(val_mse, 255.0)?,
        };
        on_epoch(&m);
        history.push(m);
        if best.as_ref().is_none_or(|b| val_mse < b.0) {
            best = Some((val_mse, epoch, vae.params.clone()));
        }
    }

    let best_epoch = match best {
        Some((_, e, params)) => {
            vae.params = params;
            e
        }
        None => 0,
    };
    Ok(TrainedVae {
        vae,
        history,
        best_epoch,
        train_len: train_idx.len(),
        val_len: val_idx.len(),
    })
}
