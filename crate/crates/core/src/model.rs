//! DiT denoiser: patch embedding, timestep/label conditioning, adaLN-Zero
//! transformer blocks with pluggable attention and MLP/MoE, final unpatchify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionLayer;
use crate::config::ModelConfig;
use crate::error::{config_err, input_err, shape_err, Result};
use crate::moe::{xavier, MoeLayer, Mlp, RoutingStats};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamKind, ParamStore, ParamValue};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(Mlp),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    /// `[6C, C]` modulation producing shift/scale/gate for both halves.
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub attn: AttentionLayer,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DiTModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    pub t_fc1_w: ParamId,
    pub t_fc1_b: ParamId,
    pub t_fc2_w: ParamId,
    pub t_fc2_b: ParamId,
    /// `[num_classes + 1, C]`; the last row is the null label.
    pub label_table: ParamId,
    pub blocks: Vec<Block>,
    pub final_ada_w: ParamId,
    pub final_ada_b: ParamId,
    pub final_w: ParamId,
    pub final_b: ParamId,
}

/// Network output plus one routing record per MoE block.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 2·Cin, H, W]`
    pub out: Var,
    pub routing: Vec<RoutingStats>,
}

/// `[cos(t·f₀)…cos(t·f_{D/2−1}), sin(t·f₀)…]` with `fᵢ = 10000^(−i/(D/2))`.
pub fn timestep_sinusoid(t: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("timestep embedding width {dim} must be even and positive"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> =
        (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        out.extend(freqs.iter().map(|f| (ti * f).cos()));
        out.extend(freqs.iter().map(|f| (ti * f).sin()));
    }
    Tensor::new([t.len(), dim], out)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    let omega = |i: usize| 1.0 / 10000f64.powf(i as f64 / half as f64);
    out.extend((0..half).map(|i| (pos * omega(i)).sin()));
    out.extend((0..half).map(|i| (pos * omega(i)).cos()));
}

/// Fixed 2-D sin-cos table `[grid², C]`: column features then row features.
pub fn sincos_pos_embed(c: usize, grid: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(config_err!("hidden size {c} must be divisible by 4 for 2-D positions"));
    }
    let mut out = Vec::with_capacity(grid * grid * c);
    for i in 0..grid {
        for j in 0..grid {
            sincos_1d(c / 2, j as f64, &mut out);
            sincos_1d(c / 2, i as f64, &mut out);
        }
    }
    Tensor::new([grid * grid, c], out)
}

/// Label id used for one training example: the null id with probability `dropout`.
pub fn resolve_label<R: Rng + ?Sized>(
    y: Option<usize>,
    num_classes: usize,
    training: bool,
    dropout: f64,
    rng: &mut R,
) -> Result<usize> {
    let id = match y {
        None => return Ok(num_classes),
        Some(y) if y >= num_classes => return Err(input_err!("label {y} out of {num_classes} classes")),
        Some(y) => y,
    };
    if training && dropout > 0.0 && rng.random::<f64>() < dropout {
        return Ok(num_classes);
    }
    Ok(id)
}

impl DiTModel {
    /// Model with adaLN-Zero initialization: every block starts as the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let cfg = &config;
        let (c, pd) = (cfg.hidden, cfg.patch_dim());
        let mut s = ParamStore::new();
        let patch_w = s.add("x_embedder.proj.weight", ParamKind::Conv, xavier(c, pd, rng));
        let patch_b = s.add("x_embedder.proj.bias", ParamKind::Bias, Tensor::zeros([c]));
        let pos_embed = s.add("pos_embed", ParamKind::Buffer, sincos_pos_embed(c, cfg.grid())?);
        let f = cfg.freq_embed_dim;
        let t_fc1_w = s.add("t_embedder.mlp.0.weight", ParamKind::Linear, Tensor::randn([c, f], rng).scale(0.02));
        let t_fc1_b = s.add("t_embedder.mlp.0.bias", ParamKind::Bias, Tensor::zeros([c]));
        let t_fc2_w = s.add("t_embedder.mlp.2.weight", ParamKind::Linear, Tensor::randn([c, c], rng).scale(0.02));
        let t_fc2_b = s.add("t_embedder.mlp.2.bias", ParamKind::Bias, Tensor::zeros([c]));
        let label_table = s.add(
            "y_embedder.embedding_table.weight",
            ParamKind::Embedding,
            Tensor::randn([cfg.num_classes + 1, c], rng).scale(0.02),
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("blocks.{i}");
            let ada_w = s.add(format!("{pre}.adaLN_modulation.1.weight"), ParamKind::Linear, Tensor::zeros([6 * c, c]));
            let ada_b = s.add(format!("{pre}.adaLN_modulation.1.bias"), ParamKind::Bias, Tensor::zeros([6 * c]));
            let attn = AttentionLayer::new(&mut s, &format!("{pre}.attn"), cfg, rng)?;
            let ff = match &cfg.moe {
                Some(moe) if moe.is_moe_block(i) => {
                    FeedForward::Moe(MoeLayer::new(&mut s, &format!("{pre}.moe"), cfg, moe, rng)?)
                }
                _ => FeedForward::Dense(Mlp::new(&mut s, &format!("{pre}.mlp"), c, cfg.mlp_hidden(), rng)),
            };
            blocks.push(Block { ada_w, ada_b, attn, ff });
        }
        let out = cfg.patch * cfg.patch * cfg.out_channels();
        let final_ada_w = s.add("final_layer.adaLN_modulation.1.weight", ParamKind::Linear, Tensor::zeros([2 * c, c]));
        let final_ada_b = s.add("final_layer.adaLN_modulation.1.bias", ParamKind::Bias, Tensor::zeros([2 * c]));
        let final_w = s.add("final_layer.linear.weight", ParamKind::Linear, Tensor::zeros([out, c]));
        let final_b = s.add("final_layer.linear.bias", ParamKind::Bias, Tensor::zeros([out]));
        Ok(Self {
            config,
            params: s,
            patch_w,
            patch_b,
            pos_embed,
            t_fc1_w,
            t_fc1_b,
            t_fc2_w,
            t_fc2_b,
            label_table,
            blocks,
            final_ada_w,
            final_ada_b,
            final_w,
            final_b,
        })
    }

    /// Model whose zero-initialized weights are also random, so every block
    /// and the final layer do real work.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ids: Vec<ParamId> = m.params.ids().collect();
        for id in ids {
            if !m.params.param(id).trainable {
                continue;
            }
            let t = m.params.tensor_mut(id)?;
            if t.data().iter().all(|&v| v == 0.0) {
                let mut r = Tensor::randn(t.shape().to_vec(), &mut rng).scale(0.02);
                r.round_to_f32();
                *t = r;
            }
        }
        Ok(m)
    }

    /// Copy every tensor of `loaded` into a freshly built model of `config`,
    /// matching by name.
    pub fn from_params(config: ModelConfig, loaded: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if loaded.len() != m.params.len() {
            return Err(shape_err!("expected {} tensors, found {}", m.params.len(), loaded.len()));
        }
        for (_, p) in loaded.iter() {
            let id = m.params.id(&p.name).ok_or_else(|| input_err!("unknown tensor {}", p.name))?;
            m.params.set_value(id, p.value.clone())?;
        }
        Ok(m)
    }

    pub fn null_label(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Timestep conditioning `[B, C]` on the tape.
    fn timestep_var(&self, tape: &mut Tape<'_>, p: &Bound, t: &[usize]) -> Result<Var> {
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let raw = tape.constant(timestep_sinusoid(&tf, self.config.freq_embed_dim)?);
        let h = tape.linear(raw, p[self.t_fc1_w], Some(p[self.t_fc1_b]))?;
        let h = tape.silu(h);
        tape.linear(h, p[self.t_fc2_w], Some(p[self.t_fc2_b]))
    }

    /// Sinusoid followed by the learned timestep MLP.
    pub fn timestep_embed(&self, t: usize) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false)?;
        let v = self.timestep_var(&mut tape, &p, &[t])?;
        tape.value(v).reshape([self.config.hidden])
    }

    /// Label-table row for `y` (`None` is the null label), with training-time
    /// label dropout.
    pub fn label_embed<R: Rng + ?Sized>(&self, y: Option<usize>, training: bool, rng: &mut R) -> Result<Tensor> {
        let id = resolve_label(y, self.config.num_classes, training, self.config.cfg_dropout, rng)?;
        let table = self.params.value(self.label_table).to_tensor();
        table.slice_axis(0, id, 1)?.into_reshape([self.config.hidden])
    }

    /// Conditioning vector `c = timestep_embed(t) + label_embed(y)`, `[B, C]`.
    pub fn condition(&self, tape: &mut Tape<'_>, p: &Bound, t: &[usize], y: &[usize]) -> Result<Var> {
        let temb = self.timestep_var(tape, p, t)?;
        let yemb = tape.embedding(p[self.label_table], y)?;
        tape.add(temb, yemb)
    }

    /// `x + g₁·Attn(mod(LN x)) + g₂·FF(mod(LN ·))` for block `i`.
    pub fn block_forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        i: usize,
        x: Var,
        c: Var,
    ) -> Result<(Var, Option<RoutingStats>)> {
        let block = &self.blocks[i];
        let hidden = self.config.hidden;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != hidden || tape.shape(c) != [xs[0], hidden] {
            return Err(shape_err!("block expects x [B, N, {hidden}] and cond [B, {hidden}], got {:?} and {:?}", xs, tape.shape(c)));
        }
        let sc = tape.silu(c);
        let m = tape.linear(sc, p[block.ada_w], Some(p[block.ada_b]))?;
        let mut chunk = [m; 6];
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = tape.slice_axis(m, 1, k * hidden, hidden)?;
        }
        let [shift1, scale1, gate1, shift2, scale2, gate2] = chunk;

        let h = modulate(tape, x, shift1, scale1)?;
        let a = block.attn.forward(tape, p, h)?;
        let a = tape.mul_bcast(a, gate1)?;
        let x = tape.add(x, a)?;

        let h = modulate(tape, x, shift2, scale2)?;
        let (f, stats) = match &block.ff {
            FeedForward::Dense(mlp) => (mlp.forward(tape, p, h)?, None),
            FeedForward::Moe(moe) => {
                let flat = tape.reshape(h, &[xs[0] * xs[1], hidden])?;
                let (y, stats) = moe.forward(tape, p, flat)?;
                (tape.reshape(y, &xs)?, Some(stats))
            }
        };
        let f = tape.mul_bcast(f, gate2)?;
        Ok((tape.add(x, f)?, stats))
    }

    /// `[B, Cin, H, W] → [B, N, Cin·p²]`
    pub fn patchify(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(shape_err!(
                "expected [B, {}, {}, {}], got {:?}",
                cfg.in_channels,
                cfg.input_size,
                cfg.input_size,
                s
            ));
        }
        let (b, g, pp) = (s[0], cfg.grid(), cfg.patch);
        let r = tape.reshape(x, &[b, cfg.in_channels, g, pp, g, pp])?;
        let r = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
        tape.reshape(r, &[b, g * g, cfg.patch_dim()])
    }

    /// `[B, N, p²·Cout] → [B, Cout, H, W]`
    pub fn unpatchify(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let b = tape.shape(x)[0];
        let (g, pp, co) = (cfg.grid(), cfg.patch, cfg.out_channels());
        let r = tape.reshape(x, &[b, g, g, pp, pp, co])?;
        let r = tape.permute(r, &[0, 5, 1, 3, 2, 4])?;
        tape.reshape(r, &[b, co, cfg.input_size, cfg.input_size])
    }

    /// Full network on the tape. `y` holds resolved label ids (the null id
    /// is `num_classes`).
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, t: &[usize], y: &[usize]) -> Result<ModelOutput> {
        let b = tape.shape(x).first().copied().unwrap_or(0);
        if t.len() != b || y.len() != b {
            return Err(shape_err!("batch {b} with {} timesteps and {} labels", t.len(), y.len()));
        }
        if let Some(&bad) = y.iter().find(|&&v| v > self.config.num_classes) {
            return Err(input_err!("label {bad} out of {} classes", self.config.num_classes));
        }
        let tokens = self.patchify(tape, x)?;
        let h = tape.linear(tokens, p[self.patch_w], Some(p[self.patch_b]))?;
        let mut h = tape.add_leading(h, p[self.pos_embed])?;
        let c = self.condition(tape, p, t, y)?;
        let mut routing = Vec::new();
        for i in 0..self.blocks.len() {
            let (next, stats) = self.block_forward(tape, p, i, h, c)?;
            h = next;
            routing.extend(stats);
        }
        let hidden = self.config.hidden;
        let sc = tape.silu(c);
        let m = tape.linear(sc, p[self.final_ada_w], Some(p[self.final_ada_b]))?;
        let shift = tape.slice_axis(m, 1, 0, hidden)?;
        let scale = tape.slice_axis(m, 1, hidden, hidden)?;
        let h = modulate(tape, h, shift, scale)?;
        let h = tape.linear(h, p[self.final_w], Some(p[self.final_b]))?;
        let out = self.unpatchify(tape, h)?;
        Ok(ModelOutput { out, routing })
    }

    /// Inference forward: `[B, 2·Cin, H, W]`.
    pub fn predict(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false)?;
        let xv = tape.leaf(x.clone(), false);
        let o = self.forward(&mut tape, &p, xv, t, y)?;
        Ok(tape.value(o.out).clone())
    }

    /// Multiply-accumulates recorded by one forward at batch 1.
    pub fn instrumented_macs(&self) -> Result<u64> {
        let cfg = &self.config;
        let x = Tensor::zeros([1, cfg.in_channels, cfg.input_size, cfg.input_size]);
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false)?;
        let xv = tape.leaf(x, false);
        self.forward(&mut tape, &p, xv, &[0], &[0])?;
        Ok(tape.macs())
    }

    /// Scalar count walked from the live tensors (pos table included).
    pub fn walked_param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn is_quantized(&self) -> bool {
        self.params.iter().any(|(_, p)| matches!(p.value, ParamValue::Int8(_)))
    }
}

/// `LN(x)·(1 + scale) + shift`
fn modulate(tape: &mut Tape<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, LN_EPS)?;
    let hs = tape.mul_bcast(h, scale)?;
    let h = tape.add(h, hs)?;
    tape.add_bcast(h, shift)
}
