//! Parallel attention-MLP transformer block with AdaLN modulation.
//!
//! ```text
//! x̃ = RMSNorm(x) ⊙ (1 + s_t) + b_t
//! [Q, K, V, H1, H2] = x̃ W_unifiedᵀ               (d, d, d, 2d, 2d columns)
//! A = Attention(RoPE(Q), RoPE(K), λ1 V_first + λ2 V)
//! M = (GELU(H2) ⊙ H1) W_mlp2ᵀ
//! y = x + [A, M] W_projᵀ ⊙ (g_t + offset)
//! ```
//!
//! `s_t, b_t, g_t` come from a two-layer modulation MLP on the timestep
//! embedding. `W_proj` and the modulation output layer start at zero, so a
//! fresh block is the identity map; the constant `offset` keeps gradients
//! flowing into it anyway. The backward pass is derived by hand.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::sphere_init;
use crate::numcore::{matmul_nt, matmul_tn, Matrix, RngStream};
use crate::rope3d::{apply_rope, apply_rope_inverse, Position3, RopeLayer};

pub const RMS_EPS: f64 = 1e-6;

/// Constant added to the learned residual gate `g_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum GateOffset {
    /// `1/√L` for a stack of `L` blocks.
    #[default]
    InvSqrtDepth,
    Constant(f64),
    /// No offset; a zero-initialized block then receives no gradient.
    Disabled,
}

impl GateOffset {
    pub fn value(&self, layer_count: usize) -> f64 {
        match *self {
            GateOffset::InvSqrtDepth => gate_offset(layer_count),
            GateOffset::Constant(c) => c,
            GateOffset::Disabled => 0.0,
        }
    }
}

pub fn gate_offset(layer_count: usize) -> f64 {
    assert!(layer_count >= 1, "layer count must be at least 1");
    1.0 / (layer_count as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub n_heads: usize,
    pub layer_count: usize,
    pub gate: GateOffset,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.n_heads == 0
            || self.d % self.n_heads != 0
            || self.head_dim() % 2 != 0
        {
            return Err(Error::Config(format!(
                "width {} must split into {} heads of even size",
                self.d, self.n_heads
            )));
        }
        if self.layer_count == 0 {
            return Err(Error::Config("layer_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weights of one block. The same struct carries gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `7d x d`: rows are Q, K, V (d each), H1, H2 (2d each).
    pub unified: Matrix,
    /// `d x 2d`
    pub mlp2: Matrix,
    /// `d x 2d`, applied to `[A, M]`.
    pub proj: Matrix,
    /// `d x d` hidden layer of the modulation MLP.
    pub mod_w0: Matrix,
    pub mod_b0: Matrix,
    /// `3d x d`, produces `s_t, b_t, g_t`.
    pub mod_w2: Matrix,
    pub mod_b2: Matrix,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Parameter name suffixes, in the order of [`BlockParams::groups`].
pub const PARAM_NAMES: [&str; 9] = [
    "unified.weight",
    "mlp2.weight",
    "final_proj.weight",
    "modulation.0.weight",
    "modulation.0.bias",
    "modulation.2.weight",
    "modulation.2.bias",
    "lambda1",
    "lambda2",
];

impl BlockParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            unified: Matrix::zeros(7 * d, d),
            mlp2: Matrix::zeros(d, 2 * d),
            proj: Matrix::zeros(d, 2 * d),
            mod_w0: Matrix::zeros(d, d),
            mod_b0: Matrix::zeros(1, d),
            mod_w2: Matrix::zeros(3 * d, d),
            mod_b2: Matrix::zeros(1, 3 * d),
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    /// Fresh block: unit-row linear layers, zero projection and zero
    /// modulation output, value-residual mix at 0.5 / 0.5.
    pub fn init(d: usize, rng: &RngStream) -> Result<Self> {
        Ok(Self {
            unified: sphere_init(7 * d, d, &rng.derive(0))?.into_inner(),
            mlp2: sphere_init(d, 2 * d, &rng.derive(1))?.into_inner(),
            proj: Matrix::zeros(d, 2 * d),
            mod_w0: sphere_init(d, d, &rng.derive(2))?.into_inner(),
            mod_b0: Matrix::zeros(1, d),
            mod_w2: Matrix::zeros(3 * d, d),
            mod_b2: Matrix::zeros(1, 3 * d),
            lambda1: 0.5,
            lambda2: 0.5,
        })
    }

    pub fn width(&self) -> usize {
        self.unified.cols()
    }

    /// Matrix-valued groups, paired with the first seven [`PARAM_NAMES`].
    pub fn matrices(&self) -> [&Matrix; 7] {
        [
            &self.unified,
            &self.mlp2,
            &self.proj,
            &self.mod_w0,
            &self.mod_b0,
            &self.mod_w2,
            &self.mod_b2,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.unified,
            &mut self.mlp2,
            &mut self.proj,
            &mut self.mod_w0,
            &mut self.mod_b0,
            &mut self.mod_w2,
            &mut self.mod_b2,
        ]
    }

    /// All groups as matrices (lambdas as 1x1), in [`PARAM_NAMES`] order.
    pub fn groups(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.matrices().into_iter().cloned().collect();
        out.push(Matrix::filled(1, 1, self.lambda1));
        out.push(Matrix::filled(1, 1, self.lambda2));
        out
    }

    /// Consuming form of [`BlockParams::groups`].
    pub fn into_groups(self) -> Vec<Matrix> {
        vec![
            self.unified,
            self.mlp2,
            self.proj,
            self.mod_w0,
            self.mod_b0,
            self.mod_w2,
            self.mod_b2,
            Matrix::filled(1, 1, self.lambda1),
            Matrix::filled(1, 1, self.lambda2),
        ]
    }

    pub fn from_groups(groups: Vec<Matrix>) -> Result<Self> {
        if groups.len() != PARAM_NAMES.len() {
            return Err(Error::shape(
                "BlockParams::from_groups",
                PARAM_NAMES.len(),
                groups.len(),
            ));
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().expect("length checked");
        let p = Self {
            unified: next(),
            mlp2: next(),
            proj: next(),
            mod_w0: next(),
            mod_b0: next(),
            mod_w2: next(),
            mod_b2: next(),
            lambda1: next()[(0, 0)],
            lambda2: next()[(0, 0)],
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.width();
        self.unified.expect_shape(7 * d, d, "unified.weight")?;
        self.mlp2.expect_shape(d, 2 * d, "mlp2.weight")?;
        self.proj.expect_shape(d, 2 * d, "final_proj.weight")?;
        self.mod_w0.expect_shape(d, d, "modulation.0.weight")?;
        self.mod_b0.expect_shape(1, d, "modulation.0.bias")?;
        self.mod_w2.expect_shape(3 * d, d, "modulation.2.weight")?;
        self.mod_b2.expect_shape(1, 3 * d, "modulation.2.bias")?;
        Ok(())
    }

    pub fn add_assign(&mut self, other: &BlockParams) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_assign(b);
        }
        self.lambda1 += other.lambda1;
        self.lambda2 += other.lambda2;
    }
}

/// Forward intermediates consumed by [`block_backward`].
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub positions: Vec<Position3>,
    pub x: Matrix,
    pub t_emb: Vec<f64>,
    /// Per-token `sqrt(mean(x²) + eps)`.
    pub rho: Vec<f64>,
    pub normed: Matrix,
    pub mod_pre: Vec<f64>,
    pub mod_hidden: Vec<f64>,
    pub shift_scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub gate: Vec<f64>,
    pub gate_total: Vec<f64>,
    pub modulated: Matrix,
    pub q_rot: Matrix,
    pub k_rot: Matrix,
    /// This block's own value projection, fed forward as `V_first` by layer 0.
    pub v: Matrix,
    pub v_first: Option<Matrix>,
    pub v_mix: Matrix,
    pub probs: Vec<Matrix>,
    pub h1: Matrix,
    pub h2: Matrix,
    pub gated: Matrix,
    pub concat: Matrix,
    pub out: Matrix,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of a timestep in `[0, 1]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[i + half] = arg.cos();
    }
    out
}

/// `l1 · V_prev + l2 · V_cur`
pub fn value_residual(v_prev: &Matrix, v_cur: &Matrix, l1: f64, l2: f64) -> Result<Matrix> {
    if !v_prev.same_shape(v_cur) {
        return Err(Error::shape(
            "value_residual",
            format!("{:?}", v_prev.shape()),
            format!("{:?}", v_cur.shape()),
        ));
    }
    Ok(v_prev.zip_map(v_cur, |a, b| l1 * a + l2 * b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub total: usize,
}

/// Patch counts per axis for a latent of `frames x height x width`.
pub fn patch_grid(
    frames: usize,
    height: usize,
    width: usize,
    p_t: usize,
    p_s: usize,
) -> Result<PatchGrid> {
    if p_t == 0 || p_s == 0 {
        return Err(Error::contract("patch sizes must be positive"));
    }
    if frames % p_t != 0 || height % p_s != 0 || width % p_s != 0 {
        return Err(Error::shape(
            "patch_grid",
            format!("dimensions divisible by ({p_t}, {p_s}, {p_s})"),
            format!("({frames}, {height}, {width})"),
        ));
    }
    let (n_t, n_h, n_w) = (frames / p_t, height / p_s, width / p_s);
    Ok(PatchGrid {
        n_t,
        n_h,
        n_w,
        total: n_t * n_h * n_w,
    })
}

fn row_mat_vec(w: &Matrix, x: &[f64], bias: &Matrix) -> Vec<f64> {
    w.row_iter()
        .zip(bias.as_slice())
        .map(|(r, b)| crate::numcore::dot(r, x) + b)
        .collect()
}

/// Forward pass for one sequence of tokens.
///
/// `v_first` is the value projection of the first layer of the stack; pass
/// `None` for the first layer itself, which then mixes its own values.
pub fn block_forward(
    x: &Matrix,
    t_emb: &[f64],
    v_first: Option<&Matrix>,
    params: &BlockParams,
    cfg: &BlockConfig,
    rope: &RopeLayer,
    positions: &[Position3],
) -> Result<(Matrix, BlockCache)> {
    let d = cfg.d;
    let n = x.rows();
    params.check_shapes()?;
    if params.width() != d {
        return Err(Error::shape("block width", d, params.width()));
    }
    x.expect_shape(n, d, "block input")?;
    if t_emb.len() != d {
        return Err(Error::shape("timestep embedding", d, t_emb.len()));
    }
    if positions.len() != n {
        return Err(Error::shape("positions", n, positions.len()));
    }
    if rope.heads.len() != cfg.n_heads
        || rope.heads.iter().any(|h| 2 * h.n_bands() != cfg.head_dim())
    {
        return Err(Error::shape(
            "rope layer",
            format!("{} heads of {} bands", cfg.n_heads, cfg.head_dim() / 2),
            format!("{} heads", rope.heads.len()),
        ));
    }
    if let Some(v) = v_first {
        v.expect_shape(n, d, "first-layer values")?;
    }

    // modulation
    let mod_pre = row_mat_vec(&params.mod_w0, t_emb, &params.mod_b0);
    let mod_hidden: Vec<f64> = mod_pre.iter().map(|&z| silu(z)).collect();
    let modv = row_mat_vec(&params.mod_w2, &mod_hidden, &params.mod_b2);
    let shift_scale = modv[..d].to_vec();
    let shift = modv[d..2 * d].to_vec();
    let gate = modv[2 * d..].to_vec();
    let offset = cfg.gate.value(cfg.layer_count);
    let gate_total: Vec<f64> = gate.iter().map(|g| g + offset).collect();

    // RMSNorm + AdaLN
    let mut rho = Vec::with_capacity(n);
    let mut normed = Matrix::zeros(n, d);
    let mut modulated = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let r = (crate::numcore::dot(row, row) / d as f64 + RMS_EPS).sqrt();
        rho.push(r);
        for j in 0..d {
            let z = row[j] / r;
            normed[(i, j)] = z;
            modulated[(i, j)] = z * (1.0 + shift_scale[j]) + shift[j];
        }
    }

    let u = matmul_nt(&modulated, &params.unified)?;
    let q = u.columns(0, d);
    let k = u.columns(d, 2 * d);
    let v = u.columns(2 * d, 3 * d);
    let h1 = u.columns(3 * d, 5 * d);
    let h2 = u.columns(5 * d, 7 * d);

    let v_mix = match v_first {
        Some(vf) => value_residual(vf, &v, params.lambda1, params.lambda2)?,
        None => value_residual(&v, &v, params.lambda1, params.lambda2)?,
    };

    // attention per head over rotated queries and keys
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut q_rot = Matrix::zeros(n, d);
    let mut k_rot = Matrix::zeros(n, d);
    for (h, spec) in rope.heads.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let qr = apply_rope(&q.row(i)[cols.clone()], spec, &positions[i])?;
            let kr = apply_rope(&k.row(i)[cols.clone()], spec, &positions[i])?;
            q_rot.row_mut(i)[cols.clone()].copy_from_slice(&qr);
            k_rot.row_mut(i)[cols.clone()].copy_from_slice(&kr);
        }
    }
    let mut attn = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = q_rot.columns(lo, hi);
        let kh = k_rot.columns(lo, hi);
        let vh = v_mix.columns(lo, hi);
        let mut p = matmul_nt(&qh, &kh)?.scale(scale);
        for i in 0..n {
            let row = p.row_mut(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            row.iter_mut().for_each(|s| *s /= sum);
        }
        let ah = crate::numcore::matmul(&p, &vh)?;
        attn.set_columns(lo, &ah);
        probs.push(p);
    }

    // gated MLP
    let gated = h2.zip_map(&h1, |a, b| gelu(a) * b);
    let mlp = matmul_nt(&gated, &params.mlp2)?;

    let concat = Matrix::hstack(&[&attn, &mlp])?;
    let out = matmul_nt(&concat, &params.proj)?;
    let mut y = x.clone();
    for i in 0..n {
        for j in 0..d {
            y[(i, j)] += out[(i, j)] * gate_total[j];
        }
    }

    let cache = BlockCache {
        positions: positions.to_vec(),
        x: x.clone(),
        t_emb: t_emb.to_vec(),
        rho,
        normed,
        mod_pre,
        mod_hidden,
        shift_scale,
        shift,
        gate,
        gate_total,
        modulated,
        q_rot,
        k_rot,
        v,
        v_first: v_first.cloned(),
        v_mix,
        probs,
        h1,
        h2,
        gated,
        concat,
        out,
    };
    Ok((y, cache))
}

#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub params: BlockParams,
    pub dx: Matrix,
    /// Gradient with respect to the `v_first` input, when one was given.
    pub dv_first: Option<Matrix>,
}

/// Analytic gradients of a block.
///
/// `dv_extra` is the gradient arriving at this block's own value projection
/// from later layers (non-`None` only for the first layer of a stack).
pub fn block_backward(
    params: &BlockParams,
    cfg: &BlockConfig,
    rope: &RopeLayer,
    cache: &BlockCache,
    dy: &Matrix,
    dv_extra: Option<&Matrix>,
) -> Result<BlockGrads> {
    let d = cfg.d;
    let n = cache.x.rows();
    dy.expect_shape(n, d, "block output gradient")?;
    if let Some(e) = dv_extra {
        e.expect_shape(n, d, "value gradient from later layers")?;
    }
    // y = x + out ⊙ gate_total
    let mut d_out = Matrix::zeros(n, d);
    let mut d_gate = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            d_out[(i, j)] = dy[(i, j)] * cache.gate_total[j];
            d_gate[j] += dy[(i, j)] * cache.out[(i, j)];
        }
    }

    // out = concat projᵀ
    let g_proj = matmul_tn(&d_out, &cache.concat)?;
    let d_concat = crate::numcore::matmul(&d_out, &params.proj)?;
    let d_attn = d_concat.columns(0, d);
    let d_mlp = d_concat.columns(d, 2 * d);

    // mlp = gated mlp2ᵀ, gated = GELU(H2) ⊙ H1
    let g_mlp2 = matmul_tn(&d_mlp, &cache.gated)?;
    let d_gated = crate::numcore::matmul(&d_mlp, &params.mlp2)?;
    let d_h1 = d_gated.zip_map(&cache.h2, |dg, h2| dg * gelu(h2));
    let d_h2 = Matrix::from_fn(n, 2 * d, |i, j| {
        d_gated[(i, j)] * cache.h1[(i, j)] * gelu_grad(cache.h2[(i, j)])
    });

    // attention
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_qrot = Matrix::zeros(n, d);
    let mut d_krot = Matrix::zeros(n, d);
    let mut d_vmix = Matrix::zeros(n, d);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let p = &cache.probs[h];
        let da = d_attn.columns(lo, hi);
        let vh = cache.v_mix.columns(lo, hi);
        let dp = matmul_nt(&da, &vh)?;
        d_vmix.set_columns(lo, &matmul_tn(p, &da)?);
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let inner = crate::numcore::dot(dp.row(i), p.row(i));
            for j in 0..n {
                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - inner) * scale;
            }
        }
        let qh = cache.q_rot.columns(lo, hi);
        let kh = cache.k_rot.columns(lo, hi);
        d_qrot.set_columns(lo, &crate::numcore::matmul(&ds, &kh)?);
        d_krot.set_columns(lo, &matmul_tn(&ds, &qh)?);
    }
    let mut d_q = Matrix::zeros(n, d);
    let mut d_k = Matrix::zeros(n, d);
    for (h, spec) in rope.heads.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let p = &cache.positions[i];
            let dq = apply_rope_inverse(&d_qrot.row(i)[cols.clone()], spec, p)?;
            let dk = apply_rope_inverse(&d_krot.row(i)[cols.clone()], spec, p)?;
            d_q.row_mut(i)[cols.clone()].copy_from_slice(&dq);
            d_k.row_mut(i)[cols.clone()].copy_from_slice(&dk);
        }
    }

    // value residual
    let (g_lambda1, g_lambda2, mut d_v, dv_first) = match &cache.v_first {
        Some(vf) => (
            d_vmix.dot(vf),
            d_vmix.dot(&cache.v),
            d_vmix.scale(params.lambda2),
            Some(d_vmix.scale(params.lambda1)),
        ),
        None => {
            let s = d_vmix.dot(&cache.v);
            (s, s, d_vmix.scale(params.lambda1 + params.lambda2), None)
        }
    };
    if let Some(e) = dv_extra {
        d_v.add_assign(e);
    }

    let d_u = Matrix::hstack(&[&d_q, &d_k, &d_v, &d_h1, &d_h2])?;
    let g_unified = matmul_tn(&d_u, &cache.modulated)?;
    let d_mod = crate::numcore::matmul(&d_u, &params.unified)?;

    // AdaLN and RMSNorm
    let mut d_scale = vec![0.0; d];
    let mut d_shift = vec![0.0; d];
    let mut dx = dy.clone();
    for i in 0..n {
        let rho = cache.rho[i];
        let mut d_norm = vec![0.0; d];
        for j in 0..d {
            let dm = d_mod[(i, j)];
            d_scale[j] += dm * cache.normed[(i, j)];
            d_shift[j] += dm;
            d_norm[j] = dm * (1.0 + cache.shift_scale[j]);
        }
        let xr = cache.x.row(i);
        let proj = crate::numcore::dot(&d_norm, xr) / (d as f64 * rho * rho * rho);
        for j in 0..d {
            dx[(i, j)] += d_norm[j] / rho - xr[j] * proj;
        }
    }

    // modulation MLP
    let mut d_modv = d_scale;
    d_modv.extend_from_slice(&d_shift);
    d_modv.extend_from_slice(&d_gate);
    let g_mod_b2 = Matrix::row_vector(&d_modv);
    let g_mod_w2 = Matrix::from_fn(3 * d, d, |r, c| d_modv[r] * cache.mod_hidden[c]);
    let mut d_pre = vec![0.0; d];
    for (r, &dm) in d_modv.iter().enumerate() {
        if dm == 0.0 {
            continue;
        }
        for (c, dp) in d_pre.iter_mut().enumerate() {
            *dp += dm * params.mod_w2[(r, c)];
        }
    }
    for (dp, &z) in d_pre.iter_mut().zip(&cache.mod_pre) {
        *dp *= silu_grad(z);
    }
    let g_mod_b0 = Matrix::row_vector(&d_pre);
    let g_mod_w0 = Matrix::from_fn(d, d, |r, c| d_pre[r] * cache.t_emb[c]);

    Ok(BlockGrads {
        params: BlockParams {
            unified: g_unified,
            mlp2: g_mlp2,
            proj: g_proj,
            mod_w0: g_mod_w0,
            mod_b0: g_mod_b0,
            mod_w2: g_mod_w2,
            mod_b2: g_mod_b2,
            lambda1: g_lambda1,
            lambda2: g_lambda2,
        },
        dx,
        dv_first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope3d::{grid_positions, FreqConfig};

    fn cfg(d: usize, heads: usize, gate: GateOffset) -> BlockConfig {
        BlockConfig {
            d,
            n_heads: heads,
            layer_count: 4,
            gate,
        }
    }

    fn random_matrix(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn gate_offsets() {
        assert_eq!(gate_offset(1), 1.0);
        assert_eq!(gate_offset(16), 0.25);
        // 1/√12 = 0.28867513459481288225
        assert!((gate_offset(12) - 0.288_675_134_594_812_9).abs() < 1e-15);
        assert_eq!(GateOffset::Constant(0.125).value(7), 0.125);
        assert_eq!(GateOffset::Disabled.value(7), 0.0);
    }

    #[test]
    fn value_residual_cases() {
        let mut rng = RngStream::new(3);
        let a = random_matrix(3, 4, &mut rng);
        let b = random_matrix(3, 4, &mut rng);
        assert_eq!(value_residual(&a, &b, 0.0, 1.0).unwrap(), b);
        let same = value_residual(&b, &b, 0.5, 0.5).unwrap();
        assert!(same.sub(&b).max_abs() == 0.0);
        let mix = value_residual(&a, &b, 0.3, -1.7).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((mix[(i, j)] - (0.3 * a[(i, j)] - 1.7 * b[(i, j)])).abs() <= 1e-15);
            }
        }
        assert!(value_residual(&a, &Matrix::zeros(2, 4), 0.5, 0.5).is_err());
    }

    #[test]
    fn patch_grid_cases() {
        let g = patch_grid(21, 22, 40, 1, 2).unwrap();
        assert_eq!((g.n_t, g.n_h, g.n_w, g.total), (21, 11, 20, 4620));
        assert_eq!(patch_grid(1, 2, 2, 1, 2).unwrap().total, 1);
        let g = patch_grid(8, 16, 16, 2, 4).unwrap();
        assert_eq!(
            (g.n_t, g.n_h, g.n_w, g.total),
            (8 / 2, 16 / 4, 16 / 4, 4 * 4 * 4)
        );
        assert!(matches!(
            patch_grid(21, 23, 40, 1, 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // x Φ(x) at x = 1: 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn fresh_block_is_identity() {
        let c = cfg(16, 2, GateOffset::InvSqrtDepth);
        let params = BlockParams::init(16, &RngStream::new(1)).unwrap();
        let rope = RopeLayer::new(2, 8, 9, &FreqConfig::default()).unwrap();
        let pos = grid_positions(2, 2, 2);
        let mut rng = RngStream::new(2);
        let x = random_matrix(8, 16, &mut rng);
        let (y, _) = block_forward(
            &x,
            &timestep_embedding(0.3, 16),
            None,
            &params,
            &c,
            &rope,
            &pos,
        )
        .unwrap();
        assert_eq!(y, x);
    }

    /// Single token, d = 2, one head with identity RoPE, hand-set weights.
    /// With one token softmax is 1, so A = V_mix = (λ1 + λ2) V.
    #[test]
    fn hand_evaluated_d2_block() {
        let c = BlockConfig {
            d: 2,
            n_heads: 1,
            layer_count: 4,
            gate: GateOffset::InvSqrtDepth,
        };
        let mut p = BlockParams::zeros(2);
        // unified rows: Q(2) K(2) V(2) H1(4) H2(4)
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],  // V0 = a + b
            vec![1.0, -1.0], // V1 = a - b
            vec![1.0, 0.0],  // H1 = (a, b, a, b)
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0], // H2 = (a, b, 0, 0)
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        ];
        p.unified = Matrix::from_rows(&rows).unwrap();
        p.mlp2 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        // out_0 = A_0 + M_0, out_1 = A_1 + M_1
        p.proj = Matrix::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        p.mod_b2 = Matrix::row_vector(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        p.lambda1 = 0.5;
        p.lambda2 = 0.5;
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let rope = RopeLayer::identity(1, 2);
        let (y, _) = block_forward(
            &x,
            &[0.0, 0.0],
            None,
            &p,
            &c,
            &rope,
            &[Position3::default()],
        )
        .unwrap();

        // expected output by hand:
        // rho = sqrt((9 + 16)/2 + 1e-6); a = 3/rho, b = 4/rho
        let rho = (12.5f64 + 1e-6).sqrt();
        let (a, b) = (3.0 / rho, 4.0 / rho);
        let v = [a + b, a - b];
        let h1 = [a, b];
        let h2 = [a, b];
        let m = [gelu(h2[0]) * h1[0], gelu(h2[1]) * h1[1]];
        let gate = 0.5; // g_t = 0 plus 1/√4
        let expected = [3.0 + (v[0] + m[0]) * gate, 4.0 + (v[1] + m[1]) * gate];
        assert!((y[(0, 0)] - expected[0]).abs() < 1e-14);
        assert!((y[(0, 1)] - expected[1]).abs() < 1e-14);
        // same expression evaluated with mpmath at 30 digits
        assert!((y[(0, 0)] - 4.278_643_523_919_398_8).abs() < 1e-14);
        assert!((y[(0, 1)] - 4.416_050_907_435_560_9).abs() < 1e-14);
    }

    #[test]
    fn token_permutation_equivariance_without_rope() {
        let c = cfg(8, 2, GateOffset::InvSqrtDepth);
        let mut rng = RngStream::new(77);
        let mut p = BlockParams::init(8, &RngStream::new(5)).unwrap();
        p.proj = random_matrix(8, 16, &mut rng);
        p.mod_w2 = random_matrix(24, 8, &mut rng).scale(0.1);
        let rope = RopeLayer::identity(2, 4);
        let x = random_matrix(5, 8, &mut rng);
        let pos = vec![Position3::default(); 5];
        let t = timestep_embedding(0.4, 8);
        let (y, _) = block_forward(&x, &t, None, &p, &c, &rope, &pos).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = Matrix::from_fn(5, 8, |i, j| x[(perm[i], j)]);
        let (yp, _) = block_forward(&xp, &t, None, &p, &c, &rope, &pos).unwrap();
        for i in 0..5 {
            for j in 0..8 {
                assert!((yp[(i, j)] - y[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let c = cfg(8, 2, GateOffset::InvSqrtDepth);
        let p = BlockParams::init(8, &RngStream::new(5)).unwrap();
        let rope = RopeLayer::identity(2, 4);
        let x = Matrix::zeros(3, 6);
        let pos = vec![Position3::default(); 3];
        assert!(block_forward(&x, &[0.0; 8], None, &p, &c, &rope, &pos).is_err());
        let x = Matrix::zeros(3, 8);
        assert!(block_forward(&x, &[0.0; 8], None, &p, &c, &rope, &pos[..2]).is_err());
        let (_, cache) = block_forward(&x, &[0.0; 8], None, &p, &c, &rope, &pos).unwrap();
        assert!(block_backward(&p, &c, &rope, &cache, &Matrix::zeros(2, 8), None).is_err());
    }
}
