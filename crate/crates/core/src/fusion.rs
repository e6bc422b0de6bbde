//! Subspace-and-attention fusion blocks.
//!
//! Two differentiable operators combine amplitude and phase feature maps:
//!
//! * SAFM — builds a shared low-rank basis V from the two spectral inputs,
//!   projects both onto span(V) with P = V (VᵀV + εI)⁻¹Vᵀ, mixes the
//!   projections with a location-wise self-attention map β = softmax(VVᵀ),
//!   and adds the result to the finer-scale feature as a residual.
//! * CAM — gates an upsampled coarse feature against its skip connection
//!   with per-channel sigmoid weights learned from globally pooled
//!   statistics.
//!
//! Plain (value-level) entry points back the algebraic invariants; the
//! `GradTape`-level functions are what the model assembles.

use crate::error::{Error, Result};
use crate::model::{conv_block, ConvBlockState, ConvBlockVars};
use crate::ops::{self, Mode, Padding};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Shared common subspace: each column of `v` is one basis vector over the
/// N = H·W spatial locations.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    /// [N, K]
    pub v: Tensor<f64>,
}

impl SubspaceBasis {
    pub fn new(v: Tensor<f64>) -> Result<Self> {
        if v.shape().len() != 2 {
            return Err(Error::invalid(
                "SubspaceBasis::new",
                format!("expected [N, K], got {:?}", v.shape()),
            ));
        }
        let (n, k) = (v.shape()[0], v.shape()[1]);
        if k == 0 || k > n {
            return Err(Error::invalid(
                "SubspaceBasis::new",
                format!("rank K={k} must satisfy 1 <= K <= N={n}"),
            ));
        }
        v.check_finite("SubspaceBasis::new")?;
        Ok(SubspaceBasis { v })
    }

    pub fn n(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.v.shape()[1]
    }

    /// True when some basis column has zero norm; projection onto such a
    /// basis is rejected by [`orth_project`].
    pub fn is_degenerate(&self) -> bool {
        let (n, k) = (self.n(), self.k());
        (0..k).any(|j| (0..n).all(|i| self.v.at2(i, j) == 0.0))
    }
}

/// Orthogonal projector onto the column span of a basis.
#[derive(Clone, Debug)]
pub struct OrthoProjector {
    /// [N, N], symmetric and idempotent up to the regularization.
    pub p: Tensor<f64>,
}

/// Location-wise self-attention: row j holds the weights with which every
/// location i contributes to output location j.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    /// [N, N], rows sum to one.
    pub beta: Tensor<f64>,
}

/// Per-channel gate weights of the CAM block, partitioned between the coarse
/// input (first `c1` entries) and the skip input (the rest).
#[derive(Clone, Debug)]
pub struct CamWeights {
    pub w: Tensor<f64>,
    pub c1: usize,
}

impl CamWeights {
    pub fn w1(&self) -> &[f64] {
        &self.w.data()[..self.c1]
    }

    pub fn w2(&self) -> &[f64] {
        &self.w.data()[self.c1..]
    }
}

/// P = V (VᵀV + εI)⁻¹ Vᵀ with ε = eps_reg · trace(VᵀV)/K.
pub fn orth_project(basis: &SubspaceBasis, eps_reg: f64) -> Result<OrthoProjector> {
    let (p, _m) = ops::ortho_project_forward(&basis.v, eps_reg)?;
    Ok(OrthoProjector { p })
}

/// β = row-softmax of the Gram matrix VVᵀ: the i-th spatial location is the
/// i-th row of V, so s_ij = v_iᵀ v_j.
pub fn attention_weights(basis: &SubspaceBasis) -> Result<AttentionMap> {
    let s = ops::matmul(&basis.v, &ops::transpose2(&basis.v)?)?;
    Ok(AttentionMap {
        beta: ops::row_softmax_forward(&s)?,
    })
}

// ---------------------------------------------------------------------------
// Tape-level SAFM
// ---------------------------------------------------------------------------

/// Learnable pieces of one SAFM block: per-input Conv-blocks f_C (shared
/// structure, separate weights), the fusion Conv-block f_F producing the K
/// basis channels, and the 1x1 output convolution f_s.
pub struct SafmVars {
    pub f_c_a: ConvBlockVars,
    pub f_c_p: ConvBlockVars,
    pub f_f: ConvBlockVars,
    pub f_s_w: Var,
    pub f_s_b: Var,
}

/// Batch-norm running statistics of the three Conv-blocks.
#[derive(Clone, Debug)]
pub struct SafmState {
    pub f_c_a: ConvBlockState,
    pub f_c_p: ConvBlockState,
    pub f_f: ConvBlockState,
}

/// V = f_F(concat(f_C(xa), f_C(xp))) with each of the K output channels
/// flattened into one basis column: returns a [N, K] node.
pub fn build_basis(
    tape: &mut GradTape<f64>,
    xa: Var,
    xp: Var,
    vars: &SafmVars,
    state: &mut SafmState,
    mode: Mode,
) -> Result<Var> {
    let sa = tape.value(xa).shape().to_vec();
    let sp = tape.value(xp).shape().to_vec();
    if sa != sp {
        return Err(Error::invalid(
            "build_basis",
            format!("amplitude shape {:?} != phase shape {:?}", sa, sp),
        ));
    }
    let fa = conv_block(tape, xa, &vars.f_c_a, &mut state.f_c_a, mode)?;
    let fp = conv_block(tape, xp, &vars.f_c_p, &mut state.f_c_p, mode)?;
    let cat = tape.concat_channels(fa, fp)?;
    let v3 = conv_block(tape, cat, &vars.f_f, &mut state.f_f, mode)?;
    let shape = tape.value(v3).shape().to_vec();
    let (k, n) = (shape[0], shape[1] * shape[2]);
    let vkn = tape.reshape(v3, vec![k, n])?;
    tape.transpose2(vkn)
}

/// β = row_softmax(V Vᵀ) as a tape node.
pub fn attention_from_basis(tape: &mut GradTape<f64>, v: Var) -> Result<Var> {
    let vt = tape.transpose2(v)?;
    let s = tape.matmul(v, vt)?;
    tape.row_softmax(s)
}

/// Project both spectral inputs onto the subspace, mix with attention, map
/// back to the feature width with the 1x1 convolution f_s, and add the
/// finer-scale residual x_f.
pub fn safm_apply(
    tape: &mut GradTape<f64>,
    xa: Var,
    xp: Var,
    beta: Var,
    p: Var,
    x_f: Var,
    f_s_w: Var,
    f_s_b: Var,
) -> Result<Var> {
    let sa = tape.value(xa).shape().to_vec();
    let (cin, h, w) = (sa[0], sa[1], sa[2]);
    let n = h * w;
    // reshape each input to [N, Cin]
    let xa_cn = tape.reshape(xa, vec![cin, n])?;
    let xa_nc = tape.transpose2(xa_cn)?;
    let xp_cn = tape.reshape(xp, vec![cin, n])?;
    let xp_nc = tape.transpose2(xp_cn)?;
    let pa = tape.matmul(p, xa_nc)?;
    let pp = tape.matmul(p, xp_nc)?;
    let s = tape.concat_cols(pa, pp)?;
    let o = tape.matmul(beta, s)?;
    // back to [2*Cin, H, W] for the 1x1 convolution
    let o_cn = tape.transpose2(o)?;
    let o_chw = tape.reshape(o_cn, vec![2 * cin, h, w])?;
    let mapped = tape.conv2d(o_chw, f_s_w, Some(f_s_b), 1, Padding::Same)?;
    tape.add(mapped, x_f)
}

/// Full SAFM block: basis, projector, attention, and the residual mix.
pub fn safm(
    tape: &mut GradTape<f64>,
    xa: Var,
    xp: Var,
    x_f: Var,
    vars: &SafmVars,
    state: &mut SafmState,
    mode: Mode,
    eps_reg: f64,
) -> Result<Var> {
    let v = build_basis(tape, xa, xp, vars, state, mode)?;
    if tape.value(v).max_abs() == 0.0 {
        // Degenerate all-zero basis (e.g. zeroed spectral inputs): the
        // regularized projector collapses to zero, so the attention output
        // vanishes and only the f_s bias map joins the residual.
        let sa = tape.value(xa).shape().to_vec();
        let zeros = tape.constant(Tensor::zeros(&[2 * sa[0], sa[1], sa[2]]));
        let mapped = tape.conv2d(zeros, vars.f_s_w, Some(vars.f_s_b), 1, Padding::Same)?;
        return tape.add(mapped, x_f);
    }
    let p = tape.ortho_project(v, eps_reg)?;
    let beta = attention_from_basis(tape, v)?;
    safm_apply(tape, xa, xp, beta, p, x_f, vars.f_s_w, vars.f_s_b)
}

// ---------------------------------------------------------------------------
// Tape-level CAM
// ---------------------------------------------------------------------------

/// Bottleneck 1x1 convolutions of the channel attention module.
pub struct CamVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Global average pool: [C, H, W] -> [C].
pub fn cam_pool(tape: &mut GradTape<f64>, x: Var) -> Result<Var> {
    tape.mean_channels(x)
}

/// Gate the upsampled coarse feature x_c against the skip feature x_s with
/// per-channel sigmoid weights w = [w1 | w2]: out = w1 ⊙ x_c + w2 ⊙ x_s.
pub fn cam_apply(
    tape: &mut GradTape<f64>,
    x_c: Var,
    x_s: Var,
    vars: &CamVars,
    ratio: usize,
) -> Result<Var> {
    let sc = tape.value(x_c).shape().to_vec();
    let ss = tape.value(x_s).shape().to_vec();
    if sc != ss {
        return Err(Error::invalid(
            "cam_apply",
            format!("coarse shape {:?} != skip shape {:?}", sc, ss),
        ));
    }
    let c1 = sc[0];
    let c = 2 * c1;
    if ratio == 0 || c % ratio != 0 {
        return Err(Error::invalid(
            "cam_apply",
            format!("channel count {c} not divisible by ratio {ratio}"),
        ));
    }
    let cat = tape.concat_channels(x_c, x_s)?;
    let g = tape.mean_channels(cat)?;
    let g3 = tape.reshape(g, vec![c, 1, 1])?;
    let mid = tape.conv2d(g3, vars.w_down, Some(vars.b_down), 1, Padding::Same)?;
    let mid = tape.relu(mid)?;
    let full = tape.conv2d(mid, vars.w_up, Some(vars.b_up), 1, Padding::Same)?;
    let w = tape.sigmoid(full)?;
    let w1_3 = tape.slice_channels(w, 0, c1)?;
    let w2_3 = tape.slice_channels(w, c1, c)?;
    let w1 = tape.reshape(w1_3, vec![c1])?;
    let w2 = tape.reshape(w2_3, vec![c1])?;
    let a = tape.channel_scale(x_c, w1)?;
    let b = tape.channel_scale(x_s, w2)?;
    tape.add(a, b)
}
