//! Forward passes: plain incremental cells for decoding and a taped graph
//! for training. Both apply the exact same operations in the same order, so
//! lattices from either path are bit-identical; a test pins this.

use crate::augment::{dropout_mask, DropoutPolicy};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, PosteriorLattice};
use crate::numerics::{log_softmax_vec, matmul, Graph, Tensor, Var};
use crate::rng;

struct DropoutMasks {
    enc_proj: Option<Tensor>,
    enc_out: Option<Tensor>,
    pred_out: Option<Tensor>,
    joint_hidden: Option<Tensor>,
}

fn build_masks(
    dims: &ModelDims,
    t_len: usize,
    u_len: Option<usize>,
    dropout: Option<(&DropoutPolicy, u64)>,
) -> DropoutMasks {
    let mut masks = DropoutMasks {
        enc_proj: None,
        enc_out: None,
        pred_out: None,
        joint_hidden: None,
    };
    let Some((policy, seed)) = dropout else {
        return masks;
    };
    if policy.rate == 0.0 {
        return masks;
    }
    let sub = |k: u64| rng::combine(&[seed, k]);
    if policy.scope.encoder {
        masks.enc_proj = Some(dropout_mask(&[t_len, dims.hidden], policy, sub(1)));
        masks.enc_out = Some(dropout_mask(&[t_len, dims.hidden], policy, sub(2)));
    }
    if let Some(u_len) = u_len {
        if policy.scope.prediction {
            masks.pred_out = Some(dropout_mask(&[u_len, dims.pred_hidden], policy, sub(3)));
        }
        if policy.scope.joint {
            masks.joint_hidden = Some(dropout_mask(
                &[t_len * u_len, dims.joint_hidden],
                policy,
                sub(4),
            ));
        }
    }
    masks
}

fn lhuc_scale(amplitudes: &Tensor) -> Tensor {
    amplitudes.map(|a| 1.0 / (1.0 + (-a).exp())).scale(2.0)
}

fn add_row_plain(m: &Tensor, row: &Tensor) -> Tensor {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    out
}

fn mul_row_plain(m: &Tensor, row: &Tensor) -> Tensor {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o *= b;
        }
    }
    out
}

fn sigmoid_t(x: &Tensor) -> Tensor {
    x.map(|t| 1.0 / (1.0 + (-t).exp()))
}

/// One update-gate recurrent step: h' = (1-z) * h + z * tanh(...).
fn cell_step(
    x: &Tensor,
    h: &Tensor,
    w_z: &Tensor,
    u_z: &Tensor,
    b_z: &Tensor,
    w_h: &Tensor,
    u_h: &Tensor,
    b_h: &Tensor,
) -> Result<Tensor> {
    let z = sigmoid_t(&add_row_plain(
        &matmul(x, w_z)?.add(&matmul(h, u_z)?)?,
        b_z,
    ));
    let c = add_row_plain(&matmul(x, w_h)?.add(&matmul(h, u_h)?)?, b_h).map(f64::tanh);
    let ones = Tensor::full(z.shape(), 1.0);
    ones.sub(&z)?.mul(h)?.add(&z.mul(&c)?)
}

/// Encoder over all frames; returns the T x H outputs the joint consumes
/// (LHUC-scaled, optionally dropout-masked). Decode-time dropout only honors
/// the encoder scope.
pub fn encoder_forward(
    params: &ModelParams,
    features: &Tensor,
    dropout: Option<(&DropoutPolicy, u64)>,
) -> Result<Tensor> {
    let dims = &params.dims;
    let t_len = features.rows();
    if t_len < 1 {
        return Err(Error::Contract("encoder_forward: T must be >= 1".into()));
    }
    if features.cols() != dims.feature_dim {
        return Err(Error::Shape(format!(
            "encoder_forward: feature dim {} vs model {}",
            features.cols(),
            dims.feature_dim
        )));
    }
    let masks = build_masks(dims, t_len, None, dropout);

    let mut proj = mul_row_plain(
        &add_row_plain(&matmul(features, &params.enc_w_in)?, &params.enc_b_in),
        &lhuc_scale(&params.enc_lhuc_in),
    );
    if let Some(m) = &masks.enc_proj {
        proj = proj.mul(m)?;
    }

    let mut h = Tensor::zeros(&[1, dims.hidden]);
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = Tensor::from_vec(&[1, dims.hidden], proj.row(t).to_vec())?;
        h = cell_step(
            &x,
            &h,
            &params.enc_w_z,
            &params.enc_u_z,
            &params.enc_b_z,
            &params.enc_w_h,
            &params.enc_u_h,
            &params.enc_b_h,
        )?;
        rows.push(h.data().to_vec());
    }
    let stacked = Tensor::from_rows(&rows)?;
    let mut out = mul_row_plain(&stacked, &lhuc_scale(&params.enc_lhuc_rec));
    if let Some(m) = &masks.enc_out {
        out = out.mul(m)?;
    }
    Ok(out)
}

/// Prediction-network state; `output` is the row the joint consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    h: Tensor,
}

impl PredState {
    pub fn output(&self) -> &[f64] {
        self.h.data()
    }
}

/// State after consuming the blank start symbol.
pub fn prediction_start(params: &ModelParams) -> Result<PredState> {
    let h0 = Tensor::zeros(&[1, params.dims.pred_hidden]);
    step_token(params, &h0, params.dims.blank_id())
}

/// Advance the prediction network by one emitted token.
pub fn prediction_step(params: &ModelParams, state: &PredState, token: TokenId) -> Result<PredState> {
    step_token(params, &state.h, token)
}

fn step_token(params: &ModelParams, h: &Tensor, token: TokenId) -> Result<PredState> {
    if token >= params.dims.n_classes() {
        return Err(Error::Contract(format!(
            "prediction token {token} out of range"
        )));
    }
    let emb = Tensor::from_vec(
        &[1, params.dims.embed],
        params.pred_embed.row(token).to_vec(),
    )?;
    let h = cell_step(
        &emb,
        h,
        &params.pred_w_z,
        &params.pred_u_z,
        &params.pred_b_z,
        &params.pred_w_h,
        &params.pred_u_h,
        &params.pred_b_h,
    )?;
    Ok(PredState { h })
}

/// Joint-network logits over |V|+1 classes for one (frame, prefix) pair.
pub fn joint_logits(params: &ModelParams, enc_row: &[f64], pred_row: &[f64]) -> Result<Vec<f64>> {
    let dims = &params.dims;
    if enc_row.len() != dims.hidden || pred_row.len() != dims.pred_hidden {
        return Err(Error::Shape("joint_logits: row width mismatch".into()));
    }
    let mut data = Vec::with_capacity(enc_row.len() + pred_row.len());
    data.extend_from_slice(enc_row);
    data.extend_from_slice(pred_row);
    let j_in = Tensor::from_vec(&[1, dims.hidden + dims.pred_hidden], data)?;
    let hid = add_row_plain(&matmul(&j_in, &params.joint_w1)?, &params.joint_b1).map(f64::tanh);
    let logits = add_row_plain(&matmul(&hid, &params.joint_w2)?, &params.joint_b2);
    Ok(logits.data().to_vec())
}

/// Log-softmax of [`joint_logits`].
pub fn joint_log_probs(
    params: &ModelParams,
    enc_row: &[f64],
    pred_row: &[f64],
) -> Result<Vec<f64>> {
    Ok(log_softmax_vec(&joint_logits(params, enc_row, pred_row)?))
}

/// A taped forward pass: the lattice variable plus the graph that produced
/// it, ready for a loss node and backward.
pub struct LatticeGraph {
    pub graph: Graph,
    pub lattice: Var,
    pub t_len: usize,
    pub u_len: usize,
    pub n_classes: usize,
}

impl LatticeGraph {
    pub fn to_lattice(&self) -> PosteriorLattice {
        PosteriorLattice::from_flat(
            self.t_len,
            self.u_len,
            self.n_classes,
            self.graph.value(self.lattice).clone(),
        )
    }
}

fn graph_recurrent(
    g: &mut Graph,
    input_rows: Var,
    n_rows: usize,
    hidden: usize,
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_h: Var,
    u_h: Var,
    b_h: Var,
) -> Result<Var> {
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let ones = g.constant(Tensor::full(&[1, hidden], 1.0));
    let mut outputs = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let x = g.gather_rows(input_rows, &[r])?;
        let xz = g.matmul(x, w_z)?;
        let hz = g.matmul(h, u_z)?;
        let sz = g.add(xz, hz)?;
        let szb = g.add_row(sz, b_z)?;
        let z = g.sigmoid(szb);
        let xh = g.matmul(x, w_h)?;
        let hh = g.matmul(h, u_h)?;
        let sh = g.add(xh, hh)?;
        let shb = g.add_row(sh, b_h)?;
        let c = g.tanh(shb);
        let omz = g.sub(ones, z)?;
        let keep = g.mul(omz, h)?;
        let take = g.mul(z, c)?;
        h = g.add(keep, take)?;
        outputs.push(h);
    }
    g.concat_rows(&outputs)
}

/// Build the full training-forward graph for one utterance and target.
///
/// Lattice rows are ordered t-major: node (t, u) sits at row t*(U+1)+u.
pub fn forward_lattice_graph(
    params: &ModelParams,
    features: &Tensor,
    target: &[TokenId],
    dropout: Option<(&DropoutPolicy, u64)>,
) -> Result<LatticeGraph> {
    let dims = params.dims;
    let t_len = features.rows();
    let u_len = target.len() + 1;
    if t_len < 1 {
        return Err(Error::Contract("forward_lattice: T must be >= 1".into()));
    }
    if features.cols() != dims.feature_dim {
        return Err(Error::Shape(format!(
            "forward_lattice: feature dim {} vs model {}",
            features.cols(),
            dims.feature_dim
        )));
    }
    if target.iter().any(|&t| t >= dims.blank_id()) {
        return Err(Error::Contract(
            "forward_lattice: target contains blank or out-of-range token".into(),
        ));
    }
    let masks = build_masks(&dims, t_len, Some(u_len), dropout);

    let mut g = Graph::new();
    let feats = g.constant(features.clone());
    let w_in = g.param("enc.w_in", params.enc_w_in.clone());
    let b_in = g.param("enc.b_in", params.enc_b_in.clone());
    let lhuc_in = g.param("enc.lhuc_in", params.enc_lhuc_in.clone());
    let w_z = g.param("enc.w_z", params.enc_w_z.clone());
    let u_z = g.param("enc.u_z", params.enc_u_z.clone());
    let b_z = g.param("enc.b_z", params.enc_b_z.clone());
    let w_h = g.param("enc.w_h", params.enc_w_h.clone());
    let u_h = g.param("enc.u_h", params.enc_u_h.clone());
    let b_h = g.param("enc.b_h", params.enc_b_h.clone());
    let lhuc_rec = g.param("enc.lhuc_rec", params.enc_lhuc_rec.clone());

    // Encoder.
    let proj0 = g.matmul(feats, w_in)?;
    let proj1 = g.add_row(proj0, b_in)?;
    let s_in_sig = g.sigmoid(lhuc_in);
    let s_in = g.scale(s_in_sig, 2.0);
    let mut proj = g.mul_row(proj1, s_in)?;
    if let Some(m) = &masks.enc_proj {
        let mv = g.constant(m.clone());
        proj = g.mul(proj, mv)?;
    }
    let rec = graph_recurrent(&mut g, proj, t_len, dims.hidden, w_z, u_z, b_z, w_h, u_h, b_h)?;
    let s_rec_sig = g.sigmoid(lhuc_rec);
    let s_rec = g.scale(s_rec_sig, 2.0);
    let mut enc_out = g.mul_row(rec, s_rec)?;
    if let Some(m) = &masks.enc_out {
        let mv = g.constant(m.clone());
        enc_out = g.mul(enc_out, mv)?;
    }

    // Prediction over the blank-prefixed target.
    let embed = g.param("pred.embed", params.pred_embed.clone());
    let p_w_z = g.param("pred.w_z", params.pred_w_z.clone());
    let p_u_z = g.param("pred.u_z", params.pred_u_z.clone());
    let p_b_z = g.param("pred.b_z", params.pred_b_z.clone());
    let p_w_h = g.param("pred.w_h", params.pred_w_h.clone());
    let p_u_h = g.param("pred.u_h", params.pred_u_h.clone());
    let p_b_h = g.param("pred.b_h", params.pred_b_h.clone());
    let mut inputs = Vec::with_capacity(u_len);
    inputs.push(dims.blank_id());
    inputs.extend_from_slice(target);
    let emb_rows = g.gather_rows(embed, &inputs)?;
    let mut pred_out = graph_recurrent(
        &mut g,
        emb_rows,
        u_len,
        dims.pred_hidden,
        p_w_z,
        p_u_z,
        p_b_z,
        p_w_h,
        p_u_h,
        p_b_h,
    )?;
    if let Some(m) = &masks.pred_out {
        let mv = g.constant(m.clone());
        pred_out = g.mul(pred_out, mv)?;
    }

    // Joint over every (t, u) node, vectorized via row gathers.
    let mut enc_idx = Vec::with_capacity(t_len * u_len);
    let mut pred_idx = Vec::with_capacity(t_len * u_len);
    for t in 0..t_len {
        for u in 0..u_len {
            enc_idx.push(t);
            pred_idx.push(u);
        }
    }
    let w1 = g.param("joint.w1", params.joint_w1.clone());
    let b1 = g.param("joint.b1", params.joint_b1.clone());
    let w2 = g.param("joint.w2", params.joint_w2.clone());
    let b2 = g.param("joint.b2", params.joint_b2.clone());
    let enc_exp = g.gather_rows(enc_out, &enc_idx)?;
    let pred_exp = g.gather_rows(pred_out, &pred_idx)?;
    let j_in = g.concat_cols(enc_exp, pred_exp)?;
    let h0 = g.matmul(j_in, w1)?;
    let h1 = g.add_row(h0, b1)?;
    let mut hid = g.tanh(h1);
    if let Some(m) = &masks.joint_hidden {
        let mv = g.constant(m.clone());
        hid = g.mul(hid, mv)?;
    }
    let l0 = g.matmul(hid, w2)?;
    let logits = g.add_row(l0, b2)?;
    let lattice = g.log_softmax(logits);

    Ok(LatticeGraph {
        graph: g,
        lattice,
        t_len,
        u_len,
        n_classes: dims.n_classes(),
    })
}

/// Posterior lattice over all (frame, prefix) nodes.
pub fn forward_lattice(
    params: &ModelParams,
    features: &Tensor,
    target: &[TokenId],
    dropout: Option<(&DropoutPolicy, u64)>,
) -> Result<PosteriorLattice> {
    Ok(forward_lattice_graph(params, features, target, dropout)?.to_lattice())
}
