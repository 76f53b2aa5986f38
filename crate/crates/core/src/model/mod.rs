//! Miniature neural transducer with LHUC amplitude layers.
//!
//! Encoder: input projection F -> H with an LHUC vector, one update-gate
//! recurrent layer H -> H with a second LHUC vector on its output.
//! Prediction: token embedding (|V|+1 rows, the blank row doubles as the
//! start symbol) into one update-gate recurrent layer E -> P.
//! Joint: dense (H+P) -> J with tanh, then dense J -> |V|+1.
//!
//! LHUC vectors scale activations by 2*sigmoid(a); they start at a = 0 so a
//! fresh model is exactly the LHUC-free one.

mod forward;
mod loss;

pub use forward::{
    encoder_forward, forward_lattice, forward_lattice_graph, joint_log_probs, joint_logits,
    prediction_start, prediction_step, LatticeGraph, PredState,
};
pub use loss::{
    entropy_loss, forward_backward_totals, transducer_loss, transducer_loss_on_graph,
    PosteriorLattice,
};

use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub pred_hidden: usize,
    pub joint_hidden: usize,
    /// Real tokens, excluding blank.
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        ModelDims {
            feature_dim,
            hidden: 32,
            embed: 32,
            pred_hidden: 32,
            joint_hidden: 32,
            vocab_size,
        }
    }

    /// Grad-check sized model.
    pub fn tiny(feature_dim: usize, vocab_size: usize) -> Self {
        ModelDims {
            feature_dim,
            hidden: 4,
            embed: 4,
            pred_hidden: 4,
            joint_hidden: 4,
            vocab_size,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank_id(&self) -> TokenId {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_w_in: Tensor,
    pub enc_b_in: Tensor,
    pub enc_lhuc_in: Tensor,
    pub enc_w_z: Tensor,
    pub enc_u_z: Tensor,
    pub enc_b_z: Tensor,
    pub enc_w_h: Tensor,
    pub enc_u_h: Tensor,
    pub enc_b_h: Tensor,
    pub enc_lhuc_rec: Tensor,
    pub pred_embed: Tensor,
    pub pred_w_z: Tensor,
    pub pred_u_z: Tensor,
    pub pred_b_z: Tensor,
    pub pred_w_h: Tensor,
    pub pred_u_h: Tensor,
    pub pred_b_h: Tensor,
    pub joint_w1: Tensor,
    pub joint_b1: Tensor,
    pub joint_w2: Tensor,
    pub joint_b2: Tensor,
}

pub const PARAM_NAMES: &[&str] = &[
    "enc.w_in",
    "enc.b_in",
    "enc.lhuc_in",
    "enc.w_z",
    "enc.u_z",
    "enc.b_z",
    "enc.w_h",
    "enc.u_h",
    "enc.b_h",
    "enc.lhuc_rec",
    "pred.embed",
    "pred.w_z",
    "pred.u_z",
    "pred.b_z",
    "pred.w_h",
    "pred.u_h",
    "pred.b_h",
    "joint.w1",
    "joint.b1",
    "joint.w2",
    "joint.b2",
];

pub const LHUC_PARAM_NAMES: &[&str] = &["enc.lhuc_in", "enc.lhuc_rec"];

impl ModelParams {
    /// Seeded initialization: weights ~ N(0, 1/sqrt(fan_in)), biases and
    /// LHUC amplitudes zero.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let (f, h, e, p, j, c) = (
            dims.feature_dim,
            dims.hidden,
            dims.embed,
            dims.pred_hidden,
            dims.joint_hidden,
            dims.n_classes(),
        );
        let mut idx = 0u64;
        let mut mat = |rows: usize, cols: usize| {
            let mut rng = rng::stream(seed, Domain::ModelInit, &[idx]);
            idx += 1;
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid sigma");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(&[rows, cols], data).expect("finite init")
        };
        ModelParams {
            dims,
            enc_w_in: mat(f, h),
            enc_b_in: Tensor::zeros(&[h]),
            enc_lhuc_in: Tensor::zeros(&[h]),
            enc_w_z: mat(h, h),
            enc_u_z: mat(h, h),
            enc_b_z: Tensor::zeros(&[h]),
            enc_w_h: mat(h, h),
            enc_u_h: mat(h, h),
            enc_b_h: Tensor::zeros(&[h]),
            enc_lhuc_rec: Tensor::zeros(&[h]),
            pred_embed: mat(c, e),
            pred_w_z: mat(e, p),
            pred_u_z: mat(p, p),
            pred_b_z: Tensor::zeros(&[p]),
            pred_w_h: mat(e, p),
            pred_u_h: mat(p, p),
            pred_b_h: Tensor::zeros(&[p]),
            joint_w1: mat(h + p, j),
            joint_b1: Tensor::zeros(&[j]),
            joint_w2: mat(j, c),
            joint_b2: Tensor::zeros(&[c]),
        }
    }

    fn field(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "enc.w_in" => &self.enc_w_in,
            "enc.b_in" => &self.enc_b_in,
            "enc.lhuc_in" => &self.enc_lhuc_in,
            "enc.w_z" => &self.enc_w_z,
            "enc.u_z" => &self.enc_u_z,
            "enc.b_z" => &self.enc_b_z,
            "enc.w_h" => &self.enc_w_h,
            "enc.u_h" => &self.enc_u_h,
            "enc.b_h" => &self.enc_b_h,
            "enc.lhuc_rec" => &self.enc_lhuc_rec,
            "pred.embed" => &self.pred_embed,
            "pred.w_z" => &self.pred_w_z,
            "pred.u_z" => &self.pred_u_z,
            "pred.b_z" => &self.pred_b_z,
            "pred.w_h" => &self.pred_w_h,
            "pred.u_h" => &self.pred_u_h,
            "pred.b_h" => &self.pred_b_h,
            "joint.w1" => &self.joint_w1,
            "joint.b1" => &self.joint_b1,
            "joint.w2" => &self.joint_w2,
            "joint.b2" => &self.joint_b2,
            _ => return None,
        })
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "enc.w_in" => &mut self.enc_w_in,
            "enc.b_in" => &mut self.enc_b_in,
            "enc.lhuc_in" => &mut self.enc_lhuc_in,
            "enc.w_z" => &mut self.enc_w_z,
            "enc.u_z" => &mut self.enc_u_z,
            "enc.b_z" => &mut self.enc_b_z,
            "enc.w_h" => &mut self.enc_w_h,
            "enc.u_h" => &mut self.enc_u_h,
            "enc.b_h" => &mut self.enc_b_h,
            "enc.lhuc_rec" => &mut self.enc_lhuc_rec,
            "pred.embed" => &mut self.pred_embed,
            "pred.w_z" => &mut self.pred_w_z,
            "pred.u_z" => &mut self.pred_u_z,
            "pred.b_z" => &mut self.pred_b_z,
            "pred.w_h" => &mut self.pred_w_h,
            "pred.u_h" => &mut self.pred_u_h,
            "pred.b_h" => &mut self.pred_b_h,
            "joint.w1" => &mut self.joint_w1,
            "joint.b1" => &mut self.joint_b1,
            "joint.w2" => &mut self.joint_w2,
            "joint.b2" => &mut self.joint_b2,
            _ => return None,
        })
    }

    pub fn n_scalars(&self) -> usize {
        PARAM_NAMES
            .iter()
            .map(|n| self.field(n).unwrap().len())
            .sum()
    }
}

impl ParamStore for ModelParams {
    fn param_names(&self) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.field(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.field_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainableMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "lhuc_only")]
    LhucOnly,
}

/// Parameter names the optimizer may update under the given mode.
pub fn trainable_subset(params: &ModelParams, mode: TrainableMode) -> Vec<String> {
    match mode {
        TrainableMode::Full => params.param_names(),
        TrainableMode::LhucOnly => LHUC_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

const CHECKPOINT_FORMAT: &str = "perso-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint as a single JSON document (tensor dump with shape
/// manifest; values round-trip bit-exactly).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    serde_json::to_writer(&mut w, &ckpt).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported checkpoint {}/{}", ckpt.format, ckpt.version),
        });
    }
    for name in PARAM_NAMES {
        let t = ckpt
            .params
            .field(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint missing {name}")))?;
        if !t.is_finite() {
            return Err(Error::Numeric(format!("checkpoint tensor {name} not finite")));
        }
    }
    Ok(ckpt.params)
}
