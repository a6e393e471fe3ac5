//! The interaction block: single-head dot-product attention that enhances a
//! query feature set from a key/value feature set, followed by a residual
//! layer norm and an optional feed-forward sublayer (post-norm layout).
//!
//! The same unit serves as P-, O- and M-block; only the key/value source
//! differs, which is the caller's choice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which context an interaction block attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    /// Other persons in the same clip.
    P,
    /// Objects in the same clip.
    O,
    /// Person features from neighbouring clips.
    M,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::P => 'P',
            BlockKind::O => 'O',
            BlockKind::M => 'M',
        }
    }
}

/// `[n, d]` instance features plus a validity mask. Padded rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    features: Tensor<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> FeatureSet<T> {
    /// Padded rows (mask false) are forced to zero.
    pub fn new(features: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        features.expect_rank("feature set", 2)?;
        if mask.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "feature set",
                lhs: features.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut features = features.detached();
        let d = features.cols();
        for (i, &ok) in mask.iter().enumerate() {
            if !ok {
                features.data_mut()[i * d..(i + 1) * d].fill(T::zero());
            }
        }
        Ok(Self { features, mask })
    }

    /// Every row valid.
    pub fn dense(features: Tensor<T>) -> Result<Self> {
        let n = features.rows();
        Self::new(features, vec![true; n])
    }

    pub fn empty(d: usize) -> Self {
        Self {
            features: Tensor::zeros(&[0, d]),
            mask: Vec::new(),
        }
    }

    /// `n` all-padding rows.
    pub fn padding(n: usize, d: usize) -> Self {
        Self {
            features: Tensor::zeros(&[n, d]),
            mask: vec![false; n],
        }
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Multiplies every feature by `w`; masks are unchanged.
    pub fn scaled(&self, w: T) -> Self {
        Self {
            features: self.features.map(|x| x * w),
            mask: self.mask.clone(),
        }
    }

    /// Truncates or zero-pads to exactly `k` rows.
    pub fn fit_rows(&self, k: usize) -> Self {
        let d = self.dim();
        let keep = self.len().min(k);
        let mut data = self.features.data()[..keep * d].to_vec();
        data.resize(k * d, T::zero());
        let mut mask = self.mask[..keep].to_vec();
        mask.resize(k, false);
        Self {
            features: Tensor::new(vec![k, d], data).expect("k·d elements"),
            mask,
        }
    }

    pub fn record(&self, tape: &Tape<T>) -> TapeFeatures {
        TapeFeatures {
            var: tape.constant(self.features.clone()),
            mask: self.mask.clone(),
        }
    }
}

/// A feature set living on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeFeatures {
    pub var: Var,
    pub mask: Vec<bool>,
}

impl TapeFeatures {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn to_feature_set<T: Scalar>(&self, tape: &Tape<T>) -> FeatureSet<T> {
        FeatureSet {
            features: tape.value(self.var),
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub kind: BlockKind,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_enabled: bool,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product").with_grad()
}

/// Half-width of the Glorot-uniform range for a `fan_in × fan_out` matrix.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

impl<T: Scalar> BlockParams<T> {
    /// Projections are Glorot-uniform; layer norms start at the identity affine.
    pub fn init<R: Rng + ?Sized>(kind: BlockKind, d: usize, hidden: usize, ffn_enabled: bool, rng: &mut R) -> Self {
        let bd = glorot(d, d);
        let bh = glorot(d, hidden);
        Self {
            kind,
            wq: uniform(rng, &[d, d], bd),
            wk: uniform(rng, &[d, d], bd),
            wv: uniform(rng, &[d, d], bd),
            wo: uniform(rng, &[d, d], bd),
            ln1_gamma: Tensor::full(&[d], T::one()).with_grad(),
            ln1_beta: Tensor::zeros(&[d]).with_grad(),
            ln2_gamma: Tensor::full(&[d], T::one()).with_grad(),
            ln2_beta: Tensor::zeros(&[d]).with_grad(),
            ffn_w1: uniform(rng, &[d, hidden], bh),
            ffn_w2: uniform(rng, &[hidden, d], bh),
            ffn_enabled,
        }
    }

    /// All projections are the identity and the feed-forward path is off.
    pub fn identity(kind: BlockKind, d: usize) -> Self {
        let eye = || Tensor::identity(d).with_grad();
        Self {
            kind,
            wq: eye(),
            wk: eye(),
            wv: eye(),
            wo: eye(),
            ln1_gamma: Tensor::full(&[d], T::one()).with_grad(),
            ln1_beta: Tensor::zeros(&[d]).with_grad(),
            ln2_gamma: Tensor::full(&[d], T::one()).with_grad(),
            ln2_beta: Tensor::zeros(&[d]).with_grad(),
            ffn_w1: Tensor::zeros(&[d, 1]).with_grad(),
            ffn_w2: Tensor::zeros(&[1, d]).with_grad(),
            ffn_enabled: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.w2", &self.ffn_w2),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ffn.w1", &mut self.ffn_w1),
            ("ffn.w2", &mut self.ffn_w2),
        ]
    }

    /// Records the parameters as trainable leaves, in `named_params` order.
    pub fn bind(&self, tape: &Tape<T>) -> BoundBlock {
        let vars: Vec<Var> = self.named_params().iter().map(|(_, t)| tape.param(t)).collect();
        BoundBlock::from_vars(self.kind, self.ffn_enabled, self.dim(), &vars)
    }
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub kind: BlockKind,
    pub vars: Vec<Var>,
    ffn_enabled: bool,
    dim: usize,
}

impl BoundBlock {
    pub fn from_vars(kind: BlockKind, ffn_enabled: bool, dim: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 10, "block binds ten parameter tensors");
        Self {
            kind,
            vars: vars.to_vec(),
            ffn_enabled,
            dim,
        }
    }
}

/// Output of a block plus the attention matrix it used.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub features: TapeFeatures,
    pub attention: Var,
}

/// Enhances `query` with attention over `kv`; see the module docs for the layout.
pub fn block_forward<T: Scalar>(
    tape: &Tape<T>,
    block: &BoundBlock,
    query: &TapeFeatures,
    kv: &TapeFeatures,
) -> Result<TapeFeatures> {
    Ok(block_forward_traced(tape, block, query, kv)?.features)
}

pub fn block_forward_traced<T: Scalar>(
    tape: &Tape<T>,
    block: &BoundBlock,
    query: &TapeFeatures,
    kv: &TapeFeatures,
) -> Result<BlockOutput> {
    let [wq, wk, wv, wo, g1, b1, g2, b2, w1, w2] = block.vars[..] else {
        unreachable!("ten vars checked at bind time");
    };
    let d = block.dim;
    for (what, v) in [("query", query.var), ("key/value", kv.var)] {
        let shape = tape.shape(v);
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::ShapeMismatch {
                op: if what == "query" { "block_forward query" } else { "block_forward key/value" },
                lhs: vec![shape.first().copied().unwrap_or(0), d],
                rhs: shape,
            });
        }
    }
    let nq = query.len();

    let q = tape.matmul(query.var, wq)?;
    let k = tape.matmul(kv.var, wk)?;
    let v = tape.matmul(kv.var, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.scale(tape.matmul(q, kt)?, T::one() / T::lit(d as f64).sqrt());
    let mask: Vec<bool> = (0..nq).flat_map(|_| kv.mask.iter().copied()).collect();
    let attention = tape.softmax_rows(logits, &mask)?;
    let attended = tape.matmul(tape.matmul(attention, v)?, wo)?;
    let eps = T::lit(LAYER_NORM_EPS);
    let mut out = tape.layer_norm_rows(tape.add(query.var, attended)?, g1, b1, eps)?;
    if block.ffn_enabled {
        let hidden = tape.relu(tape.matmul(out, w1)?);
        let ffn = tape.matmul(hidden, w2)?;
        out = tape.layer_norm_rows(tape.add(out, ffn)?, g2, b2, eps)?;
    }
    let out = tape.mask_rows(out, &query.mask)?;
    Ok(BlockOutput {
        features: TapeFeatures {
            var: out,
            mask: query.mask.clone(),
        },
        attention,
    })
}

/// Forward pass on a private tape, returning plain features.
pub fn block_forward_eval<T: Scalar>(
    params: &BlockParams<T>,
    query: &FeatureSet<T>,
    kv: &FeatureSet<T>,
) -> Result<FeatureSet<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = block_forward(&tape, &bound, &query.record(&tape), &kv.record(&tape))?;
    Ok(out.to_feature_set(&tape))
}

/// Attention restricted to valid keys and renormalized so each valid query
/// row sums to 1. Padded keys and padded query rows are zero.
pub fn normalized_attention<T: Scalar>(raw: &Tensor<T>, query_mask: &[bool], key_mask: &[bool]) -> Tensor<T> {
    let nk = key_mask.len();
    let mut out = Tensor::zeros(&[query_mask.len(), nk]);
    for (i, &qok) in query_mask.iter().enumerate() {
        if !qok {
            continue;
        }
        let total: T = (0..nk).filter(|&j| key_mask[j]).map(|j| raw.at(i, j)).sum();
        if total <= T::zero() {
            continue;
        }
        for j in (0..nk).filter(|&j| key_mask[j]) {
            out.data_mut()[i * nk + j] = raw.at(i, j) / total;
        }
    }
    out
}

/// The block's attention matrix `[nq, nk]` for inspection.
pub fn attention_map<T: Scalar>(params: &BlockParams<T>, query: &FeatureSet<T>, kv: &FeatureSet<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = block_forward_traced(&tape, &bound, &query.record(&tape), &kv.record(&tape))?;
    Ok(normalized_attention(&tape.value(out.attention), query.mask(), kv.mask()))
}
