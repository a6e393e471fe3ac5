//! Interaction aggregation: composing interaction blocks into parallel,
//! serial or dense-serial stacks.
//!
//! * serial: the person query is passed through the blocks in order;
//! * dense serial: block `i` queries with a learned per-dimension softmax
//!   mixture of the raw person features and every earlier block output;
//! * parallel: one branch per block kind, each starting from the raw person
//!   features, merged by an elementwise mean.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::block::{block_forward_traced, BlockKind, BlockParams, BoundBlock, TapeFeatures};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Parallel,
    Serial,
    DenseSerial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IaConfig {
    pub structure: Structure,
    /// Block kinds in execution order, each at most once. Empty means no
    /// interaction blocks at all.
    pub order: Vec<BlockKind>,
    /// How many times `order` is repeated (blocks per kind).
    pub repeats: usize,
    pub d: usize,
    pub ffn_enabled: bool,
    /// Feed-forward width; `2·d` when absent.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
}

impl IaConfig {
    /// Serial `P→O→M`, two blocks per kind.
    pub fn default_for(d: usize) -> Self {
        Self {
            structure: Structure::Serial,
            order: vec![BlockKind::P, BlockKind::O, BlockKind::M],
            repeats: 2,
            d,
            ffn_enabled: true,
            ffn_hidden: None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = self.order.iter().find(|k| !seen.insert(**k)) {
            return Err(Error::InvalidOrder(format!("{dup:?} appears more than once")));
        }
        if !self.order.is_empty() && self.repeats == 0 {
            return Err(Error::InvalidOrder("repeats must be positive".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if self.ffn_enabled && self.hidden() == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }

    /// Block kinds in storage order: repeat-major for serial stacks,
    /// branch-major for parallel ones.
    pub fn block_kinds(&self) -> Vec<BlockKind> {
        match self.structure {
            Structure::Parallel => self
                .order
                .iter()
                .flat_map(|&k| std::iter::repeat_n(k, self.repeats))
                .collect(),
            Structure::Serial | Structure::DenseSerial => (0..self.repeats)
                .flat_map(|_| self.order.iter().copied())
                .collect(),
        }
    }
}

/// Parameters of an interaction aggregation stack.
#[derive(Debug, Clone, PartialEq)]
pub struct IaStack<T> {
    pub config: IaConfig,
    pub blocks: Vec<BlockParams<T>>,
    /// For dense serial stacks: `dense_logits[i][j]` weighs predecessor `j`
    /// (0 = raw person features) in block `i`'s query. Empty otherwise.
    pub dense_logits: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> IaStack<T> {
    pub fn build(config: &IaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<_> = config
            .block_kinds()
            .into_iter()
            .map(|k| BlockParams::init(k, config.d, config.hidden(), config.ffn_enabled, &mut rng))
            .collect();
        let dense_logits = match config.structure {
            Structure::DenseSerial => (0..blocks.len())
                .map(|i| (0..=i).map(|_| Tensor::zeros(&[config.d]).with_grad()).collect())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            config: config.clone(),
            blocks,
            dense_logits,
        })
    }

    /// Predecessor count of block `i` in a dense serial stack.
    pub fn predecessors(&self, i: usize) -> usize {
        self.dense_logits.get(i).map_or(0, Vec::len)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named_params() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        for (i, logits) in self.dense_logits.iter().enumerate() {
            for (j, t) in logits.iter().enumerate() {
                out.push((format!("dense{i}.{j}"), t));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.named_params_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        for (i, logits) in self.dense_logits.iter_mut().enumerate() {
            for (j, t) in logits.iter_mut().enumerate() {
                out.push((format!("dense{i}.{j}"), t));
            }
        }
        out
    }

    pub fn bind(&self, tape: &Tape<T>) -> BoundStack {
        BoundStack {
            structure: self.config.structure,
            repeats: self.config.repeats,
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            dense: self
                .dense_logits
                .iter()
                .map(|ls| ls.iter().map(|t| tape.param(t)).collect())
                .collect(),
        }
    }
}

/// Tape handles for a stack's parameters.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub structure: Structure,
    pub repeats: usize,
    pub blocks: Vec<BoundBlock>,
    pub dense: Vec<Vec<Var>>,
}

impl BoundStack {
    /// Handles in the same order as [`IaStack::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| b.vars.iter().copied())
            .chain(self.dense.iter().flatten().copied())
            .collect()
    }
}

/// Per-dimension softmax over the predecessor axis of `logits` (each `[d]`),
/// returned as a `[J, d]` weight matrix.
pub fn dense_weights<T: Scalar>(tape: &Tape<T>, logits: &[Var]) -> Result<Var> {
    let stacked = tape.concat_rows(logits)?;
    let by_dim = tape.transpose(stacked)?;
    let shape = tape.shape(by_dim);
    let w = tape.softmax_rows(by_dim, &vec![true; shape[0] * shape[1]])?;
    tape.transpose(w)
}

/// `Σ_j W_j ⊙ E_j` with `W` from [`dense_weights`].
pub fn dense_query<T: Scalar>(tape: &Tape<T>, prev_outputs: &[Var], logits: &[Var]) -> Result<Var> {
    if prev_outputs.is_empty() || prev_outputs.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            op: "dense_query",
            lhs: vec![prev_outputs.len()],
            rhs: vec![logits.len()],
        });
    }
    let weights = dense_weights(tape, logits)?;
    let mut acc: Option<Var> = None;
    for (j, &e) in prev_outputs.iter().enumerate() {
        let wj = tape.select_rows(weights, &[j])?;
        let term = tape.mul_row(e, wj)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one predecessor"))
}

/// One executed block, for attention inspection.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub index: usize,
    pub kind: BlockKind,
    pub attention: Var,
    pub query_mask: Vec<bool>,
    pub key_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    /// Enhanced person features, all rows (padded rows zero).
    pub features: TapeFeatures,
    /// Blocks in execution order.
    pub trace: Vec<BlockTrace>,
}

fn kv_for<'a>(kind: BlockKind, query: &'a TapeFeatures, objects: &'a TapeFeatures, memory: &'a TapeFeatures) -> &'a TapeFeatures {
    match kind {
        BlockKind::P => query,
        BlockKind::O => objects,
        BlockKind::M => memory,
    }
}

fn check_dim<T: Scalar>(tape: &Tape<T>, what: &'static str, f: &TapeFeatures, d: Option<usize>) -> Result<()> {
    let shape = tape.shape(f.var);
    if shape.len() != 2 || d.is_some_and(|d| shape[1] != d) || shape[0] != f.mask.len() {
        return Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![f.mask.len(), d.unwrap_or(0)],
            rhs: shape,
        });
    }
    Ok(())
}

/// Runs the stack and keeps every block's attention.
pub fn ia_forward_traced<T: Scalar>(
    tape: &Tape<T>,
    stack: &BoundStack,
    persons: &TapeFeatures,
    objects: &TapeFeatures,
    memory: &TapeFeatures,
) -> Result<StackOutput> {
    let d = tape.shape(persons.var).get(1).copied();
    check_dim(tape, "ia_forward persons", persons, d)?;
    check_dim(tape, "ia_forward objects", objects, d)?;
    check_dim(tape, "ia_forward memory", memory, d)?;
    let mut trace = Vec::with_capacity(stack.blocks.len());

    let run = |i: usize, query: &TapeFeatures, kv: &TapeFeatures, trace: &mut Vec<BlockTrace>| -> Result<TapeFeatures> {
        let block = &stack.blocks[i];
        let out = block_forward_traced(tape, block, query, kv)?;
        trace.push(BlockTrace {
            index: i,
            kind: block.kind,
            attention: out.attention,
            query_mask: query.mask.clone(),
            key_mask: kv.mask.clone(),
        });
        Ok(out.features)
    };

    let features = match stack.structure {
        Structure::Serial => {
            let mut cur = persons.clone();
            for i in 0..stack.blocks.len() {
                let kv = kv_for(stack.blocks[i].kind, &cur, objects, memory).clone();
                cur = run(i, &cur, &kv, &mut trace)?;
            }
            cur
        }
        Structure::DenseSerial => {
            let mut outputs = vec![persons.var];
            let mut cur = persons.clone();
            for i in 0..stack.blocks.len() {
                let query = TapeFeatures {
                    var: dense_query(tape, &outputs, &stack.dense[i])?,
                    mask: persons.mask.clone(),
                };
                let kv = kv_for(stack.blocks[i].kind, &query, objects, memory).clone();
                cur = run(i, &query, &kv, &mut trace)?;
                outputs.push(cur.var);
            }
            cur
        }
        Structure::Parallel => {
            let per_branch = stack.repeats.max(1);
            let branches = stack.blocks.len() / per_branch;
            let mut merged: Option<Var> = None;
            for b in 0..branches {
                let mut cur = persons.clone();
                for i in b * per_branch..(b + 1) * per_branch {
                    let kv = kv_for(stack.blocks[i].kind, &cur, objects, memory).clone();
                    cur = run(i, &cur, &kv, &mut trace)?;
                }
                merged = Some(match merged {
                    Some(m) => tape.add(m, cur.var)?,
                    None => cur.var,
                });
            }
            match merged {
                Some(m) if branches > 1 => TapeFeatures {
                    var: tape.scale(m, T::one() / T::lit(branches as f64)),
                    mask: persons.mask.clone(),
                },
                Some(m) => TapeFeatures {
                    var: m,
                    mask: persons.mask.clone(),
                },
                None => persons.clone(),
            }
        }
    };
    Ok(StackOutput { features, trace })
}

/// Action features `[n_valid, d]` for the valid person rows.
pub fn ia_forward<T: Scalar>(
    tape: &Tape<T>,
    stack: &BoundStack,
    persons: &TapeFeatures,
    objects: &TapeFeatures,
    memory: &TapeFeatures,
) -> Result<Var> {
    let out = ia_forward_traced(tape, stack, persons, objects, memory)?;
    valid_rows(tape, &out.features)
}

pub fn valid_rows<T: Scalar>(tape: &Tape<T>, f: &TapeFeatures) -> Result<Var> {
    let idx: Vec<usize> = f.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.len() == f.mask.len() {
        Ok(f.var)
    } else {
        tape.select_rows(f.var, &idx)
    }
}

/// Multi-label linear classifier on action features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn init(d: usize, classes: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..d * classes).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self {
            weights: Tensor::new(vec![d, classes], data).expect("d·C").with_grad(),
            bias: Tensor::zeros(&[classes]).with_grad(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("head.w".into(), &self.weights), ("head.b".into(), &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("head.w".into(), &mut self.weights), ("head.b".into(), &mut self.bias)]
    }

    pub fn bind(&self, tape: &Tape<T>) -> (Var, Var) {
        (tape.param(&self.weights), tape.param(&self.bias))
    }
}

/// Logits `A·W + b`.
pub fn classify<T: Scalar>(tape: &Tape<T>, head: (Var, Var), actions: Var) -> Result<Var> {
    let z = tape.matmul(actions, head.0)?;
    tape.add_row(z, head.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::FeatureSet;
    use rand::Rng;

    fn cfg(structure: Structure, repeats: usize) -> IaConfig {
        IaConfig {
            structure,
            order: vec![BlockKind::P, BlockKind::O, BlockKind::M],
            repeats,
            d: 4,
            ffn_enabled: true,
            ffn_hidden: None,
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureSet<f64> {
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSet::dense(Tensor::new(vec![n, d], data).unwrap()).unwrap()
    }

    #[test]
    fn serial_layout_repeats_order() {
        let s = IaStack::<f64>::build(&cfg(Structure::Serial, 2), 0).unwrap();
        let kinds: Vec<_> = s.blocks.iter().map(|b| b.kind).collect();
        use BlockKind::*;
        assert_eq!(kinds, vec![P, O, M, P, O, M]);
        assert!(s.dense_logits.is_empty());
    }

    #[test]
    fn dense_predecessor_sets() {
        let s = IaStack::<f64>::build(&cfg(Structure::DenseSerial, 1), 0).unwrap();
        assert_eq!(s.predecessors(0), 1);
        assert_eq!(s.predecessors(2), 3);
        assert!(s.dense_logits.iter().flatten().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn parallel_has_one_branch_per_kind() {
        let s = IaStack::<f64>::build(&cfg(Structure::Parallel, 1), 0).unwrap();
        assert_eq!(s.blocks.len(), 3);
        let s = IaStack::<f64>::build(&cfg(Structure::Parallel, 2), 0).unwrap();
        use BlockKind::*;
        let kinds: Vec<_> = s.blocks.iter().map(|b| b.kind).collect();
        assert_eq!(kinds, vec![P, P, O, O, M, M]);
    }

    #[test]
    fn duplicate_kind_rejected() {
        let mut c = cfg(Structure::Serial, 1);
        c.order = vec![BlockKind::P, BlockKind::P];
        assert!(matches!(IaStack::<f64>::build(&c, 0), Err(Error::InvalidOrder(_))));
        c.order = vec![BlockKind::P];
        c.repeats = 0;
        assert!(matches!(IaStack::<f64>::build(&c, 0), Err(Error::InvalidOrder(_))));
    }

    #[test]
    fn dense_query_examples() {
        let tape = Tape::<f64>::new();
        let e1 = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e2 = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2]));

        let single = dense_query(&tape, &[e1], &[z]).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(e1).data());

        let mean = dense_query(&tape, &[e1, e2], &[z, z]).unwrap();
        assert_eq!(tape.value(mean).data(), &[3.0, 4.0, 5.0, 6.0]);

        let hi = tape.constant(Tensor::new(vec![2], vec![1e9, 0.0]).unwrap());
        let lo = tape.constant(Tensor::new(vec![2], vec![-1e9, 0.0]).unwrap());
        let sat = tape.value(dense_query(&tape, &[e1, e2], &[hi, lo]).unwrap());
        assert_eq!(sat.at(0, 0), 1.0);
        assert_eq!(sat.at(1, 0), 3.0);
        assert_eq!(sat.at(0, 1), 4.0);

        assert!(dense_query(&tape, &[e1, e2], &[z]).is_err());
        assert!(dense_query(&tape, &[], &[]).is_err());
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut c = cfg(Structure::Serial, 1);
        c.order.clear();
        let stack = IaStack::<f64>::build(&c, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_set(&mut rng, 3, 4);
        let tape = Tape::new();
        let bound = stack.bind(&tape);
        let (pv, ov, mv) = (p.record(&tape), FeatureSet::empty(4).record(&tape), FeatureSet::empty(4).record(&tape));
        let a = ia_forward(&tape, &bound, &pv, &ov, &mv).unwrap();
        assert_eq!(tape.value(a).data(), p.features().data());
    }

    #[test]
    fn empty_persons_give_empty_actions() {
        let stack = IaStack::<f64>::build(&cfg(Structure::DenseSerial, 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let bound = stack.bind(&tape);
        let o = random_set(&mut rng, 2, 4).record(&tape);
        let m = random_set(&mut rng, 4, 4).record(&tape);
        let a = ia_forward(&tape, &bound, &FeatureSet::empty(4).record(&tape), &o, &m).unwrap();
        assert_eq!(tape.shape(a), vec![0, 4]);
    }

    #[test]
    fn memory_dim_mismatch_rejected() {
        let stack = IaStack::<f64>::build(&cfg(Structure::Serial, 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let bound = stack.bind(&tape);
        let p = random_set(&mut rng, 2, 4).record(&tape);
        let o = random_set(&mut rng, 2, 4).record(&tape);
        let m = random_set(&mut rng, 2, 3).record(&tape);
        assert!(ia_forward(&tape, &bound, &p, &o, &m).is_err());
    }

    #[test]
    fn classify_zero_actions_gives_bias() {
        let mut head = Classifier::<f64>::init(3, 2, 0);
        head.bias = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let tape = Tape::new();
        let h = head.bind(&tape);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let z = tape.value(classify(&tape, h, a).unwrap());
        assert_eq!(z.data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn classify_identity_head_mirrors_features() {
        let head = Classifier {
            weights: Tensor::<f64>::identity(3),
            bias: Tensor::zeros(&[3]),
        };
        let tape = Tape::new();
        let h = head.bind(&tape);
        let a = Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let z = classify(&tape, h, tape.constant(a.clone())).unwrap();
        assert_eq!(tape.value(z).data(), a.data());
    }
}
