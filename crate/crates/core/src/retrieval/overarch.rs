//! OverArch re-ranking scorers over (user, item) embedding pairs.
//!
//! Two families:
//! - MLP: `x = user ‖ item` (optionally `‖ user⊙item`), ReLU hidden layers,
//!   one linear head per task.
//! - Mixture of logits: `score = Σ_p π_p · ⟨U_p user, I_p item⟩` with
//!   `π = softmax(G (user ‖ item) + b)`.
//!
//! Weights are f32; arithmetic is f64.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter, CodecError};

use super::RetrievalError;

/// Fully connected layer, `weights` row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut d = Self::zeros(dim, dim);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    /// Uniform in `±1/sqrt(in_dim)`.
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (in_dim.max(1) as f32).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| rng.gen_range(-a..a)).collect(),
            bias: (0..out_dim).map(|_| rng.gen_range(-a..a)).collect(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(format!(
                "dense layer {}x{} has {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weights.len(),
                self.bias.len()
            ));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>() + *b as f64)
            .collect()
    }

    fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.in_dim as u64);
        w.u64(self.out_dim as u64);
        w.f32s(&self.weights);
        w.f32s(&self.bias);
    }

    fn decode(r: &mut ByteReader) -> Result<Self, CodecError> {
        let in_dim = r.u64()? as usize;
        let out_dim = r.u64()? as usize;
        let n = in_dim
            .checked_mul(out_dim)
            .filter(|n| n.saturating_mul(4) <= r.remaining())
            .ok_or_else(|| CodecError::Malformed("dense layer too large".into()))?;
        let weights = r.f32s(n)?;
        let bias = r.f32s(out_dim)?;
        Ok(Self { in_dim, out_dim, weights, bias })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpScorer {
    pub dim: usize,
    /// Append the elementwise product `user ⊙ item` to the input.
    pub include_product: bool,
    pub hidden: Vec<Dense>,
    /// Task name → head with `out_dim == 1`.
    pub heads: BTreeMap<String, Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolScorer {
    pub dim: usize,
    pub user_proj: Vec<Dense>,
    pub item_proj: Vec<Dense>,
    /// `2 * dim → P` gating logits.
    pub gate: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OverArchModel {
    Mlp(MlpScorer),
    Mol(MolScorer),
}

impl OverArchModel {
    /// MoL with one identity component: the score is the plain dot product
    /// for every task.
    pub fn dot_product(dim: usize) -> Self {
        Self::Mol(MolScorer {
            dim,
            user_proj: vec![Dense::identity(dim)],
            item_proj: vec![Dense::identity(dim)],
            gate: Dense::zeros(2 * dim, 1),
        })
    }

    pub fn random_mlp(dim: usize, hidden: &[usize], tasks: &[&str], include_product: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_dim = if include_product { 3 * dim } else { 2 * dim };
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(Dense::random(in_dim, h, &mut rng));
            in_dim = h;
        }
        let heads = tasks
            .iter()
            .map(|t| (t.to_string(), Dense::random(in_dim, 1, &mut rng)))
            .collect();
        Self::Mlp(MlpScorer {
            dim,
            include_product,
            hidden: layers,
            heads,
        })
    }

    pub fn random_mol(dim: usize, components: usize, component_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::Mol(MolScorer {
            dim,
            user_proj: (0..components).map(|_| Dense::random(dim, component_dim, &mut rng)).collect(),
            item_proj: (0..components).map(|_| Dense::random(dim, component_dim, &mut rng)).collect(),
            gate: Dense::random(2 * dim, components, &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Mlp(m) => m.dim,
            Self::Mol(m) => m.dim,
        }
    }

    /// Checks that layer shapes chain.
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::Model(m));
        match self {
            Self::Mlp(m) => {
                let mut width = if m.include_product { 3 * m.dim } else { 2 * m.dim };
                for l in &m.hidden {
                    if let Err(e) = l.check() {
                        return bad(e);
                    }
                    if l.in_dim != width {
                        return bad(format!("hidden layer expects {} inputs, gets {width}", l.in_dim));
                    }
                    width = l.out_dim;
                }
                if m.heads.is_empty() {
                    return bad("MLP scorer has no task heads".into());
                }
                for (t, h) in &m.heads {
                    if let Err(e) = h.check() {
                        return bad(e);
                    }
                    if h.in_dim != width || h.out_dim != 1 {
                        return bad(format!("head {t:?} must be {width} -> 1"));
                    }
                }
            }
            Self::Mol(m) => {
                let p = m.user_proj.len();
                if p == 0 || m.item_proj.len() != p {
                    return bad("MoL needs matching, nonempty user/item projections".into());
                }
                for (u, i) in m.user_proj.iter().zip(&m.item_proj) {
                    if let Err(e) = u.check().and(i.check()) {
                        return bad(e);
                    }
                    if u.in_dim != m.dim || i.in_dim != m.dim || u.out_dim != i.out_dim {
                        return bad("MoL projection shapes disagree".into());
                    }
                }
                if let Err(e) = m.gate.check() {
                    return bad(e);
                }
                if m.gate.in_dim != 2 * m.dim || m.gate.out_dim != p {
                    return bad(format!("MoL gate must be {} -> {p}", 2 * m.dim));
                }
            }
        }
        Ok(())
    }

    /// Whether `task` can be scored (MoL scores every task alike).
    pub fn supports_task(&self, task: &str) -> bool {
        match self {
            Self::Mlp(m) => m.heads.contains_key(task),
            Self::Mol(_) => true,
        }
    }

    pub fn score(&self, task: &str, user: &[f32], item: &[f32]) -> Result<f64, RetrievalError> {
        match self {
            Self::Mlp(m) => {
                let head = m
                    .heads
                    .get(task)
                    .ok_or_else(|| RetrievalError::UnknownTask(task.to_string()))?;
                let mut x: Vec<f64> = user.iter().chain(item).map(|&v| v as f64).collect();
                if m.include_product {
                    x.extend(user.iter().zip(item).map(|(a, b)| *a as f64 * *b as f64));
                }
                for l in &m.hidden {
                    x = l.apply(&x);
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                Ok(head.apply(&x)[0])
            }
            Self::Mol(m) => {
                let ui: Vec<f64> = user.iter().chain(item).map(|&v| v as f64).collect();
                let logits = m.gate.apply(&ui);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let u64s: Vec<f64> = user.iter().map(|&v| v as f64).collect();
                let i64s: Vec<f64> = item.iter().map(|&v| v as f64).collect();
                let mut s = 0.0;
                for ((up, ip), e) in m.user_proj.iter().zip(&m.item_proj).zip(&exps) {
                    let a = up.apply(&u64s);
                    let b = ip.apply(&i64s);
                    s += (e / z) * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
                }
                Ok(s)
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        match self {
            Self::Mlp(m) => {
                w.u32(1);
                w.u64(m.dim as u64);
                w.u32(m.include_product as u32);
                w.u64(m.hidden.len() as u64);
                m.hidden.iter().for_each(|l| l.encode(&mut w));
                w.u64(m.heads.len() as u64);
                for (name, h) in &m.heads {
                    w.str(name);
                    h.encode(&mut w);
                }
            }
            Self::Mol(m) => {
                w.u32(2);
                w.u64(m.dim as u64);
                w.u64(m.user_proj.len() as u64);
                for (u, i) in m.user_proj.iter().zip(&m.item_proj) {
                    u.encode(&mut w);
                    i.encode(&mut w);
                }
                m.gate.encode(&mut w);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = ByteReader::new(bytes);
        let model = match r.u32()? {
            1 => {
                let dim = r.u64()? as usize;
                let include_product = r.u32()? != 0;
                let n = r.count(16)?;
                let hidden = (0..n).map(|_| Dense::decode(&mut r)).collect::<Result<_, _>>()?;
                let n = r.count(20)?;
                let mut heads = BTreeMap::new();
                for _ in 0..n {
                    let name = r.str()?;
                    heads.insert(name, Dense::decode(&mut r)?);
                }
                Self::Mlp(MlpScorer { dim, include_product, hidden, heads })
            }
            2 => {
                let dim = r.u64()? as usize;
                let p = r.count(32)?;
                let mut user_proj = Vec::with_capacity(p);
                let mut item_proj = Vec::with_capacity(p);
                for _ in 0..p {
                    user_proj.push(Dense::decode(&mut r)?);
                    item_proj.push(Dense::decode(&mut r)?);
                }
                let gate = Dense::decode(&mut r)?;
                Self::Mol(MolScorer { dim, user_proj, item_proj, gate })
            }
            t => return Err(CodecError::Malformed(format!("unknown scorer tag {t}"))),
        };
        r.finish()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_scores_zero() {
        let mut m = OverArchModel::random_mlp(4, &[8, 3], &["like"], false, 1);
        if let OverArchModel::Mlp(mlp) = &mut m {
            for l in mlp.hidden.iter_mut().chain(mlp.heads.values_mut()) {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        m.validate().unwrap();
        assert_eq!(m.score("like", &[1.0, 2.0, 3.0, 4.0], &[0.5; 4]).unwrap(), 0.0);
    }

    #[test]
    fn product_head_recovers_dot() {
        let dim = 3;
        let mut head = Dense::zeros(3 * dim, 1);
        for j in 2 * dim..3 * dim {
            head.weights[j] = 1.0;
        }
        let m = OverArchModel::Mlp(MlpScorer {
            dim,
            include_product: true,
            hidden: vec![],
            heads: [("t".to_string(), head)].into_iter().collect(),
        });
        m.validate().unwrap();
        let u = [0.2f32, -0.4, 0.9];
        let items = [[1.0f32, 0.0, 0.0], [0.0, 0.0, 1.0], [0.3, -0.3, 0.3]];
        for it in &items {
            let want: f64 = u.iter().zip(it).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((m.score("t", &u, it).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_product_mol() {
        let m = OverArchModel::dot_product(2);
        m.validate().unwrap();
        let s = m.score("any", &[0.5, 0.25], &[2.0, 4.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn binary_roundtrip() {
        for m in [
            OverArchModel::random_mlp(5, &[7], &["a", "b"], true, 3),
            OverArchModel::random_mol(5, 3, 4, 4),
        ] {
            assert_eq!(OverArchModel::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }

    #[test]
    fn shape_errors() {
        let mut m = OverArchModel::random_mlp(4, &[8], &["a"], false, 1);
        if let OverArchModel::Mlp(mlp) = &mut m {
            mlp.hidden[0].in_dim = 7;
        }
        assert!(m.validate().is_err());
        let m = OverArchModel::random_mlp(4, &[8], &["a"], false, 1);
        assert!(matches!(m.score("b", &[0.0; 4], &[0.0; 4]), Err(RetrievalError::UnknownTask(_))));
    }
}
