//! Value model: an expression tree combining per-task scores into one final
//! score per item.
//!
//! JSON form, one object per node keyed by `"op"`:
//!
//! ```json
//! {"op": "add", "args": [
//!     {"op": "mul", "args": [{"op": "const", "value": 0.5}, {"op": "task", "task": "like"}]},
//!     {"op": "if",
//!      "cond": {"left": {"op": "task", "task": "share"}, "cmp": ">", "right": {"op": "const", "value": 0.8}},
//!      "then": {"op": "const", "value": 1.0},
//!      "else": {"op": "const", "value": 0.0}}
//! ]}
//! ```
//!
//! `add`, `mul`, `min`, `max` take one or more `args`; `sub` and `div` take
//! exactly two; `clamp` takes `arg`, `lo`, `hi`.

use serde::{Deserialize, Serialize};

use super::RetrievalError;

pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=", alias = "≤")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl Cmp {
    pub fn apply(self, a: f64, b: f64) -> bool {
        match self {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
            Cmp::Eq => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cond {
    pub left: Box<ValueExpr>,
    pub cmp: Cmp,
    pub right: Box<ValueExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum ValueExpr {
    Const {
        value: f64,
    },
    Task {
        task: String,
    },
    Add {
        args: Vec<ValueExpr>,
    },
    Sub {
        args: Vec<ValueExpr>,
    },
    Mul {
        args: Vec<ValueExpr>,
    },
    Div {
        args: Vec<ValueExpr>,
    },
    Min {
        args: Vec<ValueExpr>,
    },
    Max {
        args: Vec<ValueExpr>,
    },
    Clamp {
        arg: Box<ValueExpr>,
        lo: f64,
        hi: f64,
    },
    If {
        cond: Cond,
        then: Box<ValueExpr>,
        #[serde(rename = "else")]
        otherwise: Box<ValueExpr>,
    },
}

impl ValueExpr {
    pub fn constant(value: f64) -> Self {
        Self::Const { value }
    }

    pub fn task(name: &str) -> Self {
        Self::Task { task: name.to_string() }
    }

    /// Sum of every listed task score.
    pub fn sum_of(tasks: &[&str]) -> Self {
        Self::Add {
            args: tasks.iter().map(|t| Self::task(t)).collect(),
        }
    }

    /// `Σ w_t · task_t`.
    pub fn weighted(terms: &[(f64, &str)]) -> Self {
        Self::Add {
            args: terms
                .iter()
                .map(|(w, t)| Self::Mul {
                    args: vec![Self::constant(*w), Self::task(t)],
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let e: Self = serde_json::from_str(text).map_err(|e| RetrievalError::ValueModel(e.to_string()))?;
        e.check_shape()?;
        Ok(e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("value model serializes")
    }

    pub fn depth(&self) -> usize {
        1 + match self {
            Self::Const { .. } | Self::Task { .. } => 0,
            Self::Add { args } | Self::Sub { args } | Self::Mul { args } | Self::Div { args } | Self::Min { args } | Self::Max { args } => {
                args.iter().map(|a| a.depth()).max().unwrap_or(0)
            }
            Self::Clamp { arg, .. } => arg.depth(),
            Self::If { cond, then, otherwise } => cond
                .left
                .depth()
                .max(cond.right.depth())
                .max(then.depth())
                .max(otherwise.depth()),
        }
    }

    /// Task names referenced, in first-use order.
    pub fn task_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Self::Task { task } = e {
                if !out.contains(task) {
                    out.push(task.clone());
                }
            }
        });
        out
    }

    fn visit(&self, f: &mut impl FnMut(&ValueExpr)) {
        f(self);
        match self {
            Self::Const { .. } | Self::Task { .. } => {}
            Self::Add { args } | Self::Sub { args } | Self::Mul { args } | Self::Div { args } | Self::Min { args } | Self::Max { args } => {
                args.iter().for_each(|a| a.visit(f))
            }
            Self::Clamp { arg, .. } => arg.visit(f),
            Self::If { cond, then, otherwise } => {
                cond.left.visit(f);
                cond.right.visit(f);
                then.visit(f);
                otherwise.visit(f);
            }
        }
    }

    /// Arity and depth checks.
    pub fn check_shape(&self) -> Result<(), RetrievalError> {
        if self.depth() > MAX_DEPTH {
            return Err(RetrievalError::ValueModel(format!("expression deeper than {MAX_DEPTH}")));
        }
        let mut err = None;
        self.visit(&mut |e| {
            let msg = match e {
                Self::Add { args } | Self::Mul { args } | Self::Min { args } | Self::Max { args } if args.is_empty() => {
                    Some("n-ary operator needs at least one argument")
                }
                Self::Sub { args } | Self::Div { args } if args.len() != 2 => Some("sub/div take exactly two arguments"),
                Self::Clamp { lo, hi, .. } if lo > hi => Some("clamp needs lo <= hi"),
                _ => None,
            };
            if let (Some(m), None) = (msg, &err) {
                err = Some(m.to_string());
            }
        });
        match err {
            Some(m) => Err(RetrievalError::ValueModel(m)),
            None => Ok(()),
        }
    }

    /// Resolves task names against `tasks` for fast per-item evaluation.
    pub fn bind(&self, tasks: &[String]) -> Result<BoundValueModel, RetrievalError> {
        self.check_shape()?;
        Ok(BoundValueModel { root: bind(self, tasks)? })
    }

    /// Direct evaluation against a name lookup.
    pub fn eval(&self, score: &dyn Fn(&str) -> Option<f64>) -> Result<f64, RetrievalError> {
        let tasks = self.task_names();
        let mut vals = Vec::with_capacity(tasks.len());
        for t in &tasks {
            vals.push(score(t).ok_or_else(|| RetrievalError::UnknownTask(t.clone()))?);
        }
        self.bind(&tasks)?.eval(&vals)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Task(usize),
    Add(Vec<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Vec<Node>),
    Div(Box<Node>, Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
    Clamp(Box<Node>, f64, f64),
    If(Box<Node>, Cmp, Box<Node>, Box<Node>, Box<Node>),
}

fn bind(e: &ValueExpr, tasks: &[String]) -> Result<Node, RetrievalError> {
    let all = |args: &[ValueExpr]| args.iter().map(|a| bind(a, tasks)).collect::<Result<Vec<_>, _>>();
    let b = |a: &ValueExpr| bind(a, tasks).map(Box::new);
    Ok(match e {
        ValueExpr::Const { value } => Node::Const(*value),
        ValueExpr::Task { task } => Node::Task(
            tasks
                .iter()
                .position(|t| t == task)
                .ok_or_else(|| RetrievalError::UnknownTask(task.clone()))?,
        ),
        ValueExpr::Add { args } => Node::Add(all(args)?),
        ValueExpr::Mul { args } => Node::Mul(all(args)?),
        ValueExpr::Min { args } => Node::Min(all(args)?),
        ValueExpr::Max { args } => Node::Max(all(args)?),
        ValueExpr::Sub { args } => Node::Sub(b(&args[0])?, b(&args[1])?),
        ValueExpr::Div { args } => Node::Div(b(&args[0])?, b(&args[1])?),
        ValueExpr::Clamp { arg, lo, hi } => Node::Clamp(b(arg)?, *lo, *hi),
        ValueExpr::If { cond, then, otherwise } => {
            Node::If(b(&cond.left)?, cond.cmp, b(&cond.right)?, b(then)?, b(otherwise)?)
        }
    })
}

/// A value model with task names resolved to positions.
#[derive(Debug, Clone)]
pub struct BoundValueModel {
    root: Node,
}

impl BoundValueModel {
    /// `scores[i]` is the score of the i-th bound task.
    pub fn eval(&self, scores: &[f64]) -> Result<f64, RetrievalError> {
        eval_node(&self.root, scores)
    }
}

fn eval_node(n: &Node, s: &[f64]) -> Result<f64, RetrievalError> {
    let fold = |args: &[Node], init: f64, f: fn(f64, f64) -> f64| -> Result<f64, RetrievalError> {
        let mut it = args.iter();
        let mut acc = match it.next() {
            Some(a) => eval_node(a, s)?,
            None => init,
        };
        for a in it {
            acc = f(acc, eval_node(a, s)?);
        }
        Ok(acc)
    };
    Ok(match n {
        Node::Const(v) => *v,
        Node::Task(i) => s[*i],
        Node::Add(a) => fold(a, 0.0, |x, y| x + y)?,
        Node::Mul(a) => fold(a, 1.0, |x, y| x * y)?,
        Node::Min(a) => fold(a, f64::INFINITY, f64::min)?,
        Node::Max(a) => fold(a, f64::NEG_INFINITY, f64::max)?,
        Node::Sub(a, b) => eval_node(a, s)? - eval_node(b, s)?,
        Node::Div(a, b) => {
            let d = eval_node(b, s)?;
            if d == 0.0 {
                return Err(RetrievalError::DivByZero);
            }
            eval_node(a, s)? / d
        }
        Node::Clamp(a, lo, hi) => eval_node(a, s)?.clamp(*lo, *hi),
        Node::If(l, c, r, t, e) => {
            if c.apply(eval_node(l, s)?, eval_node(r, s)?) {
                eval_node(t, s)?
            } else {
                eval_node(e, s)?
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identity_and_weighted_sum() {
        let tasks = names(&["like", "share", "comment"]);
        let id = ValueExpr::task("like").bind(&tasks).unwrap();
        assert_eq!(id.eval(&[0.7, 0.1, 0.2]).unwrap(), 0.7);
        let w = ValueExpr::weighted(&[(0.5, "like"), (0.3, "share"), (0.2, "comment")]);
        let v = w.bind(&tasks).unwrap().eval(&[1.0, 0.0, 0.5]).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn json_schema() {
        let text = r#"{"op":"if","cond":{"left":{"op":"task","task":"share"},"cmp":">","right":{"op":"const","value":0.8}},
            "then":{"op":"mul","args":[{"op":"const","value":2},{"op":"task","task":"like"}]},
            "else":{"op":"task","task":"like"}}"#;
        let e = ValueExpr::from_json(text).unwrap();
        assert_eq!(ValueExpr::from_json(&e.to_json()).unwrap(), e);
        let tasks = names(&["like", "share"]);
        let b = e.bind(&tasks).unwrap();
        assert_eq!(b.eval(&[0.3, 0.9]).unwrap(), 0.6);
        assert_eq!(b.eval(&[0.3, 0.8]).unwrap(), 0.3);
        assert!(ValueExpr::from_json(r#"{"op":"sub","args":[{"op":"const","value":1}]}"#).is_err());
        assert!(ValueExpr::from_json(r#"{"op":"pow"}"#).is_err());
    }

    #[test]
    fn errors() {
        let tasks = names(&["a"]);
        assert_eq!(
            ValueExpr::task("b").bind(&tasks).unwrap_err(),
            RetrievalError::UnknownTask("b".into())
        );
        let d = ValueExpr::Div { args: vec![ValueExpr::constant(1.0), ValueExpr::task("a")] };
        assert_eq!(d.bind(&tasks).unwrap().eval(&[0.0]).unwrap_err(), RetrievalError::DivByZero);
        let mut deep = ValueExpr::task("a");
        for _ in 0..MAX_DEPTH {
            deep = ValueExpr::Clamp { arg: Box::new(deep), lo: -1.0, hi: 1.0 };
        }
        assert!(deep.bind(&tasks).is_err());
    }

    #[test]
    fn clamp_min_max() {
        let tasks = names(&["a", "b"]);
        let e = ValueExpr::Clamp {
            arg: Box::new(ValueExpr::Max { args: vec![ValueExpr::task("a"), ValueExpr::task("b")] }),
            lo: 0.0,
            hi: 1.0,
        };
        let b = e.bind(&tasks).unwrap();
        assert_eq!(b.eval(&[3.0, -1.0]).unwrap(), 1.0);
        assert_eq!(b.eval(&[-3.0, -1.0]).unwrap(), 0.0);
        assert_eq!(b.eval(&[0.2, 0.4]).unwrap(), 0.4);
    }
}
