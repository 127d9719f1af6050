//! Logistic regression and a Gini decision tree over sparse binary
//! features.

use serde::{Deserialize, Serialize};

use super::features::FeatureVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub l2: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams {
            l2: 1e-3,
            max_epochs: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogReg {
    weights: Vec<f64>,
    bias: f64,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogReg {
    /// Full-batch gradient descent on mean log-loss plus `l2/2 * |w|^2`.
    /// The step is `1 / L` for the Lipschitz bound `L = 0.25 * (max
    /// nnz + 1) + l2`, so the loss decreases monotonically.
    pub fn fit(x: &[FeatureVector], y: &[bool], params: &LogRegParams) -> LogReg {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty(), "no training samples");
        let width = x[0].width();
        let n = x.len() as f64;
        let max_nnz = x.iter().map(|v| v.active().len()).max().unwrap_or(0) as f64;
        let lr = 1.0 / (0.25 * (max_nnz + 1.0) + params.l2);

        let mut w = vec![0.0f64; width];
        let mut b = 0.0f64;
        let mut grad = vec![0.0f64; width];
        let mut margins = vec![0.0f64; x.len()];
        let mut prev_loss = f64::INFINITY;
        let mut epochs = 0;
        let mut converged = false;
        let mut loss = f64::INFINITY;

        while epochs < params.max_epochs {
            let mut data_loss = 0.0;
            for (i, v) in x.iter().enumerate() {
                let z = b + v.active().iter().map(|&j| w[j as usize]).sum::<f64>();
                margins[i] = z;
                data_loss += if y[i] { softplus(-z) } else { softplus(z) };
            }
            let reg: f64 = w.iter().map(|wi| wi * wi).sum::<f64>() * params.l2 / 2.0;
            loss = data_loss / n + reg;
            if (prev_loss - loss).abs() < params.tolerance {
                converged = true;
                break;
            }
            prev_loss = loss;

            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for (i, v) in x.iter().enumerate() {
                let err = sigmoid(margins[i]) - y[i] as u8 as f64;
                grad_b += err;
                for &j in v.active() {
                    grad[j as usize] += err;
                }
            }
            for (wj, gj) in w.iter_mut().zip(&grad) {
                *wj -= lr * (gj / n + params.l2 * *wj);
            }
            b -= lr * grad_b / n;
            epochs += 1;
        }
        LogReg {
            weights: w,
            bias: b,
            epochs,
            converged,
            final_loss: loss,
        }
    }

    pub fn probability(&self, v: &FeatureVector) -> f64 {
        sigmoid(
            self.bias
                + v.active()
                    .iter()
                    .map(|&j| self.weights[j as usize])
                    .sum::<f64>(),
        )
    }

    pub fn predict(&self, v: &FeatureVector) -> bool {
        self.probability(v) > 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 12,
            min_leaf: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(bool),
    /// Samples with `feature` set go to `set`.
    Split {
        feature: u32,
        set: Box<Node>,
        unset: Box<Node>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    root: Node,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

/// Majority label; ties go to plain.
fn majority(pos: usize, total: usize) -> bool {
    2 * pos > total
}

impl DecisionTree {
    pub fn fit(x: &[FeatureVector], y: &[bool], params: &TreeParams) -> DecisionTree {
        assert_eq!(x.len(), y.len());
        let width = x.first().map_or(0, FeatureVector::width);
        let idx: Vec<usize> = (0..x.len()).collect();
        let mut scratch = Scratch {
            count: vec![0; width],
            pos: vec![0; width],
        };
        DecisionTree {
            root: grow(x, y, idx, 0, params, &mut scratch),
        }
    }

    pub fn predict(&self, v: &FeatureVector) -> bool {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(label) => return *label,
                Node::Split {
                    feature,
                    set,
                    unset,
                } => node = if v.get(*feature as usize) { set } else { unset },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split { set, unset, .. } => 1 + depth(set).max(depth(unset)),
            }
        }
        depth(&self.root)
    }
}

struct Scratch {
    count: Vec<usize>,
    pos: Vec<usize>,
}

fn grow(
    x: &[FeatureVector],
    y: &[bool],
    idx: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    scratch: &mut Scratch,
) -> Node {
    let total = idx.len();
    let pos = idx.iter().filter(|&&i| y[i]).count();
    if depth >= params.max_depth || pos == 0 || pos == total || total < 2 * params.min_leaf {
        return Node::Leaf(majority(pos, total));
    }

    let mut touched = Vec::new();
    for &i in &idx {
        for &f in x[i].active() {
            let f = f as usize;
            if scratch.count[f] == 0 {
                touched.push(f);
            }
            scratch.count[f] += 1;
            scratch.pos[f] += y[i] as usize;
        }
    }
    touched.sort_unstable();

    let parent = gini(pos, total);
    let mut best: Option<(f64, usize)> = None;
    for &f in &touched {
        let (n_set, p_set) = (scratch.count[f], scratch.pos[f]);
        let (n_unset, p_unset) = (total - n_set, pos - p_set);
        if n_set < params.min_leaf || n_unset < params.min_leaf {
            continue;
        }
        let impurity = (n_set as f64 * gini(p_set, n_set)
            + n_unset as f64 * gini(p_unset, n_unset))
            / total as f64;
        let gain = parent - impurity;
        if gain > 1e-12 && best.is_none_or(|(g, _)| gain > g) {
            best = Some((gain, f));
        }
    }
    for &f in &touched {
        scratch.count[f] = 0;
        scratch.pos[f] = 0;
    }

    let Some((_, feature)) = best else {
        return Node::Leaf(majority(pos, total));
    };
    let (set, unset): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i].get(feature));
    Node::Split {
        feature: feature as u32,
        set: Box::new(grow(x, y, set, depth + 1, params, scratch)),
        unset: Box::new(grow(x, y, unset, depth + 1, params, scratch)),
    }
}
