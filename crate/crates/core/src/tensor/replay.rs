//! 64-bit forward replay of a recorded tape.
//!
//! Used by the finite-difference oracle: the tape is built once in f32, then
//! re-evaluated here entirely in f64 with selected inputs overridden. The
//! replay shares only the *forward* op semantics with the tape; it never
//! touches the backward pass it is used to check.

use super::{Graph, Op};

impl Graph {
    /// Evaluate every node in f64, substituting `overrides` for input nodes.
    /// Returns the value of `target`.
    pub fn replay_f64(&self, overrides: &[(super::NodeId, Vec<f64>)], target: super::NodeId) -> Vec<f64> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(target + 1);
        for id in 0..=target {
            let node_inputs = self.inputs(id);
            let v = match *self.op(id) {
                Op::Input => {
                    if let Some((_, ov)) = overrides.iter().find(|(oid, _)| *oid == id) {
                        ov.clone()
                    } else {
                        self.value(id).data().iter().map(|&x| x as f64).collect()
                    }
                }
                Op::Add => {
                    let a = &values[node_inputs[0]];
                    let b = &values[node_inputs[1]];
                    a.iter().zip(b).map(|(x, y)| x + y).collect()
                }
                Op::AddRow => {
                    let a = &values[node_inputs[0]];
                    let b = &values[node_inputs[1]];
                    let c = b.len();
                    a.iter().enumerate().map(|(i, x)| x + b[i % c]).collect()
                }
                Op::Mul => {
                    let a = &values[node_inputs[0]];
                    let b = &values[node_inputs[1]];
                    a.iter().zip(b).map(|(x, y)| x * y).collect()
                }
                Op::MulRow => {
                    let a = &values[node_inputs[0]];
                    let b = &values[node_inputs[1]];
                    let c = b.len();
                    a.iter().enumerate().map(|(i, x)| x * b[i % c]).collect()
                }
                Op::Scale(c) => values[node_inputs[0]].iter().map(|x| x * c as f64).collect(),
                Op::AddScalar(c) => values[node_inputs[0]].iter().map(|x| x + c as f64).collect(),
                Op::Matmul => {
                    let sa = self.value(node_inputs[0]).shape();
                    let sb = self.value(node_inputs[1]).shape();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let a = &values[node_inputs[0]];
                    let b = &values[node_inputs[1]];
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for l in 0..k {
                                acc += a[i * k + l] * b[l * n + j];
                            }
                            out[i * n + j] = acc;
                        }
                    }
                    out
                }
                Op::Transpose => {
                    let s = self.value(node_inputs[0]).shape();
                    let (r, c) = (s[0], s[1]);
                    let a = &values[node_inputs[0]];
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = a[i * c + j];
                        }
                    }
                    out
                }
                Op::Reshape => values[node_inputs[0]].clone(),
                Op::Concat { axis } => {
                    let out_shape = self.value(id).shape();
                    let (out_r, out_c) = (out_shape[0], out_shape[out_shape.len() - 1]);
                    let mut out = vec![0.0f64; out_r * out_c];
                    if axis == 0 {
                        let mut row = 0;
                        for &p in node_inputs {
                            let rr = self.value(p).rows();
                            out[row * out_c..(row + rr) * out_c].copy_from_slice(&values[p]);
                            row += rr;
                        }
                    } else {
                        let mut col = 0;
                        for &p in node_inputs {
                            let cc = self.value(p).cols();
                            for i in 0..out_r {
                                out[i * out_c + col..i * out_c + col + cc]
                                    .copy_from_slice(&values[p][i * cc..(i + 1) * cc]);
                            }
                            col += cc;
                        }
                    }
                    out
                }
                Op::Slice { axis, start, len } => {
                    let s = self.value(node_inputs[0]).shape();
                    let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                    let a = &values[node_inputs[0]];
                    if axis == 0 {
                        a[start * c..(start + len) * c].to_vec()
                    } else {
                        let mut out = Vec::with_capacity(r * len);
                        for i in 0..r {
                            out.extend_from_slice(&a[i * c + start..i * c + start + len]);
                        }
                        out
                    }
                }
                Op::Sum => vec![values[node_inputs[0]].iter().sum::<f64>()],
                Op::Mean => {
                    let a = &values[node_inputs[0]];
                    vec![a.iter().sum::<f64>() / a.len() as f64]
                }
                Op::Tanh => values[node_inputs[0]].iter().map(|x| x.tanh()).collect(),
                Op::Gelu => values[node_inputs[0]]
                    .iter()
                    .map(|&x| {
                        let u = super::GELU_C * (x + super::GELU_A * x * x * x);
                        0.5 * x * (1.0 + u.tanh())
                    })
                    .collect(),
                Op::Exp => values[node_inputs[0]].iter().map(|x| x.exp()).collect(),
                Op::Log => values[node_inputs[0]].iter().map(|x| x.ln()).collect(),
                Op::SoftmaxRows => {
                    let t = self.value(node_inputs[0]);
                    let (r, c) = (t.rows(), t.cols());
                    let a = &values[node_inputs[0]];
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &a[i * c..(i + 1) * c];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0f64;
                        for j in 0..c {
                            let e = (row[j] - max).exp();
                            out[i * c + j] = e;
                            denom += e;
                        }
                        for j in 0..c {
                            out[i * c + j] /= denom;
                        }
                    }
                    out
                }
                Op::LayerNormRows { eps } => {
                    let t = self.value(node_inputs[0]);
                    let (r, c) = (t.rows(), t.cols());
                    let a = &values[node_inputs[0]];
                    let mut out = vec![0.0f64; r * c];
                    for i in 0..r {
                        let row = &a[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps as f64).sqrt();
                        for j in 0..c {
                            out[i * c + j] = (row[j] - mean) * inv;
                        }
                    }
                    out
                }
                Op::Clamp { lo, hi } => values[node_inputs[0]]
                    .iter()
                    .map(|x| x.clamp(lo as f64, hi as f64))
                    .collect(),
            };
            values.push(v);
        }
        values.swap_remove(target)
    }
}
