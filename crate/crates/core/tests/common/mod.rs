//! Straight-line fp64 reference implementations, written against plain
//! nested vectors so that they share no code with the library's graph.

#![allow(dead_code)]

use avalign::params::ParamStore;
use avalign::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..b[0].len()).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn positions(len: usize, d: usize) -> Mat {
    (0..len)
        .map(|pos| {
            (0..d)
                .map(|c| {
                    let i = (c / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                    if c % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Reference forward passes reading parameters by name.
pub struct Oracle<'a> {
    pub store: &'a ParamStore<f64>,
    pub eps: f64,
}

impl Oracle<'_> {
    pub fn param(&self, name: &str) -> &Tensor<f64> {
        let id = self.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.store.get(id)
    }

    pub fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.param(&format!("{name}.w"));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let wm: Mat = (0..din).map(|i| w.data()[i * dout..(i + 1) * dout].to_vec()).collect();
        let b = self.param(&format!("{name}.b")).data();
        matmul(x, &wm)
            .into_iter()
            .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
            .collect()
    }

    pub fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.param(&format!("{name}.gain")).data();
        let b = self.param(&format!("{name}.bias")).data();
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + self.eps).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    /// Single-head attention; `causal` hides keys after the query index.
    /// Returns the projected output and the weights.
    pub fn attention(&self, query: &Mat, source: &Mat, name: &str, causal: bool) -> (Mat, Mat) {
        let q = self.linear(query, &format!("{name}.q"));
        let k = self.linear(source, &format!("{name}.k"));
        let v = self.linear(source, &format!("{name}.v"));
        let d = q[0].len() as f64;
        let scores = matmul(&q, &transpose(&k));
        let weights: Mat = scores
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let masked: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, s)| if causal && j > i { f64::NEG_INFINITY } else { s / d.sqrt() })
                    .collect();
                softmax_row(&masked)
            })
            .collect();
        let ctx = matmul(&weights, &v);
        (self.linear(&ctx, &format!("{name}.o")), weights)
    }

    pub fn feed_forward(&self, x: &Mat, name: &str) -> Mat {
        let h = relu(&self.linear(x, &format!("{name}.inner")));
        self.linear(&h, &format!("{name}.outer"))
    }

    pub fn encoder(&self, x: &Mat, name: &str, layers: usize) -> Mat {
        let mut h = x.clone();
        for l in 0..layers {
            let p = format!("{name}.layer{l}");
            let (a, _) = self.attention(&h, &h, &format!("{p}.attn"), false);
            h = self.layer_norm(&add(&h, &a), &format!("{p}.norm1"));
            let f = self.feed_forward(&h, &format!("{p}.ff"));
            h = self.layer_norm(&add(&h, &f), &format!("{p}.norm2"));
        }
        h
    }

    /// One align block: `LN(c_V + o_A)`, then a residual feed-forward.
    /// Returns the output, the weights and the pre-norm fused value.
    pub fn align_block(&self, o_a: &Mat, o_v: &Mat, name: &str) -> (Mat, Mat, Mat) {
        let (c_v, w) = self.attention(o_a, o_v, &format!("{name}.attn"), false);
        let fused = add(&c_v, o_a);
        let h = self.layer_norm(&fused, &format!("{name}.norm1"));
        let f = self.feed_forward(&h, &format!("{name}.ff"));
        (self.layer_norm(&add(&h, &f), &format!("{name}.norm2")), w, fused)
    }

    pub fn decoder(&self, tokens: &[usize], memory: &Mat, name: &str, layers: usize) -> Mat {
        let table = self.param(&format!("{name}.embedding"));
        let d = table.shape()[1];
        let pe = positions(tokens.len(), d);
        let mut h: Mat = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| (0..d).map(|j| (d as f64).sqrt() * table.row(tok)[j] + pe[t][j]).collect())
            .collect();
        for l in 0..layers {
            let p = format!("{name}.layer{l}");
            let (a, _) = self.attention(&h, &h, &format!("{p}.self_attn"), true);
            h = self.layer_norm(&add(&h, &a), &format!("{p}.norm1"));
            let (c, _) = self.attention(&h, memory, &format!("{p}.cross_attn"), false);
            h = self.layer_norm(&add(&h, &c), &format!("{p}.norm2"));
            let f = self.feed_forward(&h, &format!("{p}.ff"));
            h = self.layer_norm(&add(&h, &f), &format!("{p}.norm3"));
        }
        self.linear(&h, &format!("{name}.output"))
    }
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut avalign::rng::Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}
