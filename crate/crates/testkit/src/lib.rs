//! Reference implementations written as plain nested loops over `Vec`s.
//!
//! Nothing here shares code with the main crate: matrices are `Vec<Vec<f64>>`
//! (rows), weights are looked up by name through a caller-supplied closure,
//! and every formula is spelled out index by index. Tests compare the tape
//! implementation against these.
#![allow(clippy::needless_range_loop)]

pub type Mat = Vec<Vec<f64>>;

/// `(shape, row-major data)` of a named parameter.
pub type Lookup<'a> = dyn Fn(&str) -> (Vec<usize>, Vec<f64>) + 'a;

pub fn to_mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(rows * cols, data.len());
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        assert_eq!(a[i].len(), k);
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut e = Vec::with_capacity(x.len());
    let mut z = 0.0;
    for &v in x {
        let ev = (v - max).exp();
        z += ev;
        e.push(ev);
    }
    e.iter().map(|v| v / z).collect()
}

pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + eps).sqrt();
    (0..x.len()).map(|i| gamma[i] * (x[i] - mean) / denom + beta[i]).collect()
}

/// `x · w + b` row by row.
pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let mut out = Vec::with_capacity(x.len());
    for row in x {
        let mut y = vec![0.0; w[0].len()];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut s = match b {
                Some(b) => b[j],
                None => 0.0,
            };
            for (t, &xt) in row.iter().enumerate() {
                s += xt * w[t][j];
            }
            *yj = s;
        }
        out.push(y);
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    let mut m = vec![0.0; x[0].len()];
    for row in x {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter().map(|v| v / x.len() as f64).collect()
}

fn mat_param(lookup: &Lookup<'_>, name: &str) -> Mat {
    let (shape, data) = lookup(name);
    assert_eq!(shape.len(), 2, "{name} is not a matrix");
    to_mat(shape[0], shape[1], &data)
}

fn vec_param(lookup: &Lookup<'_>, name: &str) -> Vec<f64> {
    lookup(name).1
}

/// One attention layer's projections.
#[derive(Debug, Clone)]
pub struct MsaWeights {
    pub wq: Mat,
    pub bq: Option<Vec<f64>>,
    pub wk: Mat,
    pub bk: Option<Vec<f64>>,
    pub wv: Mat,
    pub bv: Option<Vec<f64>>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub heads: usize,
}

impl MsaWeights {
    /// Reads `<prefix>.w_q`, `<prefix>.b_q`, … (`b_q/b_k/b_v` when `qkv_bias`).
    pub fn load(lookup: &Lookup<'_>, prefix: &str, heads: usize, qkv_bias: bool) -> Self {
        let opt = |n: &str| qkv_bias.then(|| vec_param(lookup, &format!("{prefix}.{n}")));
        Self {
            wq: mat_param(lookup, &format!("{prefix}.w_q")),
            bq: opt("b_q"),
            wk: mat_param(lookup, &format!("{prefix}.w_k")),
            bk: opt("b_k"),
            wv: mat_param(lookup, &format!("{prefix}.w_v")),
            bv: opt("b_v"),
            wo: mat_param(lookup, &format!("{prefix}.w_o")),
            bo: vec_param(lookup, &format!("{prefix}.b_o")),
            heads,
        }
    }

    fn qkv(&self, x: &Mat) -> (Mat, Mat, Mat) {
        (
            linear(x, &self.wq, self.bq.as_deref()),
            linear(x, &self.wk, self.bk.as_deref()),
            linear(x, &self.wv, self.bv.as_deref()),
        )
    }
}

/// Columns `h·d .. (h+1)·d` of every row.
fn head_slice(m: &Mat, h: usize, d: usize) -> Mat {
    m.iter().map(|r| r[h * d..(h + 1) * d].to_vec()).collect()
}

/// `softmax(q kᵀ / √d) v` for one head, literally.
fn head_attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Vec::with_capacity(q.len());
    let mut out = Vec::with_capacity(q.len());
    for qi in q {
        let mut scores = Vec::with_capacity(k.len());
        for kj in k {
            let mut s = 0.0;
            for t in 0..d {
                s += qi[t] * kj[t];
            }
            scores.push(s * scale);
        }
        let a = softmax_row(&scores);
        let mut o = vec![0.0; v[0].len()];
        for (j, &aj) in a.iter().enumerate() {
            for t in 0..o.len() {
                o[t] += aj * v[j][t];
            }
        }
        weights.push(a);
        out.push(o);
    }
    (out, weights)
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `kv_src`. Returns the output projection and the per-head weights.
fn attention(q_full: &Mat, k_full: &Mat, v_full: &Mat, w: &MsaWeights) -> (Mat, Vec<Mat>) {
    let dm = q_full[0].len();
    let d = dm / w.heads;
    let mut concat = vec![vec![0.0; dm]; q_full.len()];
    let mut all_weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (o, a) = head_attention(
            &head_slice(q_full, h, d),
            &head_slice(k_full, h, d),
            &head_slice(v_full, h, d),
        );
        for (row, orow) in concat.iter_mut().zip(&o) {
            row[h * d..(h + 1) * d].copy_from_slice(orow);
        }
        all_weights.push(a);
    }
    (linear(&concat, &w.wo, Some(&w.bo)), all_weights)
}

/// Self-attention: output and per-head weights.
pub fn mhsa(x: &Mat, w: &MsaWeights) -> (Mat, Vec<Mat>) {
    let (q, k, v) = w.qkv(x);
    attention(&q, &k, &v, w)
}

/// Cross-fusion attention: the image output uses landmark queries against
/// image keys and values; the landmark output uses image queries against
/// landmark keys and values. Each stream applies its own output projection.
pub fn cross_fusion_mhsa(x_img: &Mat, x_lm: &Mat, img: &MsaWeights, lm: &MsaWeights) -> (Mat, Mat) {
    let (q_img, k_img, v_img) = img.qkv(x_img);
    let (q_lm, k_lm, v_lm) = lm.qkv(x_lm);
    let (out_img, _) = attention(&q_lm, &k_img, &v_img, img);
    let (out_lm, _) = attention(&q_img, &k_lm, &v_lm, lm);
    (out_img, out_lm)
}

/// One stream's encoder block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn: MsaWeights,
    pub norm_attn: Option<(Vec<f64>, Vec<f64>)>,
    pub norm_mlp: (Vec<f64>, Vec<f64>),
    pub fc1_w: Mat,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Mat,
    pub fc2_b: Vec<f64>,
    pub eps: f64,
}

impl BlockWeights {
    pub fn load(lookup: &Lookup<'_>, prefix: &str, heads: usize, qkv_bias: bool, pre_norm: bool, eps: f64) -> Self {
        let norm = |n: &str| {
            (
                vec_param(lookup, &format!("{prefix}.{n}.gamma")),
                vec_param(lookup, &format!("{prefix}.{n}.beta")),
            )
        };
        Self {
            attn: MsaWeights::load(lookup, &format!("{prefix}.attn"), heads, qkv_bias),
            norm_attn: pre_norm.then(|| norm("norm_attn")),
            norm_mlp: norm("norm_mlp"),
            fc1_w: mat_param(lookup, &format!("{prefix}.mlp.fc1.w")),
            fc1_b: vec_param(lookup, &format!("{prefix}.mlp.fc1.b")),
            fc2_w: mat_param(lookup, &format!("{prefix}.mlp.fc2.w")),
            fc2_b: vec_param(lookup, &format!("{prefix}.mlp.fc2.b")),
            eps,
        }
    }

    fn attn_input(&self, x: &Mat) -> Mat {
        match &self.norm_attn {
            Some((g, b)) => x.iter().map(|r| layer_norm_row(r, g, b, self.eps)).collect(),
            None => x.clone(),
        }
    }

    /// `x' + MLP(Norm(x'))`.
    fn mlp_residual(&self, x1: &Mat) -> Mat {
        let (g, b) = &self.norm_mlp;
        let normed: Mat = x1.iter().map(|r| layer_norm_row(r, g, b, self.eps)).collect();
        let mut hidden = linear(&normed, &self.fc1_w, Some(&self.fc1_b));
        for row in hidden.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        add(&linear(&hidden, &self.fc2_w, Some(&self.fc2_b)), x1)
    }
}

/// `x' = MSA(x) + x; y = MLP(Norm(x')) + x'` (eval mode, no drop path).
pub fn vanilla_block(x: &Mat, w: &BlockWeights) -> Mat {
    let (a, _) = mhsa(&w.attn_input(x), &w.attn);
    w.mlp_residual(&add(&a, x))
}

/// Cross-fusion block, both streams, eval mode.
pub fn cross_fusion_block(x_img: &Mat, x_lm: &Mat, img: &BlockWeights, lm: &BlockWeights) -> (Mat, Mat) {
    let (a_img, a_lm) = cross_fusion_mhsa(&img.attn_input(x_img), &lm.attn_input(x_lm), &img.attn, &lm.attn);
    (
        img.mlp_residual(&add(&a_img, x_img)),
        lm.mlp_residual(&add(&a_lm, x_lm)),
    )
}

/// Mean over rows of `-Σ_c q_c log softmax(z)_c`, `q = (1-ε) onehot + ε/N`.
pub fn label_smoothing_ce(logits: &Mat, labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let n = z.len();
        let p = softmax_row(z);
        for c in 0..n {
            let q = if c == y { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
            total -= q * p[c].ln();
        }
    }
    total / logits.len() as f64
}

/// `counts[truth][pred]` by a single pass.
pub fn count_confusion(truth: &[usize], pred: &[usize], n: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; n]; n];
    for i in 0..truth.len() {
        c[truth[i]][pred[i]] += 1;
    }
    c
}

/// Relevance rollout spelled out: `R ← I`; per block
/// `Ā[i][j] = (1/h) Σ_h max(G[h][i][j]·A[h][i][j], 0)`, `R ← R + Ā R`,
/// rows renormalized.
pub fn rollout(blocks: &[(Vec<Mat>, Vec<Mat>)], t: usize) -> Mat {
    let mut r: Mat = (0..t).map(|i| (0..t).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for (a, g) in blocks {
        let h = a.len();
        let mut abar = vec![vec![0.0; t]; t];
        for head in 0..h {
            for i in 0..t {
                for j in 0..t {
                    let v = a[head][i][j] * g[head][i][j];
                    if v > 0.0 {
                        abar[i][j] += v / h as f64;
                    }
                }
            }
        }
        let ar = matmul(&abar, &r);
        let mut next = add(&r, &ar);
        for row in next.iter_mut() {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        r = next;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![0.0], vec![1.0]];
        assert_eq!(matmul(&a, &b), vec![vec![2.0], vec![4.0]]);
        let s = softmax_row(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert_eq!(transpose(&a), vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
        assert_eq!(count_confusion(&[0, 1, 1], &[0, 0, 1], 2), vec![vec![1, 0], vec![1, 1]]);
    }
}
