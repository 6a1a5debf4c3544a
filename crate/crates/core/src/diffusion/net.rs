//! The conditional noise-prediction network and its hand-derived reverse pass.
//!
//! Per data row, with `z = [x_t, τ(t)]` and concept embedding `E` (`l×c`):
//!
//! ```text
//! for each attention site s:
//!     q_s = tanh(Wq_s·z + bq_s)                  (d)
//!     K_s = E·Wk_s,  V_s = E·Wv_s                 (l×d, l×d')
//!     a_s = softmax(K_s·q_s / √d)                 (l)
//!     o_s = V_sᵀ·a_s                              (d')
//! u = [z, o_1, …, o_S]
//! h = tanh(W1·u + b1)
//! ε̂ = W2·h
//! ```
//!
//! Flat parameter order: every `(Wk_s, Wv_s)` pair, then per site
//! `(Wq_s, bq_s)`, then `W1, b1, W2`. The first group is the key/value set
//! that merging treats specially.

use serde::{Deserialize, Serialize};

use super::dual::Real;
use crate::error::{Error, Result};
use crate::params::Signature;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    /// `D`
    pub data_dim: usize,
    /// `l`
    pub tokens: usize,
    /// `c`
    pub embed_dim: usize,
    /// `d`
    pub kv_dim: usize,
    /// `d'`
    pub value_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub sites: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            tokens: 2,
            embed_dim: 8,
            kv_dim: 8,
            value_dim: 8,
            hidden: 32,
            time_dim: 4,
            sites: 1,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("data_dim", self.data_dim),
            ("tokens", self.tokens),
            ("embed_dim", self.embed_dim),
            ("kv_dim", self.kv_dim),
            ("value_dim", self.value_dim),
            ("hidden", self.hidden),
            ("sites", self.sites),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("arch.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim
    }

    pub fn mlp_in(&self) -> usize {
        self.input_dim() + self.sites * self.value_dim
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn signature(&self) -> Signature {
        let layout = self.layout();
        Signature {
            kv_shapes: layout.blocks[..layout.kv_blocks]
                .iter()
                .map(|b| (b.rows, b.cols))
                .collect(),
            rest_len: layout.total - layout.kv_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Biases are blocks with `cols == 1` that are not weight matrices.
    pub is_bias: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every named parameter block in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub arch: Arch,
    pub blocks: Vec<Block>,
    /// The first `kv_blocks` blocks are the key/value projections.
    pub kv_blocks: usize,
    pub kv_len: usize,
    pub total: usize,
    wk: Vec<usize>,
    wv: Vec<usize>,
    wq: Vec<usize>,
    bq: Vec<usize>,
    w1: usize,
    b1: usize,
    w2: usize,
}

impl Layout {
    fn new(arch: &Arch) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, is_bias: bool| {
            blocks.push(Block {
                name,
                offset,
                rows,
                cols,
                is_bias,
            });
            let at = offset;
            offset += rows * cols;
            at
        };
        let (c, d, dv, z) = (arch.embed_dim, arch.kv_dim, arch.value_dim, arch.input_dim());
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for s in 0..arch.sites {
            wk.push(push(format!("site{s}.key"), c, d, false));
            wv.push(push(format!("site{s}.value"), c, dv, false));
        }
        let kv_len = offset_of(&wk, &wv, c, dv);
        let mut wq = Vec::new();
        let mut bq = Vec::new();
        for s in 0..arch.sites {
            wq.push(push(format!("site{s}.query"), d, z, false));
            bq.push(push(format!("site{s}.query_bias"), d, 1, true));
        }
        let w1 = push("mlp.hidden".into(), arch.hidden, arch.mlp_in(), false);
        let b1 = push("mlp.hidden_bias".into(), arch.hidden, 1, true);
        let w2 = push("mlp.out".into(), arch.data_dim, arch.hidden, false);
        let total = w2 + arch.data_dim * arch.hidden;
        Layout {
            arch: arch.clone(),
            blocks,
            kv_blocks: 2 * arch.sites,
            kv_len,
            total,
            wk,
            wv,
            wq,
            bq,
            w1,
            b1,
            w2,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Weight matrices outside the key/value set (candidates for low-rank
    /// adapters on the MLP path).
    pub fn dense_rest_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks[self.kv_blocks..].iter().filter(|b| !b.is_bias)
    }
}

fn offset_of(wk: &[usize], wv: &[usize], c: usize, dv: usize) -> usize {
    match (wk.last(), wv.last()) {
        (Some(_), Some(&v)) => v + c * dv,
        _ => 0,
    }
}

/// Fixed sinusoidal features of the timestep `t ∈ [1, T]`.
pub fn time_features(t: usize, num_steps: usize, dim: usize) -> Vec<f64> {
    let tau = t as f64 / num_steps as f64;
    let mut out = Vec::with_capacity(dim);
    let mut k = 0;
    while out.len() + 1 < dim {
        let angle = tau * std::f64::consts::FRAC_PI_2 * f64::powi(2.0, k);
        out.push(angle.sin());
        out.push(angle.cos());
        k += 1;
    }
    if out.len() < dim {
        out.push(tau);
    }
    out
}

/// Gradients of a scalar objective with respect to every input of the network.
#[derive(Clone, Debug)]
pub struct NetGrads<T> {
    pub params: Vec<T>,
    pub embedding: Vec<T>,
    pub x: Vec<T>,
}

/// Inputs shared by forward and reverse passes.
pub struct NetInput<'a, T> {
    pub params: &'a [T],
    /// `l×c`, row-major.
    pub embedding: &'a [T],
    /// `B×D`, row-major.
    pub x: &'a [T],
    /// One timestep per row, each in `[1, T]`.
    pub t: &'a [usize],
    pub num_steps: usize,
}

fn check_input<T>(layout: &Layout, inp: &NetInput<'_, T>) -> Result<usize> {
    let a = &layout.arch;
    if inp.params.len() != layout.total {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters for an architecture with {}",
            inp.params.len(),
            layout.total
        )));
    }
    if inp.embedding.len() != a.tokens * a.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} entries, expected {}x{}",
            inp.embedding.len(),
            a.tokens,
            a.embed_dim
        )));
    }
    if inp.x.len() % a.data_dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "data has {} entries, not a multiple of D={}",
            inp.x.len(),
            a.data_dim
        )));
    }
    let batch = inp.x.len() / a.data_dim;
    if inp.t.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} timesteps for {batch} rows",
            inp.t.len()
        )));
    }
    if let Some(&bad) = inp.t.iter().find(|&&t| t == 0 || t > inp.num_steps) {
        return Err(Error::ShapeMismatch(format!(
            "timestep {bad} outside [1, {}]",
            inp.num_steps
        )));
    }
    Ok(batch)
}

/// `out[r] = Σ_k m[r, k]·v[k]` for a row-major `rows×cols` block.
fn matvec<T: Real>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(v) {
            acc += *a * *b;
        }
        out[r] = acc;
    }
}

/// Keys and values for every site: `K_s = E·Wk_s`, `V_s = E·Wv_s`.
fn project_kv<T: Real>(layout: &Layout, p: &[T], e: &[T]) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let a = &layout.arch;
    let (l, c, d, dv) = (a.tokens, a.embed_dim, a.kv_dim, a.value_dim);
    let mut keys = Vec::with_capacity(a.sites);
    let mut values = Vec::with_capacity(a.sites);
    for s in 0..a.sites {
        let wk = &p[layout.wk[s]..layout.wk[s] + c * d];
        let wv = &p[layout.wv[s]..layout.wv[s] + c * dv];
        let mut k = vec![T::zero(); l * d];
        let mut v = vec![T::zero(); l * dv];
        for j in 0..l {
            for i in 0..c {
                let eji = e[j * c + i];
                for m in 0..d {
                    k[j * d + m] += eji * wk[i * d + m];
                }
                for m in 0..dv {
                    v[j * dv + m] += eji * wv[i * dv + m];
                }
            }
        }
        keys.push(k);
        values.push(v);
    }
    (keys, values)
}

struct RowCache<T> {
    z: Vec<T>,
    q: Vec<Vec<T>>,
    attn: Vec<Vec<T>>,
    u: Vec<T>,
    h: Vec<T>,
}

fn forward_row<T: Real>(
    layout: &Layout,
    p: &[T],
    keys: &[Vec<T>],
    values: &[Vec<T>],
    x_row: &[T],
    t: usize,
    num_steps: usize,
    y: &mut [T],
) -> RowCache<T> {
    let a = &layout.arch;
    let (l, d, dv, zd) = (a.tokens, a.kv_dim, a.value_dim, a.input_dim());
    let inv_sqrt_d = T::cst(1.0 / (d as f64).sqrt());

    let mut z: Vec<T> = x_row.to_vec();
    z.extend(time_features(t, num_steps, a.time_dim).into_iter().map(T::cst));

    let mut u = z.clone();
    let mut qs = Vec::with_capacity(a.sites);
    let mut attns = Vec::with_capacity(a.sites);
    for s in 0..a.sites {
        let wq = &p[layout.wq[s]..layout.wq[s] + d * zd];
        let bq = &p[layout.bq[s]..layout.bq[s] + d];
        let mut q = vec![T::zero(); d];
        matvec(wq, d, zd, &z, &mut q);
        for (qi, bi) in q.iter_mut().zip(bq) {
            *qi = (*qi + *bi).tanh();
        }
        let k = &keys[s];
        let mut scores = vec![T::zero(); l];
        matvec(k, l, d, &q, &mut scores);
        let max = scores
            .iter()
            .map(|s| s.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = T::zero();
        for sc in &mut scores {
            *sc = (*sc * inv_sqrt_d - T::cst(max * (1.0 / (d as f64).sqrt()))).exp();
            total += *sc;
        }
        for sc in &mut scores {
            *sc = *sc / total;
        }
        let v = &values[s];
        let mut o = vec![T::zero(); dv];
        for j in 0..l {
            for m in 0..dv {
                o[m] += scores[j] * v[j * dv + m];
            }
        }
        u.extend_from_slice(&o);
        qs.push(q);
        attns.push(scores);
    }

    let hid = a.hidden;
    let w1 = &p[layout.w1..layout.w1 + hid * a.mlp_in()];
    let b1 = &p[layout.b1..layout.b1 + hid];
    let mut h = vec![T::zero(); hid];
    matvec(w1, hid, a.mlp_in(), &u, &mut h);
    for (hi, bi) in h.iter_mut().zip(b1) {
        *hi = (*hi + *bi).tanh();
    }
    let w2 = &p[layout.w2..layout.w2 + a.data_dim * hid];
    matvec(w2, a.data_dim, hid, &h, y);
    RowCache {
        z,
        q: qs,
        attn: attns,
        u,
        h,
    }
}

/// Noise prediction for every row.
pub fn forward<T: Real>(layout: &Layout, inp: &NetInput<'_, T>) -> Result<Vec<T>> {
    let batch = check_input(layout, inp)?;
    let dim = layout.arch.data_dim;
    let (keys, values) = project_kv(layout, inp.params, inp.embedding);
    let mut out = vec![T::zero(); batch * dim];
    for r in 0..batch {
        forward_row(
            layout,
            inp.params,
            &keys,
            &values,
            &inp.x[r * dim..(r + 1) * dim],
            inp.t[r],
            inp.num_steps,
            &mut out[r * dim..(r + 1) * dim],
        );
    }
    Ok(out)
}

/// Forward pass plus reverse pass. `seed(row, ε̂_row)` returns `∂L/∂ε̂_row`.
pub fn forward_backward<T: Real>(
    layout: &Layout,
    inp: &NetInput<'_, T>,
    mut seed: impl FnMut(usize, &[T]) -> Vec<T>,
) -> Result<(Vec<T>, NetGrads<T>)> {
    let batch = check_input(layout, inp)?;
    let a = &layout.arch;
    let (l, c, d, dv, zd, hid, dim) = (
        a.tokens,
        a.embed_dim,
        a.kv_dim,
        a.value_dim,
        a.input_dim(),
        a.hidden,
        a.data_dim,
    );
    let inv_sqrt_d = T::cst(1.0 / (d as f64).sqrt());
    let p = inp.params;
    let (keys, values) = project_kv(layout, p, inp.embedding);

    let mut gp = vec![T::zero(); layout.total];
    let mut gx = vec![T::zero(); inp.x.len()];
    let mut gkeys: Vec<Vec<T>> = (0..a.sites).map(|_| vec![T::zero(); l * d]).collect();
    let mut gvalues: Vec<Vec<T>> = (0..a.sites).map(|_| vec![T::zero(); l * dv]).collect();
    let mut out = vec![T::zero(); batch * dim];

    let w1 = &p[layout.w1..layout.w1 + hid * a.mlp_in()];
    let w2 = &p[layout.w2..layout.w2 + dim * hid];
    let mlp_in = a.mlp_in();

    for r in 0..batch {
        let y = &mut out[r * dim..(r + 1) * dim];
        let cache = forward_row(
            layout,
            p,
            &keys,
            &values,
            &inp.x[r * dim..(r + 1) * dim],
            inp.t[r],
            inp.num_steps,
            y,
        );
        let dy = seed(r, y);
        debug_assert_eq!(dy.len(), dim);

        // output layer
        let mut dh = vec![T::zero(); hid];
        for o in 0..dim {
            let g = dy[o];
            for k in 0..hid {
                gp[layout.w2 + o * hid + k] += g * cache.h[k];
                dh[k] += w2[o * hid + k] * g;
            }
        }
        // hidden layer
        let mut du = vec![T::zero(); mlp_in];
        for k in 0..hid {
            let hk = cache.h[k];
            let dpre = dh[k] * (T::cst(1.0) - hk * hk);
            gp[layout.b1 + k] += dpre;
            let row = k * mlp_in;
            for i in 0..mlp_in {
                gp[layout.w1 + row + i] += dpre * cache.u[i];
                du[i] += w1[row + i] * dpre;
            }
        }
        let mut dz = du[..zd].to_vec();
        // attention sites
        for s in 0..a.sites {
            let attn = &cache.attn[s];
            let q = &cache.q[s];
            let v = &values[s];
            let k = &keys[s];
            let d_o = &du[zd + s * dv..zd + (s + 1) * dv];
            let mut da = vec![T::zero(); l];
            for j in 0..l {
                for m in 0..dv {
                    gvalues[s][j * dv + m] += attn[j] * d_o[m];
                    da[j] += v[j * dv + m] * d_o[m];
                }
            }
            let mut weighted = T::zero();
            for j in 0..l {
                weighted += attn[j] * da[j];
            }
            let mut dq = vec![T::zero(); d];
            for j in 0..l {
                let ds = attn[j] * (da[j] - weighted) * inv_sqrt_d;
                for m in 0..d {
                    gkeys[s][j * d + m] += ds * q[m];
                    dq[m] += ds * k[j * d + m];
                }
            }
            let wq = &p[layout.wq[s]..layout.wq[s] + d * zd];
            for m in 0..d {
                let dpre = dq[m] * (T::cst(1.0) - q[m] * q[m]);
                gp[layout.bq[s] + m] += dpre;
                for i in 0..zd {
                    gp[layout.wq[s] + m * zd + i] += dpre * cache.z[i];
                    dz[i] += wq[m * zd + i] * dpre;
                }
            }
        }
        gx[r * dim..(r + 1) * dim].copy_from_slice(&dz[..dim]);
    }

    // K = E·Wk, V = E·Wv
    let e = inp.embedding;
    let mut ge = vec![T::zero(); l * c];
    for s in 0..a.sites {
        let wk = &p[layout.wk[s]..layout.wk[s] + c * d];
        let wv = &p[layout.wv[s]..layout.wv[s] + c * dv];
        for j in 0..l {
            for i in 0..c {
                let eji = e[j * c + i];
                let mut acc = T::zero();
                for m in 0..d {
                    let g = gkeys[s][j * d + m];
                    gp[layout.wk[s] + i * d + m] += eji * g;
                    acc += g * wk[i * d + m];
                }
                for m in 0..dv {
                    let g = gvalues[s][j * dv + m];
                    gp[layout.wv[s] + i * dv + m] += eji * g;
                    acc += g * wv[i * dv + m];
                }
                ge[j * c + i] += acc;
            }
        }
    }
    Ok((
        out,
        NetGrads {
            params: gp,
            embedding: ge,
            x: gx,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_every_parameter_once() {
        let arch = Arch {
            sites: 2,
            ..Arch::default()
        };
        let layout = arch.layout();
        let mut next = 0;
        for b in &layout.blocks {
            assert_eq!(b.offset, next, "{}", b.name);
            next += b.len();
        }
        assert_eq!(next, layout.total);
        assert_eq!(layout.kv_len, 2 * 2 * 8 * 8);
        assert_eq!(arch.signature().num_params(), layout.total);
        assert_eq!(arch.signature().kv_shapes, vec![(8, 8); 4]);
    }

    #[test]
    fn time_features_have_requested_width() {
        for dim in 0..6 {
            assert_eq!(time_features(3, 50, dim).len(), dim);
        }
        let f = time_features(50, 50, 2);
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
    }
}
