//! Multi-head scaled-dot-product self-attention over groups of rows.
//!
//! The input stacks `G` independent groups of `N` rows (one group per
//! distance matrix); attention never crosses a group boundary.

use super::ops::{softmax_in_place, softmax_rows_backward};
use super::tensor::{gemm, gemm_slices, matmul, Tensor};
use super::{NnError, Result};

/// Per-head query/key/value projections plus the output projection.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams<'a> {
    pub wq: &'a [Tensor],
    pub wk: &'a [Tensor],
    pub wv: &'a [Tensor],
    pub wo: &'a Tensor,
}

impl MhaParams<'_> {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    fn validate(&self, din: usize) -> Result<(usize, usize)> {
        let h = self.heads();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return Err(NnError::Shape {
                op: "mha",
                detail: format!("head counts q/k/v = {}/{}/{}", h, self.wk.len(), self.wv.len()),
            });
        }
        let dk = self.wq[0].cols();
        let dv = self.wv[0].cols();
        for i in 0..h {
            let ok = self.wq[i].shape() == [din, dk]
                && self.wk[i].shape() == [din, dk]
                && self.wv[i].shape() == [din, dv];
            if !ok {
                return Err(NnError::Shape {
                    op: "mha",
                    detail: format!(
                        "head {i}: W_Q {:?}, W_K {:?}, W_V {:?} for input width {din}",
                        self.wq[i].shape(),
                        self.wk[i].shape(),
                        self.wv[i].shape()
                    ),
                });
            }
        }
        if self.wo.rows() != h * dv {
            return Err(NnError::Shape {
                op: "mha",
                detail: format!("W_O {:?} needs {} rows", self.wo.shape(), h * dv),
            });
        }
        Ok((dk, dv))
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    z1: Tensor,
    group: usize,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    attn: Vec<Tensor>,
    concat: Tensor,
}

impl MhaCache {
    /// Attention weights of one head, `(G*N) x N`; row `r` holds the
    /// weights of query `r` over the keys of its group.
    pub fn attention(&self, head: usize) -> &Tensor {
        &self.attn[head]
    }

    pub fn concat_heads(&self) -> &Tensor {
        &self.concat
    }
}

#[derive(Debug, Clone)]
pub struct MhaGrads {
    pub dz1: Tensor,
    pub dwq: Vec<Tensor>,
    pub dwk: Vec<Tensor>,
    pub dwv: Vec<Tensor>,
    pub dwo: Tensor,
}

/// `Z2 = Concat(head_1..head_H) W_O` with
/// `head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i` computed per group.
pub fn mha_forward(z1: &Tensor, group: usize, params: &MhaParams<'_>) -> Result<(Tensor, MhaCache)> {
    let rows = z1.rows();
    if group == 0 || !rows.is_multiple_of(group) {
        return Err(NnError::Shape {
            op: "mha_forward",
            detail: format!("{rows} rows do not split into groups of {group}"),
        });
    }
    let (dk, dv) = params.validate(z1.cols())?;
    let heads = params.heads();
    let scale = 1.0 / (dk as f64).sqrt();
    let groups = rows / group;
    let mut q = Vec::with_capacity(heads);
    let mut k = Vec::with_capacity(heads);
    let mut v = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    let mut concat = Tensor::zeros(&[rows, heads * dv]);
    let cw = heads * dv;
    for h in 0..heads {
        let qh = z1.matmul(&params.wq[h])?;
        let kh = z1.matmul(&params.wk[h])?;
        let vh = z1.matmul(&params.wv[h])?;
        let mut ah = Tensor::zeros(&[rows, group]);
        let mut head_out = vec![0.0; group * dv];
        for g in 0..groups {
            let base = g * group;
            let qg = &qh.data()[base * dk..(base + group) * dk];
            let kg = &kh.data()[base * dk..(base + group) * dk];
            let vg = &vh.data()[base * dv..(base + group) * dv];
            let ag = &mut ah.data_mut()[base * group..(base + group) * group];
            gemm_slices(group, dk, group, qg, false, kg, true, ag, 0.0);
            for row in ag.chunks_mut(group) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm_slices(group, group, dv, ag, false, vg, false, &mut head_out, 0.0);
            for i in 0..group {
                let dst = (base + i) * cw + h * dv;
                concat.data_mut()[dst..dst + dv].copy_from_slice(&head_out[i * dv..(i + 1) * dv]);
            }
        }
        q.push(qh);
        k.push(kh);
        v.push(vh);
        attn.push(ah);
    }
    let z2 = concat.matmul(params.wo)?;
    Ok((
        z2,
        MhaCache {
            z1: z1.clone(),
            group,
            q,
            k,
            v,
            attn,
            concat,
        },
    ))
}

pub fn mha_backward(cache: &MhaCache, params: &MhaParams<'_>, dz2: &Tensor) -> Result<MhaGrads> {
    let rows = cache.z1.rows();
    let (dk, dv) = params.validate(cache.z1.cols())?;
    if dz2.rows() != rows || dz2.cols() != params.wo.cols() {
        return Err(NnError::Shape {
            op: "mha_backward",
            detail: format!("dZ2 {:?}", dz2.shape()),
        });
    }
    let heads = params.heads();
    let group = cache.group;
    let groups = rows / group;
    let scale = 1.0 / (dk as f64).sqrt();
    let cw = heads * dv;

    let dwo = matmul(&cache.concat, true, dz2, false)?;
    let dconcat = matmul(dz2, false, params.wo, true)?;
    let mut dz1 = Tensor::zeros(cache.z1.shape());
    let (mut dwq, mut dwk, mut dwv) = (Vec::new(), Vec::new(), Vec::new());

    for h in 0..heads {
        let mut dq = Tensor::zeros(&[rows, dk]);
        let mut dkt = Tensor::zeros(&[rows, dk]);
        let mut dvt = Tensor::zeros(&[rows, dv]);
        let mut dhead = vec![0.0; group * dv];
        let mut da = Tensor::zeros(&[group, group]);
        for g in 0..groups {
            let base = g * group;
            for i in 0..group {
                let src = (base + i) * cw + h * dv;
                dhead[i * dv..(i + 1) * dv].copy_from_slice(&dconcat.data()[src..src + dv]);
            }
            let ag = Tensor::matrix(group, group, cache.attn[h].data()[base * group..(base + group) * group].to_vec())?;
            let vg = &cache.v[h].data()[base * dv..(base + group) * dv];
            let qg = &cache.q[h].data()[base * dk..(base + group) * dk];
            let kg = &cache.k[h].data()[base * dk..(base + group) * dk];
            // dV = A^T dH, dA = dH V^T
            gemm_slices(group, group, dv, ag.data(), true, &dhead, false, &mut dvt.data_mut()[base * dv..(base + group) * dv], 0.0);
            gemm_slices(group, dv, group, &dhead, false, vg, true, da.data_mut(), 0.0);
            let mut ds = softmax_rows_backward(&ag, &da);
            ds.scale(scale);
            gemm_slices(group, group, dk, ds.data(), false, kg, false, &mut dq.data_mut()[base * dk..(base + group) * dk], 0.0);
            gemm_slices(group, group, dk, ds.data(), true, qg, false, &mut dkt.data_mut()[base * dk..(base + group) * dk], 0.0);
        }
        dwq.push(matmul(&cache.z1, true, &dq, false)?);
        dwk.push(matmul(&cache.z1, true, &dkt, false)?);
        dwv.push(matmul(&cache.z1, true, &dvt, false)?);
        gemm(&dq, false, &params.wq[h], true, &mut dz1, 1.0)?;
        gemm(&dkt, false, &params.wk[h], true, &mut dz1, 1.0)?;
        gemm(&dvt, false, &params.wv[h], true, &mut dz1, 1.0)?;
    }
    Ok(MhaGrads {
        dz1,
        dwq,
        dwk,
        dwv,
        dwo,
    })
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{grad_check, projection_loss, random_tensor, FnModule, GradCheckConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Weights {
        wq: Vec<Tensor>,
        wk: Vec<Tensor>,
        wv: Vec<Tensor>,
        wo: Tensor,
    }

    fn weights(din: usize, dk: usize, heads: usize, dout: usize, rng: &mut ChaCha8Rng) -> Weights {
        let s = 1.0 / (din as f64).sqrt();
        Weights {
            wq: (0..heads).map(|_| random_tensor(&[din, dk], s, rng)).collect(),
            wk: (0..heads).map(|_| random_tensor(&[din, dk], s, rng)).collect(),
            wv: (0..heads).map(|_| random_tensor(&[din, dk], s, rng)).collect(),
            wo: random_tensor(&[heads * dk, dout], s, rng),
        }
    }

    impl Weights {
        fn params(&self) -> MhaParams<'_> {
            MhaParams { wq: &self.wq, wk: &self.wk, wv: &self.wv, wo: &self.wo }
        }
    }

    #[test]
    fn full_size_shapes_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(32, 64, 2, 64, &mut rng);
        let z1 = random_tensor(&[7, 32], 1.0, &mut rng);
        let (z2, cache) = mha_forward(&z1, 7, &w.params()).unwrap();
        assert_eq!(z2.shape(), &[7, 64]);
        assert_eq!(cache.concat_heads().shape(), &[7, 128]);
        for h in 0..2 {
            for r in 0..7 {
                let s: f64 = cache.attention(h).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = weights(6, 4, 2, 5, &mut rng);
        let a = random_tensor(&[3, 6], 1.0, &mut rng);
        let b = random_tensor(&[3, 6], 1.0, &mut rng);
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let both = Tensor::matrix(6, 6, stacked).unwrap();
        let (zb, _) = mha_forward(&both, 3, &w.params()).unwrap();
        let (za, _) = mha_forward(&a, 3, &w.params()).unwrap();
        let (z_b, _) = mha_forward(&b, 3, &w.params()).unwrap();
        assert_eq!(&zb.data()[..15], za.data());
        for (x, y) in zb.data()[15..].iter().zip(z_b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(8, 6, 2, 8, &mut rng);
        let z1 = random_tensor(&[7, 8], 1.0, &mut rng);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut pz = Tensor::zeros(&[7, 8]);
        for (i, &p) in perm.iter().enumerate() {
            pz.row_mut(i).copy_from_slice(z1.row(p));
        }
        let (z2, _) = mha_forward(&z1, 7, &w.params()).unwrap();
        let (pz2, _) = mha_forward(&pz, 7, &w.params()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in pz2.row(i).iter().zip(z2.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_group_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(4, 4, 1, 4, &mut rng);
        assert!(mha_forward(&Tensor::zeros(&[7, 4]), 3, &w.params()).is_err());
        assert!(mha_forward(&Tensor::zeros(&[6, 5]), 3, &w.params()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (din, dk, heads, dout, n) = (5, 4, 2, 6, 4);
        let w = weights(din, dk, heads, dout, &mut rng);
        let z1 = random_tensor(&[2 * n, din], 1.0, &mut rng);
        let r = random_tensor(&[2 * n, dout], 1.0, &mut rng);
        let mut leaves = vec![z1];
        leaves.extend(w.wq.iter().cloned());
        leaves.extend(w.wk.iter().cloned());
        leaves.extend(w.wv.iter().cloned());
        leaves.push(w.wo.clone());
        let mut m = FnModule::new(leaves, move |l: &[Tensor]| {
            let p = MhaParams {
                wq: &l[1..1 + heads],
                wk: &l[1 + heads..1 + 2 * heads],
                wv: &l[1 + 2 * heads..1 + 3 * heads],
                wo: &l[1 + 3 * heads],
            };
            let (z2, cache) = mha_forward(&l[0], n, &p)?;
            let g = mha_backward(&cache, &p, &r)?;
            let mut grads = vec![g.dz1];
            grads.extend(g.dwq);
            grads.extend(g.dwk);
            grads.extend(g.dwv);
            grads.push(g.dwo);
            Ok((projection_loss(&z2, &r), grads))
        });
        let rep = grad_check(&mut m, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
