//! Exact squared Euclidean distance transform on anisotropic 3D grids
//! (separable lower-envelope-of-parabolas algorithm).

/// Squared distance, in physical units, from every voxel to the nearest
/// `true` voxel of `mask`. `spacing[i]` is the voxel size along `dims[i]`.
/// Voxels are `f64::INFINITY` when the mask is empty.
pub fn squared_edt(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    assert_eq!(mask.len(), dims.iter().product::<usize>());
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let max_len = dims.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; max_len];
    let mut out = vec![0.0; max_len];
    let mut env = Envelope::with_capacity(max_len);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (k, v) in line[..n].iter_mut().enumerate() {
                    *v = dist[base + k * stride];
                }
                env.transform(&line[..n], spacing[axis], &mut out[..n]);
                for (k, &v) in out[..n].iter().enumerate() {
                    dist[base + k * stride] = v;
                }
            }
        }
    }
    dist
}

struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p ((q - p) * s)^2 + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let pos = |p: usize| p as f64 * s;
        // intersection abscissa of the parabolas rooted at p and q > p
        let meet = |p: usize, q: usize| {
            let (xp, xq) = (pos(p), pos(q));
            ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
        };
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let z = meet(p, q);
                        if z <= *self.bounds.last().expect("bound per site") {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(z);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let x = pos(q);
            while k + 1 < self.sites.len() && self.bounds[k + 1] < x {
                k += 1;
            }
            let p = self.sites[k];
            let d = (q as f64 - p as f64) * s;
            *o = d * d + f[p];
        }
    }
}
